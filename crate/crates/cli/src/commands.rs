use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use wsvos_core::campost::render_overlay;
use wsvos_core::config::RunConfig;
use wsvos_core::dataio::{
    compute_presence_stats, generate_synthetic, load_dataset, load_frame_sequence, parse_frame_labels_csv,
    save_dataset, save_frame_png, split_clips, ClipDataset,
};
use wsvos_core::encoder::VideoClip;
use wsvos_core::grid::Volume;
use wsvos_core::trainer::{
    evaluate, load_checkpoint, predict_clip, save_checkpoint, write_log_jsonl, Trainer, Variant,
};

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn write(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

fn train_path(cfg: &RunConfig) -> Result<std::path::PathBuf> {
    cfg.data.train.clone().ok_or_else(|| anyhow!("config has no data.train path"))
}

pub fn train(config: Option<&Path>, out: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let (mut trainer, ds) = match resume {
        Some(ck) => {
            let trainer = Trainer::from_checkpoint(load_checkpoint(ck)?)?;
            let ds = load_dataset(&train_path(trainer.config())?)?;
            (trainer, ds)
        }
        None => {
            let config = config.ok_or_else(|| anyhow!("train needs --config or --resume"))?;
            let cfg = RunConfig::load(config)?;
            cfg.validate()?;
            let ds = load_dataset(&train_path(&cfg)?)?;
            (Trainer::new(cfg, ds.class_names.clone())?, ds)
        }
    };
    let cfg = trainer.config().clone();

    for sub in ["checkpoints", "logs", "reports", "overlays"] {
        mkdir(&out.join(sub))?;
    }
    write(&out.join("config.toml"), &cfg.to_toml_string())?;
    let log_path = out.join("logs").join("train_log.jsonl");
    let mut lines = Vec::new();
    if resume.is_some() && log_path.is_file() {
        lines = wsvos_core::trainer::read_log_jsonl(&log_path)?;
        lines.retain(|l| l.epoch < trainer.epoch());
    }
    while !trainer.is_done() {
        let entry = trainer.run_epoch(&ds)?;
        eprintln!("{}", entry.to_json_line());
        lines.push(entry);
        write_log_jsonl(&log_path, &lines)?;
        save_checkpoint(&trainer.checkpoint(), &out.join("checkpoints").join("last.ckpt"))?;
        if stop_after.is_some_and(|n| trainer.epoch() >= n) && !trainer.is_done() {
            println!("stopped after epoch {}; resume from checkpoints/last.ckpt", trainer.epoch());
            return Ok(());
        }
    }
    let ckpt = trainer.checkpoint();
    let final_path = out.join("checkpoints").join("final.ckpt");
    save_checkpoint(&ckpt, &final_path)?;
    println!("checkpoint: {}", final_path.display());

    if let Some(test_dir) = &cfg.data.test {
        let test = load_dataset(test_dir)?;
        let variants: &[Variant] = if ckpt.student_trained() {
            &[Variant::TeacherOnly, Variant::Fusion, Variant::Full]
        } else {
            &[Variant::TeacherOnly]
        };
        for &v in variants {
            let report = evaluate(&ckpt, &test, v)?;
            write(&out.join("reports").join(format!("{v}.json")), &report.to_json())?;
            print!("{}", report.render_table());
        }
    }
    Ok(())
}

pub fn eval(ckpt: &Path, data: &Path, variant: &str, report: &Path, masks: Option<&Path>) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let ck = load_checkpoint(ckpt)?;
    if variant != Variant::TeacherOnly && !ck.student_trained() {
        eprintln!(
            "warning: the student in {} was never trained (joint_epochs = {}); `{variant}` uses its initial weights",
            ckpt.display(),
            ck.config.trainer.joint_epochs
        );
    }
    let ds = load_dataset(data)?;
    let r = evaluate(&ck, &ds, variant)?;
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    write(report, &r.to_json())?;
    print!("{}", r.render_table());
    if let Some(dir) = masks {
        export_masks(&ck, &ds, variant, dir)?;
    }
    Ok(())
}

fn export_masks(ck: &wsvos_core::trainer::Checkpoint, ds: &ClipDataset, variant: Variant, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    let classes: Vec<_> = ck
        .class_names
        .iter()
        .enumerate()
        .map(|(i, n)| serde_json::json!({ "index": i, "name": n }))
        .collect();
    write(&dir.join("classes.json"), &serde_json::to_string_pretty(&classes)?)?;
    for clip in &ds.clips {
        let pred = predict_clip(&ck.model, &ck.config, clip, variant)?;
        let cdir = dir.join(&clip.clip_id);
        mkdir(&cdir)?;
        let m = &pred.masks;
        for t in 0..m.d() {
            for c in 0..m.c() {
                let plane = Volume::from_fn([m.w(), m.h(), 1, 1], |x, y, _, _| f64::from(u8::from(*m.get(x, y, t, c))));
                save_frame_png(&plane, 0, &cdir.join(format!("{t}_{c}.png")))?;
            }
        }
    }
    Ok(())
}

pub fn synth(config: &Path, count: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let mut sc = cfg.synth.clone();
    if let Some(s) = seed {
        sc.seed = s;
    }
    let ds = generate_synthetic(&sc, count)?;
    save_dataset(&ds, out)?;
    println!("wrote {} clips to {}", ds.len(), out.display());
    print_stats(&ds);
    Ok(())
}

pub fn split(frames: &Path, labels: &Path, clip_len: usize, out: &Path) -> Result<()> {
    let text = fs::read_to_string(labels).with_context(|| format!("reading {}", labels.display()))?;
    let (names, rows) = parse_frame_labels_csv(&text)?;
    let video = load_frame_sequence(frames, 3)?;
    let dropped = video.d() % clip_len.max(1);
    let ds = split_clips(&video, &rows, clip_len, names)?;
    save_dataset(&ds, out)?;
    println!(
        "wrote {} clips of {clip_len} frames to {} ({dropped} trailing frames dropped)",
        ds.len(),
        out.display()
    );
    Ok(())
}

fn print_stats(ds: &ClipDataset) {
    let Ok(stats) = compute_presence_stats(ds) else {
        println!("{} clips; no per-frame labels, presence statistics unavailable", ds.len());
        return;
    };
    let width = ds.class_names.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
    println!("{:<width$}  {:>6}  {:>8}  {:>7}", "class", "clips", "frames", "FPC(%)");
    for c in &stats.per_class {
        let fpc = c.fpc.map_or("-".to_string(), |v| format!("{v:.1}"));
        println!("{:<width$}  {:>6}  {:>8}  {:>7}", c.name, c.clips, c.frames, fpc);
    }
    println!("{} clips", ds.len());
}

pub fn stats(data: &Path) -> Result<()> {
    let ds = load_dataset(data)?;
    print_stats(&ds);
    Ok(())
}

fn pick_clip<'a>(ds: &'a ClipDataset, id: Option<&str>) -> Result<&'a VideoClip> {
    match id {
        Some(id) => ds
            .clips
            .iter()
            .find(|c| c.clip_id == id)
            .ok_or_else(|| anyhow!("no clip `{id}` in dataset")),
        None => ds.clips.first().ok_or_else(|| anyhow!("dataset is empty")),
    }
}

pub fn viz(
    ckpt: &Path,
    data: &Path,
    clip: Option<&str>,
    class: Option<&str>,
    variant: &str,
    out: &Path,
) -> Result<()> {
    let variant: Variant = variant.parse()?;
    let ck = load_checkpoint(ckpt)?;
    let ds = load_dataset(data)?;
    let clip = pick_clip(&ds, clip)?;
    let class = match class {
        Some(c) => match c.parse::<usize>() {
            Ok(i) if i < ck.class_names.len() => i,
            Ok(i) => bail!("class index {i} out of range (0..{})", ck.class_names.len()),
            Err(_) => ck
                .class_names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| anyhow!("unknown class `{c}`"))?,
        },
        None => (0..clip.label.len()).find(|&i| clip.label.get(i)).unwrap_or(0),
    };
    let pred = predict_clip(&ck.model, &ck.config, clip, variant)?;
    mkdir(out)?;
    for t in 0..clip.num_frames() {
        let img = render_overlay(&clip.frames, &pred.cam, &pred.masks, t, class)?;
        let name = format!("{}_{}_{variant}_{t}.png", clip.clip_id, ck.class_names[class]);
        save_frame_png(&img, 0, &out.join(name))?;
    }
    println!(
        "wrote {} overlays for clip `{}`, class `{}` to {}",
        clip.num_frames(),
        clip.clip_id,
        ck.class_names[class],
        out.display()
    );
    Ok(())
}
