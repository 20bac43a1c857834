use wsvos_core::config::RunConfig;
use wsvos_core::dataio::{generate_synthetic, load_dataset, save_dataset, ClipDataset, SyntheticConfig};
use wsvos_core::trainer::{evaluate, load_checkpoint, save_checkpoint, train, Trainer, Variant};
use wsvos_core::Exec;

fn small() -> (RunConfig, ClipDataset, ClipDataset) {
    let mut cfg = RunConfig::default();
    cfg.encoder.embed_dim = 8;
    cfg.encoder.depth = 1;
    cfg.encoder.patch_size = 4;
    cfg.teacher.hidden_width = 8;
    cfg.teacher.out_channels = 8;
    cfg.student.hidden_width = 8;
    cfg.student.out_channels = 8;
    cfg.trainer.lr = 1e-3;
    cfg.trainer.batch_size = 4;
    cfg.trainer.teacher_only_epochs = 2;
    cfg.trainer.joint_epochs = 2;
    cfg.trainer.seed = 3;
    let sc = SyntheticConfig {
        frame_size: [16, 16],
        clip_length: 5,
        object_size_range: [3, 5],
        seed: 21,
        ..SyntheticConfig::default()
    };
    let train_ds = generate_synthetic(&sc, 10).unwrap();
    let test_ds = generate_synthetic(&SyntheticConfig { seed: 22, ..sc }, 4).unwrap();
    (cfg, train_ds, test_ds)
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (cfg, ds, _) = small();
    let (full, full_log) = train(&ds, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(cfg.clone(), ds.class_names.clone()).unwrap();
    let mut log = Vec::new();
    for _ in 0..3 {
        log.push(first.run_epoch(&ds).unwrap());
    }
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    drop(first);

    let mut second = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(second.epoch(), 3);
    while !second.is_done() {
        log.push(second.run_epoch(&ds).unwrap());
    }
    assert_eq!(log, full_log);
    assert!(second.checkpoint().model == full.model);
}

#[test]
fn sequential_and_parallel_runs_agree_bitwise() {
    let (cfg, ds, test) = small();
    let mut seq = cfg.clone();
    seq.trainer.exec = Exec::Sequential;
    let mut par = cfg;
    par.trainer.exec = Exec::Parallel;
    let (a, la) = train(&ds, &seq).unwrap();
    let (b, lb) = train(&ds, &par).unwrap();
    assert_eq!(la, lb);
    assert!(a.model == b.model);
    for v in [Variant::TeacherOnly, Variant::Full] {
        assert_eq!(evaluate(&a, &test, v).unwrap().to_json(), evaluate(&b, &test, v).unwrap().to_json());
    }
}

#[test]
fn saved_dataset_evaluates_like_the_original() {
    let (cfg, ds, test) = small();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&test, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.class_names, test.class_names);
    assert_eq!(back.len(), test.len());

    let (ck, _) = train(&ds, &cfg).unwrap();
    for v in [Variant::TeacherOnly, Variant::Fusion, Variant::Full] {
        let a = evaluate(&ck, &test, v).unwrap();
        let b = evaluate(&ck, &back, v).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "{v}");
    }
}

#[test]
fn config_echo_reproduces_the_run() {
    let (cfg, ds, _) = small();
    let echoed = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    let (_, la) = train(&ds, &cfg).unwrap();
    let (_, lb) = train(&ds, &echoed).unwrap();
    assert_eq!(la, lb);
}

#[test]
fn different_seeds_diverge() {
    let (cfg, ds, _) = small();
    let mut other = cfg.clone();
    other.trainer.seed += 1;
    let (_, la) = train(&ds, &cfg).unwrap();
    let (_, lb) = train(&ds, &other).unwrap();
    assert_ne!(la, lb);
}
