//! Synthetic transient-presence clips, clip splitting with label merging,
//! presence statistics and the on-disk dataset format.
//!
//! Directory layout:
//!
//! ```text
//! manifest.json
//! clips/<id>/frames/<k>.png
//! clips/<id>/label.txt            one line of N '0'/'1' characters
//! clips/<id>/frame_labels.csv     header of class names, one row per frame
//! clips/<id>/masks/<k>_<class>.png
//! clips/<id>/boxes.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{FrameBoxes, LabelVector, VideoClip};
use crate::error::{Error, Result};
use crate::grid::{MaskVolume, Volume};
use crate::metrics::BBox;
use crate::par::{try_map_collect, Exec};
use crate::rng::{stream, tag};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    #[default]
    RandomWalk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_classes: usize,
    pub clip_length: usize,
    /// `[W, H]` in pixels.
    pub frame_size: [usize; 2],
    /// Fraction of frames each object is visible, sampled uniformly.
    pub fpc_range: [f64; 2],
    pub objects_per_clip_range: [usize; 2],
    /// Object half-extent in pixels.
    pub object_size_range: [usize; 2],
    pub motion: Motion,
    pub camera_jitter: bool,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            clip_length: 8,
            frame_size: [64, 64],
            fpc_range: [0.3, 0.7],
            objects_per_clip_range: [1, 2],
            object_size_range: [8, 14],
            motion: Motion::RandomWalk,
            camera_jitter: false,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let [lo, hi] = self.fpc_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            v.push(format!("synth.fpc_range: need 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        if self.num_classes == 0 {
            v.push("synth.num_classes: must be >= 1".into());
        }
        if self.clip_length == 0 {
            v.push("synth.clip_length: must be >= 1".into());
        }
        let [omin, omax] = self.objects_per_clip_range;
        if omin == 0 || omin > omax || omax > self.num_classes {
            v.push(format!(
                "synth.objects_per_clip_range: need 1 <= lo <= hi <= num_classes, got [{omin}, {omax}]"
            ));
        }
        let [smin, smax] = self.object_size_range;
        let [w, h] = self.frame_size;
        if smin == 0 || smin > smax || 2 * smax >= w.min(h) {
            v.push(format!(
                "synth.object_size_range: need 1 <= lo <= hi and 2*hi < frame side, got [{smin}, {smax}]"
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            v.push(format!("synth.noise_std: {} must be >= 0", self.noise_std));
        }
        v
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|n| format!("{}_{n}", SHAPES[n % SHAPES.len()].name()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Circle,
    Square,
    Triangle,
}

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

impl Shape {
    fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel centre offset `(dx, dy)` lies inside a shape of half-extent `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            // Upward-pointing isoceles triangle inscribed in the box.
            Shape::Triangle => dy <= r && dy >= -r && dx.abs() <= (dy + r) / 2.0,
        }
    }
}

/// Fully saturated-ish class colour with hue spaced evenly around the wheel.
fn class_color(n: usize, classes: usize) -> [f64; 3] {
    let hue = 6.0 * n as f64 / classes as f64;
    let (s, v) = (0.75, 0.92);
    let c = v * s;
    let x = c * (1.0 - ((hue % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match hue as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Rounds to the 8-bit grid used on disk so save/load is lossless.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPresence {
    pub name: String,
    /// Clips whose label contains the class.
    pub clips: usize,
    /// Frames (over all clips) where the class is present.
    pub frames: usize,
    /// Mean over those clips of the percentage of frames with the class.
    pub fpc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresenceStats {
    pub per_class: Vec<ClassPresence>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipDataset {
    pub clips: Vec<VideoClip>,
    pub class_names: Vec<String>,
    pub stats: Option<PresenceStats>,
}

impl ClipDataset {
    /// Builds a dataset and computes stats when every clip has frame labels.
    pub fn new(clips: Vec<VideoClip>, class_names: Vec<String>) -> Result<Self> {
        for c in &clips {
            c.validate()?;
            if c.label.len() != class_names.len() {
                return Err(Error::Dataset(format!(
                    "clip `{}` has {} labels for {} classes",
                    c.clip_id,
                    c.label.len(),
                    class_names.len()
                )));
            }
        }
        let mut ds = Self {
            clips,
            class_names,
            stats: None,
        };
        ds.stats = compute_presence_stats(&ds).ok();
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Drops clips without any positive label.
    pub fn retain_labeled(&mut self) -> usize {
        let before = self.clips.len();
        self.clips.retain(|c| c.label.any());
        before - self.clips.len()
    }
}

/// Tight box around all `true` pixels of class `n` in frame `t`.
fn mask_box(masks: &MaskVolume, t: usize, n: usize) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..masks.h() {
        for x in 0..masks.w() {
            if *masks.get(x, y, t, n) {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0, y0, x1, y1))
}

/// One box per present class per frame, from the ground-truth masks.
pub fn boxes_from_masks(masks: &MaskVolume) -> FrameBoxes {
    (0..masks.d())
        .map(|t| (0..masks.c()).map(|n| mask_box(masks, t, n).into_iter().collect()).collect())
        .collect()
}

struct ObjectTrack {
    class: usize,
    radius: f64,
    centers: Vec<(f64, f64)>,
    start: usize,
    len: usize,
}

fn render_clip(cfg: &SyntheticConfig, index: usize) -> Result<VideoClip> {
    let mut rng = stream(cfg.seed, &[tag::SYNTH_CLIP, index as u64]);
    let [w, h] = cfg.frame_size;
    let (d, n) = (cfg.clip_length, cfg.num_classes);

    // Class subset.
    let count = rng.random_range(cfg.objects_per_clip_range[0]..=cfg.objects_per_clip_range[1]);
    let mut classes: Vec<usize> = (0..n).collect();
    for i in (1..classes.len()).rev() {
        classes.swap(i, rng.random_range(0..=i));
    }
    classes.truncate(count);

    let mut tracks: Vec<ObjectTrack> = Vec::with_capacity(count);
    for &class in &classes {
        let radius = rng.random_range(cfg.object_size_range[0]..=cfg.object_size_range[1]) as f64;
        let (lo_x, hi_x) = (radius, w as f64 - radius);
        let (lo_y, hi_y) = (radius, h as f64 - radius);
        let mut center = (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
        for _ in 0..50 {
            let clear = tracks.iter().all(|o| {
                let (cx, cy) = o.centers[0];
                ((cx - center.0).powi(2) + (cy - center.1).powi(2)).sqrt() > o.radius + radius + 2.0
            });
            if clear {
                break;
            }
            center = (rng.random_range(lo_x..=hi_x), rng.random_range(lo_y..=hi_y));
        }
        let mut centers = Vec::with_capacity(d);
        for _ in 0..d {
            centers.push(center);
            if cfg.motion == Motion::RandomWalk {
                center.0 = (center.0 + rng.random_range(-3.0..=3.0)).clamp(lo_x, hi_x);
                center.1 = (center.1 + rng.random_range(-3.0..=3.0)).clamp(lo_y, hi_y);
            }
        }
        // Stochastic rounding keeps E[len] = E[fraction] * D.
        let frac = rng.random_range(cfg.fpc_range[0]..=cfg.fpc_range[1]) * d as f64;
        let mut len = frac.floor() as usize;
        if rng.random::<f64>() < frac - frac.floor() {
            len += 1;
        }
        let len = len.clamp(1, d);
        let start = rng.random_range(0..=d - len);
        tracks.push(ObjectTrack {
            class,
            radius,
            centers,
            start,
            len,
        });
    }

    // Background texture.
    let base: f64 = rng.random_range(0.35..0.55);
    let tint: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.03..0.03));
    let amp: f64 = rng.random_range(0.05..0.12);
    let (lx, ly): (f64, f64) = (rng.random_range(12.0..32.0), rng.random_range(12.0..32.0));
    let (px, py): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut offsets = Vec::with_capacity(d);
    let mut off = (0.0f64, 0.0f64);
    for _ in 0..d {
        offsets.push(off);
        if cfg.camera_jitter {
            off.0 += rng.random_range(-1.5..=1.5);
            off.1 += rng.random_range(-1.5..=1.5);
        }
    }
    let shade: Vec<f64> = tracks.iter().map(|_| rng.random_range(-0.08..0.08)).collect();
    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("valid std");

    let mut frames = Volume::zeros([w, h, d, 3]);
    let mut masks = MaskVolume::zeros([w, h, d, n]);
    let tau = std::f64::consts::TAU;
    for (t, &(ox, oy)) in offsets.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let tex = amp * ((tau * (x as f64 + ox) / lx + px).sin() * (tau * (y as f64 + oy) / ly + py).sin());
                let mut px_val = [0, 1, 2].map(|c| base + tint[c] + tex);
                let mut owner = None;
                for (k, o) in tracks.iter().enumerate() {
                    if t < o.start || t >= o.start + o.len {
                        continue;
                    }
                    let (cx, cy) = o.centers[t];
                    let shape = SHAPES[o.class % SHAPES.len()];
                    if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, o.radius) {
                        owner = Some(k);
                    }
                }
                if let Some(k) = owner {
                    let col = class_color(tracks[k].class, n);
                    px_val = [0, 1, 2].map(|c| col[c] + shade[k]);
                    *masks.get_mut(x, y, t, tracks[k].class) = true;
                }
                for (c, v) in px_val.iter().enumerate() {
                    let noisy = if cfg.noise_std > 0.0 { v + noise.sample(&mut rng) } else { *v };
                    *frames.get_mut(x, y, t, c) = quantize(noisy);
                }
            }
        }
    }

    let frame_labels: Vec<LabelVector> = (0..d)
        .map(|t| LabelVector::new((0..n).map(|c| (0..h).any(|y| (0..w).any(|x| *masks.get(x, y, t, c)))).collect()))
        .collect();
    let mut label = LabelVector::zeros(n);
    for fl in &frame_labels {
        label.merge(fl);
    }
    Ok(VideoClip {
        clip_id: format!("syn_{index:05}"),
        frames,
        label,
        boxes: Some(boxes_from_masks(&masks)),
        masks: Some(masks),
        frame_labels: Some(frame_labels),
    })
}

/// Renders `count` clips; clip `i` depends only on `(cfg, i)`.
pub fn generate_synthetic(cfg: &SyntheticConfig, count: usize) -> Result<ClipDataset> {
    generate_synthetic_with(cfg, count, Exec::Parallel)
}

pub fn generate_synthetic_with(cfg: &SyntheticConfig, count: usize, exec: Exec) -> Result<ClipDataset> {
    let v = cfg.violations();
    if !v.is_empty() {
        return Err(Error::Config(v));
    }
    let idx: Vec<usize> = (0..count).collect();
    let clips = try_map_collect(exec, &idx, |_, &i| render_clip(cfg, i))?;
    ClipDataset::new(clips, cfg.class_names())
}

/// Cuts a long frame sequence into non-overlapping `clip_len` windows (the
/// tail is dropped), ORs per-frame labels into clip labels and excludes
/// clips with no positive label. Clip ids carry the window index.
pub fn split_clips(
    frames: &Volume,
    frame_labels: &[LabelVector],
    clip_len: usize,
    class_names: Vec<String>,
) -> Result<ClipDataset> {
    if clip_len == 0 {
        return Err(Error::range("clip length must be >= 1"));
    }
    if frame_labels.len() != frames.d() {
        return Err(Error::shape(format!(
            "{} frame label rows for {} frames",
            frame_labels.len(),
            frames.d()
        )));
    }
    if let Some(bad) = frame_labels.iter().find(|l| l.len() != class_names.len()) {
        return Err(Error::shape(format!(
            "frame label row has {} entries for {} classes",
            bad.len(),
            class_names.len()
        )));
    }
    let mut clips = Vec::new();
    for win in 0..frames.d() / clip_len {
        let range = win * clip_len..(win + 1) * clip_len;
        let per_frame: Vec<LabelVector> = frame_labels[range.clone()].to_vec();
        let mut label = LabelVector::zeros(class_names.len());
        for fl in &per_frame {
            label.merge(fl);
        }
        if !label.any() {
            continue;
        }
        let parts: Vec<Volume> = range.map(|t| frames.frame(t)).collect();
        clips.push(VideoClip {
            clip_id: format!("clip_{win:05}"),
            frames: Volume::stack_frames(&parts)?,
            label,
            masks: None,
            boxes: None,
            frame_labels: Some(per_frame),
        });
    }
    ClipDataset::new(clips, class_names)
}

pub fn compute_presence_stats(ds: &ClipDataset) -> Result<PresenceStats> {
    let n = ds.num_classes();
    let mut clips = vec![0usize; n];
    let mut frames = vec![0usize; n];
    let mut fpc_sum = vec![0.0f64; n];
    for clip in &ds.clips {
        let fl = clip.frame_labels.as_ref().ok_or_else(|| {
            Error::Dataset(format!("clip `{}` has no per-frame labels", clip.clip_id))
        })?;
        for c in 0..n {
            let present = fl.iter().filter(|l| l.get(c)).count();
            frames[c] += present;
            if clip.label.get(c) {
                clips[c] += 1;
                fpc_sum[c] += 100.0 * present as f64 / fl.len() as f64;
            }
        }
    }
    Ok(PresenceStats {
        per_class: (0..n)
            .map(|c| ClassPresence {
                name: ds.class_names[c].clone(),
                clips: clips[c],
                frames: frames[c],
                fpc: (clips[c] > 0).then(|| fpc_sum[c] / clips[c] as f64),
            })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ClipEntry {
    id: String,
    width: usize,
    height: usize,
    frames: usize,
    channels: usize,
    has_masks: bool,
    has_frame_labels: bool,
    has_boxes: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    class_names: Vec<String>,
    clips: Vec<ClipEntry>,
    stats: Option<PresenceStats>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes frame `t` of a `[W, H, D, 1|3]` volume as a PNG.
pub fn save_frame_png(frames: &Volume, t: usize, path: &Path) -> Result<()> {
    let (w, h) = (frames.w() as u32, frames.h() as u32);
    let res = match frames.c() {
        1 => GrayImage::from_fn(w, h, |x, y| Luma([to_u8(*frames.get(x as usize, y as usize, t, 0))])).save(path),
        3 => RgbImage::from_fn(w, h, |x, y| {
            Rgb([0, 1, 2].map(|c| to_u8(*frames.get(x as usize, y as usize, t, c))))
        })
        .save(path),
        c => return Err(Error::shape(format!("cannot save {c}-channel frames as PNG"))),
    };
    res.map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

fn open_image(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|e| Error::Image {
        path: path.into(),
        source: e,
    })
}

/// Reads one PNG as a `[W, H, 1, channels]` volume with values `u8 / 255`.
pub fn load_frame_png(path: &Path, channels: usize) -> Result<Volume> {
    let img = open_image(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let g = img.to_luma8();
            Ok(Volume::from_fn([w, h, 1, 1], |x, y, _, _| g.get_pixel(x as u32, y as u32)[0] as f64 / 255.0))
        }
        3 => {
            let g = img.to_rgb8();
            Ok(Volume::from_fn([w, h, 1, 3], |x, y, _, c| g.get_pixel(x as u32, y as u32)[c] as f64 / 255.0))
        }
        c => Err(Error::shape(format!("cannot load {c}-channel frames"))),
    }
}

/// Numeric-aware ordering of `*.png` files in a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort_by_key(|p| {
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        (stem.parse::<u64>().unwrap_or(u64::MAX), stem)
    });
    Ok(files)
}

/// Loads a directory of frame images into one `[W, H, D, channels]` volume.
pub fn load_frame_sequence(dir: &Path, channels: usize) -> Result<Volume> {
    let files = list_pngs(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no PNG frames in {}", dir.display())));
    }
    let frames = files
        .iter()
        .map(|p| load_frame_png(p, channels))
        .collect::<Result<Vec<_>>>()?;
    Volume::stack_frames(&frames)
}

fn frame_labels_csv(names: &[String], rows: &[LabelVector]) -> String {
    let mut s = names.join(",");
    s.push('\n');
    for r in rows {
        let cells: Vec<&str> = r.values().iter().map(|&b| if b { "1" } else { "0" }).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Parses a per-frame label CSV: a header of class names, then 0/1 rows.
pub fn parse_frame_labels_csv(text: &str) -> Result<(Vec<String>, Vec<LabelVector>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Dataset("label CSV is empty".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let rows = lines
        .enumerate()
        .map(|(i, line)| {
            let bits = line
                .split(',')
                .map(|c| c.trim().parse::<u8>().map_err(|_| Error::Dataset(format!("label CSV row {}: bad cell {c:?}", i + 1))))
                .collect::<Result<Vec<u8>>>()?;
            if bits.len() != names.len() {
                return Err(Error::Dataset(format!(
                    "label CSV row {} has {} cells for {} classes",
                    i + 1,
                    bits.len(),
                    names.len()
                )));
            }
            LabelVector::from_bits(&bits)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((names, rows))
}

fn save_clip(clip: &VideoClip, root: &Path, names: &[String]) -> Result<()> {
    let dir = root.join("clips").join(&clip.clip_id);
    mkdir(&dir.join("frames"))?;
    for t in 0..clip.num_frames() {
        save_frame_png(&clip.frames, t, &dir.join("frames").join(format!("{t}.png")))?;
    }
    write(&dir.join("label.txt"), &format!("{}\n", clip.label.to_bit_string()))?;
    if let Some(fl) = &clip.frame_labels {
        write(&dir.join("frame_labels.csv"), &frame_labels_csv(names, fl))?;
    }
    if let Some(m) = &clip.masks {
        mkdir(&dir.join("masks"))?;
        for t in 0..m.d() {
            for c in 0..m.c() {
                let img: GrayImage = ImageBuffer::from_fn(m.w() as u32, m.h() as u32, |x, y| {
                    Luma([if *m.get(x as usize, y as usize, t, c) { 255 } else { 0 }])
                });
                let path = dir.join("masks").join(format!("{t}_{c}.png"));
                img.save(&path).map_err(|e| Error::Image { path, source: e })?;
            }
        }
    }
    if let Some(b) = &clip.boxes {
        let path = dir.join("boxes.json");
        write(&path, &serde_json::to_string(b).expect("boxes serialize"))?;
    }
    Ok(())
}

pub fn save_dataset(ds: &ClipDataset, dir: &Path) -> Result<()> {
    mkdir(&dir.join("clips"))?;
    try_map_collect(Exec::Parallel, &ds.clips, |_, c| save_clip(c, dir, &ds.class_names))?;
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        class_names: ds.class_names.clone(),
        clips: ds
            .clips
            .iter()
            .map(|c| ClipEntry {
                id: c.clip_id.clone(),
                width: c.frames.w(),
                height: c.frames.h(),
                frames: c.frames.d(),
                channels: c.frames.c(),
                has_masks: c.masks.is_some(),
                has_frame_labels: c.frame_labels.is_some(),
                has_boxes: c.boxes.is_some(),
            })
            .collect(),
        stats: ds.stats.clone(),
    };
    write(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
}

fn load_clip(root: &Path, e: &ClipEntry, names: &[String]) -> Result<VideoClip> {
    let dir = root.join("clips").join(&e.id);
    let frames = (0..e.frames)
        .map(|t| load_frame_png(&dir.join("frames").join(format!("{t}.png")), e.channels))
        .collect::<Result<Vec<_>>>()?;
    let frames = Volume::stack_frames(&frames)?;
    frames.ensure_dims([e.width, e.height, e.frames, e.channels], &format!("clip `{}` frames", e.id))?;
    let label = LabelVector::parse_bit_string(&read(&dir.join("label.txt"))?)?;
    let frame_labels = if e.has_frame_labels {
        let (_, rows) = parse_frame_labels_csv(&read(&dir.join("frame_labels.csv"))?)?;
        Some(rows)
    } else {
        None
    };
    let masks = if e.has_masks {
        let n = names.len();
        let mut m = MaskVolume::zeros([e.width, e.height, e.frames, n]);
        for t in 0..e.frames {
            for c in 0..n {
                let img = open_image(&dir.join("masks").join(format!("{t}_{c}.png")))?.to_luma8();
                for y in 0..e.height {
                    for x in 0..e.width {
                        *m.get_mut(x, y, t, c) = img.get_pixel(x as u32, y as u32)[0] >= 128;
                    }
                }
            }
        }
        Some(m)
    } else {
        None
    };
    let boxes = if e.has_boxes {
        let path = dir.join("boxes.json");
        Some(serde_json::from_str(&read(&path)?).map_err(|err| Error::Json { path, source: err })?)
    } else {
        None
    };
    Ok(VideoClip {
        clip_id: e.id.clone(),
        frames,
        label,
        masks,
        boxes,
        frame_labels,
    })
}

pub fn load_dataset(dir: &Path) -> Result<ClipDataset> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::Dataset(format!("no manifest.json in {}", dir.display())));
    }
    let text = read(&path)?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.clone(),
        source: e,
    })?;
    let found = raw.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| {
        Error::Dataset(format!("{}: missing schema_version", path.display()))
    })?;
    if found != DATASET_SCHEMA_VERSION as u64 {
        return Err(Error::SchemaVersion {
            found: found as u32,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Json { path, source: e })?;
    let clips = try_map_collect(Exec::Parallel, &manifest.clips, |_, e| load_clip(dir, e, &manifest.class_names))?;
    ClipDataset::new(clips, manifest.class_names)
}
