//! Segmentation, localization and classification metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::distill::sigmoid;
use crate::error::{Error, Result};
use crate::grid::MaskVolume;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Half-open pixel box `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn area(&self) -> usize {
        self.x1.saturating_sub(self.x0) * self.y1.saturating_sub(self.y0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let iy = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

fn counts(pred: &MaskVolume, gt: &MaskVolume) -> Result<(usize, usize, usize)> {
    gt.ensure_dims(pred.dims(), "ground-truth mask vs prediction")?;
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    Ok((inter, p, g))
}

/// `|pred ∧ gt| / |pred ∨ gt|`; 1 when both are empty.
pub fn iou(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    let union = p + g - inter;
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `2|pred ∧ gt| / (|pred| + |gt|)`; 1 when both are empty.
pub fn dice(pred: &MaskVolume, gt: &MaskVolume) -> Result<f64> {
    let (inter, p, g) = counts(pred, gt)?;
    Ok(if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    })
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates from -inf.
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
            }
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
fn squared_distance_map(mask: &[bool], w: usize, h: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = mask.iter().map(|&b| if b { 0.0 } else { FAR }).collect();
    let n = w.max(h);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    grid
}

fn frame_dims(m: &MaskVolume) -> Result<(usize, usize)> {
    let [w, h, d, c] = m.dims();
    if d != 1 || c != 1 {
        return Err(Error::shape(format!("Hausdorff needs a single frame mask, got {:?}", m.dims())));
    }
    Ok((w, h))
}

/// Distances from each foreground pixel of `from` to the nearest foreground
/// pixel of `to`.
fn directed_distances(from: &MaskVolume, to: &MaskVolume) -> Vec<f64> {
    let (w, h) = (from.w(), from.h());
    let dt = squared_distance_map(to.data(), w, h);
    from.data()
        .iter()
        .zip(&dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Symmetric Hausdorff distance in pixels, or `None` when either mask is empty.
pub fn hausdorff(pred: &MaskVolume, gt: &MaskVolume) -> Result<Option<f64>> {
    hausdorff_percentile(pred, gt, 100.0)
}

/// Percentile variant: max of the two directed `q`-th percentile distances
/// (nearest-rank). `q = 100` is the classical Hausdorff distance.
pub fn hausdorff_percentile(pred: &MaskVolume, gt: &MaskVolume, q: f64) -> Result<Option<f64>> {
    gt.ensure_dims(pred.dims(), "ground-truth mask vs prediction")?;
    frame_dims(pred)?;
    if !(q > 0.0 && q <= 100.0) {
        return Err(Error::range(format!("Hausdorff percentile {q} outside (0, 100]")));
    }
    if pred.count() == 0 || gt.count() == 0 {
        return Ok(None);
    }
    let pick = |mut d: Vec<f64>| -> f64 {
        d.sort_by(|a, b| a.total_cmp(b));
        let rank = ((q / 100.0) * d.len() as f64).ceil() as usize;
        d[rank.clamp(1, d.len()) - 1]
    };
    Ok(Some(
        pick(directed_distances(pred, gt)).max(pick(directed_distances(gt, pred))),
    ))
}

/// True iff some predicted box overlaps some ground-truth box with IoU > 0.5.
pub fn corloc(pred_boxes: &[BBox], gt_boxes: &[BBox]) -> bool {
    pred_boxes
        .iter()
        .any(|p| gt_boxes.iter().any(|g| p.iou(g) > 0.5))
}

/// Video-level accuracy in percent over all `(clip, class)` pairs, with
/// positive prediction iff `σ(logit) > 0.5`.
pub fn video_accuracy(logits: &[Vec<f64>], labels: &[crate::encoder::LabelVector]) -> Result<f64> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape(format!(
            "{} logit vectors for {} label vectors",
            logits.len(),
            labels.len()
        )));
    }
    let (mut right, mut total) = (0usize, 0usize);
    for (l, y) in logits.iter().zip(labels) {
        if l.len() != y.len() {
            return Err(Error::shape("logit/label length mismatch"));
        }
        for (x, &t) in l.iter().zip(y.values()) {
            right += ((sigmoid(*x) > 0.5) == t) as usize;
            total += 1;
        }
    }
    Ok(100.0 * right as f64 / total as f64)
}

/// Frame-level accuracy in percent given per-frame predicted/true presence
/// pairs; `None` when there is nothing to score.
pub fn frame_accuracy(pairs: &[(bool, bool)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    let right = pairs.iter().filter(|(p, t)| p == t).count();
    Some(100.0 * right as f64 / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// A class counts as present in a frame when its normalized CAM peak in
    /// that frame exceeds this value (and the clip-level prediction is positive).
    pub tau_frame: f64,
    /// 100 gives the classical Hausdorff distance.
    pub hd_percentile: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            tau_frame: 0.5,
            hd_percentile: 100.0,
        }
    }
}

impl MetricsConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(0.0..1.0).contains(&self.tau_frame) {
            v.push(format!("metrics.tau_frame: {} is outside [0, 1)", self.tau_frame));
        }
        if !(self.hd_percentile > 0.0 && self.hd_percentile <= 100.0) {
            v.push(format!("metrics.hd_percentile: {} is outside (0, 100]", self.hd_percentile));
        }
        v
    }
}

/// Running sums for one class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassTally {
    pub iou_sum: f64,
    pub dice_sum: f64,
    pub seg_frames: usize,
    pub hd_sum: f64,
    pub hd_frames: usize,
    pub hd_excluded: usize,
    pub corloc_hits: usize,
    pub corloc_frames: usize,
}

impl ClassTally {
    pub fn merge(&mut self, o: &ClassTally) {
        self.iou_sum += o.iou_sum;
        self.dice_sum += o.dice_sum;
        self.seg_frames += o.seg_frames;
        self.hd_sum += o.hd_sum;
        self.hd_frames += o.hd_frames;
        self.hd_excluded += o.hd_excluded;
        self.corloc_hits += o.corloc_hits;
        self.corloc_frames += o.corloc_frames;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    pub hd: Option<f64>,
    pub corloc: Option<f64>,
    pub frames_evaluated: usize,
    pub hd_frames: usize,
    pub hd_excluded: usize,
    pub corloc_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub variant: String,
    /// Percent, mean over classes present in the ground truth.
    pub mean_iou: Option<f64>,
    pub mean_dice: Option<f64>,
    /// Pixels.
    pub mean_hd: Option<f64>,
    pub mean_corloc: Option<f64>,
    pub video_accuracy: Option<f64>,
    pub frame_accuracy: Option<f64>,
    pub clips_evaluated: usize,
    pub frames_evaluated: usize,
    pub per_class: Vec<ClassMetrics>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricsReport {
    pub fn from_tallies(
        variant: &str,
        class_names: &[String],
        tallies: &[ClassTally],
        video_accuracy: Option<f64>,
        frame_accuracy: Option<f64>,
        clips_evaluated: usize,
        frames_evaluated: usize,
    ) -> Self {
        let per_class: Vec<ClassMetrics> = class_names
            .iter()
            .zip(tallies)
            .map(|(name, t)| {
                let avg = |sum: f64, n: usize, scale: f64| (n > 0).then(|| scale * sum / n as f64);
                ClassMetrics {
                    name: name.clone(),
                    iou: avg(t.iou_sum, t.seg_frames, 100.0),
                    dice: avg(t.dice_sum, t.seg_frames, 100.0),
                    hd: avg(t.hd_sum, t.hd_frames, 1.0),
                    corloc: avg(t.corloc_hits as f64, t.corloc_frames, 100.0),
                    frames_evaluated: t.seg_frames,
                    hd_frames: t.hd_frames,
                    hd_excluded: t.hd_excluded,
                    corloc_frames: t.corloc_frames,
                }
            })
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            variant: variant.to_string(),
            mean_iou: mean_of(per_class.iter().map(|c| c.iou)),
            mean_dice: mean_of(per_class.iter().map(|c| c.dice)),
            mean_hd: mean_of(per_class.iter().map(|c| c.hd)),
            mean_corloc: mean_of(per_class.iter().map(|c| c.corloc)),
            video_accuracy,
            frame_accuracy,
            clips_evaluated,
            frames_evaluated,
            per_class,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(s).map_err(|e| Error::Json {
            path: "<report>".into(),
            source: e,
        })?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: r.schema_version,
                expected: REPORT_SCHEMA_VERSION,
            });
        }
        Ok(r)
    }

    /// Aligned text table: one summary row, then one row per class.
    pub fn render_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>10} {:>9} {:>11} {:>11}",
            "Method", "IoU(%)", "Dice(%)", "HD[pixel]", "CorLoc(%)", "FrameAcc(%)", "VideoAcc(%)"
        );
        let _ = writeln!(
            s,
            "{:<16} {:>8} {:>8} {:>10} {:>9} {:>11} {:>11}",
            self.variant,
            cell(self.mean_iou),
            cell(self.mean_dice),
            cell(self.mean_hd),
            cell(self.mean_corloc),
            cell(self.frame_accuracy),
            cell(self.video_accuracy)
        );
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "  {:<14} {:>8} {:>8} {:>10} {:>9} {:>11} {:>11}",
                c.name,
                cell(c.iou),
                cell(c.dice),
                cell(c.hd),
                cell(c.corloc),
                "",
                ""
            );
        }
        let _ = writeln!(s, "clips: {}  frames: {}", self.clips_evaluated, self.frames_evaluated);
        s
    }
}
