//! Training losses: multi-label soft margin, the true-positive-channel gate
//! and the gated CAM distillation loss.

use serde::{Deserialize, Serialize};

use crate::encoder::LabelVector;
use crate::error::{Error, Result};
use crate::grid::Volume;

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_len(logits: &[f64], labels: &LabelVector) -> Result<()> {
    if logits.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean over classes of `y·softplus(-x) + (1-y)·softplus(x)`.
pub fn multilabel_soft_margin(logits: &[f64], labels: &LabelVector) -> Result<f64> {
    check_len(logits, labels)?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels.values())
        .map(|(&x, &y)| if y { softplus(-x) } else { softplus(x) })
        .sum::<f64>()
        / n)
}

/// d(loss)/d(logits) = `(σ(x) - y) / N`.
pub fn multilabel_soft_margin_grad(logits: &[f64], labels: &LabelVector) -> Result<Vec<f64>> {
    check_len(logits, labels)?;
    let n = logits.len() as f64;
    Ok(logits
        .iter()
        .zip(labels.values())
        .map(|(&x, &y)| (sigmoid(x) - if y { 1.0 } else { 0.0 }) / n)
        .collect())
}

/// Per-frame, per-class spatial maximum of the teacher CAM, `[1, 1, D, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePrediction(pub Volume);

pub fn slice_prediction(cam: &Volume) -> SlicePrediction {
    let [w, h, d, n] = cam.dims();
    let mut out = Volume::filled([1, 1, d, n], f64::NEG_INFINITY);
    for t in 0..d {
        for y in 0..h {
            for x in 0..w {
                for c in 0..n {
                    let v = *cam.get(x, y, t, c);
                    let o = out.get_mut(0, 0, t, c);
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
    }
    if w * h == 0 {
        out = Volume::zeros([1, 1, d, n]);
    }
    SlicePrediction(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Teacher slice maxima times the video labels.
    #[default]
    Soft,
    /// Gate of all ones: distill every channel and frame.
    Ones,
}

/// Gate `[1, 1, D, N]` applied to both CAMs before the MSE.
#[derive(Clone, Debug, PartialEq)]
pub struct TpcKernel(pub Volume);

pub fn tpc_kernel(slices: &SlicePrediction, labels: &LabelVector) -> Result<TpcKernel> {
    let [_, _, d, n] = slices.0.dims();
    if n != labels.len() {
        return Err(Error::shape(format!(
            "slice prediction has {n} classes, labels have {}",
            labels.len()
        )));
    }
    let g = labels.as_f64();
    Ok(TpcKernel(Volume::from_fn([1, 1, d, n], |_, _, t, c| {
        slices.0.get(0, 0, t, c) * g[c]
    })))
}

/// Builds the gate the configured way.
pub fn make_gate(teacher_cam: &Volume, labels: &LabelVector, mode: GateMode) -> Result<TpcKernel> {
    match mode {
        GateMode::Soft => tpc_kernel(&slice_prediction(teacher_cam), labels),
        GateMode::Ones => Ok(TpcKernel(Volume::filled([1, 1, teacher_cam.d(), teacher_cam.c()], 1.0))),
    }
}

fn check_kd(ms: &Volume, mt: &Volume, k: &TpcKernel) -> Result<()> {
    mt.ensure_dims(ms.dims(), "teacher CAM vs student CAM")?;
    k.0.ensure_dims([1, 1, ms.d(), ms.c()], "TPC kernel")
}

/// Mean over all `w·h·D·N` entries of `((M_s - M_t) · K)^2`.
pub fn gated_kd_loss(ms: &Volume, mt: &Volume, k: &TpcKernel) -> Result<f64> {
    check_kd(ms, mt, k)?;
    let c = ms.c();
    let frame = ms.w() * ms.h() * c;
    let mut sum = 0.0;
    for (i, (s, t)) in ms.data().iter().zip(mt.data()).enumerate() {
        let gate = k.0.data()[(i / frame) * c + i % c];
        let diff = (s - t) * gate;
        sum += diff * diff;
    }
    Ok(sum / ms.data().len() as f64)
}

/// Gradient of [`gated_kd_loss`] w.r.t. `M_s`; `M_t` and the gate are constants.
pub fn gated_kd_grad(ms: &Volume, mt: &Volume, k: &TpcKernel) -> Result<Volume> {
    check_kd(ms, mt, k)?;
    let c = ms.c();
    let frame = ms.w() * ms.h() * c;
    let scale = 2.0 / ms.data().len() as f64;
    let data = ms
        .data()
        .iter()
        .zip(mt.data())
        .enumerate()
        .map(|(i, (s, t))| {
            let gate = k.0.data()[(i / frame) * c + i % c];
            scale * gate * gate * (s - t)
        })
        .collect();
    Volume::from_vec(ms.dims(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub gate_mode: GateMode,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            gate_mode: GateMode::Soft,
        }
    }
}

impl DistillConfig {
    /// `alpha = 0` is accepted as the KD-off ablation.
    pub fn violations(&self) -> Vec<String> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            vec![format!("distill.alpha: {} must be finite and >= 0", self.alpha)]
        } else {
            Vec::new()
        }
    }
}

/// Classification loss on the student logits plus `alpha · kd`.
pub fn student_total_loss(logits: &[f64], labels: &LabelVector, kd: f64, cfg: &DistillConfig) -> Result<f64> {
    if kd < 0.0 {
        return Err(Error::range(format!("KD loss {kd} is negative")));
    }
    Ok(multilabel_soft_margin(logits, labels)? + cfg.alpha * kd)
}
