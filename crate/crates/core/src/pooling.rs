//! Ranked top-k average pooling over space, then time.
//!
//! Ranking is per channel on the signed value. Ties at the k-th rank are
//! broken by the lower flat index, and the selected values are summed in
//! descending order, so the result does not depend on input position order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Volume;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    RankedTopk,
    Average,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolingConfig {
    pub mode: PoolingMode,
    pub k1_fraction: f64,
    pub k2_fraction: f64,
}

impl Default for PoolingConfig {
    fn default() -> Self {
        Self {
            mode: PoolingMode::RankedTopk,
            k1_fraction: 0.10,
            k2_fraction: 0.40,
        }
    }
}

fn k_from_fraction(frac: f64, n: usize) -> usize {
    ((frac * n as f64).ceil() as usize).clamp(1, n.max(1))
}

impl PoolingConfig {
    pub fn with_mode(mode: PoolingMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    /// Spatial k for a grid with `patches = w * h` positions.
    pub fn k1(&self, patches: usize) -> usize {
        match self.mode {
            PoolingMode::RankedTopk => k_from_fraction(self.k1_fraction, patches),
            PoolingMode::Average => patches,
            PoolingMode::Max => 1,
        }
    }

    /// Temporal k for a clip of `frames` frames.
    pub fn k2(&self, frames: usize) -> usize {
        match self.mode {
            PoolingMode::RankedTopk => k_from_fraction(self.k2_fraction, frames),
            PoolingMode::Average => frames,
            PoolingMode::Max => 1,
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, f) in [("k1_fraction", self.k1_fraction), ("k2_fraction", self.k2_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                v.push(format!("pooling.{name}: {f} is outside (0, 1]"));
            }
        }
        v
    }
}

/// Indices (into the pooled input's flat data) chosen for each output entry.
#[derive(Clone, Debug)]
pub struct TopkTape {
    input_dims: [usize; 4],
    k: usize,
    selected: Vec<u32>,
}

fn rank(a: &(f64, u32), b: &(f64, u32)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Mean of the `k` largest candidates; leaves the chosen ones sorted in
/// `cands[..k]`.
fn topk_mean(cands: &mut [(f64, u32)], k: usize) -> f64 {
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, rank);
    }
    cands[..k].sort_unstable_by(rank);
    cands[..k].iter().map(|c| c.0).sum::<f64>() / k as f64
}

fn check_k(k: usize, n: usize, what: &str) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::range(format!("{what} k = {k} outside 1..={n}")));
    }
    Ok(())
}

/// `[w, h, D, C] -> [1, 1, D, C]`: per frame and channel, mean of the `k1`
/// largest spatial values.
pub fn ranked_topk_spatial(f: &Volume, k1: usize) -> Result<Volume> {
    Ok(ranked_topk_spatial_tape(f, k1)?.0)
}

pub fn ranked_topk_spatial_tape(f: &Volume, k1: usize) -> Result<(Volume, TopkTape)> {
    let [w, h, d, c] = f.dims();
    check_k(k1, w * h, "spatial")?;
    let mut out = Volume::zeros([1, 1, d, c]);
    let mut selected = Vec::with_capacity(d * c * k1);
    let mut cands = Vec::with_capacity(w * h);
    for t in 0..d {
        for ch in 0..c {
            cands.clear();
            for y in 0..h {
                for x in 0..w {
                    let i = f.index(x, y, t, ch);
                    cands.push((f.data()[i], i as u32));
                }
            }
            *out.get_mut(0, 0, t, ch) = topk_mean(&mut cands, k1);
            selected.extend(cands[..k1].iter().map(|c| c.1));
        }
    }
    Ok((
        out,
        TopkTape {
            input_dims: f.dims(),
            k: k1,
            selected,
        },
    ))
}

/// `[1, 1, D, C] -> [1, 1, 1, C]`: per channel, mean of the `k2` largest
/// frame values.
pub fn ranked_topk_temporal(s: &Volume, k2: usize) -> Result<Volume> {
    Ok(ranked_topk_temporal_tape(s, k2)?.0)
}

pub fn ranked_topk_temporal_tape(s: &Volume, k2: usize) -> Result<(Volume, TopkTape)> {
    let [w, h, d, c] = s.dims();
    if w != 1 || h != 1 {
        return Err(Error::shape(format!(
            "temporal pooling expects [1, 1, D, C], got {:?}",
            s.dims()
        )));
    }
    check_k(k2, d, "temporal")?;
    let mut out = Volume::zeros([1, 1, 1, c]);
    let mut selected = Vec::with_capacity(c * k2);
    let mut cands = Vec::with_capacity(d);
    for ch in 0..c {
        cands.clear();
        for t in 0..d {
            let i = s.index(0, 0, t, ch);
            cands.push((s.data()[i], i as u32));
        }
        *out.get_mut(0, 0, 0, ch) = topk_mean(&mut cands, k2);
        selected.extend(cands[..k2].iter().map(|c| c.1));
    }
    Ok((
        out,
        TopkTape {
            input_dims: s.dims(),
            k: k2,
            selected,
        },
    ))
}

/// Routes `grad_out` back with weight `1/k` onto the selected entries.
pub fn topk_backward(tape: &TopkTape, grad_out: &Volume) -> Volume {
    let mut g = Volume::zeros(tape.input_dims);
    let inv = 1.0 / tape.k as f64;
    for (o, sel) in grad_out.data().iter().zip(tape.selected.chunks_exact(tape.k)) {
        for &i in sel {
            g.data_mut()[i as usize] += o * inv;
        }
    }
    g
}

#[derive(Clone, Debug)]
pub struct PoolTape {
    spatial: TopkTape,
    temporal: TopkTape,
}

/// Spatial then temporal pooling; returns the `C`-long clip feature.
pub fn pool(f: &Volume, cfg: &PoolingConfig) -> Result<Vec<f64>> {
    Ok(pool_tape(f, cfg)?.0)
}

pub fn pool_tape(f: &Volume, cfg: &PoolingConfig) -> Result<(Vec<f64>, PoolTape)> {
    let (s, spatial) = ranked_topk_spatial_tape(f, cfg.k1(f.w() * f.h()))?;
    let (v, temporal) = ranked_topk_temporal_tape(&s, cfg.k2(f.d()))?;
    Ok((v.into_vec(), PoolTape { spatial, temporal }))
}

pub fn pool_backward(tape: &PoolTape, grad_feature: &[f64]) -> Volume {
    let c = grad_feature.len();
    let g = Volume::from_vec([1, 1, 1, c], grad_feature.to_vec()).expect("feature length");
    let gs = topk_backward(&tape.temporal, &g);
    topk_backward(&tape.spatial, &gs)
}
