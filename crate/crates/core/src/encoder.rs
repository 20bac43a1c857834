//! Clips, labels, token grids and the per-frame patch-embedding backbone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MaskVolume, Volume};
use crate::metrics::BBox;
use crate::nn::{relu_backward, relu_in_place, Conv3d, Grads, Linear, Param, Parameterized};

/// Video-level multi-hot class labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector(Vec<bool>);

impl LabelVector {
    pub fn new(values: Vec<bool>) -> Self {
        Self(values)
    }

    /// Builds from 0/1 entries; anything else is rejected.
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        bits.iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::range(format!("label entry {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, n: usize) -> bool {
        self.0[n]
    }

    pub fn set(&mut self, n: usize, v: bool) {
        self.0[n] = v;
    }

    pub fn values(&self) -> &[bool] {
        &self.0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    /// Elementwise OR, in place.
    pub fn merge(&mut self, other: &LabelVector) {
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }

    /// `"0101"`-style rendering used by `label.txt`.
    pub fn to_bit_string(&self) -> String {
        self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        s.trim()
            .chars()
            .map(|ch| match ch {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Dataset(format!("bad label character {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

/// Ground-truth boxes indexed `[frame][class]`.
pub type FrameBoxes = Vec<Vec<Vec<BBox>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub clip_id: String,
    /// `[W, H, D, channels]`, values in `[0, 1]`.
    pub frames: Volume,
    pub label: LabelVector,
    /// `[W, H, D, N]`, evaluation only.
    pub masks: Option<MaskVolume>,
    pub boxes: Option<FrameBoxes>,
    /// Per-frame presence, `[D]` vectors of length `N`.
    pub frame_labels: Option<Vec<LabelVector>>,
}

impl VideoClip {
    pub fn num_frames(&self) -> usize {
        self.frames.d()
    }

    pub fn num_classes(&self) -> usize {
        self.label.len()
    }

    /// Checks the structural invariants that do not depend on a backbone.
    pub fn validate(&self) -> Result<()> {
        let [w, h, d, ch] = self.frames.dims();
        if d == 0 || w == 0 || h == 0 || ch == 0 {
            return Err(Error::shape(format!(
                "clip `{}` has empty frames {:?}",
                self.clip_id,
                self.frames.dims()
            )));
        }
        if let Some(m) = &self.masks {
            m.ensure_dims([w, h, d, self.label.len()], "clip masks")?;
        }
        if let Some(fl) = &self.frame_labels {
            if fl.len() != d || fl.iter().any(|l| l.len() != self.label.len()) {
                return Err(Error::shape(format!(
                    "clip `{}` frame labels do not match {d} frames x {} classes",
                    self.clip_id,
                    self.label.len()
                )));
            }
        }
        if let Some(b) = &self.boxes {
            if b.len() != d {
                return Err(Error::shape(format!(
                    "clip `{}` has boxes for {} of {d} frames",
                    self.clip_id,
                    b.len()
                )));
            }
        }
        Ok(())
    }
}

/// Backbone output: `[w, h, D, C_e]` patch embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub tokens: Volume,
    pub patch_size: usize,
}

impl TokenGrid {
    pub fn spatial_dims(&self) -> (usize, usize) {
        (self.tokens.w(), self.tokens.h())
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.c()
    }
}

/// Anything that turns frames into a per-frame token grid.
pub trait Backbone: Send + Sync {
    fn patch_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    /// Encodes `[W, H, D, ch]` frames; `W` and `H` are already known to be
    /// multiples of [`Backbone::patch_size`].
    fn encode_frames(&self, frames: &Volume) -> Result<Volume>;
}

/// Encodes a clip, checking divisibility and attaching clip context to
/// backbone failures.
pub fn encode(clip: &VideoClip, backbone: &dyn Backbone) -> Result<TokenGrid> {
    check_patch_divisible(&clip.frames, backbone.patch_size())?;
    let tokens = backbone
        .encode_frames(&clip.frames)
        .map_err(|e| Error::Backbone {
            clip: clip.clip_id.clone(),
            source: Box::new(e),
        })?;
    let p = backbone.patch_size();
    tokens.ensure_dims(
        [clip.frames.w() / p, clip.frames.h() / p, clip.frames.d(), backbone.embed_dim()],
        "backbone output",
    )?;
    Ok(TokenGrid {
        tokens,
        patch_size: p,
    })
}

fn check_patch_divisible(frames: &Volume, p: usize) -> Result<()> {
    if p == 0 || !frames.w().is_multiple_of(p) || !frames.h().is_multiple_of(p) {
        return Err(Error::shape(format!(
            "frame size {}x{} is not divisible by patch size {p}",
            frames.w(),
            frames.h()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub seed: u64,
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 2,
            seed: 0,
            in_channels: 3,
        }
    }
}

impl BackboneConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.patch_size == 0 {
            v.push("encoder.patch_size: must be >= 1".into());
        }
        if self.embed_dim == 0 {
            v.push("encoder.embed_dim: must be >= 1".into());
        }
        if self.in_channels == 0 {
            v.push("encoder.in_channels: must be >= 1".into());
        }
        v
    }
}

/// Desk-scale trainable patch embedder: patchify, linear projection, then
/// `depth` residual 3×3 spatial convolutions inside each frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub patch_size: usize,
    pub in_channels: usize,
    pub proj: Linear,
    pub mixers: Vec<Conv3d>,
}

/// Activations kept for the backward pass.
pub struct BackboneTape {
    patches: Vec<f64>,
    rows: usize,
    /// Input to each mixer, plus the final output last.
    stages: Vec<Volume>,
    /// Post-ReLU branch output of each mixer.
    branches: Vec<Volume>,
}

pub fn make_toy_backbone(patch_size: usize, embed_dim: usize, depth: usize, seed: u64) -> Result<ToyBackbone> {
    ToyBackbone::new(&BackboneConfig {
        patch_size,
        embed_dim,
        depth,
        seed,
        in_channels: 3,
    })
}

impl ToyBackbone {
    pub fn new(cfg: &BackboneConfig) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let p = cfg.patch_size;
        let proj = Linear::new(p * p * cfg.in_channels, cfg.embed_dim, &mut rng);
        let mut mixers = Vec::with_capacity(cfg.depth);
        for _ in 0..cfg.depth {
            let mut conv = Conv3d::new(cfg.embed_dim, cfg.embed_dim, 1, 3, &mut rng)?;
            // Residual branches start small so depth does not blow up scale.
            for w in &mut conv.weight.data {
                *w *= 0.5;
            }
            mixers.push(conv);
        }
        Ok(Self {
            patch_size: p,
            in_channels: cfg.in_channels,
            proj,
            mixers,
        })
    }

    /// Rows of flattened `P×P×ch` patches, one per `(x, y, t)` token position.
    fn patchify(&self, frames: &Volume) -> Result<(Vec<f64>, [usize; 3])> {
        check_patch_divisible(frames, self.patch_size)?;
        if frames.c() != self.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {} channels, frames have {}",
                self.in_channels,
                frames.c()
            )));
        }
        let p = self.patch_size;
        let [wp, hp, d, ch] = frames.dims();
        let (w, h) = (wp / p, hp / p);
        let row_len = p * p * ch;
        let mut out = Vec::with_capacity(w * h * d * row_len);
        for t in 0..d {
            for y in 0..h {
                for x in 0..w {
                    for py in 0..p {
                        let i = frames.index(x * p, y * p + py, t, 0);
                        out.extend_from_slice(&frames.data()[i..i + p * ch]);
                    }
                }
            }
        }
        Ok((out, [w, h, d]))
    }

    pub fn forward_train(&self, frames: &Volume) -> Result<(Volume, BackboneTape)> {
        let (patches, [w, h, d]) = self.patchify(frames)?;
        let rows = w * h * d;
        let mut x = Volume::from_vec([w, h, d, self.proj.output_dim()], self.proj.forward(&patches, rows))?;
        let mut stages = Vec::with_capacity(self.mixers.len() + 1);
        let mut branches = Vec::with_capacity(self.mixers.len());
        for conv in &self.mixers {
            let mut b = conv.forward(&x)?;
            relu_in_place(b.data_mut());
            let mut next = x.clone();
            next.add_assign(&b)?;
            stages.push(x);
            branches.push(b);
            x = next;
        }
        stages.push(x.clone());
        Ok((
            x,
            BackboneTape {
                patches,
                rows,
                stages,
                branches,
            },
        ))
    }

    /// Parameter gradients in [`Parameterized::params`] order.
    pub fn backward(&self, tape: &BackboneTape, grad_tokens: &Volume) -> Grads {
        let mut grads = self.zero_grads();
        let mut g = grad_tokens.clone();
        for (i, conv) in self.mixers.iter().enumerate().rev() {
            let mut gb = g.clone();
            relu_backward(tape.branches[i].data(), gb.data_mut());
            let slot = 2 + 2 * i;
            let gx = conv
                .backward(&tape.stages[i], &gb, &mut grads.0[slot..slot + 2], true)
                .expect("input gradient requested");
            g.add_assign(&gx).expect("same dims");
        }
        self.proj
            .backward(&tape.patches, tape.rows, g.data(), &mut grads.0[0..2], false);
        grads
    }
}

impl Backbone for ToyBackbone {
    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn embed_dim(&self) -> usize {
        self.proj.output_dim()
    }

    fn encode_frames(&self, frames: &Volume) -> Result<Volume> {
        Ok(self.forward_train(frames)?.0)
    }
}

impl Parameterized for ToyBackbone {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.proj.params();
        for m in &self.mixers {
            v.extend(m.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.proj.params_mut();
        for m in &mut self.mixers {
            v.extend(m.params_mut());
        }
        v
    }
}
