//! Per-position MLP head. Nothing in this path couples distinct `(x, y, t)`
//! positions except the optional training-time 2×2 downsampling, which stays
//! inside a frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::nn::{
    apply_mask, avg_pool2, avg_pool2_backward, can_halve, dropout_mask, relu_backward, relu_in_place,
    resize_bilinear, resize_bilinear_backward, Grads, Linear, Param, Parameterized,
};
use crate::pooling::{pool_backward, pool_tape, PoolTape, PoolingConfig};

/// Layers in each head.
pub const HEAD_LAYERS: usize = 4;

/// Forward-pass mode. Training passes carry their own random stream.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng, dropout: f64 },
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Fully connected `C -> N` layer shared by clip logits and CAM extraction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `[C, N]`
    pub weights: Param,
    /// `[N]`; used for logits, never for CAMs.
    pub bias: Param,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (channels.max(1) as f64).sqrt();
        Self {
            weights: Param::uniform(&[channels, classes], bound, rng),
            bias: Param::zeros(&[classes]),
        }
    }

    pub fn channels(&self) -> usize {
        self.weights.shape[0]
    }

    pub fn classes(&self) -> usize {
        self.weights.shape[1]
    }

    pub fn logits(&self, feature: &[f64]) -> Vec<f64> {
        let (c, n) = (self.channels(), self.classes());
        (0..n)
            .map(|j| self.bias.data[j] + (0..c).map(|i| feature[i] * self.weights.data[i * n + j]).sum::<f64>())
            .collect()
    }

    /// `ReLU(F · W)` per position, shape `[w, h, D, N]`.
    pub fn cam(&self, f: &Volume) -> Result<Volume> {
        if f.c() != self.channels() {
            return Err(Error::shape(format!(
                "CAM needs {} feature channels, got {}",
                self.channels(),
                f.c()
            )));
        }
        let n = self.classes();
        let mut out = vec![0.0; f.positions() * n];
        crate::nn::gemm(f.positions(), f.c(), n, f.data(), false, &self.weights.data, false, &mut out, 0.0);
        relu_in_place(&mut out);
        Volume::from_vec([f.w(), f.h(), f.d(), n], out)
    }

    /// Accumulates `[weights, bias]` grads and returns d(loss)/d(feature).
    pub fn backward_logits(&self, feature: &[f64], grad_logits: &[f64], grads: &mut [Vec<f64>]) -> Vec<f64> {
        let (c, n) = (self.channels(), self.classes());
        for i in 0..c {
            for j in 0..n {
                grads[0][i * n + j] += feature[i] * grad_logits[j];
            }
        }
        for j in 0..n {
            grads[1][j] += grad_logits[j];
        }
        (0..c)
            .map(|i| (0..n).map(|j| self.weights.data[i * n + j] * grad_logits[j]).sum())
            .collect()
    }

    /// Backward through `ReLU(F · W)`; accumulates the weight grad into
    /// `grads[0]` and returns d(loss)/dF.
    pub fn backward_cam(&self, f: &Volume, cam: &Volume, grad_cam: &Volume, grads: &mut [Vec<f64>]) -> Volume {
        let (rows, c, n) = (f.positions(), self.channels(), self.classes());
        let mut g = grad_cam.data().to_vec();
        relu_backward(cam.data(), &mut g);
        crate::nn::gemm(c, rows, n, f.data(), true, &g, false, &mut grads[0], 1.0);
        let mut gf = vec![0.0; rows * c];
        crate::nn::gemm(rows, n, c, &g, false, &self.weights.data, true, &mut gf, 0.0);
        Volume::from_vec(f.dims(), gf).expect("feature dims")
    }
}

impl Parameterized for ClassifierHead {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weights, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// What every head pass produces: features, the pooled clip feature and logits.
pub struct HeadOutput {
    pub features: Volume,
    pub clip_feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub(crate) pool: PoolTape,
}

/// Gradient of the loss w.r.t. the features of a head pass, from the logit
/// path and (optionally) a CAM path, plus classifier grads into `grads`.
pub(crate) fn head_top_backward(
    classifier: &ClassifierHead,
    out: &HeadOutput,
    grad_logits: &[f64],
    cam_grad: Option<(&Volume, &Volume)>,
    grads: &mut [Vec<f64>],
) -> Volume {
    let gfeat = classifier.backward_logits(&out.clip_feature, grad_logits, grads);
    let mut gf = pool_backward(&out.pool, &gfeat);
    if let Some((cam, gcam)) = cam_grad {
        let extra = classifier.backward_cam(&out.features, cam, gcam, grads);
        gf.add_assign(&extra).expect("feature dims");
    }
    gf
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden_width: usize,
    pub out_channels: usize,
    pub dropout: f64,
    pub downsample_prob: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            out_channels: 256,
            dropout: 0.5,
            downsample_prob: 0.5,
        }
    }
}

impl TeacherConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.hidden_width == 0 {
            v.push("teacher.hidden_width: must be >= 1".into());
        }
        if self.out_channels == 0 {
            v.push("teacher.out_channels: must be >= 1".into());
        }
        for (k, p) in [("dropout", self.dropout), ("downsample_prob", self.downsample_prob)] {
            if !(0.0..=1.0).contains(&p) {
                v.push(format!("teacher.{k}: {p} is outside [0, 1]"));
            }
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherHead {
    pub mlp_layers: Vec<Linear>,
    pub classifier: ClassifierHead,
    pub dropout_rate: f64,
    pub downsample_prob: f64,
}

struct LayerRecord {
    input: Volume,
    output: Volume,
    downsampled: bool,
}

pub struct TeacherPass {
    pub out: HeadOutput,
    layers: Vec<LayerRecord>,
    /// Grid the MLP stack ended on before interpolation back to `(w, h)`.
    pre_upsample: [usize; 4],
    dropout: Option<Vec<f64>>,
}

impl TeacherHead {
    pub fn new(embed_dim: usize, classes: usize, cfg: &TeacherConfig, seed: u64) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![embed_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden_width, HEAD_LAYERS - 1));
        widths.push(cfg.out_channels);
        let mlp_layers = widths.windows(2).map(|p| Linear::new(p[0], p[1], &mut rng)).collect();
        Ok(Self {
            mlp_layers,
            classifier: ClassifierHead::new(cfg.out_channels, classes, &mut rng),
            dropout_rate: cfg.dropout,
            downsample_prob: cfg.downsample_prob,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.classifier.channels()
    }

    pub fn forward(&self, tokens: &Volume, cfg: &PoolingConfig, mode: Mode<'_>) -> Result<TeacherPass> {
        let in_dim = self.mlp_layers[0].input_dim();
        if tokens.c() != in_dim {
            return Err(Error::shape(format!(
                "teacher expects {in_dim}-dim tokens, got {}",
                tokens.c()
            )));
        }
        if !(0.0..=1.0).contains(&self.downsample_prob) {
            return Err(Error::range(format!("downsample probability {}", self.downsample_prob)));
        }
        let [w, h, d, _] = tokens.dims();
        let (mut rng, dropout) = match mode {
            Mode::Eval => (None, 0.0),
            Mode::Train { rng, dropout } => (Some(rng), dropout),
        };
        let mut x = tokens.clone();
        let mut layers = Vec::with_capacity(self.mlp_layers.len());
        for lin in &self.mlp_layers {
            let mut y = lin.forward(x.data(), x.positions());
            relu_in_place(&mut y);
            let y = Volume::from_vec([x.w(), x.h(), x.d(), lin.output_dim()], y)?;
            let downsampled = match rng.as_deref_mut() {
                Some(r) => r.random::<f64>() < self.downsample_prob && can_halve(y.w(), y.h()),
                None => false,
            };
            let next = if downsampled { avg_pool2(&y) } else { y.clone() };
            layers.push(LayerRecord {
                input: x,
                output: y,
                downsampled,
            });
            x = next;
        }
        let pre_upsample = x.dims();
        let mut features = if x.w() != w || x.h() != h {
            resize_bilinear(&x, w, h)
        } else {
            x
        };
        let dropout = match rng {
            Some(r) => dropout_mask(features.data().len(), dropout, r),
            None => None,
        };
        if let Some(m) = &dropout {
            apply_mask(features.data_mut(), m);
        }
        debug_assert_eq!(features.d(), d);
        let (clip_feature, pool) = pool_tape(&features, cfg)?;
        let logits = self.classifier.logits(&clip_feature);
        Ok(TeacherPass {
            out: HeadOutput {
                features,
                clip_feature,
                logits,
                pool,
            },
            layers,
            pre_upsample,
            dropout,
        })
    }

    /// Parameter grads (in `params()` order) and, if requested, the token gradient.
    pub fn backward(&self, pass: &TeacherPass, grad_logits: &[f64], want_tokens: bool) -> (Grads, Option<Volume>) {
        let mut grads = self.zero_grads();
        let cls_slot = 2 * self.mlp_layers.len();
        let mut g = head_top_backward(
            &self.classifier,
            &pass.out,
            grad_logits,
            None,
            &mut grads.0[cls_slot..cls_slot + 2],
        );
        if let Some(m) = &pass.dropout {
            apply_mask(g.data_mut(), m);
        }
        if pass.pre_upsample != g.dims() {
            g = resize_bilinear_backward(&g, pass.pre_upsample);
        }
        let mut token_grad = None;
        for (i, (lin, rec)) in self.mlp_layers.iter().zip(&pass.layers).enumerate().rev() {
            if rec.downsampled {
                g = avg_pool2_backward(&g, rec.output.dims());
            }
            relu_backward(rec.output.data(), g.data_mut());
            let want_input = i > 0 || want_tokens;
            let gx = lin.backward(rec.input.data(), rec.input.positions(), g.data(), &mut grads.0[2 * i..2 * i + 2], want_input);
            match gx {
                Some(gx) if i > 0 => g = Volume::from_vec(rec.input.dims(), gx).expect("layer dims"),
                Some(gx) => token_grad = Some(Volume::from_vec(rec.input.dims(), gx).expect("token dims")),
                None => {}
            }
        }
        (grads, token_grad)
    }
}

impl Parameterized for TeacherHead {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.mlp_layers.iter().flat_map(|l| l.params()).collect();
        v.extend(self.classifier.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.mlp_layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.extend(self.classifier.params_mut());
        v
    }
}

/// Feature volume and logits for one clip.
pub fn teacher_forward(
    tokens: &crate::encoder::TokenGrid,
    head: &TeacherHead,
    cfg: &PoolingConfig,
    mode: Mode<'_>,
) -> Result<(Volume, Vec<f64>)> {
    let pass = head.forward(&tokens.tokens, cfg, mode)?;
    Ok((pass.out.features, pass.out.logits))
}

/// Teacher spatio-temporal CAM, `ReLU(F_t · W)` without the bias.
pub fn teacher_stcam(features: &Volume, head: &TeacherHead) -> Result<Volume> {
    head.classifier.cam(features)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TeacherConfig {
        TeacherConfig {
            hidden_width: 6,
            out_channels: 5,
            dropout: 0.5,
            downsample_prob: 0.5,
        }
    }

    fn tokens(dims: [usize; 4], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn eval_is_deterministic() {
        let head = TeacherHead::new(4, 3, &small_cfg(), 1).unwrap();
        let t = tokens([4, 4, 3, 4], 2);
        let cfg = PoolingConfig::default();
        let a = head.forward(&t, &cfg, Mode::Eval).unwrap();
        let b = head.forward(&t, &cfg, Mode::Eval).unwrap();
        assert_eq!(a.out.features, b.out.features);
        assert_eq!(a.out.logits, b.out.logits);
    }

    #[test]
    fn zero_downsample_prob_keeps_dims() {
        let mut cfg = small_cfg();
        cfg.downsample_prob = 0.0;
        let head = TeacherHead::new(4, 2, &cfg, 3).unwrap();
        let t = tokens([8, 8, 2, 4], 4);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pass = head
                .forward(&t, &PoolingConfig::default(), Mode::Train { rng: &mut rng, dropout: 0.0 })
                .unwrap();
            assert!(pass.layers.iter().all(|l| !l.downsampled));
            assert_eq!(pass.pre_upsample, [8, 8, 2, 5]);
        }
    }

    #[test]
    fn downsampling_respects_minimum_grid() {
        let mut cfg = small_cfg();
        cfg.downsample_prob = 1.0;
        let head = TeacherHead::new(4, 2, &cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = head
            .forward(&tokens([8, 8, 2, 4], 1), &PoolingConfig::default(), Mode::Train { rng: &mut rng, dropout: 0.0 })
            .unwrap();
        // 8 -> 4 -> 2, then the guard stops further halving.
        let flags: Vec<bool> = pass.layers.iter().map(|l| l.downsampled).collect();
        assert_eq!(flags, vec![true, true, false, false]);
        assert_eq!(pass.out.features.dims(), [8, 8, 2, 5]);
    }

    #[test]
    fn constant_tokens_give_constant_features() {
        let head = TeacherHead::new(3, 2, &small_cfg(), 5).unwrap();
        let t = Volume::from_fn([4, 4, 3, 3], |_, _, _, c| [0.3, -0.7, 1.1][c]);
        let cfg = PoolingConfig::default();
        let pass = head.forward(&t, &cfg, Mode::Eval).unwrap();
        // Direct per-position computation on one token.
        let mut v = vec![0.3, -0.7, 1.1];
        for lin in &head.mlp_layers {
            v = lin.forward(&v, 1);
            relu_in_place(&mut v);
        }
        for p in pass.out.features.data().chunks_exact(5) {
            assert_eq!(p, v.as_slice());
        }
        for (got, want) in pass.out.clip_feature.iter().zip(&v) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cam_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let head = TeacherHead::new(3, 2, &small_cfg(), 9).unwrap();
        let zero = Volume::zeros([2, 2, 2, 5]);
        assert!(teacher_stcam(&zero, &head).unwrap().data().iter().all(|&v| v == 0.0));

        let mut cls = ClassifierHead::new(3, 1, &mut rng);
        cls.weights.data = vec![1.0, 0.0, 0.0];
        let f = tokens([2, 2, 2, 3], 10);
        let cam = cls.cam(&f).unwrap();
        for (c, v) in cam.data().iter().zip(f.channel(0).data()) {
            assert_eq!(*c, v.max(0.0));
        }

        let cls = ClassifierHead::new(3, 4, &mut rng);
        let cam = cls.cam(&f).unwrap();
        for t in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    for n in 0..4 {
                        let dot: f64 = (0..3).map(|c| f.get(x, y, t, c) * cls.weights.data[c * 4 + n]).sum();
                        assert!((cam.get(x, y, t, n) - dot.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let head = TeacherHead::new(3, 2, &small_cfg(), 21).unwrap();
        let t = tokens([4, 4, 3, 3], 22);
        let cfg = PoolingConfig {
            k1_fraction: 0.25,
            k2_fraction: 0.5,
            ..PoolingConfig::default()
        };
        let probe = [0.7, -1.3];
        let objective = |h: &TeacherHead, tok: &Volume| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let p = h.forward(tok, &cfg, Mode::Train { rng: &mut rng, dropout: 0.3 }).unwrap();
            p.out.logits.iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pass = head.forward(&t, &cfg, Mode::Train { rng: &mut rng, dropout: 0.3 }).unwrap();
        let (grads, gt) = head.backward(&pass, &probe, true);
        let gt = gt.unwrap();
        let eps = 1e-6;
        for i in (0..t.data().len()).step_by(5) {
            let mut tp = t.clone();
            tp.data_mut()[i] += eps;
            let mut tm = t.clone();
            tm.data_mut()[i] -= eps;
            let num = (objective(&head, &tp) - objective(&head, &tm)) / (2.0 * eps);
            assert!((num - gt.data()[i]).abs() < 1e-5 * (1.0 + num.abs()), "token {i}: {num} vs {}", gt.data()[i]);
        }
        for (pi, g) in grads.0.iter().enumerate() {
            for i in (0..g.len()).step_by(4) {
                let mut hp = head.clone();
                hp.params_mut()[pi].data[i] += eps;
                let mut hm = head.clone();
                hm.params_mut()[pi].data[i] -= eps;
                let num = (objective(&hp, &t) - objective(&hm, &t)) / (2.0 * eps);
                assert!((num - g[i]).abs() < 1e-5 * (1.0 + num.abs()), "param {pi}[{i}]: {num} vs {}", g[i]);
            }
        }
    }
}
