//! Spatio-temporal convolution head. Same pooling and classifier pattern as
//! the teacher, but every layer mixes neighbouring frames.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Volume;
use crate::nn::{apply_mask, dropout_mask, relu_backward, relu_in_place, Conv3d, Grads, Param, Parameterized};
use crate::pooling::{pool_tape, PoolingConfig};
use crate::teacher::{head_top_backward, ClassifierHead, HeadOutput, Mode, HEAD_LAYERS};

pub const SPATIAL_KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub hidden_width: usize,
    pub out_channels: usize,
    pub temporal_kernel: usize,
    pub dropout: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            out_channels: 256,
            temporal_kernel: 3,
            dropout: 0.5,
        }
    }
}

impl StudentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.hidden_width == 0 {
            v.push("student.hidden_width: must be >= 1".into());
        }
        if self.out_channels == 0 {
            v.push("student.out_channels: must be >= 1".into());
        }
        if self.temporal_kernel < 3 || self.temporal_kernel.is_multiple_of(2) {
            v.push(format!(
                "student.temporal_kernel: {} must be odd and >= 3 so frames mix",
                self.temporal_kernel
            ));
        }
        if !(0.0..=1.0).contains(&self.dropout) {
            v.push(format!("student.dropout: {} is outside [0, 1]", self.dropout));
        }
        v
    }

    /// Frames on each side that can influence an output frame.
    pub fn temporal_reach(&self) -> usize {
        HEAD_LAYERS * (self.temporal_kernel / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentHead {
    pub conv_layers: Vec<Conv3d>,
    pub classifier: ClassifierHead,
    pub dropout_rate: f64,
}

pub struct StudentPass {
    pub out: HeadOutput,
    inputs: Vec<Volume>,
    outputs: Vec<Volume>,
    dropout: Option<Vec<f64>>,
}

impl StudentPass {
    /// Features before dropout. CAMs are taken from these, so training-time
    /// CAMs match what inference produces.
    pub fn cam_features(&self) -> &Volume {
        self.outputs.last().expect("at least one layer")
    }
}

impl StudentHead {
    pub fn new(embed_dim: usize, classes: usize, cfg: &StudentConfig, seed: u64) -> Result<Self> {
        let v = cfg.violations();
        if !v.is_empty() {
            return Err(Error::Config(v));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![embed_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden_width, HEAD_LAYERS - 1));
        widths.push(cfg.out_channels);
        let conv_layers = widths
            .windows(2)
            .map(|p| Conv3d::new(p[0], p[1], cfg.temporal_kernel, SPATIAL_KERNEL, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            conv_layers,
            classifier: ClassifierHead::new(cfg.out_channels, classes, &mut rng),
            dropout_rate: cfg.dropout,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.classifier.channels()
    }

    pub fn forward(&self, tokens: &Volume, cfg: &PoolingConfig, mode: Mode<'_>) -> Result<StudentPass> {
        let mut x = tokens.clone();
        let mut inputs = Vec::with_capacity(self.conv_layers.len());
        let mut outputs = Vec::with_capacity(self.conv_layers.len());
        for conv in &self.conv_layers {
            let mut y = conv.forward(&x)?;
            relu_in_place(y.data_mut());
            inputs.push(x);
            outputs.push(y.clone());
            x = y;
        }
        let dropout = match mode {
            Mode::Eval => None,
            Mode::Train { rng, dropout } => dropout_mask(x.data().len(), dropout, rng),
        };
        if let Some(m) = &dropout {
            apply_mask(x.data_mut(), m);
        }
        let (clip_feature, pool) = pool_tape(&x, cfg)?;
        let logits = self.classifier.logits(&clip_feature);
        Ok(StudentPass {
            out: HeadOutput {
                features: x,
                clip_feature,
                logits,
                pool,
            },
            inputs,
            outputs,
            dropout,
        })
    }

    /// Backward from the logit gradient plus an optional gradient on the
    /// student CAM (`cam` must be `classifier.cam(pass.cam_features())`).
    pub fn backward(
        &self,
        pass: &StudentPass,
        grad_logits: &[f64],
        cam_grad: Option<(&Volume, &Volume)>,
        want_tokens: bool,
    ) -> (Grads, Option<Volume>) {
        let mut grads = self.zero_grads();
        let cls_slot = 2 * self.conv_layers.len();
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
        if let Some((cam, gcam)) = cam_grad {
            let extra = self
                .classifier
                .backward_cam(pass.cam_features(), cam, gcam, &mut grads.0[cls_slot..cls_slot + 2]);
            g.add_assign(&extra).expect("feature dims");
        }
        let mut token_grad = None;
        for (i, conv) in self.conv_layers.iter().enumerate().rev() {
            relu_backward(pass.outputs[i].data(), g.data_mut());
            let want_input = i > 0 || want_tokens;
            let gx = conv.backward(&pass.inputs[i], &g, &mut grads.0[2 * i..2 * i + 2], want_input);
            match gx {
                Some(gx) if i > 0 => g = gx,
                Some(gx) => token_grad = Some(gx),
                None => {}
            }
        }
        (grads, token_grad)
    }
}

impl Parameterized for StudentHead {
    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.conv_layers.iter().flat_map(|l| l.params()).collect();
        v.extend(self.classifier.params());
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.conv_layers.iter_mut().flat_map(|l| l.params_mut()).collect();
        v.extend(self.classifier.params_mut());
        v
    }
}

pub fn student_forward(
    tokens: &crate::encoder::TokenGrid,
    head: &StudentHead,
    cfg: &PoolingConfig,
    mode: Mode<'_>,
) -> Result<(Volume, Vec<f64>)> {
    let pass = head.forward(&tokens.tokens, cfg, mode)?;
    Ok((pass.out.features, pass.out.logits))
}

/// Student spatio-temporal CAM, `ReLU(F_s · W_s)` without the bias.
pub fn student_stcam(features: &Volume, head: &StudentHead) -> Result<Volume> {
    head.classifier.cam(features)
}
