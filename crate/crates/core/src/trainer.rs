//! Two-phase training with backbone gradient routing, checkpoints, logs and
//! evaluation.
//!
//! Phase 1 trains the teacher alone. Phase 2 adds the student, which learns
//! from clip labels plus the gated CAM distillation term. Each clip in a batch
//! is processed independently (and in parallel when enabled); gradients are
//! reduced in clip order so results do not depend on scheduling.

use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::campost::{binarize, extract_boxes, fuse_cams, normalize_cam, upsample_mask, NormalizedCam};
use crate::config::RunConfig;
use crate::dataio::ClipDataset;
use crate::distill::{
    gated_kd_grad, gated_kd_loss, make_gate, multilabel_soft_margin, multilabel_soft_margin_grad, sigmoid,
};
use crate::encoder::{encode, BackboneConfig, LabelVector, ToyBackbone, VideoClip};
use crate::error::{Error, Result};
use crate::grid::{MaskVolume, Volume};
use crate::metrics::{corloc, dice, frame_accuracy, hausdorff_percentile, iou, video_accuracy, ClassTally, MetricsReport};
use crate::nn::{AdamConfig, AdamState, Grads, Parameterized};
use crate::par::{try_map_collect, Exec};
use crate::rng::{derive_seed, stream, tag};
use crate::student::StudentHead;
use crate::teacher::{Mode, TeacherHead};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    Frozen,
    #[default]
    RefineByTeacher,
    RefineByStudent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_only_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub backbone_mode: BackboneMode,
    pub seed: u64,
    /// Off only for comparisons that need the joint phase without a student.
    pub student_enabled: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            teacher_only_epochs: 9,
            joint_epochs: 30,
            batch_size: 8,
            backbone_mode: BackboneMode::RefineByTeacher,
            seed: 0,
            student_enabled: true,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("trainer.lr: {} must be > 0", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("trainer.weight_decay: {} must be >= 0", self.weight_decay));
        }
        if self.batch_size == 0 {
            v.push("trainer.batch_size: must be >= 1".into());
        }
        v
    }

    pub fn total_epochs(&self) -> usize {
        self.teacher_only_epochs + self.joint_epochs
    }
}

/// Backbone plus both heads.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: ToyBackbone,
    pub teacher: TeacherHead,
    pub student: StudentHead,
}

impl Model {
    /// Fresh parameters; every initializer is seeded from `trainer.seed`.
    pub fn new(cfg: &RunConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.trainer.seed;
        let backbone = ToyBackbone::new(&BackboneConfig {
            seed: derive_seed(seed, &[tag::BACKBONE_INIT, cfg.encoder.seed]),
            ..cfg.encoder.clone()
        })?;
        let e = cfg.encoder.embed_dim;
        Ok(Self {
            backbone,
            teacher: TeacherHead::new(e, num_classes, &cfg.teacher, derive_seed(seed, &[tag::TEACHER_INIT]))?,
            student: StudentHead::new(e, num_classes, &cfg.student, derive_seed(seed, &[tag::STUDENT_INIT]))?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.teacher.classifier.classes()
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = self.backbone.params().into_iter().map(|p| &p.data).collect();
        v.extend(self.teacher.params().into_iter().map(|p| &p.data));
        v.extend(self.student.params().into_iter().map(|p| &p.data));
        v
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = self.backbone.params_mut().into_iter().map(|p| &mut p.data).collect();
        v.extend(self.teacher.params_mut().into_iter().map(|p| &mut p.data));
        v.extend(self.student.params_mut().into_iter().map(|p| &mut p.data));
        v
    }
}

/// Adam moments, one group per sub-network.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub backbone: AdamState,
    pub teacher: AdamState,
    pub student: AdamState,
}

impl OptimState {
    pub fn new(model: &Model) -> Self {
        Self {
            backbone: AdamState::new(&model.backbone),
            teacher: AdamState::new(&model.teacher),
            student: AdamState::new(&model.student),
        }
    }

    fn groups(&self) -> [&AdamState; 3] {
        [&self.backbone, &self.teacher, &self.student]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for g in [&mut self.backbone, &mut self.teacher, &mut self.student] {
            v.extend(g.m.iter_mut());
            v.extend(g.v.iter_mut());
        }
        v
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub l_ml_teacher: f64,
    pub l_ml_student: Option<f64>,
    pub l_kd: Option<f64>,
    /// Training-pass accuracy of the student in phase 2, else of the teacher.
    pub video_acc: f64,
    pub video_acc_teacher: f64,
}

impl EpochLog {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }
}

pub fn write_log_jsonl(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut s = String::new();
    for l in log {
        s.push_str(&l.to_json_line());
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_log_jsonl(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Json {
                path: path.into(),
                source: e,
            })
        })
        .collect()
}

/// Everything needed to evaluate or resume. Stochastic streams are derived
/// from `(seed, epoch, position)`, so the epoch counter is the full stream state.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub class_names: Vec<String>,
    /// Epochs completed.
    pub epoch: usize,
    pub model: Model,
    pub optim: OptimState,
}

impl Checkpoint {
    /// Whether the student has taken any optimizer step.
    pub fn student_trained(&self) -> bool {
        self.optim.student.step > 0
    }
}

const CKPT_MAGIC: &[u8; 8] = b"WSVOSCKP";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: RunConfig,
    class_names: Vec<String>,
    epoch: usize,
    adam_steps: [u64; 3],
    buffer_lens: Vec<usize>,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Binary format: magic, version, JSON header, then raw little-endian `f64`s
/// (parameters, then Adam moments), so values round-trip bit-exactly.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut optim = ckpt.optim.clone();
    let mut bufs: Vec<&Vec<f64>> = ckpt.model.buffers();
    let moments = optim.buffers_mut();
    bufs.extend(moments.into_iter().map(|b| &*b));
    let header = CkptHeader {
        config: ckpt.config.clone(),
        class_names: ckpt.class_names.clone(),
        epoch: ckpt.epoch,
        adam_steps: ckpt.optim.groups().map(|g| g.step),
        buffer_lens: bufs.iter().map(|b| b.len()).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let total: usize = bufs.iter().map(|b| b.len()).sum();
    let mut out = Vec::with_capacity(24 + json.len() + 8 * total);
    out.extend_from_slice(CKPT_MAGIC);
    out.write_u32::<LittleEndian>(CKPT_VERSION).expect("vec write");
    out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    out.extend_from_slice(&json);
    for b in bufs {
        for &x in b.iter() {
            out.write_f64::<LittleEndian>(x).expect("vec write");
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| ckpt_err(path, "truncated header"))?;
    if &magic != CKPT_MAGIC {
        return Err(ckpt_err(path, "not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| ckpt_err(path, "truncated header"))?;
    if version != CKPT_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| ckpt_err(path, "truncated header"))? as usize;
    if r.len() < len {
        return Err(ckpt_err(path, "truncated header"));
    }
    let (json, mut rest) = r.split_at(len);
    let header: CkptHeader = serde_json::from_slice(json).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    let mut model = Model::new(&header.config, header.class_names.len())?;
    let mut optim = OptimState::new(&model);
    for (g, s) in [&mut optim.backbone, &mut optim.teacher, &mut optim.student]
        .into_iter()
        .zip(header.adam_steps)
    {
        g.step = s;
    }
    let mut bufs = model.buffers_mut();
    bufs.extend(optim.buffers_mut());
    let lens: Vec<usize> = bufs.iter().map(|b| b.len()).collect();
    if lens != header.buffer_lens {
        return Err(ckpt_err(path, "parameter layout does not match its config"));
    }
    for b in bufs {
        for x in b.iter_mut() {
            *x = rest
                .read_f64::<LittleEndian>()
                .map_err(|_| ckpt_err(path, "truncated parameter data"))?;
        }
    }
    if !rest.is_empty() {
        return Err(ckpt_err(path, format!("{} trailing bytes", rest.len())));
    }
    Ok(Checkpoint {
        config: header.config,
        class_names: header.class_names,
        epoch: header.epoch,
        model,
        optim,
    })
}

/// Per-clip result of one training step.
struct ClipStep {
    teacher: Grads,
    student: Option<Grads>,
    backbone: Option<Grads>,
    l_teacher: f64,
    l_student: Option<f64>,
    l_kd: Option<f64>,
    teacher_logits: Vec<f64>,
    student_logits: Option<Vec<f64>>,
}

fn sum_in_order(parts: impl Iterator<Item = Grads>, scale: f64) -> Option<Grads> {
    let mut acc: Option<Grads> = None;
    for g in parts {
        match &mut acc {
            Some(a) => a.add_assign(&g),
            None => acc = Some(g),
        }
    }
    if let Some(a) = &mut acc {
        a.scale(scale);
    }
    acc
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub struct Trainer {
    cfg: RunConfig,
    class_names: Vec<String>,
    model: Model,
    optim: OptimState,
    epoch: usize,
    log: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, class_names: Vec<String>) -> Result<Self> {
        let model = Model::new(&cfg, class_names.len())?;
        let optim = OptimState::new(&model);
        Ok(Self {
            cfg,
            class_names,
            model,
            optim,
            epoch: 0,
            log: Vec::new(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            cfg: ckpt.config,
            class_names: ckpt.class_names,
            model: ckpt.model,
            optim: ckpt.optim,
            epoch: ckpt.epoch,
            log: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.trainer.total_epochs()
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    /// Log lines produced by this trainer instance.
    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            class_names: self.class_names.clone(),
            epoch: self.epoch,
            model: self.model.clone(),
            optim: self.optim.clone(),
        }
    }

    fn clip_step(&self, clip: &VideoClip, epoch: usize, pos: usize, joint: bool) -> Result<ClipStep> {
        let cfg = &self.cfg;
        let tc = &cfg.trainer;
        let m = &self.model;
        let (tokens, tape) = m.backbone.forward_train(&clip.frames).map_err(|e| Error::Backbone {
            clip: clip.clip_id.clone(),
            source: Box::new(e),
        })?;
        let diverged = |what: &str, v: f64| Error::NonFinite {
            epoch,
            step: pos,
            detail: format!("clip `{}`: {what} = {v}", clip.clip_id),
        };

        let mut trng = stream(tc.seed, &[tag::TEACHER_STEP, epoch as u64, pos as u64]);
        let t_dropout = if joint { 0.0 } else { cfg.teacher.dropout };
        let tpass = m.teacher.forward(
            &tokens,
            &cfg.pooling,
            Mode::Train {
                rng: &mut trng,
                dropout: t_dropout,
            },
        )?;
        let l_teacher = multilabel_soft_margin(&tpass.out.logits, &clip.label)?;
        if !l_teacher.is_finite() {
            return Err(diverged("teacher loss", l_teacher));
        }
        let gl_t = multilabel_soft_margin_grad(&tpass.out.logits, &clip.label)?;
        let route_teacher = tc.backbone_mode == BackboneMode::RefineByTeacher;
        let (teacher, t_tok) = m.teacher.backward(&tpass, &gl_t, route_teacher);

        let mut step = ClipStep {
            teacher,
            student: None,
            backbone: None,
            l_teacher,
            l_student: None,
            l_kd: None,
            teacher_logits: tpass.out.logits.clone(),
            student_logits: None,
        };
        let mut token_grad = t_tok.filter(|_| route_teacher);

        if joint && tc.student_enabled {
            let mut srng = stream(tc.seed, &[tag::STUDENT_STEP, epoch as u64, pos as u64]);
            let spass = m.student.forward(
                &tokens,
                &cfg.pooling,
                Mode::Train {
                    rng: &mut srng,
                    dropout: cfg.student.dropout,
                },
            )?;
            let l_ml = multilabel_soft_margin(&spass.out.logits, &clip.label)?;
            let gl_s = multilabel_soft_margin_grad(&spass.out.logits, &clip.label)?;
            let alpha = cfg.distill.alpha;
            let mut kd = 0.0;
            let mut cam_grad = None;
            if alpha > 0.0 {
                // The target is the teacher's inference-time CAM, held fixed:
                // no gradient flows back into the teacher.
                let teval = m.teacher.forward(&tokens, &cfg.pooling, Mode::Eval)?;
                let mt = m.teacher.classifier.cam(&teval.out.features)?;
                let ms = m.student.classifier.cam(spass.cam_features())?;
                let gate = make_gate(&mt, &clip.label, cfg.distill.gate_mode)?;
                kd = gated_kd_loss(&ms, &mt, &gate)?;
                let mut g = gated_kd_grad(&ms, &mt, &gate)?;
                for x in g.data_mut() {
                    *x *= alpha;
                }
                cam_grad = Some((ms, g));
            }
            let total = l_ml + alpha * kd;
            if !total.is_finite() {
                return Err(diverged("student loss", total));
            }
            let route_student = tc.backbone_mode == BackboneMode::RefineByStudent;
            let (sg, s_tok) = m.student.backward(
                &spass,
                &gl_s,
                cam_grad.as_ref().map(|(c, g)| (c, g)),
                route_student,
            );
            if route_student {
                token_grad = s_tok;
            }
            step.student = Some(sg);
            step.l_student = Some(l_ml);
            step.l_kd = (alpha > 0.0).then_some(kd);
            step.student_logits = Some(spass.out.logits);
        }

        if tc.backbone_mode != BackboneMode::Frozen {
            if let Some(g) = token_grad {
                step.backbone = Some(m.backbone.backward(&tape, &g));
            }
        }
        Ok(step)
    }

    /// Runs one epoch over `ds` and returns its log line.
    pub fn run_epoch(&mut self, ds: &ClipDataset) -> Result<EpochLog> {
        if ds.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        if ds.num_classes() != self.model.num_classes() {
            return Err(Error::Dataset(format!(
                "dataset has {} classes, model has {}",
                ds.num_classes(),
                self.model.num_classes()
            )));
        }
        let epoch = self.epoch;
        let tc = self.cfg.trainer.clone();
        let joint = epoch >= tc.teacher_only_epochs;
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut stream(tc.seed, &[tag::SHUFFLE, epoch as u64]));

        let adam = AdamConfig::new(tc.lr, tc.weight_decay);
        let (mut lt, mut ls, mut lk) = (Vec::new(), Vec::new(), Vec::new());
        let (mut t_logits, mut s_logits, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let items: Vec<(usize, usize)> = chunk
                .iter()
                .enumerate()
                .map(|(j, &idx)| (bi * tc.batch_size + j, idx))
                .collect();
            let steps = try_map_collect(tc.exec, &items, |_, &(pos, idx)| {
                self.clip_step(&ds.clips[idx], epoch, pos, joint)
            })?;
            let scale = 1.0 / steps.len() as f64;
            for (s, &(_, idx)) in steps.iter().zip(&items) {
                lt.push(s.l_teacher);
                ls.extend(s.l_student);
                lk.extend(s.l_kd);
                t_logits.push(s.teacher_logits.clone());
                s_logits.extend(s.student_logits.clone());
                labels.push(ds.clips[idx].label.clone());
            }
            let mut t_parts = Vec::new();
            let mut s_parts = Vec::new();
            let mut b_parts = Vec::new();
            for s in steps {
                t_parts.push(s.teacher);
                s_parts.extend(s.student);
                b_parts.extend(s.backbone);
            }
            let tg = sum_in_order(t_parts.into_iter(), scale);
            let sg = sum_in_order(s_parts.into_iter(), scale);
            let bg = sum_in_order(b_parts.into_iter(), scale);
            for (name, g) in [("teacher", &tg), ("student", &sg), ("backbone", &bg)] {
                if let Some(g) = g {
                    if !g.is_finite() {
                        return Err(Error::NonFinite {
                            epoch,
                            step: bi,
                            detail: format!("{name} gradient has non-finite entries"),
                        });
                    }
                }
            }
            if let Some(g) = tg {
                self.optim.teacher.step(self.model.teacher.params_mut(), &g, &adam);
            }
            if let Some(g) = sg {
                self.optim.student.step(self.model.student.params_mut(), &g, &adam);
            }
            if let Some(g) = bg {
                self.optim.backbone.step(self.model.backbone.params_mut(), &g, &adam);
            }
        }
        let acc_t = video_accuracy(&t_logits, &labels)?;
        let student_ran = !s_logits.is_empty();
        let entry = EpochLog {
            epoch,
            phase: if joint { 2 } else { 1 },
            l_ml_teacher: mean(&lt),
            l_ml_student: student_ran.then(|| mean(&ls)),
            l_kd: (!lk.is_empty()).then(|| mean(&lk)),
            video_acc: if student_ran { video_accuracy(&s_logits, &labels)? } else { acc_t },
            video_acc_teacher: acc_t,
        };
        self.epoch += 1;
        self.log.push(entry.clone());
        Ok(entry)
    }

    /// Runs the remaining epochs of the schedule.
    pub fn run(&mut self, ds: &ClipDataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<()> {
        while !self.is_done() {
            let e = self.run_epoch(ds)?;
            on_epoch(&e);
        }
        Ok(())
    }
}

/// Trains from scratch on `ds` using the full schedule in `cfg`.
pub fn train(ds: &ClipDataset, cfg: &RunConfig) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut t = Trainer::new(cfg.clone(), ds.class_names.clone())?;
    t.run(ds, |_| {})?;
    Ok((t.checkpoint(), t.log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TeacherOnly,
    Fusion,
    Full,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::TeacherOnly => "t",
            Variant::Fusion => "fusion",
            Variant::Full => "full",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "t" | "teacher" | "teacher_only" => Ok(Variant::TeacherOnly),
            "fusion" | "ts_fusion" => Ok(Variant::Fusion),
            "full" => Ok(Variant::Full),
            other => Err(Error::range(format!("unknown variant `{other}` (expected t, fusion or full)"))),
        }
    }
}

/// CAM used by a variant: teacher, student, or their fusion.
pub fn variant_cam(teacher_cam: &Volume, student_cam: &Volume, variant: Variant) -> Result<NormalizedCam> {
    match variant {
        Variant::TeacherOnly => Ok(normalize_cam(teacher_cam)),
        Variant::Full => Ok(normalize_cam(student_cam)),
        Variant::Fusion => fuse_cams(&normalize_cam(teacher_cam), &normalize_cam(student_cam)),
    }
}

/// Clip logits used by a variant. Fusion averages the two heads.
pub fn variant_logits(teacher: &[f64], student: &[f64], variant: Variant) -> Vec<f64> {
    match variant {
        Variant::TeacherOnly => teacher.to_vec(),
        Variant::Full => student.to_vec(),
        Variant::Fusion => teacher.iter().zip(student).map(|(a, b)| 0.5 * (a + b)).collect(),
    }
}

/// Eval-mode outputs for one clip.
#[derive(Clone, Debug)]
pub struct ClipPrediction {
    pub logits: Vec<f64>,
    /// Patch-grid CAM, `[w, h, D, N]`.
    pub cam: NormalizedCam,
    /// Pixel-grid masks, `[W, H, D, N]`.
    pub masks: MaskVolume,
}

pub fn predict_clip(model: &Model, cfg: &RunConfig, clip: &VideoClip, variant: Variant) -> Result<ClipPrediction> {
    let tokens = encode(clip, &model.backbone)?;
    let t = model.teacher.forward(&tokens.tokens, &cfg.pooling, Mode::Eval)?;
    let tcam = model.teacher.classifier.cam(&t.out.features)?;
    let (s_logits, scam) = if variant == Variant::TeacherOnly {
        (t.out.logits.clone(), tcam.clone())
    } else {
        let s = model.student.forward(&tokens.tokens, &cfg.pooling, Mode::Eval)?;
        let cam = model.student.classifier.cam(&s.out.features)?;
        (s.out.logits, cam)
    };
    let cam = variant_cam(&tcam, &scam, variant)?;
    let patch_mask = binarize(&cam, cfg.post.threshold)?;
    let masks = upsample_mask(&patch_mask, clip.frames.w(), clip.frames.h())?;
    Ok(ClipPrediction {
        logits: variant_logits(&t.out.logits, &s_logits, variant),
        cam,
        masks,
    })
}

/// Per-clip metric sums.
#[derive(Clone, Debug, Default)]
pub struct ClipScore {
    pub tallies: Vec<ClassTally>,
    pub frame_pairs: Vec<(bool, bool)>,
}

/// Scores a prediction against whatever ground truth the clip carries.
/// Segmentation metrics use only `(class, frame)` pairs where the class is
/// present in the ground-truth mask.
pub fn score_clip(pred: &ClipPrediction, clip: &VideoClip, cfg: &RunConfig, patch_size: usize) -> Result<ClipScore> {
    let n = clip.num_classes();
    let d = clip.num_frames();
    let mut tallies = vec![ClassTally::default(); n];
    if let Some(gt) = &clip.masks {
        gt.ensure_dims(pred.masks.dims(), "ground-truth masks vs prediction")?;
        for t in 0..d {
            let (gt_t, pr_t) = (gt.frame(t), pred.masks.frame(t));
            for (c, tally) in tallies.iter_mut().enumerate() {
                let g = gt_t.channel(c);
                if g.count() == 0 {
                    continue;
                }
                let p = pr_t.channel(c);
                tally.iou_sum += iou(&p, &g)?;
                tally.dice_sum += dice(&p, &g)?;
                tally.seg_frames += 1;
                match hausdorff_percentile(&p, &g, cfg.metrics.hd_percentile)? {
                    Some(h) => {
                        tally.hd_sum += h;
                        tally.hd_frames += 1;
                    }
                    None => tally.hd_excluded += 1,
                }
            }
        }
    }
    if let Some(boxes) = &clip.boxes {
        let min_pixels = cfg.post.min_area * patch_size * patch_size;
        for (t, per_class) in boxes.iter().enumerate().take(d) {
            let pr_t = pred.masks.frame(t);
            for (c, gt_boxes) in per_class.iter().enumerate().take(n) {
                if gt_boxes.is_empty() {
                    continue;
                }
                let found = extract_boxes(&pr_t.channel(c), min_pixels)?;
                tallies[c].corloc_frames += 1;
                tallies[c].corloc_hits += corloc(&found, gt_boxes) as usize;
            }
        }
    }
    let mut frame_pairs = Vec::new();
    if let Some(fl) = &clip.frame_labels {
        let cam = pred.cam.volume();
        for (t, truth) in fl.iter().enumerate() {
            for c in 0..n {
                let mut peak = 0.0f64;
                for y in 0..cam.h() {
                    for x in 0..cam.w() {
                        peak = peak.max(*cam.get(x, y, t, c));
                    }
                }
                let predicted = sigmoid(pred.logits[c]) > 0.5 && peak > cfg.metrics.tau_frame;
                frame_pairs.push((predicted, truth.get(c)));
            }
        }
    }
    Ok(ClipScore { tallies, frame_pairs })
}

/// Evaluates `model` on `ds` with the post-processing and metric settings in `cfg`.
pub fn evaluate_model(
    model: &Model,
    cfg: &RunConfig,
    class_names: &[String],
    ds: &ClipDataset,
    variant: Variant,
) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    if ds.num_classes() != model.num_classes() {
        return Err(Error::Dataset(format!(
            "dataset has {} classes, model has {}",
            ds.num_classes(),
            model.num_classes()
        )));
    }
    let per_clip = try_map_collect(cfg.trainer.exec, &ds.clips, |_, clip| {
        let pred = predict_clip(model, cfg, clip, variant)?;
        let score = score_clip(&pred, clip, cfg, model.backbone.patch_size)?;
        Ok::<_, Error>((pred.logits, score))
    })?;
    let n = model.num_classes();
    let mut tallies = vec![ClassTally::default(); n];
    let mut pairs = Vec::new();
    let mut logits = Vec::with_capacity(per_clip.len());
    let labels: Vec<LabelVector> = ds.clips.iter().map(|c| c.label.clone()).collect();
    for (l, s) in per_clip {
        logits.push(l);
        for (acc, t) in tallies.iter_mut().zip(&s.tallies) {
            acc.merge(t);
        }
        pairs.extend(s.frame_pairs);
    }
    let frames = ds.clips.iter().map(|c| c.num_frames()).sum();
    Ok(MetricsReport::from_tallies(
        variant.name(),
        class_names,
        &tallies,
        Some(video_accuracy(&logits, &labels)?),
        frame_accuracy(&pairs),
        ds.len(),
        frames,
    ))
}

pub fn evaluate(ckpt: &Checkpoint, ds: &ClipDataset, variant: Variant) -> Result<MetricsReport> {
    evaluate_model(&ckpt.model, &ckpt.config, &ckpt.class_names, ds, variant)
}
