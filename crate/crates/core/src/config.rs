//! Run configuration: one TOML document with a block per module.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::campost::PostConfig;
use crate::dataio::SyntheticConfig;
use crate::distill::DistillConfig;
use crate::encoder::BackboneConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsConfig;
use crate::pooling::PoolingConfig;
use crate::student::StudentConfig;
use crate::teacher::TeacherConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: BackboneConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub pooling: PoolingConfig,
    pub distill: DistillConfig,
    pub trainer: TrainConfig,
    pub post: PostConfig,
    pub metrics: MetricsConfig,
    pub data: DataConfig,
    pub synth: SyntheticConfig,
}

impl RunConfig {
    /// Parses TOML. Unknown keys are rejected with their full key path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))?;
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner().to_string();
            let inner = inner.trim().lines().last().unwrap_or_default().trim().to_string();
            Error::Config(vec![format!("{path}: {inner}")])
        })
    }

    /// Reads a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Every violation across all blocks, so one run reports them all.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        v.extend(self.encoder.violations().into_iter().map(|s| prefixed("encoder", s)));
        v.extend(self.teacher.violations().into_iter().map(|s| prefixed("teacher", s)));
        v.extend(self.student.violations().into_iter().map(|s| prefixed("student", s)));
        v.extend(self.pooling.violations().into_iter().map(|s| prefixed("pooling", s)));
        v.extend(self.distill.violations().into_iter().map(|s| prefixed("distill", s)));
        v.extend(self.trainer.violations());
        v.extend(self.post.violations());
        v.extend(self.metrics.violations());
        v.extend(self.synth.violations());
        if self.teacher.out_channels != self.student.out_channels {
            v.push(format!(
                "teacher.out_channels ({}) must equal student.out_channels ({}) for CAM distillation",
                self.teacher.out_channels, self.student.out_channels
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

fn prefixed(block: &str, s: String) -> String {
    if s.starts_with(&format!("{block}.")) {
        s
    } else {
        format!("{block}.{s}")
    }
}
