//! Weakly supervised video object segmentation from clip-level labels.
//!
//! A per-frame teacher head and a spatio-temporal student head share one
//! patch backbone. Both are trained from clip labels through ranked top-k
//! pooling; the student additionally matches the teacher's class activation
//! maps, gated by how strongly the teacher believes each class is present in
//! each frame.

pub mod campost;
pub mod config;
pub mod dataio;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod pooling;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{Grid, MaskVolume, Volume};
pub use par::Exec;
