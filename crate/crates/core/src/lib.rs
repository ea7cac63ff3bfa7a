//! Multi-label learning on long-tailed, partially-labeled data.
//!
//! The library trains three small networks jointly: a head teacher, a tail
//! teacher and a balanced student. Missing positives are recalled during
//! training from the student's confidences, every class gets its own
//! focusing exponents, and the teachers distill into the student through
//! logits adjusted by a moving gradient direction.
//!
//! ```no_run
//! use comic_core::{fit, DataConfig, TrainConfig};
//!
//! let dataset = DataConfig::default().build()?;
//! let trainer = fit(TrainConfig { epochs: 5, ..TrainConfig::default() }, &dataset)?;
//! let report = trainer.evaluate(trainer.test_split())?;
//! println!("{}", report.to_json());
//! # Ok::<(), comic_core::Error>(())
//! ```

pub mod config;
pub mod data;
mod error;
pub mod eval;
pub mod gradcheck;
pub mod htb;
pub mod losses;
pub mod netcore;
pub mod rlc;
pub mod trainer;

pub use config::{DataConfig, RunConfig};
pub use data::{Dataset, DatasetManifest, Sample, ShotGroup, SyntheticParams};
pub use error::{Error, Result};
pub use eval::{average_precision, MetricsReport, ShotMap};
pub use htb::{HtbConfig, MovingGradient, Phi, Teacher};
pub use losses::{Exponents, HeadTailFactor, LossGrad, LossKind, MfmConfig};
pub use rlc::{ClassStats, CorrectionRecord};
pub use trainer::{fit, Checkpoint, EpochLog, TrainConfig, Trainer, TrainerState, TriModel};
