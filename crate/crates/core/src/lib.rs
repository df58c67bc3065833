//! Gradient-based adversarial attacks on a self-contained backprop core.
//!
//! The crate is organized around five pieces:
//! - [`tensor`] and [`nn`]: dense f64 tensors and reverse-mode gradients
//!   for a fixed layer set (dense, conv, ReLU, max-pool, flatten);
//! - [`model`]: a small classifier catalog with SGD training, FGSM
//!   adversarial training, and ADVW serialization;
//! - [`attack`]: FGSM, I-FGSM, PGD, MI-FGSM, NI-FGSM and the Adam
//!   iterative method, plus ensemble logit fusion;
//! - [`data`] and [`digits`]: IDX ingestion, candidate selection, and a
//!   procedural digit set for self-contained experiments;
//! - [`eval`]: success-rate matrices, parameter sweeps, and CSV/JSON
//!   reports.

pub mod attack;
pub mod container;
pub mod data;
pub mod digits;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod tensor;

pub use attack::{AttackConfig, AttackMethod, Ensemble, GradSource};
pub use data::{Dataset, LabeledImage};
pub use error::{Error, Result};
pub use eval::{EvalReport, ReportFormat, ReportRow};
pub use model::{Arch, Model, ModelSpec, TrainMeta, TrainOptions};
pub use tensor::Tensor;
