//! Class-incremental learning by feature boosting and feature compression.
//!
//! Each new session freezes the current model, trains an extra branch that
//! fits the residual between the targets and the frozen model's output
//! ([`boosting`]), then distils the resulting two-branch model back into a
//! single backbone with class-balanced distillation ([`compression`]).
//! [`task_stream`] builds the incremental protocols and the rehearsal
//! memory; [`baselines`] and [`experiment`] provide the comparison methods
//! and the reproducible runner; [`gb_oracle`] is plain gradient boosting on
//! toy regression.

pub mod baselines;
pub mod boosting;
pub mod checkpoint;
pub mod compression;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gb_oracle;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod task_stream;
pub mod train;

pub use error::{Error, Result};
