//! Granger causality discovery from multi-type event sequences.
//!
//! The crate provides:
//!
//! * [`eventseq`]: sequences, datasets, JSON-lines I/O and splits;
//! * [`simulate`]: Ogata-thinning Hawkes and proximal graphical event model
//!   generators with ground-truth matrices;
//! * [`graddiff`]: a tensor tape for exact gradients plus a finite-difference
//!   checker;
//! * [`mhp`]: the exponential-kernel multivariate Hawkes baseline;
//! * [`isahp`]: the instance-wise self-attentive Hawkes model and its
//!   regularized likelihood;
//! * [`trainer`]: Adam with clipping, mini-batches and early stopping;
//! * [`causality`]: instance-level attribution, type-level aggregation and
//!   synergy analysis;
//! * [`metrics`]: AUC, Kendall's tau-b, next-type accuracy and reports.

pub mod causality;
pub mod error;
pub mod eventseq;
pub mod graddiff;
pub mod isahp;
pub mod metrics;
pub mod mhp;
pub mod simulate;
pub mod trainer;

pub use causality::{aggregate, attribute, hexp_attribution, synergy_ratio, AttributionResult};
pub use eventseq::{load_jsonl, save_jsonl, split, CausalMatrix, Dataset, Event, EventSequence, Split};
pub use graddiff::{grad_check, ParamStore, Tape, Tensor};
pub use isahp::{CompensatorMode, IsahpConfig, IsahpModel, QueryTime};
pub use error::ModelError;
pub use metrics::{auc, kendall_tau, EvalReport};
pub use mhp::{fit_hexp, HexpConfig, HexpModel};
pub use simulate::{simulate_mhp, simulate_pgem, MhpParams, PgemSpec, SimConfig};
pub use trainer::{train, Objective, TrainConfig, TrainReport};
