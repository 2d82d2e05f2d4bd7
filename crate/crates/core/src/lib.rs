//! Federated in-context learning by residual-stream injection.
//!
//! Clients turn labelled demonstrations into per-layer activation averages
//! ("context vectors"), a server averages those, and a handful of per-layer
//! injection coefficients are calibrated federally so that a frozen toy
//! transformer becomes task-adapted by one linear update of its residual
//! stream.
//!
//! Module map:
//!
//! - [`nn`]: the decoder-only transformer, activation capture, injection
//!   hooks, manual reverse-mode gradients, pretraining, checkpoints.
//! - [`task`]: tokenizer, templates, synthetic corpora and tasks, metrics.
//! - [`injection`]: demonstration/context vectors, injection coefficients,
//!   their wire formats, and the adapted inference handle.
//! - [`calibration`]: local optimisation of the coefficients.
//! - [`federation`]: Dirichlet partitioning, aggregation, the three-stage
//!   protocol over a byte-accounted in-process bus.
//! - [`store`]: task-record and context-vector stores with a
//!   lookup-or-train cache.
//! - [`experiment`]: manifests, end-to-end runs, reports, the task service.

pub mod calibration;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod injection;
pub mod nn;
pub mod store;
pub mod task;

pub use error::{Error, Result};
