//! End-to-end runs: manifests, the four compared methods, JSON reports,
//! the global-versus-local comparison and the cached task service.

mod manifest;
mod report;
mod run;
mod serve;

pub use manifest::{CorpusConfig, Manifest, Method};
pub use report::{
    compare_local_global, compare_table, ClientScore, ClientSummary, CommSummary, CompareRow, ExperimentReport,
    MethodResult, PretrainSummary, RoundRecord, StageTraffic, SCHEMA_VERSION,
};
pub use run::{check_model, pretrain_from_manifest, run_experiment, with_threads, RunOptions, RunOutcome};
pub use serve::{parse_requests, serve_requests, train_task, ServeOutcome, TaskRequest};
