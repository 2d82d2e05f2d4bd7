//! The three-stage protocol: Dirichlet partitioning, client and server
//! roles, averaging of context vectors and coefficients, and a serialized
//! in-process bus with byte-exact traffic accounting.

mod aggregate;
mod partition;
mod protocol;
mod wire;

pub use aggregate::{
    aggregate_coefficients, aggregate_coefficients_weighted, aggregate_context_vectors,
    aggregate_context_vectors_weighted, update_global_vector_incremental,
};
pub use partition::{partition_dirichlet, PartitionPlan};
pub use protocol::{Client, Federation, FederationConfig, LocalOnlyClient, RoundSummary, Server};
pub use wire::{
    Bus, CapturedMessage, CommLedger, Direction, LedgerRow, Message, MessageKind, Payload, Stage, Traffic,
    ENVELOPE_LEN, SERVER_ID,
};
