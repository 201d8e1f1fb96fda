//! Desk-scale experiments: benchmark, attack simulator, 2PC fault runner.

mod attack;
mod bench;
mod fixtures;
mod txn_sim;

use thiserror::Error;

pub use attack::{
    attack_loopback, attack_loopback_undefended, attack_replay, attack_replay_after_retention,
    attack_tamper, register_transfer, tamper_amount, transfer_params, AttackBench, AttackKind,
    AttackReport, HONEST_AMOUNT, TAMPERED_AMOUNT, TRANSFER_TOOL,
};
pub use bench::{
    bench_default, bench_run, overhead_pct, BenchReport, LatencySummary, ScenarioReport,
    MAX_SCENARIO_BYTES,
};
pub use fixtures::{
    default_scenarios, large_payload, medium_payload, small_payload, Scenario, LARGE_BYTES,
    MEDIUM_BYTES, SMALL_BYTES,
};
pub use txn_sim::{
    txn_fault_run, FaultSpec, FaultSpecError, Outcome, ParticipantReport, TxnReport, TxnSimConfig,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("scenario {scenario:?} payload is {bytes} bytes, too large to frame")]
    ScenarioTooLarge { scenario: String, bytes: usize },
    #[error("transport failure: {0}")]
    HarnessTransportFailure(String),
    #[error(transparent)]
    Envelope(#[from] crate::envelope::EnvelopeError),
    #[error(transparent)]
    Client(Box<crate::client::ClientError>),
    #[error(transparent)]
    Registry(#[from] crate::node::RegistryError),
    #[error(transparent)]
    Node(#[from] crate::node::NodeError),
    #[error("{0}")]
    Unexpected(String),
}

impl From<crate::transport::TransportError> for HarnessError {
    fn from(e: crate::transport::TransportError) -> Self {
        HarnessError::HarnessTransportFailure(e.to_string())
    }
}

impl From<crate::client::ClientError> for HarnessError {
    fn from(e: crate::client::ClientError) -> Self {
        HarnessError::Client(Box::new(e))
    }
}
