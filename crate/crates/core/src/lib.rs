//! LACP: a layered protocol for agents calling each other's tools.
//!
//! Messages are PLAN, ACT or OBSERVE payloads ([`semantic`]), wrapped in
//! signed claims ([`envelope`]), deduplicated and optionally committed
//! atomically ([`transaction`]), and carried in length-prefixed binary frames
//! ([`transport`]). [`node`] and [`client`] put the layers together.

pub mod client;
pub mod clock;
pub mod envelope;
pub mod harness;
pub mod node;
pub mod semantic;
pub mod transaction;
pub mod transport;

pub use client::{Client, ClientError, Observation, RetryPolicy, ScriptStep, Transcript};
pub use envelope::{
    compact_decode, compact_encode, keygen, sign_envelope, verify_envelope, AgentIdentity,
    Envelope, EnvelopeClaims, EnvelopeError, Keystore, TransactionId,
};
pub use node::{Node, NodeConfig, Status, ToolOutcome};
pub use semantic::{decode_payload, encode_payload, Act, Observe, Plan, SemanticPayload};
pub use transport::{Frame, FrameClass};

/// Exact rational arithmetic; what the `calculator` tool uses.
pub type ExactCalculator = node::Calculator<num_rational::BigRational>;
pub type FloatCalculator = node::Calculator<f64>;
pub type Float32Calculator = node::Calculator<f32>;
