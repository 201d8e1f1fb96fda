//! Reference tool server.
//!
//! Every request frame goes through the same fixed pipeline:
//!
//! 1. compact-decode the envelope (400 on failure)
//! 2. verify signer and signature over the received bytes (403)
//! 3. replay check on the transaction id (409 duplicate, 400 stale)
//! 4. require an ACT addressed to this node (400)
//! 5. look the tool up (404)
//! 6. enforce the deadline before and after running the tool (504)
//! 7. reply with a signed OBSERVE (200)
//!
//! Every reply, error or not, is a signed OBSERVE whose `status_code`
//! extension field carries the numeric code. No tool runs for a request that
//! fails steps 1 to 5.

mod calculator;
mod registry;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use serde_json::Value;

use crate::clock::{Clock, SystemClock};
use crate::envelope::{
    compact_decode, sign_envelope, verify_envelope, AgentIdentity, Envelope, EnvelopeClaims,
    EnvelopeError, Keystore, TransactionId,
};
use crate::semantic::{Act, Observe, ObserveStatus, SemanticPayload};
use crate::transaction::{
    is_reserved_tool, Participant, ParticipantState, ReplayConfig, ReplayGuard, ReplayVerdict,
    TxnControlMessage, TxnError, TxnResource,
};
use crate::transport::{Frame, FrameClass, FrameHandler};

pub use calculator::{CalcError, Calculator, Scalar};
pub use registry::{builtin_calculator, RegistryError, ToolHandler, ToolOutcome, ToolRegistry};

/// Extension field of OBSERVE replies holding the numeric status.
pub const STATUS_CODE_FIELD: &str = "status_code";
/// Placeholder for correlation fields that could not be recovered from a request.
pub const UNKNOWN_PEER: &str = "unknown";

/// Protocol status codes, numbered after their HTTP namesakes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Ok,
    BadRequest,
    Forbidden,
    NotFound,
    Conflict,
    GatewayTimeout,
}

impl Status {
    pub fn code(self) -> u16 {
        match self {
            Status::Ok => 200,
            Status::BadRequest => 400,
            Status::Forbidden => 403,
            Status::NotFound => 404,
            Status::Conflict => 409,
            Status::GatewayTimeout => 504,
        }
    }

    pub fn from_code(code: u16) -> Option<Self> {
        Some(match code {
            200 => Status::Ok,
            400 => Status::BadRequest,
            403 => Status::Forbidden,
            404 => Status::NotFound,
            409 => Status::Conflict,
            504 => Status::GatewayTimeout,
            _ => return None,
        })
    }
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.code())
    }
}

/// Reads the status code out of an OBSERVE reply.
pub fn observe_status_code(observe: &Observe) -> Option<u16> {
    observe
        .extensions
        .get(STATUS_CODE_FIELD)
        .and_then(Value::as_u64)
        .and_then(|c| u16::try_from(c).ok())
}

#[derive(Debug, Clone, Copy)]
pub struct NodeConfig {
    pub replay: ReplayConfig,
    /// Off only in negative-control harness runs.
    pub verify_signatures: bool,
    /// Off only in negative-control harness runs.
    pub replay_protection: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            replay: ReplayConfig::default(),
            verify_signatures: true,
            replay_protection: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NodeResponse {
    pub status: Status,
    pub envelope: Envelope,
}

impl NodeResponse {
    pub fn status_code(&self) -> u16 {
        self.status.code()
    }

    /// The OBSERVE inside the reply, read without verifying it.
    pub fn observe(&self) -> Option<Observe> {
        match self.envelope.unverified_claims().ok()?.payload {
            SemanticPayload::Observe(o) => Some(o),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error("node identity {0:?} has no private key")]
    NoPrivateKey(String),
}

pub struct NodeBuilder {
    identity: AgentIdentity,
    keystore: Keystore,
    config: NodeConfig,
    clock: Arc<dyn Clock>,
    guard: Option<ReplayGuard>,
    calculator: bool,
}

impl NodeBuilder {
    pub fn config(mut self, config: NodeConfig) -> Self {
        self.config = config;
        self
    }

    pub fn clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    /// Uses a prepared guard (e.g. one backed by a snapshot file) instead of
    /// an in-memory one built from the config.
    pub fn replay_guard(mut self, guard: ReplayGuard) -> Self {
        self.guard = Some(guard);
        self
    }

    /// Registers the built-in `calculator` tool. On by default.
    pub fn with_calculator(mut self, enabled: bool) -> Self {
        self.calculator = enabled;
        self
    }

    pub fn build(self) -> Result<Node, NodeError> {
        if !self.identity.has_private_key() {
            return Err(NodeError::NoPrivateKey(self.identity.agent_id().to_owned()));
        }
        let registry = ToolRegistry::new();
        if self.calculator {
            registry
                .register("calculator", builtin_calculator)
                .expect("empty registry accepts calculator");
        }
        let guard = self
            .guard
            .unwrap_or_else(|| ReplayGuard::new(self.config.replay));
        Ok(Node {
            identity: self.identity,
            keystore: RwLock::new(self.keystore),
            guard,
            registry,
            clock: self.clock,
            config: self.config,
            outgoing_seq: Mutex::new(HashMap::new()),
            incoming_seq: Mutex::new(HashMap::new()),
            txns: Mutex::new(TxnTable::default()),
        })
    }
}

#[derive(Default)]
struct TxnTable {
    participants: HashMap<TransactionId, Participant>,
    /// tool name → prepared transaction holding it
    locks: HashMap<String, TransactionId>,
}

struct Reply {
    status: Status,
    outcome: ToolOutcome,
}

impl Reply {
    fn reject(status: Status, message: impl Into<String>) -> Self {
        let outcome = if status == Status::GatewayTimeout {
            ToolOutcome::timeout(message)
        } else {
            ToolOutcome::error(message)
        };
        Reply { status, outcome }
    }
}

/// Correlation data pulled out of a request, trusted or not.
struct Peer {
    sender: String,
    intent_id: String,
    transaction_id: String,
}

impl Peer {
    fn unknown() -> Self {
        Peer {
            sender: UNKNOWN_PEER.into(),
            intent_id: UNKNOWN_PEER.into(),
            transaction_id: String::new(),
        }
    }

    /// Best effort from unverified bytes; used only to address the reply.
    fn sniff(envelope: &Envelope) -> Self {
        let mut peer = Peer::unknown();
        let Ok(value) = serde_json::from_slice::<Value>(envelope.claims_bytes()) else {
            return peer;
        };
        let usable = |s: &str| !s.is_empty() && s.len() <= crate::semantic::MAX_INTENT_ID_BYTES;
        if let Some(s) = value.get("sender").and_then(Value::as_str).filter(|s| usable(s)) {
            peer.sender = s.to_owned();
        }
        if let Some(s) = value
            .pointer("/payload/intent_id")
            .and_then(Value::as_str)
            .filter(|s| usable(s))
        {
            peer.intent_id = s.to_owned();
        }
        if let Some(s) = value.get("transaction_id").and_then(Value::as_str) {
            peer.transaction_id = s.chars().take(64).collect();
        }
        peer
    }
}

pub struct Node {
    identity: AgentIdentity,
    keystore: RwLock<Keystore>,
    guard: ReplayGuard,
    registry: ToolRegistry,
    clock: Arc<dyn Clock>,
    config: NodeConfig,
    outgoing_seq: Mutex<HashMap<String, u64>>,
    incoming_seq: Mutex<HashMap<String, u64>>,
    txns: Mutex<TxnTable>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("agent_id", &self.identity.agent_id())
            .field("config", &self.config)
            .field("registry", &self.registry)
            .finish_non_exhaustive()
    }
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(std::sync::PoisonError::into_inner)
}

impl Node {
    pub fn builder(identity: AgentIdentity, keystore: Keystore) -> NodeBuilder {
        NodeBuilder {
            identity,
            keystore,
            config: NodeConfig::default(),
            clock: Arc::new(SystemClock),
            guard: None,
            calculator: true,
        }
    }

    pub fn agent_id(&self) -> &str {
        self.identity.agent_id()
    }

    /// The node's identity without its private key.
    pub fn public_identity(&self) -> AgentIdentity {
        self.identity.public_only()
    }

    pub fn config(&self) -> NodeConfig {
        self.config
    }

    pub fn registry(&self) -> &ToolRegistry {
        &self.registry
    }

    pub fn replay_guard(&self) -> &ReplayGuard {
        &self.guard
    }

    pub fn register_tool(
        &self,
        name: impl Into<String>,
        handler: impl ToolHandler + 'static,
    ) -> Result<(), RegistryError> {
        self.registry.register(name, handler)
    }

    /// Adds or replaces a peer key.
    pub fn trust(&self, identity: AgentIdentity) {
        self.keystore
            .write()
            .unwrap_or_else(std::sync::PoisonError::into_inner)
            .upsert(identity.public_only());
    }

    /// State of this node's participant for a two-phase-commit transaction.
    pub fn participant_state(&self, txn_id: &TransactionId) -> Option<ParticipantState> {
        lock(&self.txns).participants.get(txn_id).map(Participant::state)
    }

    pub fn handle_frame(&self, frame: &Frame) -> NodeResponse {
        self.handle_frame_at(frame, self.clock.now())
    }

    pub fn handle_frame_at(&self, frame: &Frame, now: f64) -> NodeResponse {
        let started = Instant::now();
        let mut peer = Peer::unknown();
        let reply = self.process(frame, now, started, &mut peer);
        let response = self.respond(&peer, reply, now);
        log::info!(
            target: "lacp::node",
            "ts={now:.3} sender={} transaction_id={} status_code={} latency_us={}",
            peer.sender,
            if peer.transaction_id.is_empty() { "-" } else { &peer.transaction_id },
            response.status.code(),
            started.elapsed().as_micros()
        );
        response
    }

    fn process(&self, frame: &Frame, now: f64, started: Instant, peer: &mut Peer) -> Reply {
        if frame.class == FrameClass::Response {
            return Reply::reject(Status::BadRequest, "response frames are not accepted");
        }

        // 1. decode
        let envelope = match std::str::from_utf8(&frame.body)
            .map_err(|e| EnvelopeError::MalformedEnvelope(e.to_string()))
            .and_then(compact_decode)
        {
            Ok(e) => e,
            Err(e) => return Reply::reject(Status::BadRequest, e.to_string()),
        };
        *peer = Peer::sniff(&envelope);

        // 2. verify
        let claims = if self.config.verify_signatures {
            let keystore = self.keystore.read().unwrap_or_else(std::sync::PoisonError::into_inner);
            match verify_envelope(&envelope, &keystore) {
                Ok(c) => c,
                Err(e @ (EnvelopeError::UnknownKey(_) | EnvelopeError::SignatureMismatch)) => {
                    log::warn!(target: "lacp::node", "rejecting envelope from {}: {e}", peer.sender);
                    return Reply::reject(Status::Forbidden, e.to_string());
                }
                Err(e) => return Reply::reject(Status::BadRequest, e.to_string()),
            }
        } else {
            match envelope.unverified_claims() {
                Ok(c) => c,
                Err(e) => return Reply::reject(Status::BadRequest, e.to_string()),
            }
        };

        // 3. replay
        if self.config.replay_protection {
            match self.guard.check_and_record(&claims, now) {
                ReplayVerdict::Accepted => {}
                ReplayVerdict::Duplicate => {
                    return Reply::reject(
                        Status::Conflict,
                        format!("transaction {} already processed", claims.transaction_id),
                    )
                }
                ReplayVerdict::Stale => {
                    return Reply::reject(Status::BadRequest, "timestamp outside freshness window")
                }
            }
        }
        self.note_sequence(&claims);

        // 4. grammar
        let SemanticPayload::Act(act) = &claims.payload else {
            return Reply::reject(
                Status::BadRequest,
                format!("expected ACT, got {}", claims.payload.message_type()),
            );
        };
        if claims.recipient != self.agent_id() {
            return Reply::reject(
                Status::BadRequest,
                format!("envelope is addressed to {:?}", claims.recipient),
            );
        }

        if is_reserved_tool(&act.tool_call) {
            return self.handle_control(act);
        }

        // 5. lookup
        let Some(tool) = self.registry.get(&act.tool_call) else {
            return Reply::reject(Status::NotFound, format!("no tool named {:?}", act.tool_call));
        };
        if let Some(holder) = lock(&self.txns).locks.get(&act.tool_call) {
            return Reply::reject(
                Status::Conflict,
                format!("{:?} is held by prepared transaction {holder}", act.tool_call),
            );
        }

        // 6. deadline, 7. run
        let deadline = act.deadline_secs();
        if let Some(d) = deadline {
            if now > d {
                return Reply::reject(Status::GatewayTimeout, "deadline passed before execution");
            }
        }
        let outcome = tool.call(&act.params, deadline);
        if let Some(d) = deadline {
            if now + started.elapsed().as_secs_f64() > d {
                return Reply::reject(Status::GatewayTimeout, "deadline passed during execution");
            }
        }
        let status = match outcome.status {
            ObserveStatus::Ok => Status::Ok,
            ObserveStatus::Error => Status::BadRequest,
            ObserveStatus::Timeout => Status::GatewayTimeout,
        };
        Reply { status, outcome }
    }

    fn note_sequence(&self, claims: &EnvelopeClaims) {
        let mut seen = lock(&self.incoming_seq);
        if let Some(last) = seen.get(&claims.sender) {
            if claims.sequence != last + 1 {
                log::debug!(
                    target: "lacp::node",
                    "sequence gap from {}: {} after {}",
                    claims.sender,
                    claims.sequence,
                    last
                );
            }
        }
        let entry = seen.entry(claims.sender.clone()).or_insert(claims.sequence);
        *entry = (*entry).max(claims.sequence);
    }

    fn handle_control(&self, act: &Act) -> Reply {
        let message = match TxnControlMessage::from_act(act) {
            Ok(m) => m,
            Err(e) => return Reply::reject(Status::BadRequest, e.to_string()),
        };
        let mut table = lock(&self.txns);
        let TxnTable {
            participants,
            locks,
        } = &mut *table;
        let participant = participants
            .entry(message.txn_id.clone())
            .or_insert_with(|| Participant::new(message.txn_id.clone()));
        let mut resource = NodeResource {
            registry: &self.registry,
            locks,
            txn_id: &message.txn_id,
        };
        let result = participant.step(&message, &mut resource);
        match participant.state() {
            ParticipantState::Prepared => {
                if let Some(body) = participant.pending() {
                    locks.insert(body.tool_call.clone(), message.txn_id.clone());
                }
            }
            ParticipantState::Committed | ParticipantState::Aborted => {
                locks.retain(|_, holder| *holder != message.txn_id);
            }
            ParticipantState::Idle => {}
        }
        match result {
            Ok(Some(reply)) => Reply {
                status: Status::Ok,
                outcome: ToolOutcome::ok(reply.to_value()),
            },
            Ok(None) => Reply {
                status: Status::Ok,
                outcome: ToolOutcome::ok(Value::Null),
            },
            Err(e @ TxnError::Malformed(_)) => Reply::reject(Status::BadRequest, e.to_string()),
            Err(e) => Reply::reject(Status::Conflict, e.to_string()),
        }
    }

    fn respond(&self, peer: &Peer, reply: Reply, now: f64) -> NodeResponse {
        let mut extensions = BTreeMap::new();
        extensions.insert(STATUS_CODE_FIELD.into(), Value::from(reply.status.code()));
        let observe = Observe {
            intent_id: peer.intent_id.clone(),
            status: reply.outcome.status,
            output: reply.outcome.output,
            metrics: reply.outcome.metrics,
            extensions,
        };
        let sequence = {
            let mut seqs = lock(&self.outgoing_seq);
            let next = seqs.entry(peer.sender.clone()).or_insert(0);
            let current = *next;
            *next += 1;
            current
        };
        let claims = EnvelopeClaims {
            sender: self.agent_id().to_owned(),
            recipient: peer.sender.clone(),
            transaction_id: TransactionId::new_random(),
            sequence,
            timestamp: now.max(1.0) as u64,
            payload: SemanticPayload::Observe(observe),
        };
        let envelope =
            sign_envelope(&claims, &self.identity).expect("node identity holds a private key");
        NodeResponse {
            status: reply.status,
            envelope,
        }
    }
}

struct NodeResource<'a> {
    registry: &'a ToolRegistry,
    locks: &'a HashMap<String, TransactionId>,
    txn_id: &'a TransactionId,
}

impl TxnResource for NodeResource<'_> {
    fn can_execute(&self, body: &Act) -> bool {
        !is_reserved_tool(&body.tool_call)
            && self.registry.contains(&body.tool_call)
            && self
                .locks
                .get(&body.tool_call)
                .is_none_or(|holder| holder == self.txn_id)
    }

    fn apply(&mut self, body: &Act) {
        if let Some(tool) = self.registry.get(&body.tool_call) {
            let outcome = tool.call(&body.params, body.deadline_secs());
            log::info!(
                target: "lacp::node",
                "committed txn {} applied {}: {:?}",
                self.txn_id,
                body.tool_call,
                outcome.status
            );
        }
    }
}

impl FrameHandler for Node {
    fn handle(&self, frame: Frame) -> Option<Frame> {
        let class = match frame.class {
            FrameClass::TxnControl => FrameClass::TxnControl,
            _ => FrameClass::Response,
        };
        let response = self.handle_frame(&frame);
        let body = crate::envelope::compact_encode(&response.envelope);
        Some(Frame::new(class, body.into_bytes()))
    }
}
