//! Tamper and replay attacks against a node.
//!
//! Both attacks drive a `transfer` tool. Against a remote node only the status
//! codes are visible; the in-process variants also count tool invocations.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Map, Value};

use super::HarnessError;
use crate::client::{Client, ClientError, Exchange};
use crate::clock::{Clock, ManualClock};
use crate::envelope::{keygen, AgentIdentity, Envelope, Keystore};
use crate::node::{Node, NodeConfig, ToolOutcome};
use crate::semantic::{to_canonical_vec, Act};
use crate::transaction::ReplayConfig;
use crate::transport::{FrameClass, HandlerLoopback, TransportAdapter};

pub const TRANSFER_TOOL: &str = "transfer";
pub const HONEST_AMOUNT: u64 = 100;
pub const TAMPERED_AMOUNT: u64 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    Tamper,
    Replay,
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackKind::Tamper => "tamper",
            AttackKind::Replay => "replay",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AttackReport {
    pub attack: AttackKind,
    pub first_status: u16,
    pub second_status: u16,
    /// `None` when the target is remote and cannot be observed.
    pub tool_invocations: Option<u64>,
    pub pass: bool,
    pub note: String,
}

impl fmt::Display for AttackReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} attack: first={} second={} invocations={} => {}",
            self.attack,
            self.first_status,
            self.second_status,
            self.tool_invocations
                .map_or_else(|| "n/a".to_owned(), |n| n.to_string()),
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        if !self.note.is_empty() {
            write!(f, " ({})", self.note)?;
        }
        Ok(())
    }
}

pub fn transfer_params(amount: u64) -> Map<String, Value> {
    json!({"amount": amount, "from": "acct-alice", "to": "acct-mallory"})
        .as_object()
        .cloned()
        .expect("literal object")
}

/// Rewrites `payload.params.amount` in the signed claims, keeping the signature.
pub fn tamper_amount(envelope: &Envelope, amount: u64) -> Result<Envelope, HarnessError> {
    let mut claims: Value = serde_json::from_slice(envelope.claims_bytes())
        .map_err(|e| HarnessError::Unexpected(format!("claims are not JSON: {e}")))?;
    let slot = claims
        .pointer_mut("/payload/params/amount")
        .ok_or_else(|| HarnessError::Unexpected("claims carry no amount".into()))?;
    *slot = Value::from(amount);
    Ok(envelope.clone().with_claims_bytes(to_canonical_vec(&claims)))
}

fn transfer_envelope<T: TransportAdapter>(
    client: &mut Client<T>,
    target: &str,
) -> Result<Envelope, HarnessError> {
    let mut act = Act::new("intent-transfer", TRANSFER_TOOL);
    act.params = transfer_params(HONEST_AMOUNT);
    Ok(client.seal(target, act.into())?)
}

/// One send, no retries. Any reply, including a rejection, carries a status.
fn send_once<T: TransportAdapter>(
    client: &mut Client<T>,
    envelope: &Envelope,
    target: &str,
) -> Result<u16, HarnessError> {
    match client.exchange(envelope, FrameClass::Request, target) {
        Ok(Exchange::Reply(obs)) => obs.status_code().ok_or_else(|| {
            HarnessError::Unexpected("reply carries no status code".into())
        }),
        Ok(Exchange::TimedOut) => Err(HarnessError::HarnessTransportFailure(
            "no reply within the attempt timeout".into(),
        )),
        Err(ClientError::Transport(e)) => Err(HarnessError::HarnessTransportFailure(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

/// Valid transfer, then a second transfer whose amount is raised after signing.
/// PASS iff 200 then 403.
pub fn attack_tamper<T: TransportAdapter>(
    client: &mut Client<T>,
    target: &str,
) -> Result<AttackReport, HarnessError> {
    let honest = transfer_envelope(client, target)?;
    let first_status = send_once(client, &honest, target)?;
    let forged = tamper_amount(&transfer_envelope(client, target)?, TAMPERED_AMOUNT)?;
    let second_status = send_once(client, &forged, target)?;
    Ok(AttackReport {
        attack: AttackKind::Tamper,
        first_status,
        second_status,
        tool_invocations: None,
        pass: first_status == 200 && second_status == 403,
        note: String::new(),
    })
}

/// Valid transfer, then the byte-identical envelope again. PASS iff 200 then 409.
pub fn attack_replay<T: TransportAdapter>(
    client: &mut Client<T>,
    target: &str,
) -> Result<AttackReport, HarnessError> {
    let envelope = transfer_envelope(client, target)?;
    let first_status = send_once(client, &envelope, target)?;
    let second_status = send_once(client, &envelope, target)?;
    Ok(AttackReport {
        attack: AttackKind::Replay,
        first_status,
        second_status,
        tool_invocations: None,
        pass: first_status == 200 && second_status == 409,
        note: String::new(),
    })
}

/// Registers a `transfer` tool that counts its invocations.
pub fn register_transfer(node: &Node) -> Result<Arc<AtomicU64>, HarnessError> {
    let count = Arc::new(AtomicU64::new(0));
    let counter = Arc::clone(&count);
    node.register_tool(TRANSFER_TOOL, move |params: &Map<String, Value>, _: Option<f64>| {
        counter.fetch_add(1, Ordering::SeqCst);
        match params.get("amount").and_then(Value::as_u64) {
            Some(amount) => ToolOutcome::ok(json!({"transferred": amount})),
            None => ToolOutcome::error("amount must be a non-negative integer"),
        }
    })?;
    Ok(count)
}

/// A client wired straight into a fresh node, plus the node's transfer counter.
pub struct AttackBench {
    pub client: Client<HandlerLoopback<Arc<Node>>>,
    pub node: Arc<Node>,
    pub invocations: Arc<AtomicU64>,
}

impl AttackBench {
    pub fn new(config: NodeConfig) -> Result<Self, HarnessError> {
        Self::build(config, None)
    }

    fn build(config: NodeConfig, clocks: Option<(Arc<dyn Clock>, Arc<dyn Clock>)>) -> Result<Self, HarnessError> {
        let server = keygen("attack-server")?;
        let client_id = keygen("attack-client")?;
        let (node_keys, client_keys) = paired_keystores(&server, &client_id)?;
        let mut builder = Node::builder(server, node_keys)
            .config(config)
            .with_calculator(false);
        if let Some((node_clock, _)) = &clocks {
            builder = builder.clock(Arc::clone(node_clock));
        }
        let node = Arc::new(builder.build()?);
        let invocations = register_transfer(&node)?;
        let mut client = Client::new(HandlerLoopback::new(Arc::clone(&node)), client_id, client_keys)?;
        if let Some((_, client_clock)) = clocks {
            client = client.with_clock(client_clock);
        }
        Ok(AttackBench {
            client,
            node,
            invocations,
        })
    }

    pub fn target(&self) -> String {
        self.node.agent_id().to_owned()
    }

    pub fn run(&mut self, kind: AttackKind) -> Result<AttackReport, HarnessError> {
        let target = self.target();
        let before = self.invocations.load(Ordering::SeqCst);
        let mut report = match kind {
            AttackKind::Tamper => attack_tamper(&mut self.client, &target)?,
            AttackKind::Replay => attack_replay(&mut self.client, &target)?,
        };
        let count = self.invocations.load(Ordering::SeqCst) - before;
        report.tool_invocations = Some(count);
        report.pass &= count == 1;
        if count != 1 {
            report.note = format!("transfer executed {count} times");
        }
        Ok(report)
    }
}

fn paired_keystores(
    server: &AgentIdentity,
    client: &AgentIdentity,
) -> Result<(Keystore, Keystore), HarnessError> {
    let mut node_keys = Keystore::new();
    node_keys.insert(client.public_only())?;
    let mut client_keys = Keystore::new();
    client_keys.insert(server.public_only())?;
    Ok((node_keys, client_keys))
}

/// Runs one attack against a stock in-process node.
pub fn attack_loopback(kind: AttackKind) -> Result<AttackReport, HarnessError> {
    AttackBench::new(NodeConfig::default())?.run(kind)
}

/// Negative control: the same attack against a node with the matching defence off.
pub fn attack_loopback_undefended(kind: AttackKind) -> Result<AttackReport, HarnessError> {
    let mut config = NodeConfig::default();
    match kind {
        AttackKind::Tamper => config.verify_signatures = false,
        AttackKind::Replay => config.replay_protection = false,
    }
    AttackBench::new(config)?.run(kind)
}

/// Replays after the node has forgotten the transaction id.
///
/// The node keeps ids for exactly one freshness window. The attacker's clock
/// runs one window ahead, so the envelope is still fresh when its id is
/// evicted. Expected: 200 twice. This is the reason retention must cover
/// twice the freshness window.
pub fn attack_replay_after_retention(window: f64) -> Result<AttackReport, HarnessError> {
    let start = 1_700_000_000.0;
    let node_clock = Arc::new(ManualClock::new(start));
    let client_clock = Arc::new(ManualClock::new(start + window));
    let replay = ReplayConfig::new(window, window)
        .map_err(|e| HarnessError::Unexpected(e.to_string()))?;
    let config = NodeConfig {
        replay,
        ..NodeConfig::default()
    };
    let mut bench = AttackBench::build(
        config,
        Some((node_clock.clone() as Arc<dyn Clock>, client_clock as Arc<dyn Clock>)),
    )?;
    let target = bench.target();
    let envelope = transfer_envelope(&mut bench.client, &target)?;
    let first_status = send_once(&mut bench.client, &envelope, &target)?;
    node_clock.advance(window + 1.0);
    let second_status = send_once(&mut bench.client, &envelope, &target)?;
    let invocations = bench.invocations.load(Ordering::SeqCst);
    Ok(AttackReport {
        attack: AttackKind::Replay,
        first_status,
        second_status,
        tool_invocations: Some(invocations),
        pass: first_status == 200 && second_status == 409,
        note: format!(
            "policy: retention {window}s equals the freshness window; ids must be kept for at least twice the window to cover clock skew"
        ),
    })
}
