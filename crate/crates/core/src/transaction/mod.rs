//! Idempotency and atomic commitment.
//!
//! Two-phase-commit control messages ride inside ordinary ACT payloads whose
//! `tool_call` is one of the reserved `__txn.*` names, with parameters
//! `{txn_id, vote?, body?}`.

mod replay;
mod twopc;

use serde_json::{Map, Value};

use crate::envelope::TransactionId;
use crate::semantic::{validate_payload, Act, SemanticPayload};

pub use replay::{
    ReplayConfig, ReplayConfigError, ReplayGuard, ReplayVerdict, DEFAULT_FRESHNESS_WINDOW_SECS,
    DEFAULT_RETENTION_SECS,
};
pub use twopc::{
    ControlKind, Coordinator, CoordinatorEvent, CoordinatorState, Outgoing, Participant,
    ParticipantState, TxnControlMessage, TxnError, TxnResource, Vote,
    DEFAULT_PREPARE_TIMEOUT_SECS,
};

/// Tool names starting with this prefix belong to the transaction layer.
pub const RESERVED_TOOL_PREFIX: &str = "__txn.";

pub const TOOL_PREPARE: &str = "__txn.prepare";
pub const TOOL_VOTE: &str = "__txn.vote";
pub const TOOL_COMMIT: &str = "__txn.commit";
pub const TOOL_ABORT: &str = "__txn.abort";
pub const TOOL_ACK: &str = "__txn.ack";

pub fn is_reserved_tool(name: &str) -> bool {
    name.starts_with(RESERVED_TOOL_PREFIX)
}

impl TxnControlMessage {
    pub fn tool_call(&self) -> &'static str {
        match self.kind {
            ControlKind::Prepare => TOOL_PREPARE,
            ControlKind::Vote(_) => TOOL_VOTE,
            ControlKind::Commit => TOOL_COMMIT,
            ControlKind::Abort => TOOL_ABORT,
            ControlKind::Ack => TOOL_ACK,
        }
    }

    pub fn params(&self) -> Map<String, Value> {
        let mut params = Map::new();
        params.insert("txn_id".into(), self.txn_id.as_str().into());
        if let ControlKind::Vote(vote) = self.kind {
            let v = match vote {
                Vote::Yes => "yes",
                Vote::No => "no",
            };
            params.insert("vote".into(), v.into());
        }
        if let Some(body) = &self.body {
            params.insert("body".into(), SemanticPayload::Act(body.clone()).to_value());
        }
        params
    }

    /// The ACT payload carrying this message; its intent id is the transaction id.
    pub fn to_act(&self) -> Act {
        let mut act = Act::new(self.txn_id.as_str(), self.tool_call());
        act.params = self.params();
        act
    }

    pub fn from_act(act: &Act) -> Result<Self, TxnError> {
        Self::from_parts(&act.tool_call, &act.params)
    }

    pub fn from_parts(tool_call: &str, params: &Map<String, Value>) -> Result<Self, TxnError> {
        let bad = |m: &str| TxnError::Malformed(m.to_owned());
        let txn_id = params
            .get("txn_id")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("txn_id missing"))?;
        let txn_id = TransactionId::parse(txn_id).map_err(|e| bad(&e.to_string()))?;
        let kind = match tool_call {
            TOOL_PREPARE => ControlKind::Prepare,
            TOOL_VOTE => match params.get("vote").and_then(Value::as_str) {
                Some("yes") => ControlKind::Vote(Vote::Yes),
                Some("no") => ControlKind::Vote(Vote::No),
                _ => return Err(bad("vote must be \"yes\" or \"no\"")),
            },
            TOOL_COMMIT => ControlKind::Commit,
            TOOL_ABORT => ControlKind::Abort,
            TOOL_ACK => ControlKind::Ack,
            other => return Err(TxnError::Malformed(format!("{other:?} is not a control tool"))),
        };
        let body = match params.get("body") {
            None | Some(Value::Null) => None,
            Some(raw) => match validate_payload(raw) {
                Ok(SemanticPayload::Act(act)) => Some(act),
                Ok(other) => {
                    return Err(TxnError::Malformed(format!(
                        "body must be an ACT, got {}",
                        other.message_type()
                    )))
                }
                Err(e) => return Err(TxnError::Malformed(format!("body: {e}"))),
            },
        };
        if kind == ControlKind::Prepare && body.is_none() {
            return Err(bad("prepare requires a body"));
        }
        Ok(TxnControlMessage { kind, txn_id, body })
    }

    /// Structured form used in OBSERVE outputs.
    pub fn to_value(&self) -> Value {
        let mut map = self.params();
        map.insert("kind".into(), self.tool_call().into());
        Value::Object(map)
    }

    pub fn from_value(value: &Value) -> Result<Self, TxnError> {
        let map = value
            .as_object()
            .ok_or_else(|| TxnError::Malformed("control message is not an object".into()))?;
        let kind = map
            .get("kind")
            .and_then(Value::as_str)
            .ok_or_else(|| TxnError::Malformed("kind missing".into()))?;
        Self::from_parts(kind, map)
    }
}
