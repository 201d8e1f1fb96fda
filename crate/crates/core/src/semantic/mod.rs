//! The PLAN / ACT / OBSERVE message grammar.
//!
//! Payloads travel as JSON objects with a top-level `"type"` tag. Each variant
//! has a fixed set of mandatory fields; optional fields are kept verbatim and
//! any field the grammar does not know about is carried through in
//! `extensions` untouched.

mod canonical;

use std::collections::BTreeMap;
use std::fmt;

use serde_json::{Map, Number, Value};
use thiserror::Error;

pub use canonical::to_canonical_vec;

/// Longest accepted `intent_id`, in bytes.
pub const MAX_INTENT_ID_BYTES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SemanticError {
    #[error("payload is not valid structured text: {0}")]
    Parse(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("missing mandatory field {0:?}")]
    MissingField(&'static str),
    #[error("malformed field {field:?}: {reason}")]
    MalformedField { field: &'static str, reason: String },
}

fn malformed(field: &'static str, reason: impl Into<String>) -> SemanticError {
    SemanticError::MalformedField {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageType {
    Plan,
    Act,
    Observe,
}

impl MessageType {
    pub const ALL: [MessageType; 3] = [MessageType::Plan, MessageType::Act, MessageType::Observe];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::Plan => "PLAN",
            MessageType::Act => "ACT",
            MessageType::Observe => "OBSERVE",
        }
    }

    pub fn parse(tag: &str) -> Result<Self, SemanticError> {
        match tag {
            "PLAN" => Ok(MessageType::Plan),
            "ACT" => Ok(MessageType::Act),
            "OBSERVE" => Ok(MessageType::Observe),
            other => Err(SemanticError::UnknownType(other.to_owned())),
        }
    }

    /// Mandatory fields besides `type`, in the order they are checked.
    pub fn mandatory_fields(self) -> &'static [&'static str] {
        match self {
            MessageType::Plan => &["intent_id", "role", "natural_language"],
            MessageType::Act => &["intent_id", "tool_call", "params"],
            MessageType::Observe => &["intent_id", "status", "output"],
        }
    }

    pub fn optional_fields(self) -> &'static [&'static str] {
        match self {
            MessageType::Plan => &["graph_ops"],
            MessageType::Act => &["deadline", "cost_cap"],
            MessageType::Observe => &["metrics"],
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome reported by an OBSERVE message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObserveStatus {
    Ok,
    Error,
    Timeout,
}

impl ObserveStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ObserveStatus::Ok => "ok",
            ObserveStatus::Error => "error",
            ObserveStatus::Timeout => "timeout",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(ObserveStatus::Ok),
            "error" => Some(ObserveStatus::Error),
            "timeout" => Some(ObserveStatus::Timeout),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub intent_id: String,
    pub role: String,
    pub natural_language: String,
    /// Opaque; never inspected.
    pub graph_ops: Option<Value>,
    pub extensions: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Act {
    pub intent_id: String,
    pub tool_call: String,
    pub params: Map<String, Value>,
    /// Absolute deadline in seconds since the Unix epoch, kept as received.
    pub deadline: Option<Number>,
    /// Dimensionless, non-negative.
    pub cost_cap: Option<Number>,
    pub extensions: BTreeMap<String, Value>,
}

impl Act {
    pub fn new(intent_id: impl Into<String>, tool_call: impl Into<String>) -> Self {
        Act {
            intent_id: intent_id.into(),
            tool_call: tool_call.into(),
            params: Map::new(),
            deadline: None,
            cost_cap: None,
            extensions: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<Value>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    pub fn deadline_secs(&self) -> Option<f64> {
        self.deadline.as_ref().and_then(Number::as_f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observe {
    pub intent_id: String,
    pub status: ObserveStatus,
    pub output: Value,
    pub metrics: Option<BTreeMap<String, Number>>,
    pub extensions: BTreeMap<String, Value>,
}

/// A validated semantic-layer message.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticPayload {
    Plan(Plan),
    Act(Act),
    Observe(Observe),
}

impl SemanticPayload {
    pub fn message_type(&self) -> MessageType {
        match self {
            SemanticPayload::Plan(_) => MessageType::Plan,
            SemanticPayload::Act(_) => MessageType::Act,
            SemanticPayload::Observe(_) => MessageType::Observe,
        }
    }

    pub fn intent_id(&self) -> &str {
        match self {
            SemanticPayload::Plan(p) => &p.intent_id,
            SemanticPayload::Act(a) => &a.intent_id,
            SemanticPayload::Observe(o) => &o.intent_id,
        }
    }

    pub fn as_act(&self) -> Option<&Act> {
        match self {
            SemanticPayload::Act(a) => Some(a),
            _ => None,
        }
    }

    pub fn as_observe(&self) -> Option<&Observe> {
        match self {
            SemanticPayload::Observe(o) => Some(o),
            _ => None,
        }
    }

    /// The payload as a JSON object, extensions included.
    pub fn to_value(&self) -> Value {
        let mut map = Map::new();
        let extensions = match self {
            SemanticPayload::Plan(p) => {
                map.insert("intent_id".into(), p.intent_id.clone().into());
                map.insert("role".into(), p.role.clone().into());
                map.insert("natural_language".into(), p.natural_language.clone().into());
                if let Some(ops) = &p.graph_ops {
                    map.insert("graph_ops".into(), ops.clone());
                }
                &p.extensions
            }
            SemanticPayload::Act(a) => {
                map.insert("intent_id".into(), a.intent_id.clone().into());
                map.insert("tool_call".into(), a.tool_call.clone().into());
                map.insert("params".into(), Value::Object(a.params.clone()));
                if let Some(d) = &a.deadline {
                    map.insert("deadline".into(), Value::Number(d.clone()));
                }
                if let Some(c) = &a.cost_cap {
                    map.insert("cost_cap".into(), Value::Number(c.clone()));
                }
                &a.extensions
            }
            SemanticPayload::Observe(o) => {
                map.insert("intent_id".into(), o.intent_id.clone().into());
                map.insert("status".into(), o.status.as_str().into());
                map.insert("output".into(), o.output.clone());
                if let Some(metrics) = &o.metrics {
                    let m = metrics
                        .iter()
                        .map(|(k, v)| (k.clone(), Value::Number(v.clone())))
                        .collect();
                    map.insert("metrics".into(), Value::Object(m));
                }
                &o.extensions
            }
        };
        for (k, v) in extensions {
            map.entry(k.clone()).or_insert_with(|| v.clone());
        }
        map.insert("type".into(), self.message_type().as_str().into());
        Value::Object(map)
    }
}

impl From<Plan> for SemanticPayload {
    fn from(p: Plan) -> Self {
        SemanticPayload::Plan(p)
    }
}

impl From<Act> for SemanticPayload {
    fn from(a: Act) -> Self {
        SemanticPayload::Act(a)
    }
}

impl From<Observe> for SemanticPayload {
    fn from(o: Observe) -> Self {
        SemanticPayload::Observe(o)
    }
}

/// Checks a parsed value against the grammar and returns the typed payload.
pub fn validate_payload(raw: &Value) -> Result<SemanticPayload, SemanticError> {
    let obj = raw
        .as_object()
        .ok_or_else(|| malformed("type", "payload is not an object"))?;
    let tag = match obj.get("type") {
        None | Some(Value::Null) => return Err(SemanticError::MissingField("type")),
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(malformed("type", "not a string")),
    };
    let kind = MessageType::parse(tag)?;

    let mut fields = Fields { obj };
    let intent_id = fields.string("intent_id")?;
    if intent_id.len() > MAX_INTENT_ID_BYTES {
        return Err(malformed(
            "intent_id",
            format!("{} bytes exceeds {MAX_INTENT_ID_BYTES}", intent_id.len()),
        ));
    }

    let payload = match kind {
        MessageType::Plan => SemanticPayload::Plan(Plan {
            intent_id,
            role: fields.string("role")?,
            natural_language: fields.string("natural_language")?,
            graph_ops: fields.optional("graph_ops").cloned(),
            extensions: fields.extensions(kind),
        }),
        MessageType::Act => {
            let tool_call = fields.string("tool_call")?;
            let params = match fields.required("params")? {
                Value::Object(m) => m.clone(),
                _ => return Err(malformed("params", "not an object")),
            };
            let deadline = fields.optional_number("deadline")?;
            let cost_cap = fields.optional_number("cost_cap")?;
            SemanticPayload::Act(Act {
                intent_id,
                tool_call,
                params,
                deadline,
                cost_cap,
                extensions: fields.extensions(kind),
            })
        }
        MessageType::Observe => {
            let status_text = fields.string("status")?;
            let status = ObserveStatus::parse(&status_text)
                .ok_or_else(|| malformed("status", format!("{status_text:?} is not ok|error|timeout")))?;
            let output = fields.required("output")?.clone();
            let metrics = match fields.optional("metrics") {
                None => None,
                Some(Value::Object(m)) => {
                    let mut out = BTreeMap::new();
                    for (k, v) in m {
                        match v {
                            Value::Number(n) => {
                                out.insert(k.clone(), n.clone());
                            }
                            _ => return Err(malformed("metrics", format!("{k:?} is not a number"))),
                        }
                    }
                    Some(out)
                }
                Some(_) => return Err(malformed("metrics", "not an object")),
            };
            SemanticPayload::Observe(Observe {
                intent_id,
                status,
                output,
                metrics,
                extensions: fields.extensions(kind),
            })
        }
    };
    Ok(payload)
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    fn required(&mut self, name: &'static str) -> Result<&'a Value, SemanticError> {
        match self.obj.get(name) {
            None | Some(Value::Null) => Err(SemanticError::MissingField(name)),
            Some(v) => Ok(v),
        }
    }

    fn string(&mut self, name: &'static str) -> Result<String, SemanticError> {
        match self.required(name)? {
            Value::String(s) if s.is_empty() => Err(malformed(name, "empty")),
            Value::String(s) => Ok(s.clone()),
            _ => Err(malformed(name, "not a string")),
        }
    }

    fn optional(&mut self, name: &'static str) -> Option<&'a Value> {
        self.obj.get(name).filter(|v| !v.is_null())
    }

    fn optional_number(&mut self, name: &'static str) -> Result<Option<Number>, SemanticError> {
        match self.optional(name) {
            None => Ok(None),
            Some(Value::Number(n)) => match n.as_f64() {
                Some(x) if x.is_finite() && x >= 0.0 => Ok(Some(n.clone())),
                _ => Err(malformed(name, "must be a finite non-negative number")),
            },
            Some(_) => Err(malformed(name, "not a number")),
        }
    }

    fn extensions(&self, kind: MessageType) -> BTreeMap<String, Value> {
        self.obj
            .iter()
            .filter(|(k, _)| {
                let k = k.as_str();
                k != "type"
                    && !kind.mandatory_fields().contains(&k)
                    && !kind.optional_fields().contains(&k)
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Deterministic byte encoding; see [`to_canonical_vec`].
pub fn encode_payload(p: &SemanticPayload) -> Vec<u8> {
    to_canonical_vec(&p.to_value())
}

pub fn decode_payload(bytes: &[u8]) -> Result<SemanticPayload, SemanticError> {
    let raw: Value =
        serde_json::from_slice(bytes).map_err(|e| SemanticError::Parse(e.to_string()))?;
    validate_payload(&raw)
}
