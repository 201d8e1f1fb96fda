//! Signing client with retry, and the scripted plan → act → observe loop.

use std::sync::Arc;
use std::time::Duration;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::clock::{unix_secs, Clock, SystemClock};
use crate::envelope::{
    compact_decode, compact_encode, sign_envelope, verify_envelope, AgentIdentity, Envelope,
    EnvelopeClaims, EnvelopeError, Keystore, TransactionId,
};
use crate::node::observe_status_code;
use crate::semantic::{Act, Observe, Plan, SemanticPayload};
use crate::transport::{Frame, FrameClass, TransportAdapter, TransportError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub backoff_factor: f64,
    pub per_attempt_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_backoff: Duration::from_millis(100),
            backoff_factor: 2.0,
            per_attempt_timeout: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    /// Pause before retry number `retry` (1-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = self.backoff_factor.powi(retry.saturating_sub(1) as i32);
        self.base_backoff.mul_f64(factor)
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("no reply after {attempts} attempt(s): {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("server rejected the request with status {status}")]
    ServerRejected { status: u16, observe: Option<Observe> },
    #[error("response failed verification: {0}")]
    ResponseVerificationFailed(String),
    /// A retry hit 409 after an earlier attempt went unanswered: the server
    /// already applied the operation, but its result was lost.
    #[error("transaction {0} was already processed by the server")]
    AlreadyProcessed(TransactionId),
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
}

impl ClientError {
    pub fn status(&self) -> Option<u16> {
        match self {
            ClientError::ServerRejected { status, .. } => Some(*status),
            ClientError::AlreadyProcessed(_) => Some(409),
            _ => None,
        }
    }
}

/// A verified OBSERVE reply.
#[derive(Debug, Clone)]
pub struct Observation {
    pub claims: EnvelopeClaims,
    pub envelope: Envelope,
}

impl Observation {
    pub fn observe(&self) -> &Observe {
        self.claims
            .payload
            .as_observe()
            .expect("observations are checked to carry OBSERVE")
    }

    /// The output as display text: strings unquoted, anything else as JSON.
    pub fn output_text(&self) -> String {
        value_text(&self.observe().output)
    }

    pub fn status_code(&self) -> Option<u16> {
        observe_status_code(self.observe())
    }
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Outcome of a single request/response exchange, before policy is applied.
// Short-lived and matched immediately, so not worth boxing.
#[allow(clippy::large_enum_variant)]
#[derive(Debug)]
pub enum Exchange {
    Reply(Observation),
    TimedOut,
}

pub struct Client<T> {
    transport: T,
    identity: AgentIdentity,
    keystore: Keystore,
    clock: Arc<dyn Clock>,
    policy: RetryPolicy,
    sequence: u64,
}

impl<T: TransportAdapter> Client<T> {
    /// `keystore` must hold the public keys of every server this client talks to.
    pub fn new(transport: T, identity: AgentIdentity, keystore: Keystore) -> Result<Self, ClientError> {
        if !identity.has_private_key() {
            return Err(EnvelopeError::NoPrivateKey.into());
        }
        Ok(Client {
            transport,
            identity,
            keystore,
            clock: Arc::new(SystemClock),
            policy: RetryPolicy::default(),
            sequence: 0,
        })
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn policy(&self) -> RetryPolicy {
        self.policy
    }

    pub fn identity(&self) -> &AgentIdentity {
        &self.identity
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    /// Wraps a payload in fresh claims and signs it. Consumes a sequence number.
    pub fn seal(&mut self, recipient: &str, payload: SemanticPayload) -> Result<Envelope, ClientError> {
        let claims = EnvelopeClaims {
            sender: self.identity.agent_id().to_owned(),
            recipient: recipient.to_owned(),
            transaction_id: TransactionId::new_random(),
            sequence: self.sequence,
            timestamp: unix_secs(&*self.clock),
            payload,
        };
        self.sequence += 1;
        Ok(sign_envelope(&claims, &self.identity)?)
    }

    /// Sends an envelope once and waits for one reply.
    pub fn exchange(
        &mut self,
        envelope: &Envelope,
        class: FrameClass,
        expect_from: &str,
    ) -> Result<Exchange, ClientError> {
        let request = Frame::new(class, compact_encode(envelope).into_bytes());
        self.transport.send(&request)?;
        let reply = match self.transport.receive(Some(self.policy.per_attempt_timeout)) {
            Ok(f) => f,
            Err(TransportError::Timeout) => return Ok(Exchange::TimedOut),
            Err(e) => return Err(e.into()),
        };
        self.verify_reply(&reply, envelope, expect_from).map(Exchange::Reply)
    }

    fn verify_reply(
        &self,
        reply: &Frame,
        request: &Envelope,
        expect_from: &str,
    ) -> Result<Observation, ClientError> {
        let fail = |m: String| ClientError::ResponseVerificationFailed(m);
        let text = std::str::from_utf8(&reply.body).map_err(|e| fail(e.to_string()))?;
        let envelope = compact_decode(text).map_err(|e| fail(e.to_string()))?;
        if envelope.kid() != expect_from {
            return Err(fail(format!(
                "reply signed by {:?}, expected {expect_from:?}",
                envelope.kid()
            )));
        }
        let claims = verify_envelope(&envelope, &self.keystore).map_err(|e| fail(e.to_string()))?;
        let Some(observe) = claims.payload.as_observe() else {
            return Err(fail(format!("reply is {}, not OBSERVE", claims.payload.message_type())));
        };
        if claims.recipient != self.identity.agent_id() {
            return Err(fail(format!("reply addressed to {:?}", claims.recipient)));
        }
        let request_intent = request
            .unverified_claims()
            .map(|c| c.payload.intent_id().to_owned())
            .unwrap_or_default();
        if observe.intent_id != request_intent {
            return Err(fail(format!(
                "reply intent {:?} does not match request {:?}",
                observe.intent_id, request_intent
            )));
        }
        Ok(Observation { claims, envelope })
    }

    /// Sends one pre-signed envelope under the retry policy. Every attempt
    /// carries the identical bytes, so the transaction id never changes.
    pub fn send_envelope(
        &mut self,
        envelope: &Envelope,
        class: FrameClass,
        target: &str,
    ) -> Result<Observation, ClientError> {
        let attempts = self.policy.max_attempts.max(1);
        let mut timed_out = false;
        let mut last = String::from("no attempt made");
        for attempt in 1..=attempts {
            if attempt > 1 {
                std::thread::sleep(self.policy.backoff(attempt - 1));
            }
            match self.exchange(envelope, class, target) {
                Ok(Exchange::Reply(observation)) => {
                    let status = observation.status_code().unwrap_or(0);
                    return match status {
                        200 => Ok(observation),
                        409 if timed_out => {
                            let claims = envelope.unverified_claims()?;
                            Err(ClientError::AlreadyProcessed(claims.transaction_id))
                        }
                        _ => Err(ClientError::ServerRejected {
                            status,
                            observe: Some(observation.observe().clone()),
                        }),
                    };
                }
                Ok(Exchange::TimedOut) => {
                    timed_out = true;
                    last = format!("attempt {attempt} timed out");
                }
                Err(ClientError::Transport(e)) => {
                    timed_out = true;
                    last = format!("attempt {attempt}: {e}");
                }
                Err(e) => return Err(e),
            }
            log::debug!(target: "lacp::client", "{last}");
        }
        Err(ClientError::Unreachable { attempts, last })
    }

    pub fn send_act(
        &mut self,
        target: &str,
        tool_call: &str,
        params: Map<String, Value>,
        deadline: Option<f64>,
    ) -> Result<Observation, ClientError> {
        let intent_id = format!("intent-{}", &TransactionId::new_random().as_str()[..8]);
        self.send_act_as(target, &intent_id, tool_call, params, deadline)
    }

    pub fn send_act_as(
        &mut self,
        target: &str,
        intent_id: &str,
        tool_call: &str,
        params: Map<String, Value>,
        deadline: Option<f64>,
    ) -> Result<Observation, ClientError> {
        let mut act = Act::new(intent_id, tool_call);
        act.params = params;
        act.deadline = deadline.and_then(serde_json::Number::from_f64);
        let envelope = self.seal(target, act.into())?;
        self.send_envelope(&envelope, FrameClass::Request, target)
    }

    /// Runs a script against `target`. The first failing ACT aborts the run.
    pub fn run_scripted_agent(
        &mut self,
        target: &str,
        script: &[ScriptStep],
    ) -> Result<Transcript, ClientError> {
        let mut transcript = Transcript::default();
        if script.is_empty() {
            return Ok(transcript);
        }
        let intent_id = format!("intent-{}", &TransactionId::new_random().as_str()[..8]);
        let mut observation: Option<String> = None;
        for step in script {
            match step {
                ScriptStep::Plan { role, text } => {
                    let plan = Plan {
                        intent_id: intent_id.clone(),
                        role: role.clone(),
                        natural_language: text.clone(),
                        graph_ops: None,
                        extensions: Default::default(),
                    };
                    // Plans are recorded, not sent: the reference node only executes ACTs.
                    let envelope = self.seal(target, plan.into())?;
                    transcript.entries.push(TranscriptEntry::Plan {
                        text: text.clone(),
                        envelope: compact_encode(&envelope),
                    });
                }
                ScriptStep::Act { tool, params } => {
                    let params = substitute(params, observation.as_deref());
                    transcript.entries.push(TranscriptEntry::Act {
                        tool: tool.clone(),
                        params: params.clone(),
                    });
                    let obs = self.send_act_as(target, &intent_id, tool, params, None)?;
                    let text = obs.output_text();
                    transcript.entries.push(TranscriptEntry::Observation {
                        output: text.clone(),
                        envelope: compact_encode(&obs.envelope),
                    });
                    observation = Some(text);
                }
            }
        }
        Ok(transcript)
    }
}

/// String parameters equal to this are replaced with the previous observation.
pub const OBSERVATION_PLACEHOLDER: &str = "{{observation}}";

fn substitute(params: &Map<String, Value>, observation: Option<&str>) -> Map<String, Value> {
    let Some(obs) = observation else {
        return params.clone();
    };
    params
        .iter()
        .map(|(k, v)| {
            let v = match v {
                Value::String(s) if s.contains(OBSERVATION_PLACEHOLDER) => {
                    Value::String(s.replace(OBSERVATION_PLACEHOLDER, obs))
                }
                other => other.clone(),
            };
            (k.clone(), v)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScriptStep {
    Plan { role: String, text: String },
    Act { tool: String, params: Map<String, Value> },
}

impl ScriptStep {
    pub fn plan(text: impl Into<String>) -> Self {
        ScriptStep::Plan {
            role: "planner".into(),
            text: text.into(),
        }
    }

    pub fn act(tool: impl Into<String>, params: Value) -> Self {
        ScriptStep::Act {
            tool: tool.into(),
            params: params.as_object().cloned().unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TranscriptEntry {
    Plan { text: String, envelope: String },
    Act { tool: String, params: Map<String, Value> },
    /// A verified OBSERVE; `envelope` is its compact form.
    Observation { output: String, envelope: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_output(&self) -> Option<&str> {
        self.entries.iter().rev().find_map(|e| match e {
            TranscriptEntry::Observation { output, .. } => Some(output.as_str()),
            _ => None,
        })
    }

    pub fn observations(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter_map(|e| match e {
            TranscriptEntry::Observation { envelope, .. } => Some(envelope.as_str()),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy::default();
        assert_eq!(p.backoff(1), Duration::from_millis(100));
        assert_eq!(p.backoff(2), Duration::from_millis(200));
        assert_eq!(p.backoff(3), Duration::from_millis(400));
    }

    #[test]
    fn observation_placeholder() {
        let params = json!({"expression": "{{observation}}+1", "n": 3});
        let out = substitute(params.as_object().unwrap(), Some("105"));
        assert_eq!(Value::Object(out), json!({"expression": "105+1", "n": 3}));
        let untouched = substitute(params.as_object().unwrap(), None);
        assert_eq!(&untouched, params.as_object().unwrap());
    }
}
