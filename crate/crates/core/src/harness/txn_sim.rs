//! Two-phase commit under a seeded fault schedule.
//!
//! A coordinator drives `n` real participant nodes. Every control message is
//! a signed envelope in a transaction-control frame; the network between them
//! drops, duplicates and delays frames according to [`FaultSpec`]. Time is a
//! simulated microsecond counter, so runs are fast and fully reproducible
//! from the seed.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{Map, Value};

use super::HarnessError;
use crate::clock::ManualClock;
use crate::envelope::{
    compact_decode, compact_encode, sign_envelope, verify_envelope, AgentIdentity,
    EnvelopeClaims, Keystore, TransactionId,
};
use crate::node::{Node, ToolOutcome};
use crate::semantic::Act;
use crate::transaction::{
    ControlKind, Coordinator, CoordinatorEvent, CoordinatorState, Outgoing, ParticipantState,
    TxnControlMessage, DEFAULT_PREPARE_TIMEOUT_SECS,
};
use crate::transport::{decode_frames, encode_frame, Frame, FrameClass};

const EPOCH: f64 = 1_700_000_000.0;
const BASE_LATENCY_US: u64 = 1_000;
const COORDINATOR_ID: &str = "coordinator";
const EFFECT_TOOL: &str = "ledger.apply";

/// Per-message fault probabilities plus a few targeted faults.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FaultSpec {
    pub drop: f64,
    pub duplicate: f64,
    pub delay: f64,
    /// Upper bound of an injected delay, seconds.
    pub max_delay: f64,
    /// Drop every message in both directions.
    pub silence: bool,
    /// Participants (by index) whose votes never arrive.
    pub drop_votes_from: BTreeSet<usize>,
    /// Deliver every COMMIT twice.
    pub duplicate_commits: bool,
    /// Participants (by index) that cannot execute the body and vote no.
    pub refuse: BTreeSet<usize>,
}

impl FaultSpec {
    pub fn none() -> Self {
        FaultSpec {
            max_delay: 2.0,
            ..Default::default()
        }
    }

    /// Whether every message eventually gets through given enough retries.
    pub fn eventual_delivery(&self) -> bool {
        !self.silence && self.drop_votes_from.is_empty() && self.drop < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad fault spec {0:?}")]
pub struct FaultSpecError(pub String);

impl FromStr for FaultSpec {
    type Err = FaultSpecError;

    /// `none`, or a comma list of `drop=P`, `dup=P`, `delay=P`, `max-delay=S`,
    /// `silence`, `drop-votes-from=I`, `dup-commit`, `refuse=I`. Index options
    /// may repeat.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut spec = FaultSpec::none();
        let text = text.trim();
        if text.is_empty() || text == "none" {
            return Ok(spec);
        }
        let err = |item: &str| FaultSpecError(item.to_owned());
        for item in text.split(',').map(str::trim) {
            let (key, value) = match item.split_once('=') {
                Some((k, v)) => (k.trim(), Some(v.trim())),
                None => (item, None),
            };
            let prob = |v: Option<&str>| -> Result<f64, FaultSpecError> {
                let p: f64 = v.ok_or_else(|| err(item))?.parse().map_err(|_| err(item))?;
                if (0.0..=1.0).contains(&p) {
                    Ok(p)
                } else {
                    Err(err(item))
                }
            };
            let index = |v: Option<&str>| -> Result<usize, FaultSpecError> {
                v.ok_or_else(|| err(item))?.parse().map_err(|_| err(item))
            };
            match key {
                "drop" => spec.drop = prob(value)?,
                "dup" | "duplicate" => spec.duplicate = prob(value)?,
                "delay" => spec.delay = prob(value)?,
                "max-delay" => {
                    let s: f64 = value.ok_or_else(|| err(item))?.parse().map_err(|_| err(item))?;
                    if !(s.is_finite() && s >= 0.0) {
                        return Err(err(item));
                    }
                    spec.max_delay = s;
                }
                "silence" if value.is_none() => spec.silence = true,
                "dup-commit" if value.is_none() => spec.duplicate_commits = true,
                "drop-votes-from" => {
                    spec.drop_votes_from.insert(index(value)?);
                }
                "refuse" => {
                    spec.refuse.insert(index(value)?);
                }
                _ => return Err(err(item)),
            }
        }
        Ok(spec)
    }
}

impl fmt::Display for FaultSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.drop > 0.0 {
            parts.push(format!("drop={}", self.drop));
        }
        if self.duplicate > 0.0 {
            parts.push(format!("dup={}", self.duplicate));
        }
        if self.delay > 0.0 {
            parts.push(format!("delay={},max-delay={}", self.delay, self.max_delay));
        }
        if self.silence {
            parts.push("silence".into());
        }
        parts.extend(self.drop_votes_from.iter().map(|i| format!("drop-votes-from={i}")));
        if self.duplicate_commits {
            parts.push("dup-commit".into());
        }
        parts.extend(self.refuse.iter().map(|i| format!("refuse={i}")));
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxnSimConfig {
    pub participants: usize,
    pub seed: u64,
    pub faults: FaultSpec,
    pub prepare_timeout: f64,
    pub retransmit_interval: f64,
    pub max_retransmits: u32,
    /// Simulated seconds after which the run stops regardless.
    pub horizon: f64,
}

impl TxnSimConfig {
    pub fn new(participants: usize, seed: u64, faults: FaultSpec) -> Self {
        TxnSimConfig {
            participants,
            seed,
            faults,
            prepare_timeout: DEFAULT_PREPARE_TIMEOUT_SECS,
            retransmit_interval: 0.5,
            max_retransmits: 50,
            horizon: 120.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Outcome {
    Committed,
    Aborted,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticipantReport {
    pub id: String,
    /// Raw state machine state; `Idle` after a decision means presumed abort.
    pub state: String,
    pub outcome: Outcome,
    pub effects: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TxnReport {
    pub seed: u64,
    pub faults: String,
    pub coordinator: Outcome,
    pub participants: Vec<ParticipantReport>,
    pub messages_sent: u64,
    pub messages_dropped: u64,
    pub simulated_secs: f64,
    /// No two parties reached different outcomes.
    pub agreement: bool,
    /// Each committed participant applied the body once; no other applied it.
    pub exactly_once: bool,
    /// The coordinator reached a decision.
    pub terminated: bool,
    /// Every participant acknowledged the decision.
    pub all_acked: bool,
    pub protocol_errors: Vec<String>,
}

impl TxnReport {
    pub fn pass(&self) -> bool {
        self.agreement && self.exactly_once && self.terminated && self.protocol_errors.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for TxnReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed={} faults={}", self.seed, self.faults)?;
        writeln!(f, "coordinator: {:?}", self.coordinator)?;
        for p in &self.participants {
            writeln!(
                f,
                "  {:<4} state={:<9} outcome={:?} effects={}",
                p.id, p.state, p.outcome, p.effects
            )?;
        }
        writeln!(
            f,
            "messages sent={} dropped={} simulated={:.3}s",
            self.messages_sent, self.messages_dropped, self.simulated_secs
        )?;
        write!(
            f,
            "agreement={} exactly_once={} terminated={} all_acked={} => {}",
            self.agreement,
            self.exactly_once,
            self.terminated,
            self.all_acked,
            if self.pass() { "PASS" } else { "FAIL" }
        )
    }
}

#[derive(Debug)]
enum Event {
    /// Wire bytes for a participant, by index.
    ToParticipant(usize, Vec<u8>),
    /// Wire bytes for the coordinator, from a participant.
    ToCoordinator(usize, Vec<u8>),
    PrepareTimeout,
    Retransmit(u32),
}

struct Sim {
    config: TxnSimConfig,
    rng: ChaCha8Rng,
    now_us: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    events: std::collections::HashMap<u64, Event>,
    clock: Arc<ManualClock>,
    coordinator: Coordinator,
    identity: AgentIdentity,
    keystore: Keystore,
    nodes: Vec<Arc<Node>>,
    effects: Vec<Arc<AtomicU64>>,
    sent: u64,
    dropped: u64,
    out_seq: u64,
    errors: Vec<String>,
}

fn secs_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

fn participant_id(i: usize) -> String {
    format!("p{i}")
}

impl Sim {
    fn new(config: TxnSimConfig) -> Result<Self, HarnessError> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let clock = Arc::new(ManualClock::new(EPOCH));
        let identity = deterministic_identity(COORDINATOR_ID, config.seed, 0)?;
        let mut keystore = Keystore::new();
        let mut nodes = Vec::new();
        let mut effects = Vec::new();
        for i in 0..config.participants {
            let id = deterministic_identity(&participant_id(i), config.seed, i as u64 + 1)?;
            keystore.insert(id.public_only())?;
            let mut peers = Keystore::new();
            peers.insert(identity.public_only())?;
            let node = Node::builder(id, peers)
                .clock(clock.clone())
                .with_calculator(false)
                .build()?;
            let count = Arc::new(AtomicU64::new(0));
            if !config.faults.refuse.contains(&i) {
                let counter = Arc::clone(&count);
                node.register_tool(EFFECT_TOOL, move |_: &Map<String, Value>, _: Option<f64>| {
                    counter.fetch_add(1, Ordering::SeqCst);
                    ToolOutcome::ok("applied")
                })?;
            }
            nodes.push(Arc::new(node));
            effects.push(count);
        }
        let txn_id = TransactionId::from_uuid(uuid::Builder::from_random_bytes(rng.gen()).into_uuid());
        let coordinator = Coordinator::new(txn_id, config.prepare_timeout);
        Ok(Sim {
            config,
            rng,
            now_us: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            events: Default::default(),
            clock,
            coordinator,
            identity,
            keystore,
            nodes,
            effects,
            sent: 0,
            dropped: 0,
            out_seq: 0,
            errors: Vec::new(),
        })
    }

    fn schedule(&mut self, after_us: u64, event: Event) {
        let at = self.now_us + after_us;
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq)));
        self.events.insert(self.seq, event);
    }

    /// Applies the random faults to one transmission. Returns delivery delays.
    fn transmit_delays(&mut self, forced_duplicate: bool) -> Vec<u64> {
        self.sent += 1;
        let faults = &self.config.faults;
        if faults.silence || self.rng.gen_bool(faults.drop) {
            self.dropped += 1;
            return Vec::new();
        }
        let copies = if forced_duplicate || self.rng.gen_bool(self.config.faults.duplicate) {
            2
        } else {
            1
        };
        (0..copies)
            .map(|_| {
                let mut d = BASE_LATENCY_US;
                if self.rng.gen_bool(self.config.faults.delay) {
                    d += self.rng.gen_range(0..=secs_to_us(self.config.faults.max_delay));
                }
                d
            })
            .collect()
    }

    fn send_to_participant(&mut self, out: Outgoing) {
        let Some(index) = out.to.strip_prefix('p').and_then(|s| s.parse::<usize>().ok()) else {
            self.errors.push(format!("coordinator addressed unknown party {}", out.to));
            return;
        };
        let claims = EnvelopeClaims {
            sender: COORDINATOR_ID.into(),
            recipient: out.to.clone(),
            transaction_id: TransactionId::from_uuid(
                uuid::Builder::from_random_bytes(self.rng.gen()).into_uuid(),
            ),
            sequence: self.out_seq,
            timestamp: self.clock_secs(),
            payload: out.message.to_act().into(),
        };
        self.out_seq += 1;
        let envelope = match sign_envelope(&claims, &self.identity) {
            Ok(e) => e,
            Err(e) => {
                self.errors.push(e.to_string());
                return;
            }
        };
        let wire = encode_frame(&Frame::new(
            FrameClass::TxnControl,
            compact_encode(&envelope).into_bytes(),
        ))
        .expect("control frames are small");
        let duplicate = self.config.faults.duplicate_commits && out.message.kind == ControlKind::Commit;
        for delay in self.transmit_delays(duplicate) {
            self.schedule(delay, Event::ToParticipant(index, wire.clone()));
        }
    }

    fn clock_secs(&self) -> u64 {
        (EPOCH + self.now_us as f64 / 1e6) as u64
    }

    fn coordinator_step(&mut self, event: CoordinatorEvent) {
        match self.coordinator.step(event) {
            Ok(outgoing) => {
                for out in outgoing {
                    self.send_to_participant(out);
                }
            }
            Err(e) => self.errors.push(format!("coordinator: {e}")),
        }
    }

    fn deliver_to_participant(&mut self, index: usize, wire: Vec<u8>) {
        let mut buf = wire;
        let frames = match decode_frames(&mut buf) {
            Ok(f) => f,
            Err(e) => {
                self.errors.push(format!("frame decode: {e}"));
                return;
            }
        };
        for frame in frames {
            let node = Arc::clone(&self.nodes[index]);
            let response = node.handle_frame(&frame);
            let is_vote = response
                .observe()
                .and_then(|o| TxnControlMessage::from_value(&o.output).ok())
                .is_some_and(|m| matches!(m.kind, ControlKind::Vote(_)));
            if is_vote && self.config.faults.drop_votes_from.contains(&index) {
                self.sent += 1;
                self.dropped += 1;
                continue;
            }
            let reply = encode_frame(&Frame::new(
                FrameClass::TxnControl,
                compact_encode(&response.envelope).into_bytes(),
            ))
            .expect("control frames are small");
            for delay in self.transmit_delays(false) {
                self.schedule(delay, Event::ToCoordinator(index, reply.clone()));
            }
        }
    }

    fn deliver_to_coordinator(&mut self, index: usize, wire: Vec<u8>) {
        let mut buf = wire;
        let Ok(frames) = decode_frames(&mut buf) else {
            self.errors.push("frame decode at coordinator".into());
            return;
        };
        for frame in frames {
            let verified = std::str::from_utf8(&frame.body)
                .ok()
                .and_then(|t| compact_decode(t).ok())
                .and_then(|e| verify_envelope(&e, &self.keystore).ok());
            let Some(claims) = verified else {
                self.errors.push(format!("unverifiable reply from p{index}"));
                continue;
            };
            let Some(observe) = claims.payload.as_observe() else { continue };
            if crate::node::observe_status_code(observe) != Some(200) {
                // Duplicate deliveries are answered 409 by the replay guard.
                continue;
            }
            let message = match TxnControlMessage::from_value(&observe.output) {
                Ok(m) => m,
                Err(e) => {
                    self.errors.push(format!("reply from p{index}: {e}"));
                    continue;
                }
            };
            let from = participant_id(index);
            let event = match message.kind {
                ControlKind::Vote(vote) => CoordinatorEvent::Vote { from, vote },
                ControlKind::Ack => CoordinatorEvent::Ack { from },
                other => {
                    self.errors.push(format!("participant sent {}", other.name()));
                    continue;
                }
            };
            self.coordinator_step(event);
        }
    }

    fn run(mut self) -> TxnReport {
        let participants: Vec<String> = (0..self.config.participants).map(participant_id).collect();
        let body = Act::new("txn-body", EFFECT_TOOL).with_param("amount", 100);
        self.coordinator_step(CoordinatorEvent::Start { participants, body });
        self.schedule(secs_to_us(self.config.prepare_timeout), Event::PrepareTimeout);
        self.schedule(secs_to_us(self.config.retransmit_interval), Event::Retransmit(1));

        let horizon = secs_to_us(self.config.horizon);
        while let Some(Reverse((at, id))) = self.queue.pop() {
            if at > horizon {
                break;
            }
            self.now_us = at;
            self.clock.set(EPOCH + at as f64 / 1e6);
            let event = self.events.remove(&id).expect("every queued id has an event");
            match event {
                Event::ToParticipant(i, wire) => self.deliver_to_participant(i, wire),
                Event::ToCoordinator(i, wire) => self.deliver_to_coordinator(i, wire),
                Event::PrepareTimeout => self.coordinator_step(CoordinatorEvent::Timeout),
                Event::Retransmit(n) => {
                    if !self.coordinator.is_finished() && n <= self.config.max_retransmits {
                        self.coordinator_step(CoordinatorEvent::Retransmit);
                        self.schedule(
                            secs_to_us(self.config.retransmit_interval),
                            Event::Retransmit(n + 1),
                        );
                    }
                }
            }
        }
        self.report()
    }

    fn report(self) -> TxnReport {
        let coordinator = match self.coordinator.state() {
            CoordinatorState::Committed => Outcome::Committed,
            CoordinatorState::Aborted => Outcome::Aborted,
            _ => Outcome::Undecided,
        };
        let txn_id = self.coordinator.txn_id().clone();
        let participants: Vec<ParticipantReport> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let state = node.participant_state(&txn_id);
                let outcome = match state {
                    Some(ParticipantState::Committed) => Outcome::Committed,
                    Some(ParticipantState::Aborted) => Outcome::Aborted,
                    Some(ParticipantState::Prepared) => Outcome::Undecided,
                    // Never prepared: presumed abort.
                    Some(ParticipantState::Idle) | None => Outcome::Aborted,
                };
                ParticipantReport {
                    id: participant_id(i),
                    state: state.map_or_else(|| "Unseen".to_owned(), |s| format!("{s:?}")),
                    outcome,
                    effects: self.effects[i].load(Ordering::SeqCst),
                }
            })
            .collect();

        let decided: Vec<Outcome> = std::iter::once(coordinator)
            .chain(participants.iter().map(|p| p.outcome))
            .filter(|o| *o != Outcome::Undecided)
            .collect();
        let agreement = decided.windows(2).all(|w| w[0] == w[1])
            && !(coordinator != Outcome::Committed
                && participants.iter().any(|p| p.outcome == Outcome::Committed));
        let exactly_once = participants.iter().all(|p| match p.outcome {
            Outcome::Committed => p.effects == 1,
            _ => p.effects == 0,
        });
        TxnReport {
            seed: self.config.seed,
            faults: self.config.faults.to_string(),
            coordinator,
            participants,
            messages_sent: self.sent,
            messages_dropped: self.dropped,
            simulated_secs: self.now_us as f64 / 1e6,
            agreement,
            exactly_once,
            terminated: coordinator != Outcome::Undecided,
            all_acked: self.coordinator.is_finished(),
            protocol_errors: self.errors,
        }
    }
}

/// Keys derived from the seed so reruns produce identical transcripts.
fn deterministic_identity(id: &str, seed: u64, index: u64) -> Result<AgentIdentity, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b65_7973_0000_0000 ^ index);
    loop {
        let secret: [u8; 32] = rng.gen();
        if let Ok(identity) = AgentIdentity::from_secret_bytes(id, &secret) {
            return Ok(identity);
        }
    }
}

/// Runs one seeded two-phase-commit transaction under `config.faults`.
pub fn txn_fault_run(config: TxnSimConfig) -> Result<TxnReport, HarnessError> {
    if config.participants == 0 {
        return Err(HarnessError::Unexpected("at least one participant is required".into()));
    }
    for i in config.faults.refuse.iter().chain(&config.faults.drop_votes_from) {
        if *i >= config.participants {
            return Err(HarnessError::Unexpected(format!(
                "fault names participant {i}, but there are only {}",
                config.participants
            )));
        }
    }
    Ok(Sim::new(config)?.run())
}
