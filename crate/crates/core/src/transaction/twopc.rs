//! Presumed-abort two-phase commit.
//!
//! Both roles are plain state machines: feed an event, get back the control
//! messages to send. Timers and retransmission are driven from outside, by
//! whatever executor owns the transaction.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::envelope::TransactionId;
use crate::semantic::Act;

pub const DEFAULT_PREPARE_TIMEOUT_SECS: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Vote {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlKind {
    Prepare,
    Vote(Vote),
    Commit,
    Abort,
    Ack,
}

impl ControlKind {
    pub fn name(&self) -> &'static str {
        match self {
            ControlKind::Prepare => "prepare",
            ControlKind::Vote(_) => "vote",
            ControlKind::Commit => "commit",
            ControlKind::Abort => "abort",
            ControlKind::Ack => "ack",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TxnControlMessage {
    pub kind: ControlKind,
    pub txn_id: TransactionId,
    /// The ACT made atomic; carried on PREPARE only.
    pub body: Option<Act>,
}

impl TxnControlMessage {
    pub fn new(kind: ControlKind, txn_id: TransactionId) -> Self {
        TxnControlMessage {
            kind,
            txn_id,
            body: None,
        }
    }

    pub fn prepare(txn_id: TransactionId, body: Act) -> Self {
        TxnControlMessage {
            kind: ControlKind::Prepare,
            txn_id,
            body: Some(body),
        }
    }
}

/// A control message and the participant it goes to.
#[derive(Debug, Clone, PartialEq)]
pub struct Outgoing {
    pub to: String,
    pub message: TxnControlMessage,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TxnError {
    #[error("invalid transition: {event} in state {state}")]
    InvalidTransition { state: String, event: String },
    #[error("{0:?} is not a participant of this transaction")]
    UnknownParticipant(String),
    #[error("control message for transaction {got}, expected {expected}")]
    WrongTransaction {
        expected: TransactionId,
        got: TransactionId,
    },
    #[error("malformed control message: {0}")]
    Malformed(String),
}

fn invalid(state: impl std::fmt::Debug, event: &str) -> TxnError {
    TxnError::InvalidTransition {
        state: format!("{state:?}"),
        event: event.to_owned(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoordinatorState {
    Init,
    Preparing,
    Committed,
    Aborted,
}

impl CoordinatorState {
    pub fn is_terminal(self) -> bool {
        matches!(self, CoordinatorState::Committed | CoordinatorState::Aborted)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CoordinatorEvent {
    Start { participants: Vec<String>, body: Act },
    Vote { from: String, vote: Vote },
    Ack { from: String },
    /// The prepare timer fired.
    Timeout,
    /// The retransmission timer fired.
    Retransmit,
}

#[derive(Debug, Clone)]
pub struct Coordinator {
    txn_id: TransactionId,
    state: CoordinatorState,
    participants: Vec<String>,
    votes: BTreeMap<String, Vote>,
    acked: BTreeSet<String>,
    body: Option<Act>,
    prepare_timeout: f64,
}

impl Coordinator {
    pub fn new(txn_id: TransactionId, prepare_timeout: f64) -> Self {
        Coordinator {
            txn_id,
            state: CoordinatorState::Init,
            participants: Vec::new(),
            votes: BTreeMap::new(),
            acked: BTreeSet::new(),
            body: None,
            prepare_timeout,
        }
    }

    pub fn txn_id(&self) -> &TransactionId {
        &self.txn_id
    }

    pub fn state(&self) -> CoordinatorState {
        self.state
    }

    pub fn prepare_timeout(&self) -> f64 {
        self.prepare_timeout
    }

    pub fn participants(&self) -> &[String] {
        &self.participants
    }

    /// Decided, and every participant acknowledged the decision.
    pub fn is_finished(&self) -> bool {
        self.state.is_terminal() && self.acked.len() == self.participants.len()
    }

    pub fn step(&mut self, event: CoordinatorEvent) -> Result<Vec<Outgoing>, TxnError> {
        use CoordinatorState::*;
        match (self.state, event) {
            (Init, CoordinatorEvent::Start { participants, body }) => {
                let mut unique = participants.clone();
                unique.sort();
                unique.dedup();
                if participants.is_empty() || unique.len() != participants.len() {
                    return Err(TxnError::Malformed(
                        "participants must be non-empty and distinct".into(),
                    ));
                }
                self.participants = participants;
                self.body = Some(body);
                self.state = Preparing;
                Ok(self.broadcast_prepare())
            }
            (Preparing, CoordinatorEvent::Vote { from, vote }) => {
                self.check_participant(&from)?;
                self.votes.insert(from, vote);
                if vote == Vote::No {
                    self.decide(Aborted);
                    Ok(self.broadcast_decision())
                } else if self.votes.len() == self.participants.len()
                    && self.votes.values().all(|v| *v == Vote::Yes)
                {
                    self.decide(Committed);
                    Ok(self.broadcast_decision())
                } else {
                    Ok(Vec::new())
                }
            }
            (Committed | Aborted, CoordinatorEvent::Vote { from, .. }) => {
                // A late or repeated vote: the voter missed the decision.
                self.check_participant(&from)?;
                Ok(vec![self.decision_for(from)])
            }
            (Committed | Aborted, CoordinatorEvent::Ack { from }) => {
                self.check_participant(&from)?;
                self.acked.insert(from);
                Ok(Vec::new())
            }
            (Preparing, CoordinatorEvent::Timeout) => {
                self.decide(Aborted);
                Ok(self.broadcast_decision())
            }
            (Committed | Aborted, CoordinatorEvent::Timeout) => Ok(Vec::new()),
            (Preparing, CoordinatorEvent::Retransmit) => Ok(self.broadcast_prepare()),
            (Committed | Aborted, CoordinatorEvent::Retransmit) => Ok(self.broadcast_decision()),
            (state, event) => Err(invalid(state, event_name(&event))),
        }
    }

    fn check_participant(&self, id: &str) -> Result<(), TxnError> {
        if self.participants.iter().any(|p| p == id) {
            Ok(())
        } else {
            Err(TxnError::UnknownParticipant(id.to_owned()))
        }
    }

    fn decide(&mut self, state: CoordinatorState) {
        self.state = state;
        self.body = None;
    }

    fn broadcast_prepare(&self) -> Vec<Outgoing> {
        let body = self.body.clone().expect("body is kept while preparing");
        self.participants
            .iter()
            .filter(|p| !self.votes.contains_key(*p))
            .map(|p| Outgoing {
                to: p.clone(),
                message: TxnControlMessage::prepare(self.txn_id.clone(), body.clone()),
            })
            .collect()
    }

    fn decision_for(&self, to: String) -> Outgoing {
        let kind = match self.state {
            CoordinatorState::Committed => ControlKind::Commit,
            _ => ControlKind::Abort,
        };
        Outgoing {
            to,
            message: TxnControlMessage::new(kind, self.txn_id.clone()),
        }
    }

    fn broadcast_decision(&self) -> Vec<Outgoing> {
        self.participants
            .iter()
            .filter(|p| !self.acked.contains(*p))
            .map(|p| self.decision_for(p.clone()))
            .collect()
    }
}

fn event_name(event: &CoordinatorEvent) -> &'static str {
    match event {
        CoordinatorEvent::Start { .. } => "start",
        CoordinatorEvent::Vote { .. } => "vote",
        CoordinatorEvent::Ack { .. } => "ack",
        CoordinatorEvent::Timeout => "timeout",
        CoordinatorEvent::Retransmit => "retransmit",
    }
}

/// Where a participant applies a committed body.
pub trait TxnResource {
    /// Whether `body` could be applied right now. Voting yes is a promise to apply it.
    fn can_execute(&self, body: &Act) -> bool;

    fn apply(&mut self, body: &Act);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParticipantState {
    Idle,
    Prepared,
    Committed,
    Aborted,
}

impl ParticipantState {
    pub fn is_terminal(self) -> bool {
        matches!(self, ParticipantState::Committed | ParticipantState::Aborted)
    }
}

#[derive(Debug, Clone)]
pub struct Participant {
    txn_id: TransactionId,
    state: ParticipantState,
    pending: Option<Act>,
    // Set once this participant voted no or saw ABORT while idle; a late
    // PREPARE must not resurrect the transaction.
    refused: bool,
}

impl Participant {
    pub fn new(txn_id: TransactionId) -> Self {
        Participant {
            txn_id,
            state: ParticipantState::Idle,
            pending: None,
            refused: false,
        }
    }

    pub fn state(&self) -> ParticipantState {
        self.state
    }

    pub fn txn_id(&self) -> &TransactionId {
        &self.txn_id
    }

    pub fn pending(&self) -> Option<&Act> {
        self.pending.as_ref()
    }

    /// Handles one incoming control message and returns the reply, if any.
    pub fn step(
        &mut self,
        message: &TxnControlMessage,
        resource: &mut impl TxnResource,
    ) -> Result<Option<TxnControlMessage>, TxnError> {
        use ParticipantState::*;
        if message.txn_id != self.txn_id {
            return Err(TxnError::WrongTransaction {
                expected: self.txn_id.clone(),
                got: message.txn_id.clone(),
            });
        }
        let reply = |kind| Ok(Some(TxnControlMessage::new(kind, self.txn_id.clone())));
        match (self.state, &message.kind) {
            (Idle, ControlKind::Prepare) => {
                let body = message.body.as_ref();
                match body {
                    Some(body) if !self.refused && resource.can_execute(body) => {
                        self.pending = Some(body.clone());
                        self.state = Prepared;
                        reply(ControlKind::Vote(Vote::Yes))
                    }
                    _ => {
                        self.refused = true;
                        reply(ControlKind::Vote(Vote::No))
                    }
                }
            }
            (Prepared | Committed, ControlKind::Prepare) => reply(ControlKind::Vote(Vote::Yes)),
            (Aborted, ControlKind::Prepare) => reply(ControlKind::Vote(Vote::No)),
            (Prepared, ControlKind::Commit) => {
                let body = self.pending.take().expect("prepared participant holds a body");
                resource.apply(&body);
                self.state = Committed;
                reply(ControlKind::Ack)
            }
            (Prepared, ControlKind::Abort) => {
                self.pending = None;
                self.state = Aborted;
                reply(ControlKind::Ack)
            }
            (Idle, ControlKind::Abort) => {
                self.refused = true;
                reply(ControlKind::Ack)
            }
            (Committed, ControlKind::Commit) | (Aborted, ControlKind::Abort) => {
                reply(ControlKind::Ack)
            }
            (state, kind) => Err(invalid(state, kind.name())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Default)]
    struct Counter {
        applied: usize,
        reject: bool,
    }

    impl TxnResource for Counter {
        fn can_execute(&self, _: &Act) -> bool {
            !self.reject
        }
        fn apply(&mut self, _: &Act) {
            self.applied += 1;
        }
    }

    fn body() -> Act {
        Act::new("i", "transfer").with_param("amount", 100)
    }

    fn started(n: usize) -> (Coordinator, Vec<Outgoing>) {
        let mut c = Coordinator::new(TransactionId::new_random(), DEFAULT_PREPARE_TIMEOUT_SECS);
        let participants = (0..n).map(|i| format!("p{i}")).collect();
        let out = c
            .step(CoordinatorEvent::Start { participants, body: body() })
            .unwrap();
        (c, out)
    }

    fn kinds(out: &[Outgoing]) -> Vec<ControlKind> {
        out.iter().map(|o| o.message.kind.clone()).collect()
    }

    #[test]
    fn unanimous_yes_commits() {
        let (mut c, out) = started(2);
        assert_eq!(kinds(&out), vec![ControlKind::Prepare; 2]);
        assert_eq!(c.state(), CoordinatorState::Preparing);
        let out = c
            .step(CoordinatorEvent::Vote { from: "p0".into(), vote: Vote::Yes })
            .unwrap();
        assert!(out.is_empty());
        let out = c
            .step(CoordinatorEvent::Vote { from: "p1".into(), vote: Vote::Yes })
            .unwrap();
        assert_eq!(c.state(), CoordinatorState::Committed);
        assert_eq!(kinds(&out), vec![ControlKind::Commit; 2]);
    }

    #[test]
    fn any_no_aborts() {
        let (mut c, _) = started(2);
        c.step(CoordinatorEvent::Vote { from: "p0".into(), vote: Vote::Yes })
            .unwrap();
        let out = c
            .step(CoordinatorEvent::Vote { from: "p1".into(), vote: Vote::No })
            .unwrap();
        assert_eq!(c.state(), CoordinatorState::Aborted);
        assert_eq!(kinds(&out), vec![ControlKind::Abort; 2]);
        let to: Vec<_> = out.iter().map(|o| o.to.as_str()).collect();
        assert_eq!(to, ["p0", "p1"]);
    }

    #[test]
    fn timeout_after_partial_votes_aborts() {
        let (mut c, _) = started(2);
        c.step(CoordinatorEvent::Vote { from: "p0".into(), vote: Vote::Yes })
            .unwrap();
        let out = c.step(CoordinatorEvent::Timeout).unwrap();
        assert_eq!(c.state(), CoordinatorState::Aborted);
        assert_eq!(kinds(&out), vec![ControlKind::Abort; 2]);
        // a late timer is harmless
        assert!(c.step(CoordinatorEvent::Timeout).unwrap().is_empty());
    }

    #[test]
    fn terminal_states_are_sticky() {
        let (mut c, _) = started(1);
        c.step(CoordinatorEvent::Vote { from: "p0".into(), vote: Vote::Yes })
            .unwrap();
        assert_eq!(c.state(), CoordinatorState::Committed);
        let out = c
            .step(CoordinatorEvent::Vote { from: "p0".into(), vote: Vote::No })
            .unwrap();
        assert_eq!(c.state(), CoordinatorState::Committed);
        assert_eq!(kinds(&out), vec![ControlKind::Commit]);
        c.step(CoordinatorEvent::Ack { from: "p0".into() }).unwrap();
        assert!(c.is_finished());
        assert!(c.step(CoordinatorEvent::Retransmit).unwrap().is_empty());
    }

    #[test]
    fn coordinator_rejects_invalid_events() {
        let mut c = Coordinator::new(TransactionId::new_random(), 1.0);
        assert!(matches!(
            c.step(CoordinatorEvent::Timeout),
            Err(TxnError::InvalidTransition { .. })
        ));
        assert!(matches!(
            c.step(CoordinatorEvent::Vote { from: "p0".into(), vote: Vote::Yes }),
            Err(TxnError::InvalidTransition { .. })
        ));
        let (mut c, _) = started(1);
        assert!(matches!(
            c.step(CoordinatorEvent::Start { participants: vec!["x".into()], body: body() }),
            Err(TxnError::InvalidTransition { .. })
        ));
        assert!(matches!(
            c.step(CoordinatorEvent::Ack { from: "p0".into() }),
            Err(TxnError::InvalidTransition { .. })
        ));
        assert_eq!(
            c.step(CoordinatorEvent::Vote { from: "zz".into(), vote: Vote::Yes }),
            Err(TxnError::UnknownParticipant("zz".into()))
        );
    }

    #[test]
    fn retransmit_targets_missing_voters() {
        let (mut c, _) = started(3);
        c.step(CoordinatorEvent::Vote { from: "p1".into(), vote: Vote::Yes })
            .unwrap();
        let out = c.step(CoordinatorEvent::Retransmit).unwrap();
        let to: Vec<_> = out.iter().map(|o| o.to.as_str()).collect();
        assert_eq!(to, ["p0", "p2"]);
    }

    #[test]
    fn prepare_with_valid_body_votes_yes() {
        let txn = TransactionId::new_random();
        let mut p = Participant::new(txn.clone());
        let mut r = Counter::default();
        let reply = p.step(&TxnControlMessage::prepare(txn, body()), &mut r).unwrap();
        assert_eq!(reply.unwrap().kind, ControlKind::Vote(Vote::Yes));
        assert_eq!(p.state(), ParticipantState::Prepared);
        assert!(p.pending().is_some());
    }

    #[test]
    fn unexecutable_body_votes_no() {
        let txn = TransactionId::new_random();
        let mut p = Participant::new(txn.clone());
        let mut r = Counter { reject: true, ..Default::default() };
        let reply = p.step(&TxnControlMessage::prepare(txn.clone(), body()), &mut r).unwrap();
        assert_eq!(reply.unwrap().kind, ControlKind::Vote(Vote::No));
        assert_eq!(p.state(), ParticipantState::Idle);
        // the refusal sticks even if the resource frees up
        r.reject = false;
        let reply = p.step(&TxnControlMessage::prepare(txn, body()), &mut r).unwrap();
        assert_eq!(reply.unwrap().kind, ControlKind::Vote(Vote::No));
    }

    #[test]
    fn duplicate_commit_applies_once() {
        let txn = TransactionId::new_random();
        let mut p = Participant::new(txn.clone());
        let mut r = Counter::default();
        p.step(&TxnControlMessage::prepare(txn.clone(), body()), &mut r).unwrap();
        let commit = TxnControlMessage::new(ControlKind::Commit, txn);
        for _ in 0..2 {
            let reply = p.step(&commit, &mut r).unwrap();
            assert_eq!(reply.unwrap().kind, ControlKind::Ack);
        }
        assert_eq!(p.state(), ParticipantState::Committed);
        assert_eq!(r.applied, 1);
    }

    #[test]
    fn abort_in_idle_acks() {
        let txn = TransactionId::new_random();
        let mut p = Participant::new(txn.clone());
        let mut r = Counter::default();
        let reply = p
            .step(&TxnControlMessage::new(ControlKind::Abort, txn.clone()), &mut r)
            .unwrap();
        assert_eq!(reply.unwrap().kind, ControlKind::Ack);
        assert_eq!(p.state(), ParticipantState::Idle);
        // a PREPARE delayed past the abort is refused
        let reply = p.step(&TxnControlMessage::prepare(txn, body()), &mut r).unwrap();
        assert_eq!(reply.unwrap().kind, ControlKind::Vote(Vote::No));
    }

    #[test]
    fn participant_rejects_conflicting_decisions() {
        let txn = TransactionId::new_random();
        let mut p = Participant::new(txn.clone());
        let mut r = Counter::default();
        assert!(p
            .step(&TxnControlMessage::new(ControlKind::Commit, txn.clone()), &mut r)
            .is_err());
        p.step(&TxnControlMessage::prepare(txn.clone(), body()), &mut r).unwrap();
        p.step(&TxnControlMessage::new(ControlKind::Abort, txn.clone()), &mut r)
            .unwrap();
        assert!(matches!(
            p.step(&TxnControlMessage::new(ControlKind::Commit, txn.clone()), &mut r),
            Err(TxnError::InvalidTransition { .. })
        ));
        assert_eq!(r.applied, 0);
        let other = TransactionId::new_random();
        assert!(matches!(
            p.step(&TxnControlMessage::new(ControlKind::Abort, other), &mut r),
            Err(TxnError::WrongTransaction { .. })
        ));
    }
}
