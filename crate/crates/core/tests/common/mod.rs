#![allow(dead_code)]

use std::collections::BTreeMap;

use lacp::envelope::{AgentIdentity, EnvelopeClaims, TransactionId};
use lacp::semantic::{Act, MessageType, Observe, ObserveStatus, Plan, SemanticPayload};
use proptest::prelude::*;
use serde_json::{Map, Number, Value};

/// Non-empty identifier-ish text.
pub fn text() -> impl Strategy<Value = String> {
    "[a-zA-Z0-9 _.:/-]{1,24}"
}

/// Any unicode, including escapes the canonical writer must handle.
pub fn wild_text() -> impl Strategy<Value = String> {
    prop_oneof![text(), "\\PC{1,16}", "[\"\\\\\u{0}-\u{1f}\u{7f}é€😀]{1,8}"]
}

pub fn number() -> impl Strategy<Value = Number> {
    prop_oneof![
        any::<u32>().prop_map(Number::from),
        any::<i32>().prop_map(Number::from),
        (0.0f64..1e9).prop_map(|f| Number::from_f64(f).unwrap()),
    ]
}

pub fn non_negative() -> impl Strategy<Value = Number> {
    prop_oneof![
        any::<u32>().prop_map(Number::from),
        (0.0f64..1e10).prop_map(|f| Number::from_f64(f).unwrap()),
    ]
}

pub fn json() -> impl Strategy<Value = Value> {
    let leaf = prop_oneof![
        Just(Value::Null),
        any::<bool>().prop_map(Value::Bool),
        number().prop_map(Value::Number),
        wild_text().prop_map(Value::String),
    ];
    leaf.prop_recursive(3, 24, 4, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
            prop::collection::btree_map(wild_text(), inner, 0..4)
                .prop_map(|m| Value::Object(m.into_iter().collect())),
        ]
    })
}

pub fn object() -> impl Strategy<Value = Map<String, Value>> {
    prop::collection::btree_map(wild_text(), json(), 0..4).prop_map(|m| m.into_iter().collect())
}

/// Extra fields whose names cannot collide with the grammar.
pub fn extensions() -> impl Strategy<Value = BTreeMap<String, Value>> {
    prop::collection::btree_map("x_[a-z]{1,8}", json().prop_filter("non-null", |v| !v.is_null()), 0..3)
}

pub fn plan() -> impl Strategy<Value = Plan> {
    (
        text(),
        text(),
        wild_text(),
        prop::option::of(json().prop_filter("non-null", |v| !v.is_null())),
        extensions(),
    )
        .prop_map(|(intent_id, role, natural_language, graph_ops, extensions)| Plan {
            intent_id,
            role,
            natural_language,
            graph_ops,
            extensions,
        })
}

pub fn act() -> impl Strategy<Value = Act> {
    (
        text(),
        text(),
        object(),
        prop::option::of(non_negative()),
        prop::option::of(non_negative()),
        extensions(),
    )
        .prop_map(|(intent_id, tool_call, params, deadline, cost_cap, extensions)| Act {
            intent_id,
            tool_call,
            params,
            deadline,
            cost_cap,
            extensions,
        })
}

pub fn observe() -> impl Strategy<Value = Observe> {
    (
        text(),
        prop_oneof![
            Just(ObserveStatus::Ok),
            Just(ObserveStatus::Error),
            Just(ObserveStatus::Timeout)
        ],
        json().prop_filter("non-null", |v| !v.is_null()),
        prop::option::of(prop::collection::btree_map(text(), number(), 0..4)),
        extensions(),
    )
        .prop_map(|(intent_id, status, output, metrics, extensions)| Observe {
            intent_id,
            status,
            output,
            metrics,
            extensions,
        })
}

pub fn payload() -> impl Strategy<Value = SemanticPayload> {
    prop_oneof![
        plan().prop_map(SemanticPayload::Plan),
        act().prop_map(SemanticPayload::Act),
        observe().prop_map(SemanticPayload::Observe),
    ]
}

pub fn claims(sender: String, recipient: String) -> impl Strategy<Value = EnvelopeClaims> {
    (any::<u128>(), any::<u64>(), 1u64..4_000_000_000, payload()).prop_map(
        move |(id, sequence, timestamp, payload)| EnvelopeClaims {
            sender: sender.clone(),
            recipient: recipient.clone(),
            transaction_id: TransactionId::from_uuid(
                uuid::Builder::from_random_bytes(id.to_le_bytes()).into_uuid(),
            ),
            sequence,
            timestamp,
            payload,
        },
    )
}

pub fn message_type(p: &SemanticPayload) -> MessageType {
    p.message_type()
}

/// A fixed key, so tests that only need *a* signer skip key generation.
pub fn fixed_identity(id: &str, byte: u8) -> AgentIdentity {
    AgentIdentity::from_secret_bytes(id, &[byte; 32]).expect("constant scalar is valid")
}
