mod common;

use lacp::semantic::{
    decode_payload, encode_payload, to_canonical_vec, validate_payload, MessageType,
    SemanticError, SemanticPayload,
};
use proptest::prelude::*;
use serde_json::{json, Value};

fn fields_of(p: &SemanticPayload) -> serde_json::Map<String, Value> {
    p.to_value().as_object().cloned().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn encode_decode_round_trip(p in common::payload()) {
        let bytes = encode_payload(&p);
        let back = decode_payload(&bytes).unwrap();
        prop_assert_eq!(&back, &p);
        prop_assert_eq!(encode_payload(&back), bytes);
    }

    #[test]
    fn every_mandatory_deletion_names_the_field(p in common::payload()) {
        let kind = p.message_type();
        for field in std::iter::once("type").chain(kind.mandatory_fields().iter().copied()) {
            let mut obj = fields_of(&p);
            prop_assert!(obj.remove(field).is_some());
            prop_assert_eq!(
                validate_payload(&Value::Object(obj.clone())),
                Err(SemanticError::MissingField(field))
            );
            obj.insert(field.into(), Value::Null);
            prop_assert_eq!(
                validate_payload(&Value::Object(obj)),
                Err(SemanticError::MissingField(field))
            );
        }
    }

    #[test]
    fn every_optional_combination_round_trips(p in common::payload()) {
        let optional = p.message_type().optional_fields();
        for mask in 0u32..(1 << optional.len()) {
            let mut obj = fields_of(&p);
            for (i, field) in optional.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    obj.remove(*field);
                }
            }
            let value = Value::Object(obj);
            let parsed = validate_payload(&value).unwrap();
            prop_assert_eq!(to_canonical_vec(&parsed.to_value()), to_canonical_vec(&value));
        }
    }

    #[test]
    fn unknown_fields_survive(p in common::payload(), extra in common::json()) {
        prop_assume!(!extra.is_null());
        let mut obj = fields_of(&p);
        obj.insert("zz_vendor".into(), extra.clone());
        let parsed = validate_payload(&Value::Object(obj)).unwrap();
        prop_assert_eq!(parsed.to_value()["zz_vendor"].clone(), extra);
    }

    #[test]
    fn garbage_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = decode_payload(&bytes);
    }
}

#[test]
fn mandatory_field_tables() {
    assert_eq!(MessageType::Plan.mandatory_fields(), ["intent_id", "role", "natural_language"]);
    assert_eq!(MessageType::Act.mandatory_fields(), ["intent_id", "tool_call", "params"]);
    assert_eq!(MessageType::Observe.mandatory_fields(), ["intent_id", "status", "output"]);
}

#[test]
fn concrete_messages() {
    let act = validate_payload(&json!({
        "type": "ACT", "intent_id": "i-1", "tool_call": "calculator",
        "params": {"expression": "15*7"}, "deadline": 1760000000.5
    }))
    .unwrap();
    let act = act.as_act().unwrap();
    assert_eq!(act.deadline_secs(), Some(1_760_000_000.5));
    assert_eq!(act.cost_cap, None);

    assert_eq!(
        validate_payload(&json!({"type": "ASK", "intent_id": "i"})),
        Err(SemanticError::UnknownType("ASK".into()))
    );
    assert!(matches!(
        validate_payload(&json!({"type": "OBSERVE", "intent_id": "i", "status": "maybe", "output": 1})),
        Err(SemanticError::MalformedField { field: "status", .. })
    ));
    assert!(matches!(
        validate_payload(&json!({"type": "ACT", "intent_id": "i", "tool_call": "t", "params": [1]})),
        Err(SemanticError::MalformedField { field: "params", .. })
    ));
    assert!(matches!(
        validate_payload(&json!({"type": "ACT", "intent_id": "i", "tool_call": "t", "params": {}, "cost_cap": -1})),
        Err(SemanticError::MalformedField { field: "cost_cap", .. })
    ));
    let long = "x".repeat(257);
    assert!(matches!(
        validate_payload(&json!({"type": "PLAN", "intent_id": long, "role": "r", "natural_language": "n"})),
        Err(SemanticError::MalformedField { field: "intent_id", .. })
    ));
}

#[test]
fn canonical_bytes_are_key_sorted() {
    let v = json!({"b": 1, "a": {"d": [true, null], "c": "é\n"}});
    assert_eq!(
        to_canonical_vec(&v),
        r#"{"a":{"c":"é\n","d":[true,null]},"b":1}"#.as_bytes()
    );
}
