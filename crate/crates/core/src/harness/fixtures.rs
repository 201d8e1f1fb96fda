//! Benchmark payloads with fixed, documented contents.
//!
//! Each fixture is a JSON object whose canonical encoding is exactly the
//! scenario size. A filler string field absorbs the difference between the
//! structured content and the target size.
//!
//! * small (51 B): a heartbeat/ACK body
//! * medium (151 B): a tool call with a few parameters
//! * large (1,964 B): a multi-step pick-and-place plan for a robot arm with
//!   joint coordinates for every waypoint

use serde_json::{json, Map, Value};

use crate::semantic::to_canonical_vec;

pub const SMALL_BYTES: usize = 51;
pub const MEDIUM_BYTES: usize = 151;
pub const LARGE_BYTES: usize = 1_964;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub payload: Map<String, Value>,
}

impl Scenario {
    pub fn payload_bytes(&self) -> Vec<u8> {
        to_canonical_vec(&Value::Object(self.payload.clone()))
    }
}

/// The three default scenarios, smallest first.
pub fn default_scenarios() -> Vec<Scenario> {
    vec![
        Scenario {
            name: "small".into(),
            payload: small_payload(),
        },
        Scenario {
            name: "medium".into(),
            payload: medium_payload(),
        },
        Scenario {
            name: "large".into(),
            payload: large_payload(),
        },
    ]
}

pub fn small_payload() -> Map<String, Value> {
    padded(json!({"kind": "heartbeat", "seq": 1}), "pad", SMALL_BYTES)
}

pub fn medium_payload() -> Map<String, Value> {
    padded(
        json!({
            "tool": "weather.forecast",
            "args": {"city": "Berlin", "units": "metric", "days": 3},
            "reply_to": "agent-7",
        }),
        "note",
        MEDIUM_BYTES,
    )
}

pub fn large_payload() -> Map<String, Value> {
    let mut steps = Vec::new();
    let waypoints: [(&str, [f64; 6]); 8] = [
        ("home", [0.0, -90.0, 90.0, 0.0, 90.0, 0.0]),
        ("approach_bin", [12.5, -60.25, 75.5, -15.0, 88.0, 4.5]),
        ("descend_bin", [12.5, -48.75, 82.0, -33.25, 88.0, 4.5]),
        ("grasp", [12.5, -47.5, 83.25, -35.75, 88.0, 4.5]),
        ("lift", [12.5, -62.0, 74.0, -12.0, 88.0, 4.5]),
        ("transit", [-35.0, -70.5, 80.25, -9.75, 91.5, -20.0]),
        ("place", [-35.0, -52.0, 88.5, -36.5, 91.5, -20.0]),
        ("retreat", [-35.0, -72.25, 79.0, -6.75, 91.5, -20.0]),
    ];
    for (i, (name, joints)) in waypoints.iter().enumerate() {
        steps.push(json!({
            "step": i + 1,
            "action": name,
            "joints_deg": joints,
            "speed": if *name == "transit" { 0.8 } else { 0.25 },
            "gripper": if (3..6).contains(&i) { "closed" } else { "open" },
        }));
    }
    padded(
        json!({
            "plan_id": "pick-place-0042",
            "robot": "arm-6dof-left",
            "frame": "base_link",
            "steps": steps,
            "constraints": {"max_joint_velocity": 1.2, "collision_margin_m": 0.02, "workspace": [-0.8, 0.8, -0.8, 0.8, 0.0, 1.2]},
        }),
        "notes",
        LARGE_BYTES,
    )
}

/// Adds `field` as a run of filler text so the canonical encoding is exactly `target` bytes.
fn padded(base: Value, field: &str, target: usize) -> Map<String, Value> {
    let mut map = base.as_object().cloned().expect("fixture base is an object");
    map.insert(field.into(), Value::String(String::new()));
    let current = to_canonical_vec(&Value::Object(map.clone())).len();
    assert!(current <= target, "fixture base is {current} bytes, over {target}");
    let filler: String = "lorem ipsum dolor sit amet "
        .chars()
        .cycle()
        .take(target - current)
        .collect();
    map.insert(field.into(), Value::String(filler));
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_sizes_are_exact() {
        let sizes: Vec<usize> = default_scenarios()
            .iter()
            .map(|s| s.payload_bytes().len())
            .collect();
        assert_eq!(sizes, [SMALL_BYTES, MEDIUM_BYTES, LARGE_BYTES]);
    }

    #[test]
    fn fixtures_are_stable() {
        assert_eq!(
            String::from_utf8(small_payload_bytes()).unwrap(),
            r#"{"kind":"heartbeat","pad":"lorem ipsum do","seq":1}"#
        );
    }

    fn small_payload_bytes() -> Vec<u8> {
        to_canonical_vec(&Value::Object(small_payload()))
    }
}
