//! Size and latency of the full signed pipeline against an unverified echo.
//!
//! Both paths run over the in-process loopback on one thread. Sizes are the
//! frame body of the request: the raw payload for the baseline, the compact
//! envelope for the signed path. The 10-byte frame header is common to both
//! and left out.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;

use super::fixtures::{default_scenarios, Scenario};
use super::HarnessError;
use crate::client::Client;
use crate::envelope::{compact_encode, keygen, Keystore};
use crate::node::{Node, ToolOutcome};
use crate::semantic::Act;
use crate::transport::{
    EchoHandler, Frame, FrameClass, HandlerLoopback, TransportAdapter, MAX_BODY_LEN,
};

/// Payloads larger than this cannot fit a frame once base64url-encoded and signed.
pub const MAX_SCENARIO_BYTES: usize = MAX_BODY_LEN / 2;

const WARMUP_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Serialize)]
pub struct LatencySummary {
    pub median_us: f64,
    pub p90_us: f64,
    pub p99_us: f64,
    pub mean_us: f64,
}

impl LatencySummary {
    fn from_samples(samples: &mut [Duration]) -> Self {
        samples.sort_unstable();
        let us = |d: Duration| d.as_secs_f64() * 1e6;
        let pick = |q: f64| {
            let idx = ((samples.len() - 1) as f64 * q).round() as usize;
            us(samples[idx])
        };
        let median = if samples.len().is_multiple_of(2) {
            let hi = samples.len() / 2;
            (us(samples[hi - 1]) + us(samples[hi])) / 2.0
        } else {
            us(samples[samples.len() / 2])
        };
        let mean = samples.iter().map(|d| us(*d)).sum::<f64>() / samples.len() as f64;
        LatencySummary {
            median_us: median,
            p90_us: pick(0.90),
            p99_us: pick(0.99),
            mean_us: mean,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub payload_bytes: usize,
    pub baseline_bytes: usize,
    pub lacp_bytes: usize,
    pub size_overhead_pct: f64,
    pub baseline_latency: LatencySummary,
    pub lacp_latency: LatencySummary,
    /// From medians.
    pub latency_overhead_pct: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub iterations: usize,
    pub scenarios: Vec<ScenarioReport>,
}

pub fn overhead_pct(lacp: f64, baseline: f64) -> f64 {
    (lacp - baseline) / baseline * 100.0
}

impl BenchReport {
    pub fn scenario(&self, name: &str) -> Option<&ScenarioReport> {
        self.scenarios.iter().find(|s| s.scenario == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>9} {:>9} {:>9} {:>12} {:>12} {:>10}",
            "scenario", "baseline", "lacp", "size +%", "base p50 us", "lacp p50 us", "lat +%"
        )?;
        for s in &self.scenarios {
            writeln!(
                f,
                "{:<8} {:>9} {:>9} {:>9.1} {:>12.2} {:>12.2} {:>10.1}",
                s.scenario,
                s.baseline_bytes,
                s.lacp_bytes,
                s.size_overhead_pct,
                s.baseline_latency.median_us,
                s.lacp_latency.median_us,
                s.latency_overhead_pct
            )?;
        }
        write!(f, "iterations per path: {}", self.iterations)
    }
}

/// Runs every scenario `iterations` times down each path.
pub fn bench_run(scenarios: &[Scenario], iterations: usize) -> Result<BenchReport, HarnessError> {
    if iterations == 0 {
        return Err(HarnessError::ZeroIterations);
    }
    for s in scenarios {
        let size = s.payload_bytes().len();
        if size > MAX_SCENARIO_BYTES {
            return Err(HarnessError::ScenarioTooLarge {
                scenario: s.name.clone(),
                bytes: size,
            });
        }
    }

    let server = keygen("bench-server")?;
    let client_id = keygen("bench-client")?;
    let mut node_keys = Keystore::new();
    node_keys.insert(client_id.public_only())?;
    let node = Node::builder(server.clone(), node_keys)
        .with_calculator(false)
        .build()?;
    node.register_tool("echo", |params: &serde_json::Map<String, Value>, _: Option<f64>| {
        ToolOutcome::ok(Value::Object(params.clone()))
    })?;
    let node = Arc::new(node);
    let mut client_keys = Keystore::new();
    client_keys.insert(server.public_only())?;
    let mut client = Client::new(HandlerLoopback::new(Arc::clone(&node)), client_id, client_keys)?;
    let mut baseline = HandlerLoopback::new(EchoHandler);

    let mut reports = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        reports.push(run_scenario(scenario, iterations, &mut client, &mut baseline, node.agent_id())?);
    }
    Ok(BenchReport {
        iterations,
        scenarios: reports,
    })
}

pub fn bench_default(iterations: usize) -> Result<BenchReport, HarnessError> {
    bench_run(&default_scenarios(), iterations)
}

fn act_for(scenario: &Scenario) -> Act {
    let mut act = Act::new(format!("bench-{}", scenario.name), "echo");
    act.params = scenario.payload.clone();
    act
}

fn run_scenario(
    scenario: &Scenario,
    iterations: usize,
    client: &mut Client<HandlerLoopback<Arc<Node>>>,
    baseline: &mut HandlerLoopback<EchoHandler>,
    server_id: &str,
) -> Result<ScenarioReport, HarnessError> {
    let payload = scenario.payload_bytes();
    let server_id = server_id.to_owned();

    let baseline_once = |baseline: &mut HandlerLoopback<EchoHandler>| -> Result<(), HarnessError> {
        baseline.send(&Frame::new(FrameClass::Request, payload.clone()))?;
        let reply = baseline.receive(None)?;
        if reply.body.len() != payload.len() {
            return Err(HarnessError::Unexpected("baseline echo changed the payload".into()));
        }
        Ok(())
    };
    let lacp_once = |client: &mut Client<HandlerLoopback<Arc<Node>>>| -> Result<usize, HarnessError> {
        let envelope = client.seal(&server_id, act_for(scenario).into())?;
        let size = compact_encode(&envelope).len();
        match client.exchange(&envelope, FrameClass::Request, &server_id)? {
            crate::client::Exchange::Reply(obs) if obs.status_code() == Some(200) => Ok(size),
            other => Err(HarnessError::Unexpected(format!("bench exchange failed: {other:?}"))),
        }
    };

    for _ in 0..WARMUP_ITERATIONS.min(iterations) {
        baseline_once(baseline)?;
        lacp_once(client)?;
    }

    let mut base_samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        baseline_once(baseline)?;
        base_samples.push(t.elapsed());
    }
    let mut lacp_samples = Vec::with_capacity(iterations);
    let mut lacp_sizes = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let t = Instant::now();
        let size = lacp_once(client)?;
        lacp_samples.push(t.elapsed());
        lacp_sizes.push(size);
    }
    lacp_sizes.sort_unstable();
    let lacp_bytes = lacp_sizes[lacp_sizes.len() / 2];

    let baseline_latency = LatencySummary::from_samples(&mut base_samples);
    let lacp_latency = LatencySummary::from_samples(&mut lacp_samples);
    Ok(ScenarioReport {
        scenario: scenario.name.clone(),
        payload_bytes: payload.len(),
        baseline_bytes: payload.len(),
        lacp_bytes,
        size_overhead_pct: overhead_pct(lacp_bytes as f64, payload.len() as f64),
        latency_overhead_pct: overhead_pct(lacp_latency.median_us, baseline_latency.median_us),
        baseline_latency,
        lacp_latency,
        iterations,
    })
}
