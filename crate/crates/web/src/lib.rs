//! wasm-bindgen surface for the static demo page in `www/`.

use serde::Serialize;
use tracemark::evaluation::evaluate_trace;
use tracemark::keyed_signal::{consecutive_keys, derive_perturbation_vector, AgentKey, KeyManifest};
use tracemark::pipeline::{Detector, DetectorParams};
use tracemark::simulator::{synth_trace, Pattern, TopologySpec};
use tracemark::token_source::TokenDistributionSource;
use tracemark::transition_graph::{classify_topology, decode_bitmask, TopologyClass};
use wasm_bindgen::prelude::*;

const VOCAB: usize = 256;
const KEY_BASE: u64 = 42;

#[derive(Serialize)]
struct Span {
    start: usize,
    end: usize,
    agent: String,
}

#[derive(Serialize)]
struct Simulation {
    pattern: String,
    k: usize,
    len: usize,
    truth: Vec<Span>,
    detected: Vec<Span>,
    /// Smoothed competitive margin and leading agent index per window.
    margin: Vec<f64>,
    leader: Vec<usize>,
    window: usize,
    step: usize,
    topology: TopologyClass,
    adjacency: Vec<Vec<u8>>,
    token_acc: f64,
    iou: f64,
    edge_sim: f64,
}

/// Generates one trace and runs the detector on it.
pub fn simulate(pattern: &str, k: usize, kappa: f64, seed: u64) -> Result<String, String> {
    let pattern: Pattern = pattern.parse().map_err(|e: tracemark::error::Error| e.to_string())?;
    let keys = KeyManifest::new(consecutive_keys(k, KEY_BASE, kappa)).map_err(|e| e.to_string())?;
    let spec = TopologySpec { seed, ..TopologySpec::new(pattern, k) };
    spec.validate().map_err(|e| e.to_string())?;
    let source = TokenDistributionSource::uniform(VOCAB).map_err(|e| e.to_string())?;
    let trace = synth_trace(&spec, &source, &keys, 0).map_err(|e| e.to_string())?;
    let params = DetectorParams::default();
    let d = Detector::new(&keys, params)
        .and_then(|det| det.detect(&trace))
        .map_err(|e| e.to_string())?;
    let m = evaluate_trace("demo", &d.attribution, &d.graph, &trace).map_err(|e| e.to_string())?;
    let sim = Simulation {
        pattern: pattern.as_str().to_string(),
        k,
        len: trace.len(),
        truth: trace
            .ground_truth
            .iter()
            .flatten()
            .map(|s| Span { start: s.start, end: s.end, agent: s.agent_id.clone() })
            .collect(),
        detected: d
            .attribution
            .segments
            .iter()
            .map(|s| Span { start: s.start, end: s.end, agent: s.agent_id.clone() })
            .collect(),
        margin: d.margin.z,
        leader: d.margin.leader,
        window: params.window,
        step: params.step,
        topology: d.graph.topology_class,
        adjacency: d.graph.adjacency,
        token_acc: m.token_acc,
        iou: m.iou,
        edge_sim: m.edge_sim,
    };
    Ok(serde_json::to_string(&sim).expect("simulation serializes"))
}

/// The agent's perturbation values `κ·φ(u)` over permuted indices.
pub fn profile(watermark_id: u64, vocab_size: usize, kappa: f64) -> Result<Vec<f64>, String> {
    let key = AgentKey::new("a", watermark_id).with_kappa(kappa);
    let phi = derive_perturbation_vector(&key, vocab_size).map_err(|e| e.to_string())?;
    Ok(phi.into_iter().map(|v| kappa * v).collect())
}

/// Topology class of a `k`-agent transition bitmask.
pub fn classify(mask: u64, k: usize) -> Result<String, String> {
    let m = decode_bitmask(mask, k).map_err(|e| e.to_string())?;
    Ok(classify_topology(&m, k).as_str().to_string())
}

#[wasm_bindgen]
pub fn simulate_trace(pattern: &str, k: usize, kappa: f64, seed: u32) -> Result<String, JsValue> {
    simulate(pattern, k, kappa, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn perturbation_profile(watermark_id: u32, vocab_size: usize, kappa: f64) -> Result<Vec<f64>, JsValue> {
    profile(watermark_id as u64, vocab_size, kappa).map_err(|e| JsValue::from_str(&e))
}

/// `mask` arrives as a JS number; masks up to 2^53 are exact.
#[wasm_bindgen]
pub fn classify_pattern(mask: f64, k: usize) -> Result<String, JsValue> {
    if !(mask >= 0.0 && mask.fract() == 0.0 && mask <= 9_007_199_254_740_992.0) {
        return Err(JsValue::from_str("mask must be a non-negative integer below 2^53"));
    }
    classify(mask as u64, k).map_err(|e| JsValue::from_str(&e))
}
