//! Token alignment scores `x_j(a)` and the sliding-window field `f(t, a)`.
//!
//! Permutations are always re-derived from the observed tokens, never from
//! generation-side state.

use std::fmt::Write as _;

use crate::embedder::Trace;
use crate::error::{invalid, Error, Result};
use crate::keyed_signal::{context_before, AgentKey, KeyedSignal};

pub const DEFAULT_WINDOW: usize = 64;
pub const DEFAULT_STEP: usize = 16;

/// `x_j(a)` for a single position.
pub fn token_score(trace: &Trace, j: usize, key: &AgentKey) -> Result<f64> {
    if j >= trace.len() {
        return Err(invalid(format!("position {j} outside trace of {} tokens", trace.len())));
    }
    let mut signal = KeyedSignal::new(key.clone(), trace.vocab_size)?;
    let ctx = context_before(&trace.tokens, j, key.context_len());
    signal.token_score(&ctx, trace.tokens[j])
}

/// `x_j(a)` for every position of `tokens`.
pub fn token_scores(tokens: &[u32], signal: &mut KeyedSignal) -> Result<Vec<f64>> {
    let ctx_len = signal.key().context_len();
    (0..tokens.len())
        .map(|j| signal.token_score(&context_before(tokens, j, ctx_len), tokens[j]))
        .collect()
}

/// Per-agent token-score rows, `rows[a][j]`.
pub fn token_score_matrix(tokens: &[u32], vocab_size: usize, keys: &[AgentKey]) -> Result<Vec<Vec<f64>>> {
    keys.iter()
        .map(|key| {
            let mut signal = KeyedSignal::new(key.clone(), vocab_size)?;
            token_scores(tokens, &mut signal)
        })
        .collect()
}

/// Null-calibrated z statistic of a mean token score: `mean / (σ₀/√n)` with
/// `σ₀² = mean(φ²)`, the per-token variance of a score under a wrong key.
pub fn null_z(scores: &[f64], phi: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let sigma0 = (phi.iter().map(|p| p * p).sum::<f64>() / phi.len() as f64).sqrt();
    mean / (sigma0 / n.sqrt())
}

/// Window-score matrix `f(t, a)` over window starts `0, step, 2·step, ...`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreField {
    /// `values[t][a]` for window index `t`.
    pub values: Vec<Vec<f64>>,
    pub window: usize,
    pub step: usize,
    pub agents: Vec<String>,
    pub trace_len: usize,
}

impl ScoreField {
    pub fn n_windows(&self) -> usize {
        self.values.len()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn get(&self, t: usize, a: usize) -> f64 {
        self.values[t][a]
    }

    pub fn window_start(&self, t: usize) -> usize {
        t * self.step
    }

    /// Token position a window score describes: `start + ⌊w/2⌋`.
    pub fn window_center(&self, t: usize) -> usize {
        t * self.step + self.window / 2
    }

    pub fn column(&self, a: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[a]).collect()
    }

    /// CSV with header `t,agent_id,f`, one row per (window start, agent).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,agent_id,f\n");
        for (t, row) in self.values.iter().enumerate() {
            for (agent, f) in self.agents.iter().zip(row) {
                let _ = writeln!(out, "{},{},{}", self.window_start(t), agent, f);
            }
        }
        out
    }
}

/// Builds the field from precomputed token scores (`rows[a][j]`).
///
/// Each window mean is a direct sum over its members so that it equals the
/// arithmetic mean of its token scores exactly.
pub fn field_from_token_scores(
    rows: &[Vec<f64>],
    agents: Vec<String>,
    window: usize,
    step: usize,
) -> Result<ScoreField> {
    if window == 0 || step == 0 {
        return Err(invalid("window and step must be >= 1"));
    }
    if rows.len() != agents.len() || rows.is_empty() {
        return Err(invalid("need one token-score row per agent and at least one agent"));
    }
    let trace_len = rows[0].len();
    if rows.iter().any(|r| r.len() != trace_len) {
        return Err(invalid("token-score rows differ in length"));
    }
    if trace_len < window {
        return Err(Error::EmptyField { trace_len, window });
    }
    let n = (trace_len - window) / step + 1;
    let values = (0..n)
        .map(|t| {
            let s = t * step;
            rows.iter()
                .map(|r| r[s..s + window].iter().sum::<f64>() / window as f64)
                .collect()
        })
        .collect();
    Ok(ScoreField {
        values,
        window,
        step,
        agents,
        trace_len,
    })
}

pub fn window_scores(trace: &Trace, keys: &[AgentKey], window: usize, step: usize) -> Result<ScoreField> {
    if window == 0 || step == 0 {
        return Err(invalid("window and step must be >= 1"));
    }
    if trace.len() < window {
        return Err(Error::EmptyField {
            trace_len: trace.len(),
            window,
        });
    }
    let rows = token_score_matrix(&trace.tokens, trace.vocab_size, keys)?;
    field_from_token_scores(&rows, keys.iter().map(|k| k.agent_id.clone()).collect(), window, step)
}
