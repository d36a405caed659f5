//! Keyed logit modulation and the multi-agent generation loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::keyed_signal::{context_before, AgentKey, KeyManifest, KeyedSignal};
use crate::token_source::{softmax, TokenDistributionSource};

/// Half-open `[start, end)` span of tokens written by one agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(usize, usize, String)", into = "(usize, usize, String)")]
pub struct LabeledSpan {
    pub start: usize,
    pub end: usize,
    pub agent_id: String,
}

impl LabeledSpan {
    pub fn new(start: usize, end: usize, agent_id: impl Into<String>) -> Self {
        Self {
            start,
            end,
            agent_id: agent_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

impl From<(usize, usize, String)> for LabeledSpan {
    fn from((start, end, agent_id): (usize, usize, String)) -> Self {
        Self { start, end, agent_id }
    }
}

impl From<LabeledSpan> for (usize, usize, String) {
    fn from(s: LabeledSpan) -> Self {
        (s.start, s.end, s.agent_id)
    }
}

/// Checks that spans are sorted, contiguous, cover `[0, len)` and that
/// neighbours carry different agents.
pub fn validate_cover(spans: &[LabeledSpan], len: usize) -> Result<()> {
    let mut cursor = 0;
    for (i, s) in spans.iter().enumerate() {
        if s.start != cursor || s.end <= s.start {
            return Err(invalid(format!(
                "segment {i} [{}, {}) does not continue the cover at {cursor}",
                s.start, s.end
            )));
        }
        if i > 0 && spans[i - 1].agent_id == s.agent_id {
            return Err(invalid(format!("segments {} and {i} share agent {}", i - 1, s.agent_id)));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(invalid(format!("segments cover [0, {cursor}) but trace has {len} tokens")));
    }
    Ok(())
}

/// A token log plus optional ground truth; the only artifact the detector reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub vocab_size: usize,
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub ground_truth: Option<Vec<LabeledSpan>>,
    #[serde(default)]
    pub seed: u64,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be >= 2"));
        }
        if let Some(pos) = self.tokens.iter().position(|&t| t as usize >= self.vocab_size) {
            return Err(invalid(format!(
                "tokens[{pos}] = {} outside vocabulary of {}",
                self.tokens[pos], self.vocab_size
            )));
        }
        if let Some(gt) = &self.ground_truth {
            validate_cover(gt, self.tokens.len())?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let trace: Trace = serde_json::from_str(text).map_err(|e| invalid(format!("trace: {e}")))?;
        trace.validate()?;
        Ok(trace)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace serializes")
    }
}

/// Ordered `(agent_id, segment_length)` turns of a linearized execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationSchedule {
    pub turns: Vec<(String, usize)>,
}

impl GenerationSchedule {
    pub fn new(turns: Vec<(String, usize)>) -> Result<Self> {
        let s = Self { turns };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (agent, len)) in self.turns.iter().enumerate() {
            if *len == 0 {
                return Err(invalid(format!("turn {i} of {agent} has zero length")));
            }
            if i > 0 && self.turns[i - 1].0 == *agent {
                return Err(invalid(format!("turns {} and {i} repeat agent {agent}", i - 1)));
            }
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        self.turns.iter().map(|(_, l)| l).sum()
    }
}

/// `𝒫⁻¹(k_π, ℱ(k_p, κ, 𝒫(k_π, L)))`: permute the logits, add `κ·φ` in permuted
/// space, permute back. Equivalent to `L[v] + κ·φ(π(v))`.
pub fn modulate_logits(logits: &[f64], key: &AgentKey, context: &[u32]) -> Result<Vec<f64>> {
    let mut signal = KeyedSignal::new(key.clone(), logits.len())?;
    modulate_with(&mut signal, logits, context)
}

pub(crate) fn modulate_with(signal: &mut KeyedSignal, logits: &[f64], context: &[u32]) -> Result<Vec<f64>> {
    if logits.len() != signal.vocab_size() {
        return Err(invalid(format!(
            "logits have length {} but vocabulary is {}",
            logits.len(),
            signal.vocab_size()
        )));
    }
    let kappa = signal.key().kappa;
    let perm = signal.permutation(context)?.clone();
    let mut permuted = perm.apply(logits);
    for (slot, phi) in permuted.iter_mut().zip(signal.phi()) {
        *slot += kappa * phi;
    }
    Ok(perm.unapply(&permuted))
}

fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    // rounding left u above the final partial sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as u32
}

/// Appends `length` watermarked tokens to `history`.
pub(crate) fn extend_segment(
    source: &TokenDistributionSource,
    signal: &mut KeyedSignal,
    history: &mut Vec<u32>,
    length: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let ctx_len = signal.key().context_len();
    for _ in 0..length {
        let tail_start = history.len().saturating_sub(source.context_len());
        let logits = source.next_logits(&history[tail_start..])?;
        let ctx = context_before(history, history.len(), ctx_len);
        let modulated = modulate_with(signal, &logits, &ctx)?;
        let tok = sample_categorical(&softmax(&modulated), rng);
        history.push(tok);
    }
    Ok(())
}

/// Samples `length` tokens autoregressively under `key`, continuing from
/// `context` (earlier tokens, possibly written by another agent).
pub fn generate_segment(
    source: &TokenDistributionSource,
    key: &AgentKey,
    context: &[u32],
    length: usize,
    rng_seed: u64,
) -> Result<Vec<u32>> {
    if length == 0 {
        return Err(invalid("segment length must be >= 1"));
    }
    let mut signal = KeyedSignal::new(key.clone(), source.vocab_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut history = context.to_vec();
    extend_segment(source, &mut signal, &mut history, length, &mut rng)?;
    Ok(history.split_off(context.len()))
}

/// Generates one trace following `schedule`. Context rolls across agent
/// boundaries, so each new agent conditions on its predecessor's last tokens.
pub fn generate_trace(
    source: &TokenDistributionSource,
    keys: &KeyManifest,
    schedule: &GenerationSchedule,
    seed: u64,
) -> Result<Trace> {
    schedule.validate()?;
    let mut signals = Vec::with_capacity(keys.keys.len());
    for key in &keys.keys {
        signals.push(KeyedSignal::new(key.clone(), source.vocab_size)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::with_capacity(schedule.total_len());
    let mut ground_truth = Vec::with_capacity(schedule.turns.len());
    for (agent, len) in &schedule.turns {
        let idx = keys
            .index_of(agent)
            .ok_or_else(|| invalid(format!("schedule agent {agent} has no key")))?;
        let start = tokens.len();
        extend_segment(source, &mut signals[idx], &mut tokens, *len, &mut rng)?;
        ground_truth.push(LabeledSpan::new(start, tokens.len(), agent.clone()));
    }
    Ok(Trace {
        vocab_size: source.vocab_size,
        tokens,
        ground_truth: Some(ground_truth),
        seed,
    })
}
