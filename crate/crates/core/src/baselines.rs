//! Watermark-free comparison methods built on TF-IDF prototypes of token
//! unigrams and bigrams.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedder::{LabeledSpan, Trace};
use crate::error::{invalid, Result};
use crate::segmenter::{window_to_token, AttributedSegment, SegmentAttribution};
use crate::token_source::softmax;

pub const DEFAULT_STICKINESS: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Feature {
    Unigram(u32),
    Bigram(u32, u32),
}

pub type SparseVec = BTreeMap<Feature, f64>;

fn term_counts(tokens: &[u32]) -> BTreeMap<Feature, f64> {
    let mut tf = BTreeMap::new();
    for &t in tokens {
        *tf.entry(Feature::Unigram(t)).or_insert(0.0) += 1.0;
    }
    for w in tokens.windows(2) {
        *tf.entry(Feature::Bigram(w[0], w[1])).or_insert(0.0) += 1.0;
    }
    tf
}

pub fn cosine(a: &SparseVec, b: &SparseVec) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small.iter().filter_map(|(f, x)| large.get(f).map(|y| x * y)).sum();
    let na: f64 = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Per-agent TF-IDF prototypes. IDF is fit on the prototype documents with
/// smoothing `ln((1+N)/(1+df)) + 1`; vectors are L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeModel {
    pub agents: Vec<String>,
    pub vectors: Vec<SparseVec>,
    idf: BTreeMap<Feature, f64>,
    n_docs: usize,
}

impl PrototypeModel {
    pub fn fit(agents: Vec<String>, documents: &[Vec<u32>]) -> Result<Self> {
        if agents.is_empty() || agents.len() != documents.len() {
            return Err(invalid("need one prototype document per agent"));
        }
        if let Some(i) = documents.iter().position(|d| d.is_empty()) {
            return Err(invalid(format!("prototype document of {} is empty", agents[i])));
        }
        let mut df: BTreeMap<Feature, usize> = BTreeMap::new();
        for doc in documents {
            for f in term_counts(doc).into_keys() {
                *df.entry(f).or_insert(0) += 1;
            }
        }
        let n = documents.len();
        let idf = df
            .into_iter()
            .map(|(f, d)| (f, ((1.0 + n as f64) / (1.0 + d as f64)).ln() + 1.0))
            .collect();
        let mut model = Self {
            agents,
            vectors: Vec::new(),
            idf,
            n_docs: n,
        };
        model.vectors = documents.iter().map(|d| model.vectorize(d)).collect();
        Ok(model)
    }

    /// Prototypes from each agent's first ground-truth segment.
    pub fn from_first_segments(trace: &Trace, agents: &[String]) -> Result<Self> {
        let gt = trace
            .ground_truth
            .as_ref()
            .ok_or_else(|| invalid("prototype fitting needs ground truth"))?;
        let docs = agents
            .iter()
            .map(|a| {
                gt.iter()
                    .find(|s| s.agent_id == *a)
                    .map(|s| trace.tokens[s.start..s.end].to_vec())
                    .ok_or_else(|| invalid(format!("agent {a} never speaks in the trace")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::fit(agents.to_vec(), &docs)
    }

    pub fn vectorize(&self, tokens: &[u32]) -> SparseVec {
        let unseen = (1.0 + self.n_docs as f64).ln() + 1.0;
        let mut v: SparseVec = term_counts(tokens)
            .into_iter()
            .map(|(f, tf)| (f, tf * self.idf.get(&f).copied().unwrap_or(unseen)))
            .collect();
        let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.values_mut().for_each(|x| *x /= norm);
        }
        v
    }

    pub fn similarities(&self, tokens: &[u32]) -> Vec<f64> {
        let v = self.vectorize(tokens);
        self.vectors.iter().map(|p| cosine(&v, p)).collect()
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
}

/// Builds a merged attribution from labeled spans; confidences of merged
/// spans are length-weighted.
fn merge_spans(spans: Vec<(usize, usize, usize, f64)>, agents: &[String]) -> SegmentAttribution {
    let mut merged: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (s, e, label, conf) in spans {
        match merged.last_mut() {
            Some(last) if last.2 == label => {
                let (l0, l1) = ((last.1 - last.0) as f64, (e - s) as f64);
                last.3 = (last.3 * l0 + conf * l1) / (l0 + l1);
                last.1 = e;
            }
            _ => merged.push((s, e, label, conf)),
        }
    }
    let segments: Vec<AttributedSegment> = merged
        .into_iter()
        .map(|(start, end, label, confidence)| AttributedSegment {
            start,
            end,
            agent_id: agents[label].clone(),
            confidence: confidence.clamp(0.0, 1.0),
        })
        .collect();
    SegmentAttribution {
        boundaries: segments.iter().skip(1).map(|s| s.start).collect(),
        segments,
    }
}

/// Labels each true segment by its most similar prototype.
pub fn oracle_attribute(trace: &Trace, model: &PrototypeModel) -> Result<SegmentAttribution> {
    let gt = trace
        .ground_truth
        .as_ref()
        .ok_or_else(|| invalid("oracle segmentation needs ground-truth boundaries"))?;
    let spans = gt
        .iter()
        .map(|s| {
            let sims = model.similarities(&trace.tokens[s.start..s.end]);
            let label = argmax_first(&sims);
            (s.start, s.end, label, sims[label])
        })
        .collect();
    Ok(merge_spans(spans, &model.agents))
}

/// Max-product decoding in log space. Ties prefer the lowest state index,
/// both for predecessors and for the final state. Returns the path and its
/// log score.
pub fn viterbi(log_emit: &[Vec<f64>], log_trans: &[Vec<f64>], log_init: &[f64]) -> (Vec<usize>, f64) {
    let n = log_emit.len();
    let k = log_init.len();
    if n == 0 || k == 0 {
        return (Vec::new(), 0.0);
    }
    let mut score: Vec<f64> = (0..k).map(|s| log_init[s] + log_emit[0][s]).collect();
    let mut back = vec![vec![0usize; k]; n];
    for t in 1..n {
        let mut next = vec![0.0; k];
        for j in 0..k {
            let mut best = 0;
            let mut best_v = score[0] + log_trans[0][j];
            for i in 1..k {
                let v = score[i] + log_trans[i][j];
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            next[j] = best_v + log_emit[t][j];
            back[t][j] = best;
        }
        score = next;
    }
    let mut state = argmax_first(&score);
    let total = score[state];
    let mut path = vec![state; n];
    for t in (1..n).rev() {
        state = back[t][state];
        path[t - 1] = state;
    }
    (path, total)
}

/// Log score of a given path under the same model, summed left to right
/// exactly as the decoder accumulates it.
pub fn path_log_score(path: &[usize], log_emit: &[Vec<f64>], log_trans: &[Vec<f64>], log_init: &[f64]) -> f64 {
    let Some(&first) = path.first() else {
        return 0.0;
    };
    let mut s = log_init[first] + log_emit[0][first];
    for t in 1..path.len() {
        s = s + log_trans[path[t - 1]][path[t]] + log_emit[t][path[t]];
    }
    s
}

/// Sticky transitions: `ρ` on the diagonal, `(1−ρ)/(K−1)` elsewhere.
pub fn sticky_log_transitions(k: usize, rho: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            (0..k)
                .map(|j| {
                    if i == j {
                        rho.ln()
                    } else {
                        ((1.0 - rho) / (k - 1) as f64).ln()
                    }
                })
                .collect()
        })
        .collect()
}

/// HMM over sliding windows: emissions are the softmax of window–prototype
/// cosines, the prior is uniform and transitions are sticky.
pub fn viterbi_attribute(
    trace: &Trace,
    model: &PrototypeModel,
    window: usize,
    step: usize,
    rho: f64,
) -> Result<SegmentAttribution> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("stickiness must lie in (0, 1), got {rho}")));
    }
    if window == 0 || step == 0 {
        return Err(invalid("window and step must be >= 1"));
    }
    let t_len = trace.len();
    if t_len == 0 {
        return Err(invalid("trace is empty"));
    }
    let k = model.n_agents();
    if k == 1 {
        return Ok(merge_spans(vec![(0, t_len, 0, 1.0)], &model.agents));
    }
    let n = if t_len >= window { (t_len - window) / step + 1 } else { 1 };
    let emissions: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let s = t * step;
            softmax(&model.similarities(&trace.tokens[s..(s + window).min(t_len)]))
        })
        .collect();
    let log_emit: Vec<Vec<f64>> = emissions.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
    let log_init = vec![-(k as f64).ln(); k];
    let (path, _) = viterbi(&log_emit, &sticky_log_transitions(k, rho), &log_init);

    let mut spans = Vec::new();
    let mut start_w = 0;
    let mut start_tok = 0;
    for t in 1..=n {
        if t == n || path[t] != path[start_w] {
            let end_tok = if t == n { t_len } else { window_to_token(t, window, step).clamp(start_tok + 1, t_len - 1) };
            let conf = (start_w..t).map(|w| emissions[w][path[start_w]]).sum::<f64>() / (t - start_w) as f64;
            if end_tok > start_tok {
                spans.push((start_tok, end_tok, path[start_w], conf));
                start_tok = end_tok;
            }
            start_w = t;
        }
    }
    Ok(merge_spans(spans, &model.agents))
}

/// Uniform cuts and uniform labels.
pub fn random_segment(trace_len: usize, agents: &[String], seed: u64) -> Result<SegmentAttribution> {
    if trace_len == 0 || agents.is_empty() {
        return Err(invalid("random segmentation needs tokens and agents"));
    }
    let k = agents.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cuts = (k - 1).min(trace_len - 1);
    let mut cuts: Vec<usize> = sample(&mut rng, trace_len - 1, n_cuts).into_iter().map(|c| c + 1).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(n_cuts + 1);
    let mut prev = 0;
    for c in cuts.into_iter().chain([trace_len]) {
        spans.push((prev, c, rng.random_range(0..k), 1.0 / k as f64));
        prev = c;
    }
    Ok(merge_spans(spans, agents))
}

/// Token patterns treated as separators, strongest first.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Separators {
    pub levels: Vec<Vec<u32>>,
}

impl Separators {
    /// A blank line `[nl, nl]` then a single newline `[nl]`.
    pub fn newline(nl: u32) -> Self {
        Self {
            levels: vec![vec![nl, nl], vec![nl]],
        }
    }
}

fn separator_ends(tokens: &[u32], pattern: &[u32]) -> Vec<usize> {
    if pattern.is_empty() || tokens.len() < pattern.len() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i + pattern.len() <= tokens.len() {
        if tokens[i..i + pattern.len()] == *pattern {
            let end = i + pattern.len();
            if end < tokens.len() {
                out.push(end);
            }
            i = end;
        } else {
            i += 1;
        }
    }
    out
}

/// Exactly `k` non-empty spans. Separator levels are tried strongest first,
/// each adding its split points to the previous ones; with at least `k−1`
/// points, `k−1` are picked evenly by rank. Otherwise the trace is split into
/// equal parts.
pub fn recursive_split(tokens: &[u32], k: usize, separators: &Separators) -> Result<Vec<(usize, usize)>> {
    if k == 0 || tokens.len() < k {
        return Err(invalid(format!("cannot split {} tokens into {k} segments", tokens.len())));
    }
    let mut points: Vec<usize> = Vec::new();
    for level in &separators.levels {
        points.extend(separator_ends(tokens, level));
        points.sort_unstable();
        points.dedup();
        if points.len() >= k - 1 {
            break;
        }
    }
    let cuts: Vec<usize> = if k > 1 && points.len() >= k - 1 {
        let m = points.len();
        (1..k).map(|i| points[i * (m + 1) / k - 1]).collect()
    } else {
        (1..k).map(|i| i * tokens.len() / k).collect()
    };
    let mut out = Vec::with_capacity(k);
    let mut prev = 0;
    for c in cuts.into_iter().chain([tokens.len()]) {
        out.push((prev, c));
        prev = c;
    }
    Ok(out)
}

/// Separator segmentation labeled by prototype cosine, then merged.
pub fn recursive_segment(trace: &Trace, model: &PrototypeModel, separators: &Separators) -> Result<SegmentAttribution> {
    let spans = recursive_split(&trace.tokens, model.n_agents(), separators)?
        .into_iter()
        .map(|(s, e)| {
            let sims = model.similarities(&trace.tokens[s..e]);
            let label = argmax_first(&sims);
            (s, e, label, sims[label])
        })
        .collect();
    Ok(merge_spans(spans, &model.agents))
}

/// Ground-truth spans of a trace, for baselines that need them.
pub fn truth_spans(trace: &Trace) -> Result<&[LabeledSpan]> {
    trace
        .ground_truth
        .as_deref()
        .ok_or_else(|| invalid("trace has no ground truth"))
}
