//! Attribution, graph and restoration metrics, plus report aggregation.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corruption::{Role, StructuredLog};
use crate::embedder::{validate_cover, LabeledSpan, Trace};
use crate::error::{invalid, Error, Result};
use crate::segmenter::SegmentAttribution;
use crate::transition_graph::{Matrix, TransitionGraph};

pub fn token_acc<L: PartialEq>(pred: &[L], truth: &[L]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(invalid(format!("labelings differ in length: {} vs {}", pred.len(), truth.len())));
    }
    if truth.is_empty() {
        return Err(invalid("labelings are empty"));
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Per-agent token-set IoU, averaged over agents present in `truth`.
pub fn iou_labels<L: Ord + Clone>(pred: &[L], truth: &[L]) -> Result<f64> {
    if pred.len() != truth.len() || truth.is_empty() {
        return Err(invalid("labelings must be non-empty and of equal length"));
    }
    let agents: BTreeSet<L> = truth.iter().cloned().collect();
    let mut total = 0.0;
    for a in &agents {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, t) in pred.iter().zip(truth) {
            let (ip, it) = (p == a, t == a);
            inter += usize::from(ip && it);
            union += usize::from(ip || it);
        }
        total += inter as f64 / union as f64;
    }
    Ok(total / agents.len() as f64)
}

/// Expands a cover of `[0, len)` into per-token labels.
pub fn spans_to_labels(spans: &[LabeledSpan], len: usize) -> Result<Vec<String>> {
    validate_cover(spans, len)?;
    let mut out = Vec::with_capacity(len);
    for s in spans {
        out.extend(std::iter::repeat_n(s.agent_id.clone(), s.len()));
    }
    Ok(out)
}

/// IoU between two segmentations; both must cover the same `[0, T)`.
pub fn iou(pred: &[LabeledSpan], truth: &[LabeledSpan]) -> Result<f64> {
    let len = truth.last().map_or(0, |s| s.end);
    let t = spans_to_labels(truth, len)?;
    // Predictions may repeat labels across neighbours; only the cover matters.
    let mut cursor = 0;
    for s in pred {
        if s.start != cursor || s.end <= s.start {
            return Err(invalid("prediction does not cover [0, T)"));
        }
        cursor = s.end;
    }
    if cursor != len {
        return Err(invalid(format!("prediction covers [0, {cursor}) but truth covers [0, {len})")));
    }
    let p: Vec<String> = pred
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.agent_id.clone(), s.len()))
        .collect();
    iou_labels(&p, &t)
}

/// Frobenius cosine `⟨A, Â⟩ / (‖A‖ ‖Â‖)`.
pub fn edge_sim(truth: &Matrix<f64>, pred: &Matrix<f64>) -> Result<f64> {
    if truth.len() != pred.len() || truth.iter().zip(pred).any(|(a, b)| a.len() != b.len()) {
        return Err(invalid("transition matrices differ in shape"));
    }
    let mut dot = 0.0;
    let mut nt = 0.0;
    let mut np = 0.0;
    for (rt, rp) in truth.iter().zip(pred) {
        for (&a, &b) in rt.iter().zip(rp) {
            dot += a * b;
            nt += a * a;
            np += b * b;
        }
    }
    if nt == 0.0 || np == 0.0 {
        return Err(Error::UndefinedMetric("edge similarity of an all-zero transition matrix".into()));
    }
    Ok((dot / (nt * np).sqrt()).min(1.0))
}

/// Fraction of interior true edges with a predicted edge within `tol` tokens.
pub fn boundary_recall(truth: &[usize], pred: &[usize], tol: usize) -> Option<f64> {
    if truth.is_empty() {
        return None;
    }
    let hits = truth
        .iter()
        .filter(|&&t| pred.iter().any(|&p| p.abs_diff(t) <= tol))
        .count();
    Some(hits as f64 / truth.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationScore {
    pub agent_restore: f64,
    /// `None` when the original log records no mistake step.
    pub step_restore: Option<f64>,
}

/// Compares names turn by turn over the original's assistant turns, and
/// checks that the original mistake turn's content span lands mostly in the
/// restored turn of the same index.
pub fn restoration_acc(restored: &StructuredLog, original: &StructuredLog) -> Result<RestorationScore> {
    if restored.turns.len() != original.turns.len() {
        return Err(invalid(format!(
            "turn counts differ: restored {} vs original {}",
            restored.turns.len(),
            original.turns.len()
        )));
    }
    let assistant: Vec<usize> = (0..original.turns.len())
        .filter(|&i| original.turns[i].role == Role::Assistant)
        .collect();
    if assistant.is_empty() {
        return Err(invalid("original log has no assistant turns"));
    }
    let hits = assistant
        .iter()
        .filter(|&&i| restored.turns[i].name == original.turns[i].name)
        .count();
    let agent_restore = hits as f64 / assistant.len() as f64;

    let step_restore = original.mistake_step.map(|step| {
        let spans = |log: &StructuredLog| {
            let mut cursor = 0;
            log.turns
                .iter()
                .map(|t| {
                    let s = cursor;
                    cursor += t.content.len();
                    (s, cursor)
                })
                .collect::<Vec<_>>()
        };
        let (o, r) = (spans(original), spans(restored));
        let (ms, me) = o[step];
        let best = (0..r.len())
            .max_by_key(|&i| {
                let overlap = me.min(r[i].1).saturating_sub(ms.max(r[i].0));
                (overlap, std::cmp::Reverse(i))
            })
            .unwrap_or(0);
        f64::from(u8::from(best == step))
    });
    Ok(RestorationScore {
        agent_restore,
        step_restore,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMetrics {
    pub id: String,
    pub token_acc: f64,
    pub iou: f64,
    pub edge_sim: f64,
}

/// Converts an attribution into labeled spans.
pub fn attribution_spans(a: &SegmentAttribution) -> Vec<LabeledSpan> {
    a.segments
        .iter()
        .map(|s| LabeledSpan::new(s.start, s.end, s.agent_id.clone()))
        .collect()
}

/// Scores one prediction against a ground-truth trace. An all-zero predicted
/// transition matrix scores edge similarity 0 (and 1 if the truth has no
/// transitions either).
pub fn evaluate_trace(id: &str, pred: &SegmentAttribution, pred_graph: &TransitionGraph, truth: &Trace) -> Result<TraceMetrics> {
    let gt = truth
        .ground_truth
        .as_ref()
        .ok_or_else(|| invalid(format!("trace {id} has no ground truth")))?;
    let t = spans_to_labels(gt, truth.len())?;
    let p = pred.token_labels();
    if p.len() != t.len() {
        return Err(invalid(format!(
            "prediction for {id} covers {} tokens, truth has {}",
            p.len(),
            t.len()
        )));
    }
    let t_ref: Vec<&str> = t.iter().map(String::as_str).collect();
    let agents = &pred_graph.agents;
    let labels: Vec<usize> = gt
        .iter()
        .map(|s| {
            agents
                .iter()
                .position(|a| *a == s.agent_id)
                .ok_or_else(|| invalid(format!("truth agent {} has no key", s.agent_id)))
        })
        .collect::<Result<_>>()?;
    let truth_graph = TransitionGraph::from_labels(&labels, agents)?;
    let edge = match edge_sim(&truth_graph.confidence, &pred_graph.confidence) {
        Ok(v) => v,
        Err(Error::UndefinedMetric(_)) => {
            let truth_empty = truth_graph.adjacency.iter().flatten().all(|&v| v == 0);
            let pred_empty = pred_graph.confidence.iter().flatten().all(|&v| v == 0.0);
            if truth_empty && pred_empty {
                1.0
            } else {
                0.0
            }
        }
        Err(e) => return Err(e),
    };
    Ok(TraceMetrics {
        id: id.to_string(),
        token_acc: token_acc(&p, &t_ref)?,
        iou: iou_labels(&p, &t_ref)?,
        edge_sim: edge,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationSummary {
    pub agent_restore_acc: f64,
    pub step_restore_acc: Option<f64>,
    pub n_logs: usize,
}

impl RestorationSummary {
    pub fn of(scores: &[RestorationScore]) -> Self {
        let agent: Vec<f64> = scores.iter().map(|s| s.agent_restore).collect();
        let step: Vec<f64> = scores.iter().filter_map(|s| s.step_restore).collect();
        Self {
            agent_restore_acc: Summary::of(&agent).mean,
            step_restore_acc: (!step.is_empty()).then(|| Summary::of(&step).mean),
            n_logs: scores.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_trace: Vec<TraceMetrics>,
    pub token_acc: Summary,
    pub iou: Summary,
    pub edge_sim: Summary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub restoration: Option<RestorationSummary>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn new(per_trace: Vec<TraceMetrics>, config: serde_json::Value) -> Self {
        let col = |f: fn(&TraceMetrics) -> f64| per_trace.iter().map(f).collect::<Vec<_>>();
        Self {
            token_acc: Summary::of(&col(|m| m.token_acc)),
            iou: Summary::of(&col(|m| m.iou)),
            edge_sim: Summary::of(&col(|m| m.edge_sim)),
            per_trace,
            restoration: None,
            config,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,token_acc,iou,edge_sim\n");
        for m in &self.per_trace {
            let _ = writeln!(out, "{},{},{},{}", m.id, m.token_acc, m.iou, m.edge_sim);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::{Content, Turn};
    use proptest::prelude::*;

    fn span(s: usize, e: usize, a: &str) -> LabeledSpan {
        LabeledSpan::new(s, e, a)
    }

    #[test]
    fn token_acc_fixtures() {
        assert_eq!(token_acc(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        let p = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        assert!((token_acc(&p, &[0; 10]).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(token_acc(&[1, 1], &[2, 2]).unwrap(), 0.0);
        assert!(token_acc(&[1], &[1, 2]).is_err());
        assert!(token_acc::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn iou_fixtures() {
        let truth = [span(0, 10, "a"), span(10, 20, "b")];
        assert_eq!(iou(&truth, &truth).unwrap(), 1.0);
        let pred = [span(0, 8, "a"), span(8, 20, "b")];
        let want = (8.0 / 10.0 + 10.0 / 12.0) / 2.0;
        assert!((iou(&pred, &truth).unwrap() - want).abs() < 1e-9);
        assert!((want - 0.8167).abs() < 1e-4);
        let swapped = [span(0, 10, "b"), span(10, 20, "a")];
        assert_eq!(iou(&swapped, &truth).unwrap(), 0.0);
        assert!(iou(&[span(0, 5, "a")], &truth).is_err());
        assert!(iou(&pred, &[span(0, 10, "a"), span(12, 20, "b")]).is_err());
    }

    #[test]
    fn edge_sim_fixtures() {
        let a = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        assert_eq!(edge_sim(&a, &a).unwrap(), 1.0);
        let p = vec![vec![0.0, 0.6], vec![0.0, 0.8]];
        assert!((edge_sim(&a, &p).unwrap() - 0.6).abs() < 1e-9);
        let d = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(edge_sim(&a, &d).unwrap(), 0.0);
        assert!(matches!(edge_sim(&a, &vec![vec![0.0; 2]; 2]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn boundary_recall_counts_matches() {
        assert_eq!(boundary_recall(&[100, 200], &[90, 400], 64), Some(0.5));
        assert_eq!(boundary_recall(&[], &[1], 64), None);
    }

    fn log(names: &[&str], lens: &[usize], mistake: Option<usize>) -> StructuredLog {
        StructuredLog {
            turns: names
                .iter()
                .zip(lens)
                .map(|(n, &l)| Turn {
                    role: Role::Assistant,
                    name: Some(n.to_string()),
                    content: Content::Tokens(vec![0; l]),
                })
                .collect(),
            question: String::new(),
            ground_truth: String::new(),
            mistake_agent: None,
            mistake_step: mistake,
            system_prompt: None,
            agents: None,
            vocab_size: None,
        }
    }

    #[test]
    fn restoration_fixtures() {
        let orig = log(&["a", "b", "c", "d"], &[10, 10, 10, 10], Some(2));
        let s = restoration_acc(&orig, &orig).unwrap();
        assert_eq!((s.agent_restore, s.step_restore), (1.0, Some(1.0)));
        let wrong = log(&["x", "x", "x", "x"], &[10, 10, 10, 10], Some(2));
        assert_eq!(restoration_acc(&wrong, &orig).unwrap().agent_restore, 0.0);
        let three = log(&["a", "b", "c", "x"], &[10, 10, 10, 10], Some(2));
        assert_eq!(restoration_acc(&three, &orig).unwrap().agent_restore, 0.75);
        // The mistake span [20, 30) mostly falls into restored turn 1 here.
        let shifted = log(&["a", "b", "c", "d"], &[5, 22, 3, 10], Some(2));
        assert_eq!(restoration_acc(&shifted, &orig).unwrap().step_restore, Some(0.0));
        assert!(restoration_acc(&log(&["a"], &[1], None), &orig).is_err());
    }

    #[test]
    fn report_aggregates() {
        let rows = vec![
            TraceMetrics { id: "t0".into(), token_acc: 1.0, iou: 0.5, edge_sim: 1.0 },
            TraceMetrics { id: "t1".into(), token_acc: 0.5, iou: 0.5, edge_sim: 0.0 },
        ];
        let r = EvalReport::new(rows, serde_json::json!({"k": 1}));
        assert_eq!(r.token_acc.mean, 0.75);
        assert_eq!(r.iou.std, 0.0);
        assert_eq!(r.to_csv(), "id,token_acc,iou,edge_sim\nt0,1,0.5,1\nt1,0.5,0.5,0\n");
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn metrics_are_bounded_and_equivariant(
            truth in proptest::collection::vec(0u8..4, 1..200),
            pred in proptest::collection::vec(0u8..4, 1..200),
            shift in 1u8..4,
        ) {
            let n = truth.len().min(pred.len());
            let (t, p) = (&truth[..n], &pred[..n]);
            let acc = token_acc(p, t).unwrap();
            let j = iou_labels(p, t).unwrap();
            prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&j));
            let relabel = |v: &[u8]| v.iter().map(|x| (x + shift) % 4).collect::<Vec<_>>();
            prop_assert_eq!(token_acc(&relabel(p), &relabel(t)).unwrap(), acc);
            prop_assert!((iou_labels(&relabel(p), &relabel(t)).unwrap() - j).abs() < 1e-12);
            prop_assert_eq!(acc == 1.0, p == t);
            if acc == 1.0 {
                prop_assert_eq!(j, 1.0);
            }
        }
    }
}
