//! End-to-end detector: scores, margin, segmentation, attribution and graph.

use serde::{Deserialize, Serialize};

use crate::embedder::Trace;
use crate::error::{invalid, Result};
use crate::keyed_signal::{AgentKey, KeyManifest};
use crate::scorer::{field_from_token_scores, token_score_matrix, ScoreField, DEFAULT_STEP, DEFAULT_WINDOW};
use crate::segmenter::{
    attribute, competitive_margin, detect_boundaries, refine_all, window_to_token, MarginSeries, SegmentAttribution,
    SplitRule, Threshold, DEFAULT_LOCAL_RADIUS, DEFAULT_MIN_POINTS_FOR_PAIR, DEFAULT_SMOOTH_WIN,
};
use crate::transition_graph::{TransitionGraph, DEFAULT_CONFIDENCE_H};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    pub window: usize,
    pub step: usize,
    pub smooth_win: usize,
    pub local_radius: usize,
    pub min_points_for_pair: usize,
    pub threshold: Threshold,
    pub confidence_h: usize,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            step: DEFAULT_STEP,
            smooth_win: DEFAULT_SMOOTH_WIN,
            local_radius: DEFAULT_LOCAL_RADIUS,
            min_points_for_pair: DEFAULT_MIN_POINTS_FOR_PAIR,
            threshold: Threshold::default(),
            confidence_h: DEFAULT_CONFIDENCE_H,
        }
    }
}

impl DetectorParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(invalid("window must be >= 1"));
        }
        if self.step == 0 {
            return Err(invalid("step must be >= 1"));
        }
        if self.smooth_win == 0 || self.smooth_win % 2 == 0 {
            return Err(invalid(format!("smooth_win must be odd and positive, got {}", self.smooth_win)));
        }
        if self.min_points_for_pair == 0 {
            return Err(invalid("min_points_for_pair must be >= 1"));
        }
        if self.confidence_h == 0 {
            return Err(invalid("confidence_h must be >= 1"));
        }
        match self.threshold {
            Threshold::Fixed { tau } if !(tau > 0.0) => Err(invalid(format!("tau must be > 0, got {tau}"))),
            Threshold::Normalized { c } if !(c > 0.0 && c.is_finite()) => {
                Err(invalid(format!("tau c must be finite and > 0, got {c}")))
            }
            _ => Ok(()),
        }
    }

    pub fn split_rule(&self) -> SplitRule {
        SplitRule {
            threshold: self.threshold,
            min_points_for_pair: self.min_points_for_pair,
            scale_lag: (self.window / self.step).max(1),
        }
    }
}

/// Everything the detector derived from one trace.
#[derive(Debug, Clone)]
pub struct Detection {
    pub field: ScoreField,
    /// Per-agent token scores, `token_scores[a][j]`.
    pub token_scores: Vec<Vec<f64>>,
    pub margin: MarginSeries,
    /// Window boundaries before refinement.
    pub coarse: Vec<usize>,
    /// Window boundaries after refinement.
    pub refined: Vec<usize>,
    pub attribution: SegmentAttribution,
    pub graph: TransitionGraph,
}

#[derive(Debug, Clone)]
pub struct Detector {
    keys: Vec<AgentKey>,
    params: DetectorParams,
}

impl Detector {
    pub fn new(keys: &KeyManifest, params: DetectorParams) -> Result<Self> {
        params.validate()?;
        if keys.keys.len() < 2 {
            return Err(invalid("detection needs keys for at least 2 agents"));
        }
        Ok(Self {
            keys: keys.keys.clone(),
            params,
        })
    }

    pub fn params(&self) -> &DetectorParams {
        &self.params
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.keys.iter().map(|k| k.agent_id.clone()).collect()
    }

    pub fn detect(&self, trace: &Trace) -> Result<Detection> {
        self.detect_tokens(&trace.tokens, trace.vocab_size)
    }

    pub fn detect_tokens(&self, tokens: &[u32], vocab_size: usize) -> Result<Detection> {
        let p = &self.params;
        let token_scores = token_score_matrix(tokens, vocab_size, &self.keys)?;
        let field = field_from_token_scores(&token_scores, self.agent_ids(), p.window, p.step)?;
        let margin = competitive_margin(&field, p.smooth_win)?;
        let coarse = detect_boundaries(&margin, &p.split_rule())?;
        let refined = refine_all(&margin, &coarse, p.local_radius, p.min_points_for_pair)?;
        let mut cuts: Vec<usize> = refined
            .iter()
            .map(|&b| window_to_token(b, p.window, p.step))
            .filter(|&t| t > 0 && t < tokens.len())
            .collect();
        cuts.dedup();
        let attribution = attribute(&field, &cuts, p.confidence_h)?;
        let graph = TransitionGraph::from_attribution(&attribution, &field.agents)?;
        Ok(Detection {
            field,
            token_scores,
            margin,
            coarse,
            refined,
            attribution,
            graph,
        })
    }
}
