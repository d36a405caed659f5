//! Agent-keyed logit watermarks for multi-agent token logs, and recovery of
//! who spoke when from the tokens alone: window scores, competitive-margin
//! segmentation, attribution, transition graphs, log corruption and
//! restoration, metrics and watermark-free baselines.

pub mod baselines;
pub mod corruption;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod keyed_signal;
pub mod pipeline;
pub mod scorer;
pub mod segmenter;
pub mod simulator;
pub mod token_source;
pub mod transition_graph;
