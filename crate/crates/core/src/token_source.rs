//! Toy next-token distributions standing in for a base language model.
//!
//! Sources emit natural-log probabilities, so keyed modulation adds directly
//! in that space.

use std::collections::HashMap;

use crate::error::{invalid, Result};
use crate::keyed_signal::BEGIN_TOKEN;

/// Log-probability used for events with zero mass; finite so downstream
/// arithmetic never sees `-inf`.
pub const LOG_ZERO: f64 = -1.0e3;

/// Desk-scale vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub enum SourceKind {
    Uniform,
    Zipfian { exponent: f64 },
    Ngram(NgramTable),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramTable {
    pub order: usize,
    /// (order−1)-gram context → next-token counts.
    pub counts: HashMap<Vec<u32>, Vec<u32>>,
    /// Backoff distribution for contexts never seen in training.
    pub unigram: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistributionSource {
    pub vocab_size: usize,
    pub kind: SourceKind,
    pub smoothing: f64,
}

impl TokenDistributionSource {
    pub fn uniform(vocab_size: usize) -> Result<Self> {
        check_vocab(vocab_size)?;
        Ok(Self {
            vocab_size,
            kind: SourceKind::Uniform,
            smoothing: 0.0,
        })
    }

    pub fn zipfian(vocab_size: usize, exponent: f64) -> Result<Self> {
        check_vocab(vocab_size)?;
        if !(exponent.is_finite() && exponent >= 0.0) {
            return Err(invalid(format!("zipf exponent must be finite and >= 0, got {exponent}")));
        }
        Ok(Self {
            vocab_size,
            kind: SourceKind::Zipfian { exponent },
            smoothing: 0.0,
        })
    }

    /// Number of trailing context tokens the source conditions on.
    pub fn context_len(&self) -> usize {
        match &self.kind {
            SourceKind::Ngram(t) => t.order - 1,
            _ => 0,
        }
    }

    pub fn next_logits(&self, context: &[u32]) -> Result<Vec<f64>> {
        if let Some(&bad) = context.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(invalid(format!(
                "context token {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let v = self.vocab_size;
        Ok(match &self.kind {
            SourceKind::Uniform => vec![-(v as f64).ln(); v],
            SourceKind::Zipfian { exponent } => {
                let weights: Vec<f64> = (0..v).map(|r| (r as f64 + 1.0).powf(-exponent)).collect();
                let total: f64 = weights.iter().sum();
                weights.iter().map(|w| (w / total).ln()).collect()
            }
            SourceKind::Ngram(table) => {
                let key = padded_tail(context, table.order - 1);
                let counts = table.counts.get(&key).unwrap_or(&table.unigram);
                counts_to_logits(counts, self.smoothing)
            }
        })
    }
}

fn check_vocab(vocab_size: usize) -> Result<()> {
    if vocab_size < 2 {
        return Err(invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    Ok(())
}

fn padded_tail(context: &[u32], len: usize) -> Vec<u32> {
    let mut key = vec![BEGIN_TOKEN; len];
    let take = len.min(context.len());
    key[len - take..].copy_from_slice(&context[context.len() - take..]);
    key
}

fn counts_to_logits(counts: &[u32], smoothing: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|&c| c as f64).sum::<f64>() + smoothing * counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let p = (c as f64 + smoothing) / total;
            if p > 0.0 {
                p.ln()
            } else {
                LOG_ZERO
            }
        })
        .collect()
}

/// Counts (order−1)-gram → next-token transitions. The first tokens see
/// contexts padded with [`BEGIN_TOKEN`].
pub fn train_ngram(
    corpus: &[u32],
    order: usize,
    vocab_size: usize,
    smoothing: f64,
) -> Result<TokenDistributionSource> {
    check_vocab(vocab_size)?;
    if corpus.is_empty() {
        return Err(invalid("corpus is empty"));
    }
    if order < 1 {
        return Err(invalid("n-gram order must be >= 1"));
    }
    if !(smoothing.is_finite() && smoothing >= 0.0) {
        return Err(invalid(format!("smoothing must be finite and >= 0, got {smoothing}")));
    }
    if let Some(&bad) = corpus.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(invalid(format!("corpus token {bad} outside vocabulary of {vocab_size}")));
    }
    let mut counts: HashMap<Vec<u32>, Vec<u32>> = HashMap::new();
    let mut unigram = vec![0u32; vocab_size];
    for (j, &tok) in corpus.iter().enumerate() {
        unigram[tok as usize] += 1;
        let key = padded_tail(&corpus[..j], order - 1);
        counts.entry(key).or_insert_with(|| vec![0; vocab_size])[tok as usize] += 1;
    }
    Ok(TokenDistributionSource {
        vocab_size,
        kind: SourceKind::Ngram(NgramTable {
            order,
            counts,
            unigram,
        }),
        smoothing,
    })
}

/// Parses a whitespace-separated token-id file.
pub fn parse_token_file(text: &str) -> Result<Vec<u32>> {
    text.split_whitespace()
        .enumerate()
        .map(|(i, field)| {
            field
                .parse::<u32>()
                .map_err(|_| invalid(format!("token file field {i}: {field:?} is not a token id")))
        })
        .collect()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
