//! Agent keys, the Fourier perturbation vector and context-keyed vocabulary
//! permutations.
//!
//! Every derivation here is a pure function of `(key, context, vocab_size)`.
//! Pseudorandomness comes from a counter-based SplitMix64 stream so that
//! permutations are bit-identical across platforms and crate versions.

use std::f64::consts::PI;
use std::num::NonZeroUsize;

use lru::LruCache;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Token id used to pad contexts at the start of a trace.
pub const BEGIN_TOKEN: u32 = u32::MAX;

/// First watermark id handed out by [`consecutive_keys`].
pub const DEFAULT_WATERMARK_BASE: u64 = 42;
pub const DEFAULT_KAPPA: f64 = 2.0;
pub const DEFAULT_K_P_ORDER: u32 = 1;
pub const DEFAULT_N_GRAM: usize = 2;

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const CONTEXT_DOMAIN: u64 = 0x243f_6a88_85a3_08d3;

fn default_k_p_order() -> u32 {
    DEFAULT_K_P_ORDER
}
fn default_kappa() -> f64 {
    DEFAULT_KAPPA
}
fn default_n_gram() -> usize {
    DEFAULT_N_GRAM
}

/// Secret identity of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentKey {
    pub agent_id: String,
    pub watermark_id: u64,
    #[serde(default = "default_k_p_order")]
    pub k_p_order: u32,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_n_gram")]
    pub n_gram: usize,
}

impl AgentKey {
    pub fn new(agent_id: impl Into<String>, watermark_id: u64) -> Self {
        Self {
            agent_id: agent_id.into(),
            watermark_id,
            k_p_order: DEFAULT_K_P_ORDER,
            kappa: DEFAULT_KAPPA,
            n_gram: DEFAULT_N_GRAM,
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(invalid(format!(
                "kappa of agent {} must be finite and >= 0, got {}",
                self.agent_id, self.kappa
            )));
        }
        if self.n_gram < 1 {
            return Err(invalid(format!("n_gram of agent {} must be >= 1", self.agent_id)));
        }
        if self.k_p_order < 1 {
            return Err(invalid(format!("k_p_order of agent {} must be >= 1", self.agent_id)));
        }
        Ok(())
    }

    /// Number of preceding tokens that key the permutation.
    pub fn context_len(&self) -> usize {
        self.n_gram - 1
    }
}

/// `count` keys named `a1..aK` with watermark ids `base, base+1, ...`.
pub fn consecutive_keys(count: usize, base: u64, kappa: f64) -> Vec<AgentKey> {
    (0..count)
        .map(|i| AgentKey::new(format!("a{}", i + 1), base + i as u64).with_kappa(kappa))
        .collect()
}

/// The key manifest file: a JSON list of agent keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeyManifest {
    pub keys: Vec<AgentKey>,
}

impl KeyManifest {
    pub fn new(keys: Vec<AgentKey>) -> Result<Self> {
        for key in &keys {
            key.validate()?;
        }
        for (i, key) in keys.iter().enumerate() {
            if keys[..i].iter().any(|k| k.agent_id == key.agent_id) {
                return Err(invalid(format!("duplicate agent_id {}", key.agent_id)));
            }
        }
        Ok(Self { keys })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let keys: Vec<AgentKey> =
            serde_json::from_str(text).map_err(|e| invalid(format!("key manifest: {e}")))?;
        Self::new(keys)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.keys).expect("keys serialize")
    }

    pub fn index_of(&self, agent_id: &str) -> Option<usize> {
        self.keys.iter().position(|k| k.agent_id == agent_id)
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.keys.iter().map(|k| k.agent_id.clone()).collect()
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Counter-based keyed stream: the i-th output is `mix64(seed + (i+1)·γ)`.
#[derive(Debug, Clone)]
pub struct KeyedStream {
    seed: u64,
    counter: u64,
}

impl KeyedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    /// Unbiased integer in `[0, bound)` (Lemire's multiply-shift with rejection).
    pub fn below(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let threshold = bound.wrapping_neg() % bound;
        loop {
            let m = (self.next_u64() as u128) * (bound as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }
}

/// Digest of `(watermark_id, context)` that seeds the permutation.
pub fn context_fingerprint(watermark_id: u64, context: &[u32]) -> u64 {
    let mut h = mix64(watermark_id ^ CONTEXT_DOMAIN);
    for &tok in context {
        h = mix64(h ^ (tok as u64).wrapping_add(GOLDEN_GAMMA));
    }
    h
}

/// The previous `len` tokens before position `j`, left-padded with [`BEGIN_TOKEN`].
pub fn context_before(tokens: &[u32], j: usize, len: usize) -> Vec<u32> {
    let mut ctx = vec![BEGIN_TOKEN; len];
    let take = len.min(j);
    ctx[len - take..].copy_from_slice(&tokens[j - take..j]);
    ctx
}

/// Unit-amplitude perturbation `φ(u) = sin(2π·k·(u + 0.5)/|V|)`.
///
/// The embedder scales it by `kappa`; the detector reads it unscaled. The
/// vector sums to zero over any full period.
pub fn derive_perturbation_vector(key: &AgentKey, vocab_size: usize) -> Result<Vec<f64>> {
    if vocab_size < 2 {
        return Err(invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    let order = key.k_p_order as f64;
    let n = vocab_size as f64;
    Ok((0..vocab_size)
        .map(|u| (2.0 * PI * order * (u as f64 + 0.5) / n).sin())
        .collect())
}

/// A bijection on `[0, |V|)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    pub forward: Vec<u32>,
    pub context_fingerprint: u64,
}

impl Permutation {
    pub fn identity(vocab_size: usize) -> Self {
        Self {
            forward: (0..vocab_size as u32).collect(),
            context_fingerprint: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn permute_index(&self, token_id: u32) -> Result<u32> {
        self.forward
            .get(token_id as usize)
            .copied()
            .ok_or_else(|| invalid(format!("token {token_id} outside vocabulary of {}", self.len())))
    }

    pub fn inverse(&self) -> Vec<u32> {
        let mut inv = vec![0u32; self.len()];
        for (v, &p) in self.forward.iter().enumerate() {
            inv[p as usize] = v as u32;
        }
        inv
    }

    pub fn inverse_permute(&self, index: u32) -> Result<u32> {
        if index as usize >= self.len() {
            return Err(invalid(format!("index {index} outside vocabulary of {}", self.len())));
        }
        Ok(self.forward.iter().position(|&p| p == index).expect("bijection") as u32)
    }

    /// Moves `values[v]` to slot `forward[v]`.
    pub fn apply<T: Copy + Default>(&self, values: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); values.len()];
        for (v, &p) in self.forward.iter().enumerate() {
            out[p as usize] = values[v];
        }
        out
    }

    /// Inverse of [`Permutation::apply`].
    pub fn unapply<T: Copy>(&self, permuted: &[T]) -> Vec<T> {
        self.forward.iter().map(|&p| permuted[p as usize]).collect()
    }
}

/// Keyed Fisher–Yates shuffle of the vocabulary for one context.
pub fn derive_permutation(key: &AgentKey, context: &[u32], vocab_size: usize) -> Result<Permutation> {
    if context.len() != key.context_len() {
        return Err(invalid(format!(
            "context must hold n_gram-1 = {} tokens, got {}",
            key.context_len(),
            context.len()
        )));
    }
    if vocab_size < 2 {
        return Err(invalid(format!("vocab_size must be >= 2, got {vocab_size}")));
    }
    let fingerprint = context_fingerprint(key.watermark_id, context);
    let mut stream = KeyedStream::new(fingerprint);
    let mut forward: Vec<u32> = (0..vocab_size as u32).collect();
    for i in (1..vocab_size).rev() {
        let j = stream.below(i as u64 + 1) as usize;
        forward.swap(i, j);
    }
    Ok(Permutation {
        forward,
        context_fingerprint: fingerprint,
    })
}

const DEFAULT_CACHE_ENTRIES: usize = 4096;

/// One agent's signal over a fixed vocabulary, with a per-owner LRU of
/// permutations keyed by context fingerprint.
///
/// Not `Sync`: give each worker its own instance.
pub struct KeyedSignal {
    key: AgentKey,
    vocab_size: usize,
    phi: Vec<f64>,
    cache: LruCache<u64, Permutation>,
}

impl std::fmt::Debug for KeyedSignal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyedSignal")
            .field("key", &self.key)
            .field("vocab_size", &self.vocab_size)
            .field("cached", &self.cache.len())
            .finish()
    }
}

impl KeyedSignal {
    pub fn new(key: AgentKey, vocab_size: usize) -> Result<Self> {
        key.validate()?;
        let phi = derive_perturbation_vector(&key, vocab_size)?;
        Ok(Self {
            key,
            vocab_size,
            phi,
            cache: LruCache::new(NonZeroUsize::new(DEFAULT_CACHE_ENTRIES).unwrap()),
        })
    }

    pub fn key(&self) -> &AgentKey {
        &self.key
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn permutation(&mut self, context: &[u32]) -> Result<&Permutation> {
        if context.len() != self.key.context_len() {
            return Err(invalid(format!(
                "context must hold n_gram-1 = {} tokens, got {}",
                self.key.context_len(),
                context.len()
            )));
        }
        let fingerprint = context_fingerprint(self.key.watermark_id, context);
        if !self.cache.contains(&fingerprint) {
            let perm = derive_permutation(&self.key, context, self.vocab_size)?;
            self.cache.put(fingerprint, perm);
        }
        Ok(self.cache.get(&fingerprint).expect("just inserted"))
    }

    /// `φ(π(token))` for the permutation keyed by `context`.
    pub fn token_score(&mut self, context: &[u32], token: u32) -> Result<f64> {
        let idx = self.permutation(context)?.permute_index(token)?;
        Ok(self.phi[idx as usize])
    }

    /// `φ(π(v))` for every vocabulary entry `v`.
    pub fn permuted_phi(&mut self, context: &[u32]) -> Result<Vec<f64>> {
        let perm = self.permutation(context)?;
        let forward = perm.forward.clone();
        Ok(forward.iter().map(|&p| self.phi[p as usize]).collect())
    }
}
