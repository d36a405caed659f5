//! Speaking schedules for canonical coordination patterns and synthetic
//! ground-truth datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::{generate_trace, GenerationSchedule, Trace};
use crate::error::{invalid, Result};
use crate::keyed_signal::{mix64, KeyManifest};
use crate::token_source::TokenDistributionSource;

pub const DEFAULT_ROUNDS: usize = 3;
pub const DEFAULT_SEGMENT_MIN: usize = 128;
pub const DEFAULT_SEGMENT_MAX: usize = 384;

/// Domain separator between segment-length draws and token sampling.
const LENGTH_STREAM: u64 = 0x6c65_6e67_7468_7321;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Chain,
    StarPure,
    Tree,
    Ring,
    Complete,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Chain,
        Pattern::StarPure,
        Pattern::Tree,
        Pattern::Ring,
        Pattern::Complete,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Pattern::Chain => "chain",
            Pattern::StarPure => "star_pure",
            Pattern::Tree => "tree",
            Pattern::Ring => "ring",
            Pattern::Complete => "complete",
        }
    }

    fn min_agents(&self) -> usize {
        match self {
            Pattern::Chain | Pattern::StarPure => 2,
            Pattern::Tree | Pattern::Ring | Pattern::Complete => 3,
        }
    }
}

impl std::str::FromStr for Pattern {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.as_str() == s || (s == "star" && *p == Pattern::StarPure))
            .ok_or_else(|| invalid(format!("unknown topology {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SegmentLength {
    Fixed(usize),
    Range { min: usize, max: usize },
}

impl Default for SegmentLength {
    fn default() -> Self {
        SegmentLength::Range {
            min: DEFAULT_SEGMENT_MIN,
            max: DEFAULT_SEGMENT_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub pattern: Pattern,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub segment_length: SegmentLength,
    #[serde(default)]
    pub seed: u64,
}

fn default_rounds() -> usize {
    DEFAULT_ROUNDS
}

impl TopologySpec {
    pub fn new(pattern: Pattern, k: usize) -> Self {
        Self {
            pattern,
            k,
            rounds: DEFAULT_ROUNDS,
            segment_length: SegmentLength::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < self.pattern.min_agents() {
            return Err(invalid(format!(
                "{} needs K >= {}, got {}",
                self.pattern.as_str(),
                self.pattern.min_agents(),
                self.k
            )));
        }
        if self.rounds == 0 {
            return Err(invalid("rounds must be >= 1"));
        }
        match self.segment_length {
            SegmentLength::Fixed(0) => Err(invalid("segment_length must be >= 1")),
            SegmentLength::Range { min, max } if min == 0 || min > max => {
                Err(invalid(format!("segment_length range [{min}, {max}] is invalid")))
            }
            _ => Ok(()),
        }
    }
}

fn tree_tour(node: usize, k: usize, out: &mut Vec<usize>) {
    out.push(node);
    for child in [2 * node + 1, 2 * node + 2] {
        if child < k {
            tree_tour(child, k, out);
            out.push(node);
        }
    }
}

/// Zero-based speaker order for `rounds` rounds, duplicates collapsed.
///
/// Chain rounds alternate direction so that round joins never close a
/// cycle; every other pattern repeats the same round.
pub fn speaker_order(pattern: Pattern, k: usize, rounds: usize) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for r in 0..rounds {
        let round: Vec<usize> = match pattern {
            Pattern::Chain if r % 2 == 0 => (0..k).collect(),
            Pattern::Chain => (0..k).rev().collect(),
            Pattern::StarPure => (1..k).flat_map(|j| [0, j]).collect(),
            Pattern::Tree => {
                let mut tour = Vec::new();
                tree_tour(0, k, &mut tour);
                tour
            }
            Pattern::Ring => (0..k).chain([0]).collect(),
            Pattern::Complete => (0..k).flat_map(|i| ((i + 1)..k).flat_map(move |j| [i, j])).collect(),
        };
        for s in round {
            if out.last() != Some(&s) {
                out.push(s);
            }
        }
    }
    out
}

/// Builds the schedule for agents named by `agent_ids[0..K]`.
pub fn build_schedule_for(spec: &TopologySpec, agent_ids: &[String]) -> Result<GenerationSchedule> {
    spec.validate()?;
    if agent_ids.len() < spec.k {
        return Err(invalid(format!("need {} agent ids, got {}", spec.k, agent_ids.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed ^ LENGTH_STREAM));
    let turns = speaker_order(spec.pattern, spec.k, spec.rounds)
        .into_iter()
        .map(|s| {
            let len = match spec.segment_length {
                SegmentLength::Fixed(n) => n,
                SegmentLength::Range { min, max } => rng.random_range(min..=max),
            };
            (agent_ids[s].clone(), len)
        })
        .collect();
    GenerationSchedule::new(turns)
}

/// Schedule over agents named `a1..aK`.
pub fn build_schedule(spec: &TopologySpec) -> Result<GenerationSchedule> {
    let ids: Vec<String> = (1..=spec.k).map(|i| format!("a{i}")).collect();
    build_schedule_for(spec, &ids)
}

/// The `index`-th trace of a dataset: seed `spec.seed + index` drives both
/// its segment lengths and its sampling.
pub fn synth_trace(spec: &TopologySpec, source: &TokenDistributionSource, keys: &KeyManifest, index: u64) -> Result<Trace> {
    if keys.keys.len() < spec.k {
        return Err(invalid(format!("spec needs {} keys, manifest has {}", spec.k, keys.keys.len())));
    }
    let seed = spec.seed.wrapping_add(index);
    let per_trace = TopologySpec { seed, ..spec.clone() };
    let schedule = build_schedule_for(&per_trace, &keys.agent_ids())?;
    generate_trace(source, keys, &schedule, seed)
}

pub fn synth_dataset(
    spec: &TopologySpec,
    source: &TokenDistributionSource,
    keys: &KeyManifest,
    n_traces: usize,
) -> Result<Vec<Trace>> {
    spec.validate()?;
    (0..n_traces as u64).map(|i| synth_trace(spec, source, keys, i)).collect()
}

/// Dataset manifest file: the topology spec plus one path per trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub spec: TopologySpec,
    pub traces: Vec<String>,
}
