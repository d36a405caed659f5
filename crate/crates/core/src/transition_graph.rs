//! Agent-transition adjacency, bitmask identifier, boundary confidences and
//! coordination-pattern classification.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scorer::ScoreField;
use crate::segmenter::{mean_rows, token_to_window, SegmentAttribution};

/// Windows averaged on each side of a boundary.
pub const DEFAULT_CONFIDENCE_H: usize = 4;

/// Largest `K²` that fits the bitmask in one word.
pub const MAX_MASK_BITS: usize = 62;

pub type Matrix<T> = Vec<Vec<T>>;

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `v[a] − max_{k≠a} v[k]`; just `v[a]` when there is no competitor.
pub fn margin_of(v: &[f64], a: usize) -> f64 {
    let rival = v
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != a)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if rival.is_finite() {
        v[a] - rival
    } else {
        v[a]
    }
}

/// `σ(m_L(i) + m_R(j))` from mean scores over `h` windows before and after
/// the window nearest the boundary; `h` is truncated at the field edges.
pub fn transition_confidence(field: &ScoreField, boundary: usize, from: usize, to: usize, h: usize) -> Result<f64> {
    if boundary == 0 || boundary >= field.trace_len {
        return Err(invalid(format!(
            "boundary {boundary} outside (0, {}) of the field",
            field.trace_len
        )));
    }
    let k = field.n_agents();
    if from >= k || to >= k {
        return Err(invalid(format!("agent index out of range for {k} agents")));
    }
    let n = field.n_windows();
    let tau = token_to_window(boundary, field.window, field.step, n);
    let (l_lo, l_hi) = (tau.saturating_sub(h), tau);
    let (r_lo, r_hi) = ((tau + 1).min(n), (tau + 1 + h).min(n));
    let left = if l_hi > l_lo {
        margin_of(&mean_rows(field, l_lo, l_hi), from)
    } else {
        0.0
    };
    let right = if r_hi > r_lo {
        margin_of(&mean_rows(field, r_lo, r_hi), to)
    } else {
        0.0
    };
    Ok(logistic(left + right))
}

fn label_indices(attribution: &SegmentAttribution, agents: &[String]) -> Result<Vec<usize>> {
    attribution
        .segments
        .iter()
        .map(|s| {
            agents
                .iter()
                .position(|a| *a == s.agent_id)
                .ok_or_else(|| invalid(format!("segment label {} is not one of the {} agents", s.agent_id, agents.len())))
        })
        .collect()
}

/// `M_ij = 1` iff a segment of agent `i` is immediately followed by one of `j ≠ i`.
pub fn accumulate_adjacency(attribution: &SegmentAttribution, agents: &[String]) -> Result<Matrix<u8>> {
    let labels = label_indices(attribution, agents)?;
    Ok(adjacency_from_labels(&labels, agents.len()))
}

pub fn adjacency_from_labels(labels: &[usize], k: usize) -> Matrix<u8> {
    let mut m = vec![vec![0u8; k]; k];
    for w in labels.windows(2) {
        if w[0] != w[1] {
            m[w[0]][w[1]] = 1;
        }
    }
    m
}

fn check_mask_size(k: usize) -> Result<()> {
    if k * k > MAX_MASK_BITS {
        return Err(Error::Overflow { k, bits: k * k });
    }
    Ok(())
}

/// `μ = Σ M_ij·2^{iK+j}` with zero-based `i, j`.
pub fn encode_bitmask(m: &Matrix<u8>, k: usize) -> Result<u64> {
    check_mask_size(k)?;
    if m.len() != k || m.iter().any(|r| r.len() != k) {
        return Err(invalid(format!("adjacency must be {k}x{k}")));
    }
    let mut mu = 0u64;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            match v {
                0 => {}
                1 => mu |= 1 << (i * k + j),
                _ => return Err(invalid(format!("adjacency entry ({i},{j}) = {v} is not binary"))),
            }
        }
    }
    Ok(mu)
}

pub fn decode_bitmask(mu: u64, k: usize) -> Result<Matrix<u8>> {
    check_mask_size(k)?;
    if k * k < 64 && mu >> (k * k) != 0 {
        return Err(invalid(format!("mask {mu} has bits beyond {k}x{k}")));
    }
    Ok((0..k)
        .map(|i| (0..k).map(|j| ((mu >> (i * k + j)) & 1) as u8).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyClass {
    Chain,
    StarPure,
    StarRing,
    Tree,
    Circle,
    Complete,
    Other,
}

impl TopologyClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TopologyClass::Chain => "chain",
            TopologyClass::StarPure => "star_pure",
            TopologyClass::StarRing => "star_ring",
            TopologyClass::Tree => "tree",
            TopologyClass::Circle => "circle",
            TopologyClass::Complete => "complete",
            TopologyClass::Other => "other",
        }
    }
}

impl std::fmt::Display for TopologyClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn undirected(m: &Matrix<u8>, k: usize) -> Matrix<bool> {
    (0..k)
        .map(|i| (0..k).map(|j| i != j && (m[i][j] != 0 || m[j][i] != 0)).collect())
        .collect()
}

fn connected(adj: &Matrix<bool>, nodes: &[usize]) -> bool {
    let Some(&first) = nodes.first() else {
        return false;
    };
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![first];
    seen[first] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for &v in nodes {
            if adj[u][v] && !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == nodes.len()
}

fn degree(adj: &Matrix<bool>, u: usize, nodes: &[usize]) -> usize {
    nodes.iter().filter(|&&v| adj[u][v]).count()
}

fn is_cycle(adj: &Matrix<bool>, nodes: &[usize]) -> bool {
    nodes.len() >= 3 && nodes.iter().all(|&u| degree(adj, u, nodes) == 2) && connected(adj, nodes)
}

/// Classifies the undirected support of `m` over all `k` agents.
///
/// Checked in order: complete, chain, circle, star_pure, star_ring, tree,
/// so a three-node path reports chain rather than star_pure.
pub fn classify_topology(m: &Matrix<u8>, k: usize) -> TopologyClass {
    if k < 2 || m.len() != k || m.iter().any(|r| r.len() != k) {
        return TopologyClass::Other;
    }
    let adj = undirected(m, k);
    let nodes: Vec<usize> = (0..k).collect();
    let degrees: Vec<usize> = nodes.iter().map(|&u| degree(&adj, u, &nodes)).collect();
    let edges = degrees.iter().sum::<usize>() / 2;
    let is_connected = connected(&adj, &nodes);
    if !is_connected {
        return TopologyClass::Other;
    }
    if k >= 3 && degrees.iter().all(|&d| d == k - 1) {
        return TopologyClass::Complete;
    }
    let acyclic = edges == k - 1;
    if acyclic && degrees.iter().all(|&d| d <= 2) {
        return TopologyClass::Chain;
    }
    if is_cycle(&adj, &nodes) {
        return TopologyClass::Circle;
    }
    if let Some(hub) = nodes.iter().copied().find(|&u| degrees[u] == k - 1) {
        let spokes: Vec<usize> = nodes.iter().copied().filter(|&u| u != hub).collect();
        if spokes.iter().all(|&s| degrees[s] == 1) {
            return TopologyClass::StarPure;
        }
        if is_cycle(&adj, &spokes) {
            return TopologyClass::StarRing;
        }
    }
    if acyclic {
        return TopologyClass::Tree;
    }
    TopologyClass::Other
}

/// The recovered transition structure and its report record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionGraph {
    #[serde(rename = "K")]
    pub k: usize,
    pub agents: Vec<String>,
    pub adjacency: Matrix<u8>,
    /// Max-aggregated boundary confidence per edge; zero off the support.
    pub confidence: Matrix<f64>,
    pub mu: Option<u64>,
    pub topology_class: TopologyClass,
}

impl TransitionGraph {
    /// Builds the graph from an attribution whose segment confidences are
    /// the confidences of their opening boundaries. `mu` is `None` when K
    /// is too large for the bitmask.
    pub fn from_attribution(attribution: &SegmentAttribution, agents: &[String]) -> Result<Self> {
        let labels = label_indices(attribution, agents)?;
        let k = agents.len();
        let adjacency = adjacency_from_labels(&labels, k);
        let mut confidence = vec![vec![0.0f64; k]; k];
        for (idx, w) in labels.windows(2).enumerate() {
            let c = attribution.segments[idx + 1].confidence;
            let cell = &mut confidence[w[0]][w[1]];
            *cell = (*cell).max(c);
        }
        let mu = match encode_bitmask(&adjacency, k) {
            Ok(mu) => Some(mu),
            Err(Error::Overflow { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            k,
            agents: agents.to_vec(),
            topology_class: classify_topology(&adjacency, k),
            adjacency,
            confidence,
            mu,
        })
    }

    /// Ground-truth graph: binary confidences equal to the adjacency.
    pub fn from_labels(labels: &[usize], agents: &[String]) -> Result<Self> {
        let k = agents.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid(format!("label {bad} out of range for {k} agents")));
        }
        let adjacency = adjacency_from_labels(labels, k);
        let confidence = adjacency.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let mu = encode_bitmask(&adjacency, k).ok();
        Ok(Self {
            k,
            agents: agents.to_vec(),
            topology_class: classify_topology(&adjacency, k),
            adjacency,
            confidence,
            mu,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid(format!("graph: {e}")))
    }
}
