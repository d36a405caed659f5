//! Shared fixtures and reference implementations for integration tests.

#![allow(dead_code)]

use tracemark::segmenter::{robust_scale, MarginSeries, SplitRule};

/// Sub-intervals at halving lengths, each shifted by half its length.
fn brute_candidates(s: usize, e: usize, minp: usize) -> Vec<(usize, usize)> {
    let mut out = vec![(s, e)];
    let mut len = (e - s) as f64 / 2.0;
    while len >= 2.0 * minp as f64 {
        let mut k = 0.0;
        while (s as f64 + k * len / 2.0 + len) as usize <= e {
            out.push(((s as f64 + k * len / 2.0) as usize, (s as f64 + k * len / 2.0 + len) as usize));
            k += 1.0;
        }
        len /= 2.0;
    }
    out
}

/// `|Σ_{i<t} (x_i − x̄)|` recomputed from scratch for one split.
fn cusum_at(x: &[f64], t: usize) -> f64 {
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let mut acc = 0.0;
    for &v in &x[..t] {
        acc += v - mean;
    }
    acc.abs()
}

fn split_node(m: &MarginSeries, rule: &SplitRule, sigma: f64, s: usize, e: usize, out: &mut Vec<usize>) {
    let minp = rule.min_points_for_pair.max(1);
    if e - s < 2 * minp {
        return;
    }
    let mut best: Option<(f64, usize)> = None;
    for (l, r) in brute_candidates(s, e, minp) {
        if r - l < 2 * minp {
            continue;
        }
        let tau = rule.threshold.tau(sigma, r - l);
        for a in 0..m.n_agents {
            if !m.leader[l..r].contains(&a) {
                continue;
            }
            let x: Vec<f64> = (l..r).map(|t| if m.leader[t] == a { m.z[t] } else { -m.z[t] }).collect();
            for t in minp..=(x.len() - minp) {
                let ratio = cusum_at(&x, t) / tau;
                if best.is_none_or(|(br, _)| ratio > br) {
                    best = Some((ratio, l + t));
                }
            }
        }
    }
    if let Some((ratio, b)) = best {
        if ratio > 1.0 {
            split_node(m, rule, sigma, s, b, out);
            out.push(b);
            split_node(m, rule, sigma, b, e, out);
        }
    }
}

/// Recursive binary segmentation that rescans every admissible split with
/// a fresh cumulative sum. Quadratic per node.
pub fn brute_force_boundaries(m: &MarginSeries, rule: &SplitRule) -> Vec<usize> {
    let sigma = robust_scale(&m.z, rule.scale_lag);
    let mut out = Vec::new();
    split_node(m, rule, sigma, 0, m.len(), &mut out);
    out
}

/// Random margin series with a few planted level shifts and leader changes.
pub fn random_margin(seed: u64, max_len: usize) -> MarginSeries {
    let mut s = tracemark::keyed_signal::KeyedStream::new(seed);
    let n = 1 + s.below(max_len as u64) as usize;
    let n_agents = 2 + s.below(3) as usize;
    let shifts = s.below(4) as usize;
    let mut cuts: Vec<usize> = (0..shifts).map(|_| s.below(n as u64) as usize).collect();
    cuts.sort_unstable();
    let mut leader = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut lead = s.below(n_agents as u64) as usize;
    let mut level = 0.02 + 0.1 * unit(&mut s);
    for t in 0..n {
        if cuts.contains(&t) {
            lead = s.below(n_agents as u64) as usize;
            level = 0.02 + 0.1 * unit(&mut s);
        }
        let noisy_lead = if s.below(10) == 0 { s.below(n_agents as u64) as usize } else { lead };
        leader.push(noisy_lead);
        z.push(level + 0.05 * (unit(&mut s) - 0.5));
    }
    MarginSeries {
        raw: z.clone(),
        z,
        leader,
        smooth_win: 1,
        n_agents,
    }
}

pub fn unit(s: &mut tracemark::keyed_signal::KeyedStream) -> f64 {
    (s.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}
