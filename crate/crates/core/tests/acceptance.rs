//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Exits non-zero if any
//! criterion fails.

mod support;

use std::time::Instant;

use tracemark::baselines::{path_log_score, viterbi};
use tracemark::corruption::{corrupt_boundaries, redact_log, remove_ids, restore, PiiRules, StructuredLog, TokenPiiRule};
use tracemark::embedder::{generate_trace, GenerationSchedule, LabeledSpan, Trace};
use tracemark::evaluation::{
    boundary_recall, edge_sim, evaluate_trace, iou, iou_labels, restoration_acc, token_acc, EvalReport,
};
use tracemark::keyed_signal::{consecutive_keys, KeyManifest, KeyedSignal, KeyedStream};
use tracemark::pipeline::{Detector, DetectorParams};
use tracemark::scorer::token_scores;
use tracemark::segmenter::{detect_boundaries, SplitRule, Threshold};
use tracemark::simulator::{synth_dataset, synth_trace, Pattern, TopologySpec};
use tracemark::token_source::TokenDistributionSource;
use tracemark::transition_graph::{decode_bitmask, encode_bitmask, logistic};

const KAPPA: f64 = 2.0;
const VOCAB: usize = 256;
const KEY_BASE: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn keys(k: usize) -> KeyManifest {
    KeyManifest::new(consecutive_keys(k, KEY_BASE, KAPPA)).unwrap()
}

fn source() -> TokenDistributionSource {
    TokenDistributionSource::uniform(VOCAB).unwrap()
}

fn spec(pattern: Pattern, k: usize, seed: u64) -> TopologySpec {
    TopologySpec { seed, ..TopologySpec::new(pattern, k) }
}

const CONDITIONS: [Pattern; 3] = [Pattern::Chain, Pattern::StarPure, Pattern::Tree];

fn synthetic_table() -> Outcome {
    let src = source();
    let mut pass = true;
    let mut rows = Vec::new();
    for pattern in CONDITIONS {
        for k in [4, 5, 6] {
            let keys = keys(k);
            let det = Detector::new(&keys, DetectorParams::default()).unwrap();
            let spec = spec(pattern, k, 1000 * k as u64);
            let metrics: Vec<_> = synth_dataset(&spec, &src, &keys, 100)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(i, trace)| {
                    let d = det.detect(trace).unwrap();
                    evaluate_trace(&i.to_string(), &d.attribution, &d.graph, trace).unwrap()
                })
                .collect();
            let r = EvalReport::new(metrics, serde_json::Value::Null);
            let ok = r.token_acc.mean >= 0.90 && r.iou.mean >= 0.85 && r.edge_sim.mean >= 0.90;
            pass &= ok;
            rows.push(format!(
                "{}/K={k}: acc {:.3} iou {:.3} edge {:.3}{}",
                pattern.as_str(),
                r.token_acc.mean,
                r.iou.mean,
                r.edge_sim.mean,
                if ok { "" } else { " <" }
            ));
        }
    }
    Outcome { pass, detail: rows.join("; ") }
}

fn null_calibration() -> Outcome {
    let src = source();
    let keys = keys(4);
    let params = DetectorParams::default();
    let det = Detector::new(&keys, params).unwrap();
    let mut lengths = KeyedStream::new(7);
    let mut false_hits = 0;
    let n = 200;
    for seed in 0..n {
        let len = 1024 + lengths.below(3073) as usize;
        let sched = GenerationSchedule::new(vec![("a1".into(), len)]).unwrap();
        let trace = generate_trace(&src, &keys, &sched, 50_000 + seed).unwrap();
        let d = det.detect(&trace).unwrap();
        let coarse = detect_boundaries(&d.margin, &params.split_rule()).unwrap();
        false_hits += usize::from(!coarse.is_empty());
    }
    let rate = false_hits as f64 / n as f64;
    Outcome {
        pass: rate <= 0.05,
        detail: format!("{false_hits}/{n} traces with a false boundary ({:.1}%)", 100.0 * rate),
    }
}

fn cusum_oracle() -> Outcome {
    let mut mismatches = 0;
    let mut splits = 0;
    for seed in 0..500u64 {
        let m = support::random_margin(10_000 + seed, 200);
        let rule = SplitRule {
            threshold: if seed % 2 == 0 {
                Threshold::Normalized { c: 1.0 + (seed % 3) as f64 }
            } else {
                Threshold::Fixed { tau: 0.1 }
            },
            min_points_for_pair: 1 + (seed % 10) as usize,
            scale_lag: 4,
        };
        let fast = detect_boundaries(&m, &rule).unwrap();
        splits += fast.len();
        mismatches += usize::from(fast != support::brute_force_boundaries(&m, &rule));
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("500 series, {splits} boundaries, {mismatches} mismatches"),
    }
}

fn bitmask_round_trip() -> Outcome {
    let mut checked = 0usize;
    let mut failures = 0usize;
    let mut check = |m: Vec<Vec<u8>>, k: usize| {
        let ok = encode_bitmask(&m, k).and_then(|mu| decode_bitmask(mu, k)).map(|d| d == m).unwrap_or(false);
        checked += 1;
        failures += usize::from(!ok);
    };
    for k in 1..=3usize {
        let cells: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
        for bits in 0u32..(1 << cells.len()) {
            let mut m = vec![vec![0u8; k]; k];
            for (b, &(i, j)) in cells.iter().enumerate() {
                m[i][j] = ((bits >> b) & 1) as u8;
            }
            check(m, k);
        }
    }
    let mut s = KeyedStream::new(4);
    for _ in 0..10_000 {
        let bits = s.next_u64();
        let m: Vec<Vec<u8>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 0 } else { ((bits >> (4 * i + j)) & 1) as u8 }).collect())
            .collect();
        check(m, 4);
    }
    Outcome {
        pass: failures == 0,
        detail: format!("{checked} matrices, {failures} failures"),
    }
}

fn metric_hand_checks() -> Outcome {
    let mut errors = Vec::new();
    let mut near = |name: &str, got: f64, want: f64, tol: f64| {
        if (got - want).abs() > tol {
            errors.push(format!("{name}: {got} vs {want}"));
        }
    };
    let es = edge_sim(&vec![vec![0.0, 1.0], vec![0.0, 0.0]], &vec![vec![0.0, 0.6], vec![0.0, 0.8]]).unwrap();
    near("edge_sim", es, 0.6, 1e-9);
    near("sigma(2)", logistic(2.0), 0.88080, 1e-5);
    let truth = [LabeledSpan::new(0, 10, "a"), LabeledSpan::new(10, 20, "b")];
    let pred = [LabeledSpan::new(0, 8, "a"), LabeledSpan::new(8, 20, "b")];
    near("iou", iou(&pred, &truth).unwrap(), (0.8 + 10.0 / 12.0) / 2.0, 1e-9);
    near("iou identical", iou(&truth, &truth).unwrap(), 1.0, 1e-9);
    let swapped = [LabeledSpan::new(0, 10, "b"), LabeledSpan::new(10, 20, "a")];
    near("iou swapped", iou(&swapped, &truth).unwrap(), 0.0, 1e-9);
    let t: Vec<u8> = vec![0; 10];
    let p: Vec<u8> = (0..10).map(|i| u8::from(i >= 7)).collect();
    near("token_acc 7/10", token_acc(&p, &t).unwrap(), 0.7, 1e-9);
    near("token_acc disjoint", token_acc(&[1u8; 10], &t).unwrap(), 0.0, 1e-9);
    near("iou_labels identical", iou_labels(&t, &t).unwrap(), 1.0, 1e-9);
    Outcome {
        pass: errors.is_empty(),
        detail: if errors.is_empty() {
            format!("edge_sim {es:.9}, sigma(2) {:.5}, iou fixture {:.9}", logistic(2.0), iou(&pred, &truth).unwrap())
        } else {
            errors.join("; ")
        },
    }
}

fn score_separation() -> Outcome {
    let keys = keys(2);
    let n = 100_000;
    let sched = GenerationSchedule::new(vec![("a1".into(), n)]).unwrap();
    let trace = generate_trace(&source(), &keys, &sched, 606).unwrap();
    let stats = |a: usize| {
        let mut sig = KeyedSignal::new(keys.keys[a].clone(), VOCAB).unwrap();
        let x = token_scores(&trace.tokens, &mut sig).unwrap();
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (mean, (var / n as f64).sqrt())
    };
    let (wrong, _) = stats(1);
    let (right, se) = stats(0);
    let z = right / se;
    // One-sided normal tail; z > 3.09 is p < 0.001.
    let p = 0.5 * erfc(z / std::f64::consts::SQRT_2);
    Outcome {
        pass: wrong.abs() <= 0.01 && right > 0.0 && p < 1e-3,
        detail: format!("wrong-key mean {wrong:+.5}, correct-key mean {right:+.4} (z={z:.1}, p={p:.1e})"),
    }
}

fn erfc(x: f64) -> f64 {
    // Numerical Recipes erfcc, relative error < 1.2e-7.
    let t = 1.0 / (1.0 + 0.5 * x.abs());
    let y = t
        * (-x * x - 1.26551223
            + t * (1.00002368
                + t * (0.37409196
                    + t * (0.09678418
                        + t * (-0.18628806
                            + t * (0.27886807 + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277)))))))))
            .exp();
    if x >= 0.0 {
        y
    } else {
        2.0 - y
    }
}

fn corruption_traces() -> Vec<(Trace, KeyManifest)> {
    let src = source();
    (0..100u64)
        .map(|i| {
            let pattern = CONDITIONS[(i % 3) as usize];
            let k = 4 + ((i / 3) % 3) as usize;
            let keys = keys(k);
            let trace = synth_trace(&spec(pattern, k, 77_000), &src, &keys, i).unwrap();
            (trace, keys)
        })
        .collect()
}

fn turn_edges(log: &StructuredLog) -> Vec<usize> {
    let (_, spans) = log.assistant_tokens();
    spans.iter().skip(1).map(|s| s.1).collect()
}

fn corruption_robustness() -> Outcome {
    let params = DetectorParams::default();
    let mut agent_restore = Vec::new();
    let mut hits = 0.0;
    let mut edges = 0usize;
    let mut acc_clean = Vec::new();
    let mut acc_pii = Vec::new();
    let mut replaced = 0usize;
    let mut total = 0usize;
    let rule = TokenPiiRule::default();
    for (i, (trace, keys)) in corruption_traces().iter().enumerate() {
        let log = StructuredLog::from_trace(trace, "q").unwrap();

        let restored = restore(&remove_ids(&log), keys, &params).unwrap();
        agent_restore.push(restoration_acc(&restored, &log).unwrap().agent_restore);

        let restored = restore(&corrupt_boundaries(&log, i as u64), keys, &params).unwrap();
        let truth = turn_edges(&log);
        hits += boundary_recall(&truth, &turn_edges(&restored), 64).unwrap_or(1.0) * truth.len() as f64;
        edges += truth.len();

        let det = Detector::new(keys, params).unwrap();
        let d = det.detect(trace).unwrap();
        acc_clean.push(evaluate_trace("c", &d.attribution, &d.graph, trace).unwrap().token_acc);
        let (tokens, _) = redact_log(&log, &PiiRules::default(), &rule).assistant_tokens();
        replaced += tokens.iter().zip(&trace.tokens).filter(|(a, b)| a != b).count();
        total += tokens.len();
        let censored = Trace { tokens, ..trace.clone() };
        let d = det.detect(&censored).unwrap();
        acc_pii.push(evaluate_trace("p", &d.attribution, &d.graph, &censored).unwrap().token_acc);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let id = mean(&agent_restore);
    let recall = hits / edges as f64;
    let drop = mean(&acc_clean) - mean(&acc_pii);
    let frac = replaced as f64 / total as f64;
    Outcome {
        pass: id >= 0.90 && recall >= 0.80 && drop <= 0.03 && frac <= 0.05,
        detail: format!(
            "id-removal agent_restore {id:.3}; boundary recall@64 {recall:.3}; pii replaced {:.2}% acc drop {drop:+.4}",
            100.0 * frac
        ),
    }
}

fn viterbi_optimality() -> Outcome {
    let mut s = KeyedStream::new(88);
    let mut mismatches = 0;
    for _ in 0..200 {
        let n = 1 + s.below(10) as usize;
        let k = 1 + s.below(3) as usize;
        let mut logp = |len: usize| -> Vec<f64> {
            let w: Vec<f64> = (0..len).map(|_| 0.05 + support::unit(&mut s)).collect();
            let z: f64 = w.iter().sum();
            w.iter().map(|x| (x / z).ln()).collect()
        };
        let init = logp(k);
        let trans: Vec<Vec<f64>> = (0..k).map(|_| logp(k)).collect();
        let emit: Vec<Vec<f64>> = (0..n).map(|_| logp(k)).collect();
        let (path, score) = viterbi(&emit, &trans, &init);
        let mut best = f64::NEG_INFINITY;
        for code in 0..k.pow(n as u32) {
            let p: Vec<usize> = (0..n).map(|t| code / k.pow(t as u32) % k).collect();
            best = best.max(path_log_score(&p, &emit, &trans, &init));
        }
        if score != best || path_log_score(&path, &emit, &trans, &init) != score {
            mismatches += 1;
        }
    }
    Outcome {
        pass: mismatches == 0,
        detail: format!("200 instances, {mismatches} mismatches"),
    }
}

fn pipeline_bytes() -> String {
    let src = source();
    let keys = keys(4);
    let params = DetectorParams::default();
    let det = Detector::new(&keys, params).unwrap();
    let mut out = String::new();
    let mut metrics = Vec::new();
    for (i, trace) in synth_dataset(&spec(Pattern::StarPure, 4, 9), &src, &keys, 4).unwrap().iter().enumerate() {
        out.push_str(&trace.to_json());
        let log = StructuredLog::from_trace(trace, "q").unwrap();
        let corrupted = corrupt_boundaries(&remove_ids(&log), i as u64);
        out.push_str(&corrupted.to_json());
        out.push_str(&restore(&corrupted, &keys, &params).unwrap().to_json());
        let d = det.detect(trace).unwrap();
        out.push_str(&d.attribution.to_json());
        out.push_str(&d.graph.to_json());
        metrics.push(evaluate_trace(&i.to_string(), &d.attribution, &d.graph, trace).unwrap());
    }
    out.push_str(&EvalReport::new(metrics, serde_json::Value::Null).to_json());
    out
}

fn determinism() -> Outcome {
    let a = pipeline_bytes();
    let b = pipeline_bytes();
    Outcome {
        pass: a == b,
        detail: format!("{} bytes per run, identical: {}", a.len(), a == b),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("synthetic topology table", synthetic_table),
        ("null calibration", null_calibration),
        ("cusum oracle equivalence", cusum_oracle),
        ("bitmask round trip", bitmask_round_trip),
        ("metric hand checks", metric_hand_checks),
        ("score separation", score_separation),
        ("corruption robustness", corruption_robustness),
        ("viterbi optimality", viterbi_optimality),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = run();
        failed += usize::from(!o.pass);
        println!(
            "[{}] {} {name} ({:.1}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
