use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracemark::baselines::{
    oracle_attribute, random_segment, recursive_segment, viterbi_attribute, PrototypeModel, Separators,
};
use tracemark::corruption::{corrupt_boundaries, redact_log, remove_ids, restore, PiiRules, StructuredLog, TokenPiiRule};
use tracemark::embedder::Trace;
use tracemark::evaluation::{evaluate_trace, restoration_acc, EvalReport, RestorationSummary};
use tracemark::keyed_signal::{mix64, KeyManifest};
use tracemark::pipeline::Detector;
use tracemark::segmenter::{AttributedSegment, SegmentAttribution};
use tracemark::simulator::{synth_trace, DatasetManifest};
use tracemark::transition_graph::TransitionGraph;

use crate::config::{load_keys, ExperimentConfig};
use crate::error::{CliError, CliResult};
use crate::io::{expand_inputs, read_text, sha256_hex, stem, write_atomic, write_manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    RemoveId,
    Boundary,
    Pii,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::RemoveId => "remove-id",
            Mode::Boundary => "boundary",
            Mode::Pii => "pii",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "remove-id" => Ok(Mode::RemoveId),
            "boundary" => Ok(Mode::Boundary),
            "pii" => Ok(Mode::Pii),
            other => Err(format!("unknown corruption mode {other:?}; expected remove-id, boundary or pii")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Viterbi,
    Oracle,
    Random,
    Recursive,
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "viterbi" => Ok(Method::Viterbi),
            "oracle" => Ok(Method::Oracle),
            "random" => Ok(Method::Random),
            "recursive" => Ok(Method::Recursive),
            other => Err(format!("unknown baseline {other:?}; expected viterbi, oracle, random or recursive")),
        }
    }
}

/// One predicted attribution with its transition graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub attribution: SegmentAttribution,
    pub graph: TransitionGraph,
}

impl PredictionRecord {
    fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

fn to_pretty<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("value serializes")
}

/// Runs `f` over the files in parallel, keeping input order.
fn per_file<T: Send>(files: &[PathBuf], f: impl Fn(&Path) -> CliResult<T> + Sync) -> CliResult<Vec<T>> {
    files.par_iter().map(|p| f(p)).collect()
}

fn read_trace(path: &Path) -> CliResult<Trace> {
    Trace::from_json(&read_text(path)?).map_err(|e| CliError::format(path, e))
}

fn read_log(path: &Path) -> CliResult<StructuredLog> {
    StructuredLog::from_json(&read_text(path)?).map_err(|e| CliError::format(path, e))
}

fn file_seed(seed: u64, path: &Path) -> u64 {
    let digest = sha256_hex(stem(path).as_bytes());
    mix64(seed ^ u64::from_str_radix(&digest[..16], 16).expect("hex digest"))
}

fn resolve_keys(explicit: Option<&Path>, cfg: &ExperimentConfig) -> CliResult<KeyManifest> {
    match explicit.or(cfg.keys.as_deref()) {
        Some(p) => load_keys(p),
        None => Err(CliError::MissingKeys("pass --keys or set \"keys\" in the config".into())),
    }
}

fn out_file(out: &Path, input: &Path, suffix: &str) -> PathBuf {
    out.join(format!("{}{suffix}", stem(input)))
}

pub fn generate(cfg: &ExperimentConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    let source = cfg.source()?;
    let mut outputs = Vec::new();
    for topo in &cfg.topologies {
        let dir = out.join(format!("{}_K{}", topo.pattern.as_str(), topo.k));
        let keys = cfg.keys_for(topo.k)?;
        let spec = tracemark::simulator::TopologySpec { seed: topo.seed.wrapping_add(cfg.seed), ..topo.clone() };
        let keys_path = dir.join("keys.json");
        write_atomic(&keys_path, keys.to_json().as_bytes())?;
        outputs.push(keys_path);
        let written: Vec<Vec<PathBuf>> = (0..cfg.n_traces)
            .into_par_iter()
            .map(|i| {
                let trace = synth_trace(&spec, &source, &keys, i as u64).map_err(|e| CliError::param("topologies", e))?;
                let name = format!("trace_{i:05}.json");
                let tp = dir.join("traces").join(&name);
                write_atomic(&tp, trace.to_json().as_bytes())?;
                let log = StructuredLog::from_trace(&trace, &format!("task {i}")).map_err(|e| CliError::format(&tp, e))?;
                let lp = dir.join("logs").join(&name);
                write_atomic(&lp, log.to_json().as_bytes())?;
                Ok(vec![tp, lp])
            })
            .collect::<CliResult<_>>()?;
        let manifest = DatasetManifest {
            spec,
            traces: (0..cfg.n_traces).map(|i| format!("traces/trace_{i:05}.json")).collect(),
        };
        let mp = dir.join("dataset.json");
        write_atomic(&mp, to_pretty(&manifest).as_bytes())?;
        outputs.push(mp);
        outputs.extend(written.into_iter().flatten());
    }
    write_manifest(out, "generate", cfg.to_value(), &[], &outputs)
}

pub fn trace(cfg: &ExperimentConfig, inputs: &[PathBuf], keys: Option<&Path>, out: &Path, field_csv: bool) -> CliResult<()> {
    cfg.detector.validate().map_err(|e| CliError::param("detector", e))?;
    let keys = resolve_keys(keys, cfg)?;
    let detector = Detector::new(&keys, cfg.detector).map_err(|e| CliError::MissingKeys(e.to_string()))?;
    let files = expand_inputs(inputs)?;
    let outputs = per_file(&files, |path| {
        let t = read_trace(path)?;
        let d = detector.detect(&t).map_err(|e| CliError::from_core(path, e))?;
        let record = PredictionRecord { id: stem(path), attribution: d.attribution, graph: d.graph };
        let rp = out_file(out, path, ".json");
        write_atomic(&rp, record.to_json().as_bytes())?;
        let mut written = vec![rp];
        if field_csv {
            let fp = out_file(out, path, ".field.csv");
            write_atomic(&fp, d.field.to_csv().as_bytes())?;
            written.push(fp);
        }
        Ok(written)
    })?;
    write_manifest(out, "trace", cfg.to_value(), &files, &outputs.concat())
}

pub fn corrupt(cfg: &ExperimentConfig, inputs: &[PathBuf], modes: &[Mode], out: &Path) -> CliResult<()> {
    let files = expand_inputs(inputs)?;
    let rules = PiiRules::default();
    let token_rule = TokenPiiRule::default();
    let outputs = per_file(&files, |path| {
        let mut corrupted = read_log(path)?;
        for mode in modes {
            corrupted = match mode {
                Mode::RemoveId => remove_ids(&corrupted),
                Mode::Boundary => corrupt_boundaries(&corrupted, file_seed(cfg.seed, path)),
                Mode::Pii => redact_log(&corrupted, &rules, &token_rule),
            };
        }
        let p = out_file(out, path, ".json");
        write_atomic(&p, corrupted.to_json().as_bytes())?;
        Ok(p)
    })?;
    let mut config = cfg.to_value();
    config["modes"] = serde_json::json!(modes.iter().map(|m| m.as_str()).collect::<Vec<_>>());
    write_manifest(out, "corrupt", config, &files, &outputs)
}

pub fn restore_logs(cfg: &ExperimentConfig, inputs: &[PathBuf], keys: Option<&Path>, out: &Path) -> CliResult<()> {
    cfg.detector.validate().map_err(|e| CliError::param("detector", e))?;
    let keys = resolve_keys(keys, cfg)?;
    if keys.keys.len() < 2 {
        return Err(CliError::MissingKeys("restoration needs keys for at least 2 agents".into()));
    }
    let files = expand_inputs(inputs)?;
    let outputs = per_file(&files, |path| {
        let log = read_log(path)?;
        let restored = restore(&log, &keys, &cfg.detector).map_err(|e| CliError::from_core(path, e))?;
        let p = out_file(out, path, ".json");
        write_atomic(&p, restored.to_json().as_bytes())?;
        Ok(p)
    })?;
    write_manifest(out, "restore", cfg.to_value(), &files, &outputs)
}

fn agents_of(trace: &Trace) -> Vec<String> {
    let mut ids: Vec<String> = Vec::new();
    for s in trace.ground_truth.iter().flatten() {
        if !ids.contains(&s.agent_id) {
            ids.push(s.agent_id.clone());
        }
    }
    ids
}

/// A prediction file, or a ground-truth trace standing in for one.
fn read_prediction(path: &Path) -> CliResult<PredictionRecord> {
    let text = read_text(path)?;
    if let Ok(r) = serde_json::from_str::<PredictionRecord>(&text) {
        r.attribution.validate().map_err(|e| CliError::format(path, e))?;
        return Ok(r);
    }
    let trace = Trace::from_json(&text)
        .map_err(|_| CliError::format(path, "neither a prediction record nor a trace with ground truth"))?;
    let gt = trace
        .ground_truth
        .as_ref()
        .ok_or_else(|| CliError::format(path, "trace has no ground truth"))?;
    let attribution = SegmentAttribution {
        boundaries: gt.iter().skip(1).map(|s| s.start).collect(),
        segments: gt
            .iter()
            .map(|s| AttributedSegment { start: s.start, end: s.end, agent_id: s.agent_id.clone(), confidence: 1.0 })
            .collect(),
    };
    let graph = TransitionGraph::from_attribution(&attribution, &agents_of(&trace)).map_err(|e| CliError::format(path, e))?;
    Ok(PredictionRecord { id: stem(path), attribution, graph })
}

fn by_stem(files: &[PathBuf]) -> BTreeMap<String, PathBuf> {
    files.iter().map(|p| (stem(p), p.clone())).collect()
}

pub fn eval(
    cfg: &ExperimentConfig,
    pred: &[PathBuf],
    truth: &[PathBuf],
    restoration: Option<(&[PathBuf], &[PathBuf])>,
    out: &Path,
) -> CliResult<()> {
    let pred_files = expand_inputs(pred)?;
    let truth_files = by_stem(&expand_inputs(truth)?);
    let metrics = per_file(&pred_files, |path| {
        let record = read_prediction(path)?;
        let tp = truth_files
            .get(&record.id)
            .ok_or_else(|| CliError::format(path, format!("no truth trace for id {:?}", record.id)))?;
        let t = read_trace(tp)?;
        evaluate_trace(&record.id, &record.attribution, &record.graph, &t).map_err(|e| CliError::format(path, e))
    })?;
    let mut inputs = pred_files.clone();
    inputs.extend(truth_files.values().cloned());
    let mut report = EvalReport::new(metrics, cfg.to_value());
    if let Some((restored, original)) = restoration {
        let restored = expand_inputs(restored)?;
        let original = by_stem(&expand_inputs(original)?);
        let scores = per_file(&restored, |path| {
            let op = original
                .get(&stem(path))
                .ok_or_else(|| CliError::format(path, "no original log with the same name"))?;
            restoration_acc(&read_log(path)?, &read_log(op)?).map_err(|e| CliError::format(path, e))
        })?;
        report.restoration = Some(RestorationSummary::of(&scores));
        inputs.extend(restored);
        inputs.extend(original.into_values());
    }
    let jp = out.join("report.json");
    let cp = out.join("report.csv");
    write_atomic(&jp, report.to_json().as_bytes())?;
    write_atomic(&cp, report.to_csv().as_bytes())?;
    write_manifest(out, "eval", cfg.to_value(), &inputs, &[jp, cp])
}

pub struct BaselineOptions<'a> {
    pub method: Method,
    pub keys: Option<&'a Path>,
    pub rho: f64,
    pub newline_token: Option<u32>,
}

pub fn baseline(cfg: &ExperimentConfig, inputs: &[PathBuf], opts: &BaselineOptions, out: &Path) -> CliResult<()> {
    if !(opts.rho > 0.0 && opts.rho < 1.0) {
        return Err(CliError::param("rho", format!("must lie in (0, 1), got {}", opts.rho)));
    }
    cfg.detector.validate().map_err(|e| CliError::param("detector", e))?;
    let fixed_agents = match opts.keys.or(cfg.keys.as_deref()) {
        Some(p) => Some(load_keys(p)?.agent_ids()),
        None => None,
    };
    let separators = opts.newline_token.map(Separators::newline).unwrap_or_default();
    let files = expand_inputs(inputs)?;
    let outputs = per_file(&files, |path| {
        let t = read_trace(path)?;
        let agents = fixed_agents.clone().unwrap_or_else(|| agents_of(&t));
        if agents.is_empty() {
            return Err(CliError::MissingKeys(format!("{}: no agent list; pass --keys", path.display())));
        }
        let core = |e| CliError::from_core(path, e);
        let attribution = match opts.method {
            Method::Random => random_segment(t.len(), &agents, file_seed(cfg.seed, path)).map_err(core)?,
            m => {
                let model = PrototypeModel::from_first_segments(&t, &agents).map_err(core)?;
                match m {
                    Method::Oracle => oracle_attribute(&t, &model),
                    Method::Viterbi => viterbi_attribute(&t, &model, cfg.detector.window, cfg.detector.step, opts.rho),
                    _ => recursive_segment(&t, &model, &separators),
                }
                .map_err(core)?
            }
        };
        let graph = TransitionGraph::from_attribution(&attribution, &agents).map_err(core)?;
        let record = PredictionRecord { id: stem(path), attribution, graph };
        let p = out_file(out, path, ".json");
        write_atomic(&p, record.to_json().as_bytes())?;
        Ok(p)
    })?;
    let mut config = cfg.to_value();
    config["method"] = serde_json::json!(format!("{:?}", opts.method));
    config["rho"] = serde_json::json!(opts.rho);
    write_manifest(out, "baseline", config, &files, &outputs)
}
