use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracemark::keyed_signal::{consecutive_keys, KeyManifest, DEFAULT_KAPPA, DEFAULT_WATERMARK_BASE};
use tracemark::pipeline::DetectorParams;
use tracemark::simulator::{Pattern, TopologySpec};
use tracemark::token_source::{parse_token_file, train_ngram, TokenDistributionSource, DEFAULT_VOCAB_SIZE};

use crate::error::{CliError, CliResult};
use crate::io::read_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceConfig {
    Uniform,
    Zipfian {
        exponent: f64,
    },
    Ngram {
        order: usize,
        corpus: PathBuf,
        #[serde(default)]
        smoothing: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub topologies: Vec<TopologySpec>,
    pub n_traces: usize,
    /// Key manifest path. Without one, consecutive keys are derived from
    /// `key_base` and `kappa`.
    pub keys: Option<PathBuf>,
    pub key_base: u64,
    pub kappa: f64,
    pub vocab_size: usize,
    pub source: SourceConfig,
    pub detector: DetectorParams,
    pub corruptions: Vec<String>,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            topologies: vec![TopologySpec::new(Pattern::Chain, 4)],
            n_traces: 100,
            keys: None,
            key_base: DEFAULT_WATERMARK_BASE,
            kappa: DEFAULT_KAPPA,
            vocab_size: DEFAULT_VOCAB_SIZE,
            source: SourceConfig::Uniform,
            detector: DetectorParams::default(),
            corruptions: Vec::new(),
            seed: 0,
            out: None,
        }
    }
}

/// Flags that override the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub topology: Option<Pattern>,
    pub agents: Option<usize>,
    pub kappa: Option<f64>,
    pub window: Option<usize>,
    pub step: Option<usize>,
    pub tau_c: Option<f64>,
}

impl ExperimentConfig {
    /// Loads a config; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = read_text(path)?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| CliError::format(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(k) = cfg.keys.as_mut() {
            resolve(k);
        }
        if let SourceConfig::Ngram { corpus, .. } = &mut cfg.source {
            resolve(corpus);
        }
        if let Some(o) = cfg.out.as_mut() {
            resolve(o);
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    fn check_paths(&self) -> CliResult<()> {
        let missing = |p: &Path| CliError::io(p, std::io::Error::from(std::io::ErrorKind::NotFound));
        if let Some(k) = &self.keys {
            if !k.is_file() {
                return Err(missing(k));
            }
        }
        if let SourceConfig::Ngram { corpus, .. } = &self.source {
            if !corpus.is_file() {
                return Err(missing(corpus));
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if o.topology.is_some() || o.agents.is_some() {
            let first = self.topologies.first().cloned().unwrap_or_else(|| TopologySpec::new(Pattern::Chain, 4));
            self.topologies = vec![TopologySpec {
                pattern: o.topology.unwrap_or(first.pattern),
                k: o.agents.unwrap_or(first.k),
                ..first
            }];
        }
        if let Some(k) = o.kappa {
            self.kappa = k;
        }
        if let Some(w) = o.window {
            self.detector.window = w;
        }
        if let Some(s) = o.step {
            self.detector.step = s;
        }
        if let Some(c) = o.tau_c {
            self.detector.threshold = tracemark::segmenter::Threshold::Normalized { c };
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(CliError::param("kappa", format!("must be finite and >= 0, got {}", self.kappa)));
        }
        if self.vocab_size < 2 {
            return Err(CliError::param("vocab_size", format!("must be >= 2, got {}", self.vocab_size)));
        }
        if self.topologies.is_empty() {
            return Err(CliError::param("topologies", "at least one topology is required"));
        }
        for (i, t) in self.topologies.iter().enumerate() {
            t.validate().map_err(|e| CliError::param(&format!("topologies[{i}]"), e))?;
        }
        self.detector.validate().map_err(|e| CliError::param("detector", e))?;
        for m in &self.corruptions {
            m.parse::<crate::commands::Mode>().map_err(|e| CliError::param("corruptions", e))?;
        }
        Ok(())
    }

    pub fn source(&self) -> CliResult<TokenDistributionSource> {
        match &self.source {
            SourceConfig::Uniform => TokenDistributionSource::uniform(self.vocab_size),
            SourceConfig::Zipfian { exponent } => TokenDistributionSource::zipfian(self.vocab_size, *exponent),
            SourceConfig::Ngram { order, corpus, smoothing } => {
                let tokens = parse_token_file(&read_text(corpus)?).map_err(|e| CliError::format(corpus, e))?;
                train_ngram(&tokens, *order, self.vocab_size, *smoothing)
            }
        }
        .map_err(|e| CliError::param("source", e))
    }

    /// Keys for `k` agents, from the manifest file or derived.
    pub fn keys_for(&self, k: usize) -> CliResult<KeyManifest> {
        match &self.keys {
            Some(path) => {
                let m = load_keys(path)?;
                if m.keys.len() < k {
                    return Err(CliError::MissingKeys(format!(
                        "{} holds {} keys, topology needs {k}",
                        path.display(),
                        m.keys.len()
                    )));
                }
                KeyManifest::new(m.keys[..k].to_vec()).map_err(|e| CliError::format(path, e))
            }
            None => KeyManifest::new(consecutive_keys(k, self.key_base, self.kappa)).map_err(|e| CliError::param("keys", e)),
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

pub fn load_keys(path: &Path) -> CliResult<KeyManifest> {
    KeyManifest::from_json(&read_text(path)?).map_err(|e| CliError::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_detector_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.detector.window, 64);
        assert_eq!(cfg.detector.step, 16);
        assert_eq!(cfg.detector.smooth_win, 5);
        assert_eq!(cfg.detector.local_radius, 8);
        assert_eq!(cfg.detector.min_points_for_pair, 10);
    }

    #[test]
    fn overrides_replace_topology_and_detector() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            topology: Some(Pattern::Tree),
            agents: Some(5),
            window: Some(32),
            tau_c: Some(4.0),
            ..Default::default()
        });
        assert_eq!(cfg.topologies.len(), 1);
        assert_eq!(cfg.topologies[0].pattern, Pattern::Tree);
        assert_eq!(cfg.topologies[0].k, 5);
        assert_eq!(cfg.detector.window, 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"windw": 3}"#).is_err());
        let cfg = ExperimentConfig { kappa: -1.0, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(CliError::Param { field, .. }) if field == "kappa"));
    }
}
