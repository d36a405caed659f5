//! Log obfuscators (ID removal, boundary cut-and-refill, PII redaction) and
//! restoration of corrupted logs from watermark evidence.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embedder::Trace;
use crate::error::{invalid, Error, Result};
use crate::keyed_signal::{derive_perturbation_vector, KeyManifest};
use crate::pipeline::{Detector, DetectorParams};
use crate::scorer::null_z;

/// Default boundary-corruption seed.
pub const DEFAULT_CORRUPTION_SEED: u64 = 42;

/// Name every assistant turn receives after ID removal.
pub const GENERIC_ASSISTANT: &str = "Agent";

/// Separator that joins text turns into one stream.
pub const TEXT_SEPARATOR: &str = "\n\n";

/// Restoration refuses logs whose best agent stays below this null z-score.
pub const RESTORE_MIN_Z: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Content {
    Tokens(Vec<u32>),
    Text(String),
}

impl Content {
    pub fn len(&self) -> usize {
        match self {
            Content::Tokens(t) => t.len(),
            Content::Text(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    #[serde(default)]
    pub name: Option<String>,
    pub content: Content,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredLog {
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub question: String,
    #[serde(default)]
    pub ground_truth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mistake_agent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mistake_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    /// Roster of participating agents; leaks identities.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agents: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
}

impl StructuredLog {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(invalid("log has no turns"));
        }
        if let Some(step) = self.mistake_step {
            if step >= self.turns.len() {
                return Err(invalid(format!(
                    "mistake_step {step} does not index one of {} turns",
                    self.turns.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let log: StructuredLog = serde_json::from_str(text).map_err(|e| invalid(format!("structured log: {e}")))?;
        log.validate()?;
        Ok(log)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log serializes")
    }

    /// Wraps a generated trace: one human question turn, then one named
    /// assistant turn per ground-truth segment. The mistake is attributed to
    /// a seed-chosen assistant turn.
    pub fn from_trace(trace: &Trace, question: &str) -> Result<Self> {
        let gt = trace
            .ground_truth
            .as_ref()
            .ok_or_else(|| invalid("trace has no ground truth"))?;
        let mut turns = vec![Turn {
            role: Role::Human,
            name: Some("user".into()),
            content: Content::Text(question.to_string()),
        }];
        for seg in gt {
            turns.push(Turn {
                role: Role::Assistant,
                name: Some(seg.agent_id.clone()),
                content: Content::Tokens(trace.tokens[seg.start..seg.end].to_vec()),
            });
        }
        let step = 1 + (trace.seed as usize % gt.len());
        let mut roster: Vec<String> = Vec::new();
        for seg in gt {
            if !roster.contains(&seg.agent_id) {
                roster.push(seg.agent_id.clone());
            }
        }
        Ok(Self {
            mistake_agent: turns[step].name.clone(),
            mistake_step: Some(step),
            turns,
            question: question.to_string(),
            ground_truth: String::new(),
            system_prompt: Some(format!("You coordinate agents {}.", roster.join(", "))),
            agents: Some(roster),
            vocab_size: Some(trace.vocab_size),
        })
    }

    /// Token stream of all assistant turns with their `[start, end)` spans.
    pub fn assistant_tokens(&self) -> (Vec<u32>, Vec<(usize, usize, usize)>) {
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for (i, turn) in self.turns.iter().enumerate() {
            if let (Role::Assistant, Content::Tokens(t)) = (turn.role, &turn.content) {
                spans.push((i, tokens.len(), tokens.len() + t.len()));
                tokens.extend_from_slice(t);
            }
        }
        (tokens, spans)
    }
}

/// Collapses identities: assistants become "Agent", humans lose their name,
/// and top-level identity fields are dropped. Order and contents stay.
pub fn remove_ids(log: &StructuredLog) -> StructuredLog {
    let mut out = log.clone();
    for turn in &mut out.turns {
        turn.name = Some(match turn.role {
            Role::Assistant => GENERIC_ASSISTANT.to_string(),
            Role::Human => String::new(),
        });
    }
    out.system_prompt = None;
    out.agents = None;
    out
}

fn recut<T: Clone>(stream: &[T], positions: &[usize], parts: usize, seed: u64) -> Option<Vec<Vec<T>>> {
    // positions: admissible interior cut points, sorted.
    if parts < 2 || positions.len() < parts - 1 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cuts: Vec<usize> = sample(&mut rng, positions.len(), parts - 1)
        .into_iter()
        .map(|i| positions[i])
        .collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts.into_iter().chain([stream.len()]) {
        out.push(stream[prev..c].to_vec());
        prev = c;
    }
    Some(out)
}

/// Cut-and-refill: the contents of turns of each content kind are
/// concatenated into one stream and re-cut at `turns − 1` distinct random
/// positions, then poured back into the same turn skeleton.
///
/// Token streams may be cut between any two tokens. Text streams are joined
/// with [`TEXT_SEPARATOR`] and cut only at character boundaries outside
/// separators; separators are dropped again on refill, so the concatenation
/// of contents is conserved. A stream with too few positions is left as is.
pub fn corrupt_boundaries(log: &StructuredLog, seed: u64) -> StructuredLog {
    let mut out = log.clone();

    let token_turns: Vec<usize> = (0..log.turns.len())
        .filter(|&i| matches!(log.turns[i].content, Content::Tokens(_)))
        .collect();
    let stream: Vec<u32> = token_turns
        .iter()
        .flat_map(|&i| match &log.turns[i].content {
            Content::Tokens(t) => t.clone(),
            Content::Text(_) => unreachable!(),
        })
        .collect();
    let positions: Vec<usize> = (1..stream.len()).collect();
    if let Some(parts) = recut(&stream, &positions, token_turns.len(), seed) {
        for (&i, part) in token_turns.iter().zip(parts) {
            out.turns[i].content = Content::Tokens(part);
        }
    }

    let text_turns: Vec<usize> = (0..log.turns.len())
        .filter(|&i| matches!(log.turns[i].content, Content::Text(_)))
        .collect();
    let texts: Vec<&str> = text_turns
        .iter()
        .map(|&i| match &log.turns[i].content {
            Content::Text(s) => s.as_str(),
            Content::Tokens(_) => unreachable!(),
        })
        .collect();
    // Cutting just before or just after a separator yields the same refill,
    // so the admissible cuts are exactly the interior character positions
    // of the bare concatenation.
    let chars: Vec<char> = texts.concat().chars().collect();
    let positions: Vec<usize> = (1..chars.len()).collect();
    if let Some(parts) = recut(&chars, &positions, text_turns.len(), seed) {
        for (&i, part) in text_turns.iter().zip(parts) {
            out.turns[i].content = Content::Text(part.into_iter().collect());
        }
    }
    out
}

/// Ordered regex rules, each replacing matches with a placeholder.
#[derive(Debug, Clone)]
pub struct PiiRules {
    rules: Vec<(Regex, String)>,
}

/// Synthetic names recognized by [`PiiRules::default`].
pub const SYNTHETIC_NAMES: [&str; 12] = [
    "Alice", "Bob", "Carol", "Dave", "Erin", "Frank", "Grace", "Heidi", "Ivan", "Judy", "Mallory", "Trent",
];

impl PiiRules {
    pub fn new(rules: Vec<(Regex, String)>) -> Self {
        Self { rules }
    }

    pub fn rules(&self) -> &[(Regex, String)] {
        &self.rules
    }

    /// True if any rule matches anywhere in `text`.
    pub fn matches(&self, text: &str) -> bool {
        self.rules.iter().any(|(re, _)| re.is_match(text))
    }
}

impl Default for PiiRules {
    fn default() -> Self {
        let names = format!(r"\b(?:{})\b", SYNTHETIC_NAMES.join("|"));
        Self::new(vec![
            (
                Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(?:\.[A-Za-z0-9-]+)*\.[A-Za-z]{2,}").unwrap(),
                "[EMAIL]".into(),
            ),
            (Regex::new(r"(?:\+?\d{1,3}[-. ])?\(?\d{3}\)?[-. ]\d{3}[-. ]\d{4}").unwrap(), "[PHONE]".into()),
            (Regex::new(&names).unwrap(), "[NAME]".into()),
        ])
    }
}

/// Replaces every match of every rule, repeating until no rule matches.
pub fn redact_pii(content: &str, rules: &PiiRules) -> String {
    let mut text = content.to_string();
    // Each pass strictly shrinks the set of matches; the bound is a guard.
    for _ in 0..16 {
        if !rules.matches(&text) {
            break;
        }
        for (re, placeholder) in rules.rules() {
            text = re.replace_all(&text, placeholder.as_str()).into_owned();
        }
    }
    text
}

/// Token-level PII: ids in `[first, last]` stand for sensitive spans and are
/// replaced with `placeholder`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPiiRule {
    pub first: u32,
    pub last: u32,
    pub placeholder: u32,
}

impl TokenPiiRule {
    /// Reserves the top of a vocabulary: the last id is the placeholder and
    /// the `sensitive` ids below it are redacted.
    pub fn top_of_vocab(vocab_size: usize, sensitive: u32) -> Self {
        let placeholder = vocab_size as u32 - 1;
        Self {
            first: placeholder - sensitive,
            last: placeholder - 1,
            placeholder,
        }
    }

    pub fn is_sensitive(&self, token: u32) -> bool {
        (self.first..=self.last).contains(&token)
    }
}

impl Default for TokenPiiRule {
    /// 12 of 256 ids (about 4.7% of a uniform stream).
    fn default() -> Self {
        Self::top_of_vocab(256, 12)
    }
}

pub fn redact_tokens(tokens: &[u32], rule: &TokenPiiRule) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| if rule.is_sensitive(t) { rule.placeholder } else { t })
        .collect()
}

/// Applies text rules to text turns and the token rule to token turns.
pub fn redact_log(log: &StructuredLog, rules: &PiiRules, token_rule: &TokenPiiRule) -> StructuredLog {
    let mut out = log.clone();
    for turn in &mut out.turns {
        turn.content = match &turn.content {
            Content::Text(s) => Content::Text(redact_pii(s, rules)),
            Content::Tokens(t) => Content::Tokens(redact_tokens(t, token_rule)),
        };
    }
    out.question = redact_pii(&out.question, rules);
    out
}

fn nearest_distance(p: usize, set: &[usize]) -> usize {
    set.iter().map(|&q| q.abs_diff(p)).min().unwrap_or(usize::MAX)
}

/// Re-derives turn boundaries and agent names from the watermark.
///
/// Assistant token turns are concatenated and run through the detector.
/// Recovered boundaries within `w/2` of an existing turn edge snap to it.
/// The turn count is kept: surplus boundaries with the lowest confidence are
/// dropped, and missing ones are filled with the existing edges farthest
/// from every recovered boundary. Each turn is named by the agent with the
/// highest mean token score over it.
pub fn restore(corrupted: &StructuredLog, keys: &KeyManifest, params: &DetectorParams) -> Result<StructuredLog> {
    corrupted.validate()?;
    let (tokens, spans) = corrupted.assistant_tokens();
    if spans.is_empty() {
        return Err(Error::Unrestorable("no assistant turn carries token content".into()));
    }
    let vocab_size = corrupted.vocab_size.unwrap_or(crate::token_source::DEFAULT_VOCAB_SIZE);
    let detector = Detector::new(keys, *params)?;
    let detection = match detector.detect_tokens(&tokens, vocab_size) {
        Ok(d) => d,
        Err(Error::EmptyField { trace_len, window }) => {
            return Err(Error::Unrestorable(format!(
                "{trace_len} assistant tokens are fewer than one window of {window}"
            )))
        }
        Err(e) => return Err(e),
    };

    let phi = derive_perturbation_vector(&keys.keys[0], vocab_size)?;
    let best_z = detection
        .token_scores
        .iter()
        .map(|row| null_z(row, &phi))
        .fold(f64::NEG_INFINITY, f64::max);
    if best_z < RESTORE_MIN_Z {
        return Err(Error::Unrestorable(format!(
            "best agent z-score {best_z:.2} is below the null threshold {RESTORE_MIN_Z}"
        )));
    }

    let existing: Vec<usize> = spans.iter().skip(1).map(|s| s.1).collect();
    let want = spans.len() - 1;
    let snap = params.window / 2;
    let mut recovered: Vec<(usize, f64)> = detection
        .attribution
        .segments
        .iter()
        .skip(1)
        .map(|s| {
            let pos = existing
                .iter()
                .copied()
                .filter(|&e| e.abs_diff(s.start) <= snap)
                .min_by_key(|&e| e.abs_diff(s.start))
                .unwrap_or(s.start);
            (pos, s.confidence)
        })
        .collect();
    recovered.sort_by_key(|r| r.0);
    recovered.dedup_by(|a, b| {
        if a.0 == b.0 {
            b.1 = b.1.max(a.1);
            true
        } else {
            false
        }
    });
    if recovered.len() > want {
        recovered.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        recovered.truncate(want);
    }
    let mut cuts: Vec<usize> = recovered.iter().map(|r| r.0).collect();
    while cuts.len() < want {
        let pick = existing
            .iter()
            .copied()
            .filter(|e| !cuts.contains(e))
            .max_by_key(|&e| (nearest_distance(e, &cuts), std::cmp::Reverse(e)));
        match pick {
            Some(e) => cuts.push(e),
            None => break,
        }
    }
    // Existing cuts are distinct, so `want` of them always suffice.
    cuts.sort_unstable();

    let mut out = corrupted.clone();
    let mut prev = 0;
    for (k, &(turn_idx, _, _)) in spans.iter().enumerate() {
        let end = if k < cuts.len() { cuts[k] } else { tokens.len() };
        let best = (0..keys.keys.len())
            .map(|a| {
                let s = &detection.token_scores[a][prev..end];
                let mean = if s.is_empty() { f64::NEG_INFINITY } else { s.iter().sum::<f64>() / s.len() as f64 };
                (a, mean)
            })
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
        let turn = &mut out.turns[turn_idx];
        turn.content = Content::Tokens(tokens[prev..end].to_vec());
        turn.name = Some(keys.keys[best.0].agent_id.clone());
        prev = end;
    }
    Ok(out)
}
