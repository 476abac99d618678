//! Candidate generation: word-prefix expansion of sampled completions,
//! perplexity scoring and top-k selection.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::ContextCap;
use crate::provider::{SampledCompletion, Termination};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CandGenError {
    #[error("empty candidate")]
    EmptyCandidate,
    #[error("non-finite logprob {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Suggested text; never ends in whitespace.
    pub text: String,
    pub token_logprobs: Vec<f64>,
    pub ppl: f64,
    /// Index of the sample this candidate was cut from.
    pub source_sample: usize,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExpansionPolicy {
    /// Every word-boundary prefix of every sample.
    #[default]
    Partial,
    /// The first word of every sample.
    SingleWord,
    /// Only samples that reached EOS, whole.
    FullOnly,
}

impl std::str::FromStr for ExpansionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "partial" => Ok(Self::Partial),
            "single_word" => Ok(Self::SingleWord),
            "full_only" => Ok(Self::FullOnly),
            _ => Err(format!("unknown expansion policy {s:?} (partial, single_word, full_only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    /// Samples per step.
    pub n_c: usize,
    /// Token cap per sample.
    pub n_t: usize,
    /// Suggestions shown per step.
    pub k: usize,
    #[serde(default)]
    pub policy: ExpansionPolicy,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_cap")]
    pub history_cap: ContextCap,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_cap() -> ContextCap {
    ContextCap::Full
}

impl GenConfig {
    pub fn new(n_c: usize, n_t: usize, k: usize) -> Self {
        Self { n_c, n_t, k, policy: ExpansionPolicy::Partial, temperature: 1.0, history_cap: ContextCap::Full }
    }

    /// Five samples of up to twenty tokens.
    pub fn best() -> Self {
        Self::new(5, 20, 1)
    }

    /// One sample of up to five tokens.
    pub fn fast() -> Self {
        Self::new(1, 5, 1)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "best" => Some(Self::best()),
            "fast" => Some(Self::fast()),
            _ => None,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_cap(mut self, cap: ContextCap) -> Self {
        self.history_cap = cap;
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n_c == 0 || self.n_t == 0 {
            return Err("n_c and n_t must be at least 1".into());
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be finite and non-negative, got {}", self.temperature));
        }
        Ok(())
    }
}

/// `exp(-mean(logprobs))`.
pub fn perplexity(token_logprobs: &[f64]) -> Result<f64, CandGenError> {
    if token_logprobs.is_empty() {
        return Err(CandGenError::EmptyCandidate);
    }
    if let Some(x) = token_logprobs.iter().find(|x| !x.is_finite()) {
        return Err(CandGenError::NonFinite(x.to_string()));
    }
    let mean = token_logprobs.iter().sum::<f64>() / token_logprobs.len() as f64;
    Ok((-mean).exp())
}

fn candidate(text: &str, logprobs: &[f64], source_sample: usize) -> Option<Candidate> {
    let text = text.trim_end();
    if text.is_empty() {
        return None;
    }
    let ppl = perplexity(logprobs).ok()?;
    Some(Candidate {
        text: text.to_string(),
        token_logprobs: logprobs.to_vec(),
        ppl,
        source_sample,
        token_count: logprobs.len(),
    })
}

/// Cuts samples into candidates. A token prefix ends at a word boundary when
/// the next token starts with whitespace or the prefix is the whole sample;
/// the EOS marker's log-probability belongs to the whole-sample prefix only.
pub fn expand(samples: &[SampledCompletion], policy: ExpansionPolicy) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let content = s.content_len();
        let logprobs = s.logprobs();
        match policy {
            ExpansionPolicy::FullOnly => {
                if s.terminated_by == Termination::Eos {
                    out.extend(candidate(&s.decoded_text(), &logprobs, i));
                }
            }
            ExpansionPolicy::Partial | ExpansionPolicy::SingleWord => {
                let mut text = String::new();
                for j in 1..=content {
                    text.push_str(&s.tokens[j - 1].text);
                    let whole = j == content;
                    if !whole && !s.tokens[j].text.starts_with(char::is_whitespace) {
                        continue;
                    }
                    let lps = if whole { &logprobs[..] } else { &logprobs[..j] };
                    if let Some(c) = candidate(&text, lps, i) {
                        out.push(c);
                        if policy == ExpansionPolicy::SingleWord {
                            break;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Ranking order: ascending perplexity, then fewer tokens, then text.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    a.ppl.total_cmp(&b.ppl).then(a.token_count.cmp(&b.token_count)).then_with(|| a.text.cmp(&b.text))
}

/// Deduplicates by text (keeping the best-ranked copy) and returns every
/// distinct candidate in rank order.
pub fn rank_all(cands: Vec<Candidate>) -> Vec<Candidate> {
    let mut best: HashMap<String, Candidate> = HashMap::with_capacity(cands.len());
    for c in cands {
        match best.get(&c.text) {
            Some(prev) if rank_order(prev, &c) != Ordering::Greater => {}
            _ => {
                best.insert(c.text.clone(), c);
            }
        }
    }
    let mut out: Vec<Candidate> = best.into_values().collect();
    out.sort_by(rank_order);
    out
}

/// The top `k` of [`rank_all`].
pub fn rank_select(cands: Vec<Candidate>, k: usize) -> Vec<Candidate> {
    let mut out = rank_all(cands);
    out.truncate(k);
    out
}
