//! Test providers with known behavior: an oracle that answers with the
//! ground-truth remainder, a null provider that never matches, and a
//! synthetic provider with a controllable latency model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    stable_hash, Completion, CompletionProvider, CompletionRequest, ProviderError, ProviderTiming, SampledCompletion,
    ScoreOutput, Termination, Token,
};
use crate::corpus::PrefixInstance;

/// Text emitted by [`NullProvider`]: a private-use character that does not
/// occur in curated corpora.
pub const NULL_TEXT: &str = "\u{E000}";

/// Maps a (possibly truncated) context back to the turn it was cut from.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    /// (serialized history ending in the prompter tag, full turn text)
    entries: Vec<(String, String)>,
}

impl GroundTruth {
    pub fn new<'a>(instances: impl IntoIterator<Item = &'a PrefixInstance>) -> Self {
        let entries = instances.into_iter().map(|i| (i.context_head().to_string(), i.turn_text())).collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The remainder of the turn that `context` is a prefix of. The context
    /// may be truncated at the front; the first entry containing it at a
    /// position inside the turn wins.
    pub fn remainder(&self, context: &str) -> Option<&str> {
        for (head, turn) in &self.entries {
            if context.len() > head.len() + turn.len() {
                continue;
            }
            // Fast path for untruncated contexts.
            if let Some(prefix) = context.strip_prefix(head.as_str()) {
                if let Some(rest) = turn.strip_prefix(prefix) {
                    return Some(rest);
                }
            }
            let full = format!("{head}{turn}");
            for (start, m) in full.match_indices(context) {
                let end = start + m.len();
                if end >= head.len() {
                    return Some(&turn[end - head.len()..]);
                }
            }
        }
        None
    }
}

/// Always answers with the exact ground-truth remainder as one token
/// followed by EOS, both with log-probability 0.
#[derive(Debug, Clone)]
pub struct OracleProvider {
    truth: GroundTruth,
}

impl OracleProvider {
    pub fn new(truth: GroundTruth) -> Self {
        Self { truth }
    }
}

fn single_token_sample(text: &str, logprob: f64, max_tokens: usize) -> SampledCompletion {
    if text.is_empty() {
        return SampledCompletion { tokens: vec![Token::eos(logprob)], terminated_by: Termination::Eos };
    }
    let mut tokens = vec![Token::new(text, logprob)];
    if max_tokens > 1 {
        tokens.push(Token::eos(logprob));
        SampledCompletion { tokens, terminated_by: Termination::Eos }
    } else {
        SampledCompletion { tokens, terminated_by: Termination::TokenLimit }
    }
}

impl CompletionProvider for OracleProvider {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        req.validate()?;
        let text = self.truth.remainder(&req.context_text).unwrap_or(NULL_TEXT);
        let sample = single_token_sample(text, 0.0, req.max_tokens);
        Ok(Completion { samples: vec![sample; req.n_samples], timing: ProviderTiming { wall_ms: 0.0 } })
    }

    fn score(&self, _context: &str, forced: &[String]) -> Result<ScoreOutput, ProviderError> {
        if forced.is_empty() {
            return Err(ProviderError::EmptyForcedTokens);
        }
        Ok(ScoreOutput { logprobs: vec![0.0; forced.len()], unk: vec![false; forced.len()] })
    }

    fn wall_clock_timing(&self) -> bool {
        false
    }
}

/// Answers every request with [`NULL_TEXT`].
#[derive(Debug, Clone, Copy, Default)]
pub struct NullProvider;

impl CompletionProvider for NullProvider {
    fn name(&self) -> String {
        "null".into()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        req.validate()?;
        let sample = single_token_sample(NULL_TEXT, -1.0, req.max_tokens);
        Ok(Completion { samples: vec![sample; req.n_samples], timing: ProviderTiming { wall_ms: 0.0 } })
    }

    fn score(&self, _context: &str, forced: &[String]) -> Result<ScoreOutput, ProviderError> {
        if forced.is_empty() {
            return Err(ProviderError::EmptyForcedTokens);
        }
        Ok(ScoreOutput { logprobs: vec![-1.0; forced.len()], unk: vec![false; forced.len()] })
    }

    fn wall_clock_timing(&self) -> bool {
        false
    }
}

/// Reported latency of [`SyntheticProvider`]:
/// `base_ms + per_token_ms * n_samples * max_tokens + per_kchar_ms * context kchars`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticLatency {
    pub base_ms: f64,
    pub per_token_ms: f64,
    pub per_kchar_ms: f64,
}

impl Default for SyntheticLatency {
    fn default() -> Self {
        Self { base_ms: 20.0, per_token_ms: 2.5, per_kchar_ms: 40.0 }
    }
}

/// Each sample independently continues the ground truth with probability
/// `hit_rate` (a random number of words, up to the token cap) and is noise
/// otherwise. More samples and longer caps therefore help, at a latency cost.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    truth: GroundTruth,
    latency: SyntheticLatency,
    hit_rate: f64,
}

impl SyntheticProvider {
    pub fn new(truth: GroundTruth, latency: SyntheticLatency, hit_rate: f64) -> Self {
        Self { truth, latency, hit_rate: hit_rate.clamp(0.0, 1.0) }
    }

    pub fn latency_for(&self, req: &CompletionRequest) -> f64 {
        let l = &self.latency;
        l.base_ms
            + l.per_token_ms * (req.n_samples * req.max_tokens) as f64
            + l.per_kchar_ms * req.context_text.chars().count() as f64 / 1000.0
    }
}

/// Splits text into word tokens that carry their leading whitespace.
fn word_tokens(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                out.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl CompletionProvider for SyntheticProvider {
    fn name(&self) -> String {
        "synthetic".into()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        req.validate()?;
        let seed = req.seed.unwrap_or(0) ^ stable_hash(req.context_text.as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let remainder = self.truth.remainder(&req.context_text);
        let samples = (0..req.n_samples)
            .map(|_| {
                let hit = rng.random::<f64>() < self.hit_rate;
                match remainder.filter(|r| hit && !r.is_empty()) {
                    Some(r) => {
                        let words = word_tokens(r);
                        let m = rng.random_range(1..=words.len().min(req.max_tokens));
                        let lp = -0.05 - 0.1 * rng.random::<f64>();
                        let mut tokens: Vec<Token> = words[..m].iter().map(|w| Token::new(*w, lp)).collect();
                        if m == words.len() && m < req.max_tokens {
                            tokens.push(Token::eos(lp));
                            SampledCompletion { tokens, terminated_by: Termination::Eos }
                        } else {
                            SampledCompletion { tokens, terminated_by: Termination::TokenLimit }
                        }
                    }
                    None => single_token_sample(NULL_TEXT, -1.0 - rng.random::<f64>(), req.max_tokens),
                }
            })
            .collect();
        Ok(Completion { samples, timing: ProviderTiming { wall_ms: self.latency_for(req) } })
    }

    fn score(&self, _context: &str, forced: &[String]) -> Result<ScoreOutput, ProviderError> {
        if forced.is_empty() {
            return Err(ProviderError::EmptyForcedTokens);
        }
        Ok(ScoreOutput { logprobs: vec![-0.1; forced.len()], unk: vec![false; forced.len()] })
    }

    fn wall_clock_timing(&self) -> bool {
        false
    }
}
