//! Completion providers: anything that can sample continuations of a
//! serialized context together with per-token log-probabilities.

use serde::{Deserialize, Serialize};

pub mod doubles;
pub mod http;
pub mod ngram;

pub use http::HttpProvider;
pub use ngram::{NgramModel, NgramProvider, SmoothingConfig};

/// Text of the end-of-sequence marker token. The marker contributes its
/// log-probability to a sample but no characters.
pub const EOS_TEXT: &str = "";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    /// Truncated serialized context followed by the current prefix.
    pub context_text: String,
    pub n_samples: usize,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub stop_at_eos: bool,
}

impl CompletionRequest {
    pub fn new(context_text: impl Into<String>, n_samples: usize, max_tokens: usize) -> Self {
        Self {
            context_text: context_text.into(),
            n_samples,
            max_tokens,
            temperature: 1.0,
            seed: None,
            stop_at_eos: true,
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.n_samples == 0 {
            return Err(ProviderError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if self.max_tokens == 0 {
            return Err(ProviderError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ProviderError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub logprob: f64,
}

impl Token {
    pub fn new(text: impl Into<String>, logprob: f64) -> Self {
        Self { text: text.into(), logprob }
    }

    pub fn eos(logprob: f64) -> Self {
        Self::new(EOS_TEXT, logprob)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    TokenLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledCompletion {
    pub tokens: Vec<Token>,
    pub terminated_by: Termination,
}

impl SampledCompletion {
    /// Number of tokens that carry text, i.e. excluding a trailing
    /// end-of-sequence marker.
    pub fn content_len(&self) -> usize {
        match self.terminated_by {
            Termination::Eos => self.tokens.len().saturating_sub(1),
            Termination::TokenLimit => self.tokens.len(),
        }
    }

    /// Concatenated text of the first `n` tokens, never including the
    /// end-of-sequence marker.
    pub fn decode_prefix(&self, n: usize) -> String {
        self.tokens[..n.min(self.content_len())].iter().map(|t| t.text.as_str()).collect()
    }

    pub fn decoded_text(&self) -> String {
        self.decode_prefix(self.tokens.len())
    }

    pub fn logprobs(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.logprob).collect()
    }

    /// Checks the sample against the request it answers.
    pub fn check(&self, max_tokens: usize) -> Result<(), String> {
        if self.tokens.is_empty() {
            return Err("completion has no tokens".into());
        }
        if self.tokens.len() > max_tokens {
            return Err(format!("completion has {} tokens, cap is {max_tokens}", self.tokens.len()));
        }
        if let Some(t) = self.tokens.iter().find(|t| !(t.logprob.is_finite() && t.logprob <= 0.0)) {
            return Err(format!("token {:?} has invalid logprob {}", t.text, t.logprob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProviderTiming {
    pub wall_ms: f64,
}

/// The samples answering one request, plus how long they took.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub samples: Vec<SampledCompletion>,
    pub timing: ProviderTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOutput {
    pub logprobs: Vec<f64>,
    /// Per token: true when the token was outside the vocabulary and scored
    /// as unknown. Remote backends always report false.
    pub unk: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProviderError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error talking to {endpoint}: {cause}")]
    Transport { endpoint: String, cause: String },
    #[error("malformed reply from {endpoint}: {cause}")]
    Malformed { endpoint: String, cause: String },
    #[error("backend {endpoint} returned {status}: {message}")]
    Backend { endpoint: String, status: u16, message: String },
    #[error("nothing to score: forced token list is empty")]
    EmptyForcedTokens,
}

/// How a provider reports [`ProviderTiming`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TimingMode {
    /// Measured wall-clock time.
    #[default]
    Wall,
    /// A deterministic cost model, for byte-reproducible step logs:
    /// `per_request_ms + per_token_ms * generated tokens + per_kchar_ms * context kchars`.
    Virtual { per_request_ms: f64, per_token_ms: f64, per_kchar_ms: f64 },
}

impl TimingMode {
    pub fn virtual_default() -> Self {
        TimingMode::Virtual { per_request_ms: 5.0, per_token_ms: 1.0, per_kchar_ms: 2.0 }
    }

    pub fn is_wall(&self) -> bool {
        matches!(self, TimingMode::Wall)
    }

    pub(crate) fn cost(&self, measured_ms: f64, context_chars: usize, generated_tokens: usize) -> f64 {
        match *self {
            TimingMode::Wall => measured_ms,
            TimingMode::Virtual { per_request_ms, per_token_ms, per_kchar_ms } => {
                per_request_ms + per_token_ms * generated_tokens as f64 + per_kchar_ms * context_chars as f64 / 1000.0
            }
        }
    }
}

pub trait CompletionProvider: Send + Sync {
    /// Identifier recorded in reports.
    fn name(&self) -> String;

    /// Samples `req.n_samples` continuations of `req.context_text`.
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError>;

    /// Conditional log-probabilities of `forced_tokens` continuing `context`.
    fn score(&self, context: &str, forced_tokens: &[String]) -> Result<ScoreOutput, ProviderError>;

    /// Whether [`ProviderTiming`] is measured wall time (as opposed to a
    /// deterministic model).
    fn wall_clock_timing(&self) -> bool {
        true
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for std::sync::Arc<P> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        (**self).complete(req)
    }
    fn score(&self, context: &str, forced_tokens: &[String]) -> Result<ScoreOutput, ProviderError> {
        (**self).score(context, forced_tokens)
    }
    fn wall_clock_timing(&self) -> bool {
        (**self).wall_clock_timing()
    }
}

/// FNV-1a, used wherever a hash has to be stable across runs and platforms.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
