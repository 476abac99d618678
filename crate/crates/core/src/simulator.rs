//! Turn simulation: a user types a prompter turn while suggestions are
//! offered at suggestion points. A suggestion is accepted when it matches the
//! ground truth exactly up to a word boundary; otherwise the user types on
//! to the next suggestion point.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use dashmap::DashMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::candgen::{expand, rank_all, Candidate, GenConfig};
use crate::corpus::{truncate_context, PrefixInstance};
use crate::provider::{CompletionProvider, CompletionRequest, ProviderError};
use crate::text::char_offsets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SuggestionMode {
    /// Suggest at the start of every word.
    #[default]
    WordLevel,
    /// Suggest after every character.
    CharLevel,
}

impl std::str::FromStr for SuggestionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "word" | "word_level" => Ok(Self::WordLevel),
            "char" | "char_level" => Ok(Self::CharLevel),
            _ => Err(format!("unknown suggestion mode {s:?} (word, char)")),
        }
    }
}

/// Character offsets where a step fires. Offsets with nothing left to
/// type are never included.
pub fn suggestion_points(turn_text: &str, mode: SuggestionMode) -> Vec<usize> {
    let chars: Vec<char> = turn_text.chars().collect();
    match mode {
        SuggestionMode::CharLevel => (0..chars.len()).collect(),
        SuggestionMode::WordLevel => (0..chars.len())
            .filter(|&i| i == 0 || (chars[i - 1].is_whitespace() && !chars[i].is_whitespace()))
            .collect(),
    }
}

/// Characters consumed when `candidate` is accepted against `gt_suffix`:
/// its own length plus the whitespace run that follows it. `None` unless the
/// suffix starts with the candidate and the match ends at a word boundary.
pub fn match_candidate(candidate: &str, gt_suffix: &str) -> Option<usize> {
    if candidate.is_empty() {
        return None;
    }
    let rest = gt_suffix.strip_prefix(candidate)?;
    if !(rest.is_empty() || rest.starts_with(char::is_whitespace)) {
        return None;
    }
    let sep = rest.chars().take_while(|c| c.is_whitespace()).count();
    Some(candidate.chars().count() + sep)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accepted {
    pub text: String,
    pub consumed_chars: usize,
    /// 0-based position in the shown list.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Character offset into the turn.
    pub position: usize,
    pub prefix_len: usize,
    pub shown: Vec<Candidate>,
    pub accepted: Option<Accepted>,
    pub latency_ms: f64,
    /// Distinct candidates before the top-k cut.
    pub candidates_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub conversation_id: String,
    pub turn_index: usize,
    pub k: usize,
    pub full_turn_len: usize,
    pub steps: Vec<StepRecord>,
    pub accepted_chars_total: usize,
    pub acceptance_count: usize,
    /// A provider error stopped the walk; the trace is excluded from metrics.
    pub aborted: bool,
}

impl TurnTrace {
    pub fn typed_chars(&self) -> usize {
        self.full_turn_len - self.accepted_chars_total
    }
}

/// Picks the shown candidate consuming the most characters; earlier rank
/// wins ties.
pub fn best_acceptance(shown: &[Candidate], gt_suffix: &str) -> Option<Accepted> {
    let mut best: Option<Accepted> = None;
    for (rank, c) in shown.iter().enumerate() {
        if let Some(n) = match_candidate(&c.text, gt_suffix) {
            if best.as_ref().is_none_or(|b| n > b.consumed_chars) {
                best = Some(Accepted { text: c.text.clone(), consumed_chars: n, rank });
            }
        }
    }
    best
}

/// Ranked candidates for one context, with the time it took to get them.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub ranked: Vec<Candidate>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct MemoKey {
    context: String,
    seed: Option<u64>,
    n_samples: usize,
    max_tokens: usize,
    temperature: u64,
}

type MemoSlot = Arc<OnceLock<Result<Arc<Generation>, ProviderError>>>;

/// Calls the provider and ranks its samples, optionally memoizing by
/// request so that repeated contexts (across k passes) reuse samples.
pub struct Generator<'p> {
    provider: &'p dyn CompletionProvider,
    cfg: GenConfig,
    seed: Option<u64>,
    memo: Option<DashMap<MemoKey, MemoSlot>>,
    calls: AtomicU64,
}

impl<'p> Generator<'p> {
    pub fn new(provider: &'p dyn CompletionProvider, cfg: &GenConfig, seed: Option<u64>, memoize: bool) -> Self {
        Self { provider, cfg: cfg.clone(), seed, memo: memoize.then(DashMap::new), calls: AtomicU64::new(0) }
    }

    /// Number of provider `complete` calls made so far.
    pub fn provider_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn config(&self) -> &GenConfig {
        &self.cfg
    }

    fn request(&self, context: &str) -> CompletionRequest {
        let mut req =
            CompletionRequest::new(context, self.cfg.n_c, self.cfg.n_t).with_temperature(self.cfg.temperature);
        req.seed = self.seed;
        req
    }

    fn compute(&self, context: &str) -> Result<Arc<Generation>, ProviderError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.provider.complete(&self.request(context))?;
        let start = Instant::now();
        let ranked = rank_all(expand(&out.samples, self.cfg.policy));
        let rank_ms = if self.provider.wall_clock_timing() { start.elapsed().as_secs_f64() * 1000.0 } else { 0.0 };
        Ok(Arc::new(Generation { ranked, latency_ms: out.timing.wall_ms + rank_ms }))
    }

    pub fn generate(&self, context: &str) -> Result<Arc<Generation>, ProviderError> {
        let Some(memo) = &self.memo else { return self.compute(context) };
        let key = MemoKey {
            context: context.to_string(),
            seed: self.seed,
            n_samples: self.cfg.n_c,
            max_tokens: self.cfg.n_t,
            temperature: self.cfg.temperature.to_bits(),
        };
        let slot = memo.entry(key).or_default().clone();
        slot.get_or_init(|| self.compute(context)).clone()
    }
}

/// Walks one prompter turn from its first character. `k` overrides the
/// generator's configured k.
pub fn simulate_turn(instance: &PrefixInstance, generator: &Generator<'_>, mode: SuggestionMode, k: usize) -> TurnTrace {
    let turn = instance.turn_text();
    let head = instance.context_head();
    let offsets = char_offsets(&turn);
    let len = offsets.len() - 1;
    let points = if turn.is_empty() { Vec::new() } else { suggestion_points(&turn, mode) };
    let cap = generator.cfg.history_cap;

    let mut trace = TurnTrace {
        conversation_id: instance.conversation_id.clone(),
        turn_index: instance.turn_index,
        k,
        full_turn_len: len,
        steps: Vec::new(),
        accepted_chars_total: 0,
        acceptance_count: 0,
        aborted: false,
    };
    let mut context = String::with_capacity(head.len() + turn.len());
    let mut pos = points.first().copied().unwrap_or(len);
    while pos < len {
        if points.binary_search(&pos).is_err() {
            pos = next_point(&points, pos, len);
            continue;
        }
        context.clear();
        context.push_str(head);
        context.push_str(&turn[..offsets[pos]]);
        let gen = generator.generate(truncate_context(&context, cap));
        let gen = match gen {
            Ok(g) => g,
            Err(e) => {
                trace.steps.push(StepRecord {
                    position: pos,
                    prefix_len: pos,
                    shown: Vec::new(),
                    accepted: None,
                    latency_ms: 0.0,
                    candidates_total: 0,
                    failed: Some(e.to_string()),
                });
                trace.aborted = true;
                break;
            }
        };
        let shown = gen.ranked[..k.min(gen.ranked.len())].to_vec();
        let accepted = best_acceptance(&shown, &turn[offsets[pos]..]);
        let step = StepRecord {
            position: pos,
            prefix_len: pos,
            shown,
            accepted: accepted.clone(),
            latency_ms: gen.latency_ms,
            candidates_total: gen.ranked.len(),
            failed: None,
        };
        trace.steps.push(step);
        match accepted {
            Some(a) => {
                pos += a.consumed_chars;
                trace.accepted_chars_total += a.consumed_chars;
                trace.acceptance_count += 1;
            }
            None => pos = next_point(&points, pos, len),
        }
    }
    trace
}

fn next_point(points: &[usize], pos: usize, len: usize) -> usize {
    let i = points.partition_point(|&p| p <= pos);
    points.get(i).copied().unwrap_or(len)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Seed forwarded with every request.
    pub seed: Option<u64>,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub memoize: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { seed: Some(0), workers: 0, memoize: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub provider_calls: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("k list must be non-empty, ascending and distinct, got {0:?}")]
    KList(Vec<usize>),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Simulates every instance once per k. Traces come back k-major, in input
/// order within each k.
pub fn run_dataset(
    instances: &[PrefixInstance],
    provider: &dyn CompletionProvider,
    cfg: &GenConfig,
    mode: SuggestionMode,
    k_list: &[usize],
    opts: &RunOptions,
) -> Result<(Vec<TurnTrace>, RunStats), SimError> {
    cfg.validate().map_err(SimError::Config)?;
    if k_list.is_empty() || k_list.contains(&0) || k_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(SimError::KList(k_list.to_vec()));
    }
    let generator = Generator::new(provider, cfg, opts.seed, opts.memoize);
    let jobs: Vec<(usize, &PrefixInstance)> =
        k_list.iter().flat_map(|&k| instances.iter().map(move |i| (k, i))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    let traces = pool.install(|| jobs.par_iter().map(|(k, inst)| simulate_turn(inst, &generator, mode, *k)).collect());
    Ok((traces, RunStats { provider_calls: generator.provider_calls() }))
}
