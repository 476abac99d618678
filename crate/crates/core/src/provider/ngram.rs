//! Word-level interpolated n-gram language model used as the offline
//! completion baseline.
//!
//! Tokens are whitespace-separated words of serialized conversations. Each
//! message is preceded by its role tag, which is visible as history but never
//! predicted, and followed by an end-of-turn event that doubles as EOS.
//!
//! The conditional distribution mixes maximum-likelihood estimates of every
//! order whose history was observed in training:
//!
//! `P(w | h) = Σ_j λ_j P_j(w | h_j) / Σ_j λ_j`
//!
//! where the unigram component always participates and reserves
//! `unk_floor` of its mass for the unknown word.
//!
//! When the context ends inside a word, the first generated token completes
//! that word: the distribution is restricted to vocabulary words extending
//! the partial word and renormalized. If no word extends it, the partial is
//! treated as a finished word.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::ops::Range;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    stable_hash, Completion, CompletionProvider, CompletionRequest, ProviderError, ProviderTiming, SampledCompletion,
    ScoreOutput, Termination, TimingMode, Token, EOS_TEXT,
};
use crate::corpus::{Conversation, ASSISTANT_TAG, PROMPTER_TAG};

pub const EOS_WORD: &str = "</s>";
pub const UNK_WORD: &str = "<unk>";
const EOS: u32 = 0;
const UNK: u32 = 1;

pub const MAX_ORDER: usize = 5;
const FORMAT: &str = "chatac-ngram";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum NgramError {
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("order must be between 1 and {MAX_ORDER}, got {0}")]
    InvalidOrder(usize),
    #[error("invalid interpolation weights: {0}")]
    InvalidWeights(String),
    #[error("unk floor must be in [0, 1), got {0}")]
    InvalidUnkFloor(f64),
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Interpolation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    /// Weights from the highest order down to the unigram. `None` selects
    /// [`default_weights`].
    pub weights: Option<Vec<f64>>,
    /// Unigram mass reserved for unknown words.
    pub unk_floor: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { weights: None, unk_floor: 0.01 }
    }
}

/// Default interpolation weights, highest order first. Order 4 uses
/// 0.6/0.25/0.1/0.05; lower orders keep the leading entries of that list
/// renormalized, order 5 uses 0.5/0.25/0.12/0.08/0.05.
pub fn default_weights(order: usize) -> Vec<f64> {
    if order == 5 {
        return vec![0.5, 0.25, 0.12, 0.08, 0.05];
    }
    let base = [0.6, 0.25, 0.1, 0.05];
    let w = &base[..order.min(4)];
    let s: f64 = w.iter().sum();
    w.iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct NextCounts {
    total: u64,
    /// Sorted by word id.
    next: Vec<(u32, u64)>,
}

impl NextCounts {
    fn prob(&self, w: u32) -> f64 {
        match self.next.binary_search_by_key(&w, |e| e.0) {
            Ok(i) => self.next[i].1 as f64 / self.total as f64,
            Err(_) => 0.0,
        }
    }
}

#[derive(Clone, Copy)]
struct Component<'a> {
    weight: f64,
    /// `None` is the unigram component.
    table: Option<&'a NextCounts>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NgramModel {
    order: usize,
    weights: Vec<f64>,
    unk_floor: f64,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    unigram: Vec<u64>,
    events: u64,
    /// `tables[j - 2]` holds histories of length `j - 1`.
    tables: Vec<HashMap<Vec<u32>, NextCounts>>,

    uni_prob: Vec<f64>,
    /// Ids with non-zero unigram probability (the sampling support).
    support: Vec<u32>,
    support_cum: Vec<f64>,
    uni_argmax: u32,
    /// Support words other than EOS/UNK, sorted by text.
    by_word: Vec<u32>,
    by_word_cum: Vec<f64>,
}

/// Parsed view of a context: trailing word ids and a possibly unfinished
/// last word.
struct ContextState<'c> {
    hist: Vec<u32>,
    partial: Option<&'c str>,
    /// Whether the first free (unconstrained) token needs a leading space.
    space_first: bool,
}

impl NgramModel {
    pub fn train(convs: &[Conversation], order: usize, smoothing: &SmoothingConfig) -> Result<Self, NgramError> {
        if !(1..=MAX_ORDER).contains(&order) {
            return Err(NgramError::InvalidOrder(order));
        }
        let weights = resolve_weights(order, smoothing)?;
        if !(0.0..1.0).contains(&smoothing.unk_floor) {
            return Err(NgramError::InvalidUnkFloor(smoothing.unk_floor));
        }

        let mut vocab: Vec<String> = vec![EOS_WORD.into(), UNK_WORD.into()];
        let mut index: HashMap<String, u32> = HashMap::new();
        let mut intern = |w: &str, vocab: &mut Vec<String>| -> u32 {
            if w == EOS_WORD || w == UNK_WORD {
                return UNK;
            }
            if let Some(&id) = index.get(w) {
                return id;
            }
            let id = vocab.len() as u32;
            vocab.push(w.to_string());
            index.insert(w.to_string(), id);
            id
        };
        intern(PROMPTER_TAG, &mut vocab);
        intern(ASSISTANT_TAG, &mut vocab);

        let mut unigram: Vec<u64> = Vec::new();
        let mut events = 0u64;
        let mut raw: Vec<HashMap<Vec<u32>, HashMap<u32, u64>>> = vec![HashMap::new(); order.saturating_sub(1)];
        for conv in convs {
            let mut stream: Vec<u32> = Vec::new();
            for m in &conv.messages {
                stream.push(intern(m.role.tag(), &mut vocab));
                let words: Vec<u32> = m.text.split_whitespace().map(|w| intern(w, &mut vocab)).collect();
                for id in words.into_iter().chain(std::iter::once(EOS)) {
                    if unigram.len() < vocab.len() {
                        unigram.resize(vocab.len(), 0);
                    }
                    unigram[id as usize] += 1;
                    events += 1;
                    for j in 2..=order {
                        if stream.len() >= j - 1 {
                            let h = stream[stream.len() - (j - 1)..].to_vec();
                            *raw[j - 2].entry(h).or_default().entry(id).or_default() += 1;
                        }
                    }
                    stream.push(id);
                }
            }
        }
        if events == 0 {
            return Err(NgramError::EmptyCorpus);
        }
        unigram.resize(vocab.len(), 0);

        let tables = raw
            .into_iter()
            .map(|t| {
                t.into_iter()
                    .map(|(h, next)| {
                        let mut next: Vec<(u32, u64)> = next.into_iter().collect();
                        next.sort_unstable();
                        let total = next.iter().map(|e| e.1).sum();
                        (h, NextCounts { total, next })
                    })
                    .collect()
            })
            .collect();

        let index = vocab.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self::assemble(order, weights, smoothing.unk_floor, vocab, index, unigram, events, tables))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        order: usize,
        weights: Vec<f64>,
        unk_floor: f64,
        vocab: Vec<String>,
        index: HashMap<String, u32>,
        unigram: Vec<u64>,
        events: u64,
        tables: Vec<HashMap<Vec<u32>, NextCounts>>,
    ) -> Self {
        let mut uni_prob: Vec<f64> =
            unigram.iter().map(|&c| (1.0 - unk_floor) * c as f64 / events as f64).collect();
        uni_prob[UNK as usize] = unk_floor;

        let support: Vec<u32> = (0..vocab.len() as u32).filter(|&i| uni_prob[i as usize] > 0.0).collect();
        let support_cum = cumulative(support.iter().map(|&i| uni_prob[i as usize]));
        let uni_argmax = argmax_by_prob(support.iter().copied(), |i| uni_prob[i as usize]).unwrap_or(EOS);

        let mut by_word: Vec<u32> = support.iter().copied().filter(|&i| i > UNK).collect();
        by_word.sort_by(|a, b| vocab[*a as usize].cmp(&vocab[*b as usize]));
        let by_word_cum = cumulative(by_word.iter().map(|&i| uni_prob[i as usize]));

        Self {
            order,
            weights,
            unk_floor,
            vocab,
            index,
            unigram,
            events,
            tables,
            uni_prob,
            support,
            support_cum,
            uni_argmax,
            by_word,
            by_word_cum,
        }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Id used for `w` in histories; unseen and reserved words map to UNK.
    fn lookup(&self, w: &str) -> u32 {
        self.index.get(w).copied().unwrap_or(UNK)
    }

    /// Id of `w` as a predicted event, and whether it was scored as unknown.
    fn predicted_id(&self, w: &str) -> (u32, bool) {
        match self.index.get(w) {
            Some(&id) if self.uni_prob[id as usize] > 0.0 => (id, false),
            _ => (UNK, true),
        }
    }

    fn components(&self, hist: &[u32]) -> Vec<Component<'_>> {
        let mut out = Vec::with_capacity(self.order);
        for j in (2..=self.order).rev() {
            if hist.len() >= j - 1 {
                if let Some(nc) = self.tables[j - 2].get(&hist[hist.len() - (j - 1)..]) {
                    out.push(Component { weight: self.weights[self.order - j], table: Some(nc) });
                }
            }
        }
        out.push(Component { weight: self.weights[self.order - 1], table: None });
        let total: f64 = out.iter().map(|c| c.weight).sum();
        for c in &mut out {
            c.weight /= total;
        }
        out
    }

    fn component_prob(&self, c: &Component<'_>, w: u32) -> f64 {
        match c.table {
            Some(nc) => nc.prob(w),
            None => self.uni_prob[w as usize],
        }
    }

    fn mixture_prob(&self, comps: &[Component<'_>], w: u32) -> f64 {
        comps.iter().map(|c| c.weight * self.component_prob(c, w)).sum()
    }

    /// Interpolated conditional probability of word id `w` after `hist`.
    fn prob_id(&self, hist: &[u32], w: u32) -> f64 {
        self.mixture_prob(&self.components(hist), w)
    }

    /// `P(word | history words)`, with unknown words scored as UNK.
    pub fn prob(&self, history: &[&str], word: &str) -> f64 {
        let hist: Vec<u32> = history.iter().map(|w| self.lookup(w)).collect();
        let id = if word == EOS_WORD { EOS } else { self.predicted_id(word).0 };
        self.prob_id(&hist, id)
    }

    /// The full next-word distribution after `history` over the sampling
    /// support, EOS reported as `</s>` and unknown as `<unk>`.
    pub fn distribution(&self, history: &[&str]) -> Vec<(String, f64)> {
        let hist: Vec<u32> = history.iter().map(|w| self.lookup(w)).collect();
        let comps = self.components(&hist);
        self.support.iter().map(|&w| (self.vocab[w as usize].clone(), self.mixture_prob(&comps, w))).collect()
    }

    /// Every observed history of every order, as words. Used to check
    /// normalization.
    pub fn observed_histories(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new()];
        for t in &self.tables {
            for h in t.keys() {
                out.push(h.iter().map(|&i| self.vocab[i as usize].clone()).collect());
            }
        }
        out.sort();
        out
    }

    fn parse_context<'c>(&self, context: &'c str) -> ContextState<'c> {
        let mut words: Vec<&str> = context.split_whitespace().collect();
        let ends_open = context.chars().last().is_some_and(|c| !c.is_whitespace());
        let partial = if ends_open { words.pop() } else { None };
        let keep = self.order.saturating_sub(1);
        let start = words.len().saturating_sub(keep);
        let hist = words[start..].iter().map(|w| self.lookup(w)).collect();
        ContextState { hist, partial, space_first: false }
    }

    /// Indices into `by_word` of words strictly extending or equal to `partial`.
    fn extension_range(&self, partial: &str) -> Range<usize> {
        let word = |i: &u32| self.vocab[*i as usize].as_str();
        let lo = self.by_word.partition_point(|i| word(i) < partial);
        let hi = self.by_word.partition_point(|i| word(i) < partial || word(i).starts_with(partial));
        lo..hi
    }

    fn extends(&self, w: u32, partial: &str) -> bool {
        w > UNK && self.vocab[w as usize].starts_with(partial)
    }

    /// Per-component mass of the words extending `partial`, and the total.
    fn constrained_mass(&self, comps: &[Component<'_>], range: &Range<usize>, partial: &str) -> (Vec<f64>, f64) {
        let masses: Vec<f64> = comps
            .iter()
            .map(|c| match c.table {
                None => self.by_word_cum[range.end] - self.by_word_cum[range.start],
                Some(nc) => {
                    let hit: u64 = nc.next.iter().filter(|(w, _)| self.extends(*w, partial)).map(|e| e.1).sum();
                    hit as f64 / nc.total as f64
                }
            })
            .collect();
        let z = comps.iter().zip(&masses).map(|(c, m)| c.weight * m).sum();
        (masses, z)
    }

    /// Draws the next word. With `partial`, only words extending it are
    /// eligible and the returned log-probability is renormalized over them;
    /// returns `None` when nothing extends it.
    fn draw<R: Rng + ?Sized>(
        &self,
        hist: &[u32],
        partial: Option<&str>,
        temperature: f64,
        rng: &mut R,
    ) -> Option<(u32, f64)> {
        let comps = self.components(hist);
        match partial {
            None => {
                let w = if temperature == 0.0 {
                    self.argmax(&comps, None)
                } else if temperature == 1.0 {
                    self.sample_mixture(&comps, None, rng)
                } else {
                    let cands: Vec<(u32, f64)> =
                        self.support.iter().map(|&w| (w, self.mixture_prob(&comps, w))).collect();
                    sample_tempered(&cands, temperature, rng)
                };
                Some((w, self.mixture_prob(&comps, w).ln()))
            }
            Some(p) => {
                let range = self.extension_range(p);
                if range.is_empty() {
                    return None;
                }
                let (masses, z) = self.constrained_mass(&comps, &range, p);
                // Also rejects NaN.
                if z.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                    return None;
                }
                let w = if temperature == 0.0 {
                    self.argmax(&comps, Some((p, &range)))
                } else if temperature == 1.0 {
                    self.sample_mixture(&comps, Some((p, &range, &masses, z)), rng)
                } else {
                    let cands: Vec<(u32, f64)> =
                        self.by_word[range].iter().map(|&w| (w, self.mixture_prob(&comps, w))).collect();
                    sample_tempered(&cands, temperature, rng)
                };
                Some((w, (self.mixture_prob(&comps, w) / z).ln()))
            }
        }
    }

    fn argmax(&self, comps: &[Component<'_>], constraint: Option<(&str, &Range<usize>)>) -> u32 {
        let mut cands: Vec<u32> = Vec::new();
        for c in comps {
            if let Some(nc) = c.table {
                cands.extend(
                    nc.next.iter().map(|e| e.0).filter(|&w| constraint.is_none_or(|(p, _)| self.extends(w, p))),
                );
            }
        }
        match constraint {
            None => cands.push(self.uni_argmax),
            Some((_, range)) => {
                let best = argmax_by_prob(self.by_word[range.clone()].iter().copied(), |w| self.uni_prob[w as usize]);
                cands.extend(best);
            }
        }
        argmax_by_prob(cands.into_iter(), |w| self.mixture_prob(comps, w)).expect("non-empty candidates")
    }

    /// Exact draw from the interpolated mixture: pick a component by weight,
    /// then a word within it.
    fn sample_mixture<R: Rng + ?Sized>(
        &self,
        comps: &[Component<'_>],
        constraint: Option<(&str, &Range<usize>, &[f64], f64)>,
        rng: &mut R,
    ) -> u32 {
        let shares: Vec<f64> = match constraint {
            None => comps.iter().map(|c| c.weight).collect(),
            Some((_, _, masses, _)) => comps.iter().zip(masses).map(|(c, m)| c.weight * m).collect(),
        };
        let total: f64 = shares.iter().sum();
        let mut r = rng.random::<f64>() * total;
        let mut chosen = comps.len() - 1;
        for (i, s) in shares.iter().enumerate() {
            if r < *s {
                chosen = i;
                break;
            }
            r -= s;
        }
        // A zero-share component can only be reached through rounding.
        while shares[chosen] <= 0.0 && chosen > 0 {
            chosen -= 1;
        }
        match (comps[chosen].table, constraint) {
            (None, None) => pick_cumulative(&self.support, &self.support_cum, 0..self.support.len(), rng),
            (None, Some((_, range, _, _))) => pick_cumulative(&self.by_word, &self.by_word_cum, range.clone(), rng),
            (Some(nc), c) => {
                let ok = |w: u32| c.is_none_or(|(p, ..)| self.extends(w, p));
                let total: u64 = nc.next.iter().filter(|e| ok(e.0)).map(|e| e.1).sum();
                let mut r = rng.random_range(0..total);
                for &(w, n) in nc.next.iter().filter(|e| ok(e.0)) {
                    if r < n {
                        return w;
                    }
                    r -= n;
                }
                unreachable!("count draw exceeded total")
            }
        }
    }

    fn token_text(&self, w: u32, space: bool) -> String {
        let word = &self.vocab[w as usize];
        if space {
            format!(" {word}")
        } else {
            word.clone()
        }
    }

    fn push_hist(&self, hist: &mut Vec<u32>, w: u32) {
        hist.push(w);
        let keep = self.order.saturating_sub(1);
        if hist.len() > keep {
            hist.drain(..hist.len() - keep);
        }
    }

    /// Resolves a context ending in a partial word that nothing extends by
    /// treating the partial as a finished word.
    fn settle<'c>(&self, mut state: ContextState<'c>) -> ContextState<'c> {
        if let Some(p) = state.partial {
            if self.extension_range(p).is_empty() {
                let id = self.lookup(p);
                self.push_hist(&mut state.hist, id);
                state.partial = None;
                state.space_first = true;
            }
        }
        state
    }

    /// Samples one continuation of `context`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        context: &str,
        max_tokens: usize,
        temperature: f64,
        rng: &mut R,
    ) -> SampledCompletion {
        let mut state = self.settle(self.parse_context(context));
        let mut tokens = Vec::with_capacity(max_tokens);
        while tokens.len() < max_tokens {
            if let Some(p) = state.partial.take() {
                match self.draw(&state.hist, Some(p), temperature, rng) {
                    Some((w, lp)) => {
                        tokens.push(Token::new(&self.vocab[w as usize][p.len()..], lp));
                        self.push_hist(&mut state.hist, w);
                        continue;
                    }
                    None => {
                        // Mass vanished through rounding; fall back to a finished word.
                        let id = self.lookup(p);
                        self.push_hist(&mut state.hist, id);
                        state.space_first = true;
                    }
                }
            }
            let (w, lp) = self.draw(&state.hist, None, temperature, rng).expect("unconstrained draw");
            if w == EOS {
                tokens.push(Token::eos(lp));
                return SampledCompletion { tokens, terminated_by: Termination::Eos };
            }
            let space = !tokens.is_empty() || state.space_first;
            tokens.push(Token::new(self.token_text(w, space), lp));
            self.push_hist(&mut state.hist, w);
        }
        SampledCompletion { tokens, terminated_by: Termination::TokenLimit }
    }

    /// Log-probabilities of a forced continuation; mirrors [`Self::sample`]
    /// so sampled tokens score to exactly the recorded values.
    pub fn score_tokens(&self, context: &str, forced: &[String]) -> ScoreOutput {
        let mut state = self.settle(self.parse_context(context));
        let mut logprobs = Vec::with_capacity(forced.len());
        let mut unk = Vec::with_capacity(forced.len());
        for (i, tok) in forced.iter().enumerate() {
            if i == 0 {
                if let Some(p) = state.partial.take() {
                    let word = format!("{p}{tok}");
                    let comps = self.components(&state.hist);
                    let range = self.extension_range(p);
                    let (_, z) = self.constrained_mass(&comps, &range, p);
                    match self.index.get(&word) {
                        Some(&w) if !tok.starts_with(char::is_whitespace) && self.extends(w, p) && z > 0.0 => {
                            logprobs.push((self.mixture_prob(&comps, w) / z).ln());
                            unk.push(false);
                            self.push_hist(&mut state.hist, w);
                            continue;
                        }
                        _ => {
                            let id = self.lookup(p);
                            self.push_hist(&mut state.hist, id);
                        }
                    }
                }
            }
            let (w, flagged) = if tok == EOS_TEXT {
                (EOS, false)
            } else {
                let word = tok.trim_start();
                if word.contains(char::is_whitespace) {
                    (UNK, true)
                } else {
                    self.predicted_id(word)
                }
            };
            logprobs.push(self.prob_id(&state.hist, w).ln());
            unk.push(flagged);
            self.push_hist(&mut state.hist, w);
        }
        ScoreOutput { logprobs, unk }
    }

    // -- persistence ----------------------------------------------------

    /// Writes the model as JSONL: a header line, one line per vocabulary
    /// entry in id order, then one line per observed history sorted by
    /// (length, ids).
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), NgramError> {
        let header = ModelHeader {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            order: self.order,
            weights: self.weights.clone(),
            unk_floor: self.unk_floor,
            vocab_size: self.vocab.len(),
            events: self.events,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for (word, &count) in self.vocab.iter().zip(&self.unigram) {
            serde_json::to_writer(&mut w, &VocabLine { w: word.clone(), c: count })?;
            w.write_all(b"\n")?;
        }
        for table in &self.tables {
            let mut keys: Vec<&Vec<u32>> = table.keys().collect();
            keys.sort_unstable();
            for h in keys {
                let nc = &table[h];
                serde_json::to_writer(&mut w, &TableLine { h: h.clone(), n: nc.next.clone() })?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self, NgramError> {
        let mut lines = reader.lines().enumerate();
        let bad = |line: usize, message: String| NgramError::Format { line: line + 1, message };
        let (_, first) = lines.next().ok_or_else(|| bad(0, "missing header".into()))?;
        let header: ModelHeader = serde_json::from_str(&first?).map_err(|e| bad(0, e.to_string()))?;
        if header.format != FORMAT || header.version != FORMAT_VERSION {
            return Err(bad(0, format!("unsupported format {} v{}", header.format, header.version)));
        }
        if !(1..=MAX_ORDER).contains(&header.order) || header.weights.len() != header.order {
            return Err(bad(0, "order and weights disagree".into()));
        }
        if header.vocab_size < 2 {
            return Err(bad(0, "vocabulary too small".into()));
        }
        let mut vocab = Vec::with_capacity(header.vocab_size);
        let mut unigram = Vec::with_capacity(header.vocab_size);
        for _ in 0..header.vocab_size {
            let (i, line) = lines.next().ok_or_else(|| bad(usize::MAX - 1, "truncated vocabulary".into()))?;
            let v: VocabLine = serde_json::from_str(&line?).map_err(|e| bad(i, e.to_string()))?;
            vocab.push(v.w);
            unigram.push(v.c);
        }
        if vocab[0] != EOS_WORD || vocab[1] != UNK_WORD {
            return Err(bad(1, "reserved tokens missing".into()));
        }
        let mut tables: Vec<HashMap<Vec<u32>, NextCounts>> = vec![HashMap::new(); header.order - 1];
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: TableLine = serde_json::from_str(&line).map_err(|e| bad(i, e.to_string()))?;
            if t.h.is_empty() || t.h.len() >= header.order {
                return Err(bad(i, format!("history of length {} in an order-{} model", t.h.len(), header.order)));
            }
            if t.h.iter().chain(t.n.iter().map(|e| &e.0)).any(|&id| id as usize >= vocab.len()) {
                return Err(bad(i, "word id out of range".into()));
            }
            let total = t.n.iter().map(|e| e.1).sum();
            tables[t.h.len() - 1].insert(t.h, NextCounts { total, next: t.n });
        }
        let events = unigram.iter().sum::<u64>();
        if events != header.events || events == 0 {
            return Err(bad(0, "event count mismatch".into()));
        }
        let index = vocab.iter().enumerate().skip(2).map(|(i, w)| (w.clone(), i as u32)).collect();
        Ok(Self::assemble(header.order, header.weights, header.unk_floor, vocab, index, unigram, events, tables))
    }
}

fn resolve_weights(order: usize, smoothing: &SmoothingConfig) -> Result<Vec<f64>, NgramError> {
    let w = smoothing.weights.clone().unwrap_or_else(|| default_weights(order));
    if w.len() != order {
        return Err(NgramError::InvalidWeights(format!("expected {order} weights, got {}", w.len())));
    }
    if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(NgramError::InvalidWeights("weights must be positive and finite".into()));
    }
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / s).collect())
}

fn cumulative(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = vec![0.0];
    for v in values {
        acc += v;
        out.push(acc);
    }
    out
}

/// Highest probability wins; ties go to the smaller id.
fn argmax_by_prob(ids: impl Iterator<Item = u32>, prob: impl Fn(u32) -> f64) -> Option<u32> {
    let mut best: Option<(u32, f64)> = None;
    for w in ids {
        let p = prob(w);
        best = match best {
            Some((bw, bp)) if bp > p || (bp == p && bw <= w) => Some((bw, bp)),
            _ => Some((w, p)),
        };
    }
    best.map(|b| b.0)
}

fn pick_cumulative<R: Rng + ?Sized>(ids: &[u32], cum: &[f64], range: Range<usize>, rng: &mut R) -> u32 {
    let (lo, hi) = (range.start, range.end);
    let target = cum[lo] + rng.random::<f64>() * (cum[hi] - cum[lo]);
    let idx = lo + cum[lo + 1..=hi].partition_point(|&c| c <= target);
    ids[idx.min(hi - 1)]
}

fn sample_tempered<R: Rng + ?Sized>(cands: &[(u32, f64)], temperature: f64, rng: &mut R) -> u32 {
    let max_lp = cands.iter().map(|c| c.1.ln()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cands.iter().map(|c| ((c.1.ln() - max_lp) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (c, w) in cands.iter().zip(&weights) {
        if r < *w {
            return c.0;
        }
        r -= w;
    }
    cands.iter().zip(&weights).rev().find(|(_, w)| **w > 0.0).map(|(c, _)| c.0).unwrap_or(cands[0].0)
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    version: u32,
    order: usize,
    weights: Vec<f64>,
    unk_floor: f64,
    vocab_size: usize,
    events: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabLine {
    w: String,
    c: u64,
}

#[derive(Serialize, Deserialize)]
struct TableLine {
    h: Vec<u32>,
    n: Vec<(u32, u64)>,
}

/// The n-gram model behind the provider contract.
#[derive(Debug, Clone)]
pub struct NgramProvider {
    model: Arc<NgramModel>,
    timing: TimingMode,
}

impl NgramProvider {
    pub fn new(model: Arc<NgramModel>) -> Self {
        Self { model, timing: TimingMode::Wall }
    }

    pub fn with_timing(mut self, timing: TimingMode) -> Self {
        self.timing = timing;
        self
    }

    pub fn model(&self) -> &NgramModel {
        &self.model
    }

    /// RNG for one request. Derived from the seed and the context so that
    /// results do not depend on request order or worker scheduling.
    fn rng_for(req: &CompletionRequest) -> ChaCha8Rng {
        match req.seed {
            Some(seed) => {
                let mix = seed ^ stable_hash(req.context_text.as_bytes()).rotate_left(17);
                ChaCha8Rng::seed_from_u64(mix)
            }
            None => ChaCha8Rng::seed_from_u64(rand::rng().next_u64()),
        }
    }
}

impl CompletionProvider for NgramProvider {
    fn name(&self) -> String {
        format!("ngram-{}", self.model.order)
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        req.validate()?;
        let start = Instant::now();
        let mut rng = Self::rng_for(req);
        let samples: Vec<SampledCompletion> = (0..req.n_samples)
            .map(|_| self.model.sample(&req.context_text, req.max_tokens, req.temperature, &mut rng))
            .collect();
        let measured = start.elapsed().as_secs_f64() * 1000.0;
        let generated = samples.iter().map(|s| s.tokens.len()).sum();
        let wall_ms = self.timing.cost(measured, req.context_text.chars().count(), generated);
        Ok(Completion { samples, timing: ProviderTiming { wall_ms } })
    }

    fn score(&self, context: &str, forced_tokens: &[String]) -> Result<ScoreOutput, ProviderError> {
        if forced_tokens.is_empty() {
            return Err(ProviderError::EmptyForcedTokens);
        }
        Ok(self.model.score_tokens(context, forced_tokens))
    }

    fn wall_clock_timing(&self) -> bool {
        self.timing.is_wall()
    }
}
