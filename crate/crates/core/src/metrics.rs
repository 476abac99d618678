//! Scores and reports: saved@k, acceptance rate, latency statistics,
//! accepted-length histograms, and the hyper-parameter/latency-budget sweep.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::candgen::GenConfig;
use crate::corpus::{ContextCap, PrefixInstance};
use crate::provider::{CompletionProvider, TimingMode};
use crate::simulator::{best_acceptance, run_dataset, RunOptions, SimError, SuggestionMode, TurnTrace};
use crate::text::word_count;

pub const REPORT_SCHEMA: &str = "chatac.report";
pub const REPORT_VERSION: u32 = 1;

/// Mean time between typed words, drawn as a reference line in budget
/// tables.
pub const INTER_WORD_REFERENCE_MS: f64 = 718.0;

/// k used for every sweep grid point.
pub const SWEEP_K: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no steps recorded")]
    NoSteps,
    #[error("no scorable turns: {excluded} too short, {failed} failed")]
    NoTurns { excluded: usize, failed: usize },
    #[error("empty sweep grid")]
    EmptyGrid,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurnScore {
    pub saved: f64,
    pub steps: usize,
    pub acceptances: usize,
}

/// `(accepted chars - acceptances) / (turn length - 1)`. Turns shorter than
/// two characters have no score.
pub fn saved_at_k(trace: &TurnTrace) -> Option<TurnScore> {
    if trace.full_turn_len < 2 {
        return None;
    }
    let saved =
        (trace.accepted_chars_total - trace.acceptance_count) as f64 / (trace.full_turn_len - 1) as f64;
    Some(TurnScore { saved, steps: trace.steps.len(), acceptances: trace.acceptance_count })
}

/// Accepted steps over all steps, pooled across traces.
pub fn acceptance_rate<'a>(traces: impl IntoIterator<Item = &'a TurnTrace>) -> Result<f64, MetricsError> {
    let (mut steps, mut accepted) = (0usize, 0usize);
    for t in traces {
        steps += t.steps.len();
        accepted += t.steps.iter().filter(|s| s.accepted.is_some()).count();
    }
    if steps == 0 {
        return Err(MetricsError::NoSteps);
    }
    Ok(accepted as f64 / steps as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p90_ms: f64,
}

/// Nearest-rank percentile: the value at 1-based index `ceil(q * N)` of the
/// sorted sample, with `q = num / den`.
pub fn nearest_rank(sorted: &[f64], num: usize, den: usize) -> f64 {
    let n = sorted.len();
    let idx = (num * n).div_ceil(den).max(1);
    sorted[idx - 1]
}

pub fn latency_of(values: &[f64]) -> Option<LatencyStats> {
    if values.is_empty() {
        return None;
    }
    let mean_ms = values.iter().sum::<f64>() / values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(LatencyStats { mean_ms, p90_ms: nearest_rank(&sorted, 9, 10) })
}

/// Mean and p90 over per-step latencies.
pub fn latency_stats<'a>(traces: impl IntoIterator<Item = &'a TurnTrace>) -> Option<LatencyStats> {
    let values: Vec<f64> = traces.into_iter().flat_map(|t| t.steps.iter().map(|s| s.latency_ms)).collect();
    latency_of(&values)
}

/// Word count of accepted text → number of acceptances.
pub fn accepted_length_hist<'a>(traces: impl IntoIterator<Item = &'a TurnTrace>) -> BTreeMap<usize, u64> {
    let mut hist = BTreeMap::new();
    for t in traces {
        for a in t.steps.iter().filter_map(|s| s.accepted.as_ref()) {
            *hist.entry(word_count(&a.text)).or_insert(0) += 1;
        }
    }
    hist
}

/// Everything about a run that its report needs, recorded in the step log
/// header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub dataset: String,
    pub provider: String,
    pub gen: GenConfig,
    pub mode: SuggestionMode,
    pub k_list: Vec<usize>,
    pub seed: Option<u64>,
    pub timing: TimingMode,
    /// Free-form echo of the configuration that produced the run.
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    /// Macro-average over scored turns.
    pub saved_at_k: f64,
    /// Micro-average over steps of scored turns.
    pub acc_rate_at_k: f64,
    pub latency_mean_ms: f64,
    pub latency_p90_ms: f64,
    pub accepted_length_hist: BTreeMap<usize, u64>,
    pub turns: usize,
    pub steps: usize,
    pub acceptances: usize,
    /// Turns shorter than two characters.
    pub excluded_turns: usize,
    /// Turns aborted by a provider error.
    pub failed_turns: usize,
}

/// Aggregates traces sharing one configuration and k.
pub fn aggregate<'a>(traces: impl IntoIterator<Item = &'a TurnTrace>, k: usize) -> Result<EvalReport, MetricsError> {
    let mut scored: Vec<&TurnTrace> = Vec::new();
    let mut saved_sum = 0.0;
    let (mut excluded, mut failed) = (0, 0);
    for t in traces {
        if t.aborted {
            failed += 1;
            continue;
        }
        match saved_at_k(t) {
            Some(s) => {
                saved_sum += s.saved;
                scored.push(t);
            }
            None => excluded += 1,
        }
    }
    if scored.is_empty() {
        return Err(MetricsError::NoTurns { excluded, failed });
    }
    let latency = latency_stats(scored.iter().copied()).ok_or(MetricsError::NoSteps)?;
    Ok(EvalReport {
        k,
        saved_at_k: saved_sum / scored.len() as f64,
        acc_rate_at_k: acceptance_rate(scored.iter().copied())?,
        latency_mean_ms: latency.mean_ms,
        latency_p90_ms: latency.p90_ms,
        accepted_length_hist: accepted_length_hist(scored.iter().copied()),
        turns: scored.len(),
        steps: scored.iter().map(|t| t.steps.len()).sum(),
        acceptances: scored.iter().map(|t| t.acceptance_count).sum(),
        excluded_turns: excluded,
        failed_turns: failed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: String,
    pub version: u32,
    pub meta: RunMeta,
    /// One report per k, in `meta.k_list` order.
    pub reports: Vec<EvalReport>,
}

pub fn build_report(meta: &RunMeta, traces: &[TurnTrace]) -> Result<RunReport, MetricsError> {
    let reports = meta
        .k_list
        .iter()
        .map(|&k| aggregate(traces.iter().filter(|t| t.k == k), k))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RunReport { schema: REPORT_SCHEMA.into(), version: REPORT_VERSION, meta: meta.clone(), reports })
}

impl RunReport {
    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonotonicityCheck {
    pub compared: usize,
    pub violations: usize,
}

/// Compares acceptances at steps that both a small-k and a large-k pass
/// visited with the same ranked list (the small list is a prefix of the
/// large one). The longest-match rule means the larger list can only
/// consume as much or more.
pub fn k_monotonicity(traces: &[TurnTrace], k_small: usize, k_large: usize) -> MonotonicityCheck {
    let mut small: HashMap<(&str, usize, usize), (&[crate::candgen::Candidate], usize)> = HashMap::new();
    for t in traces.iter().filter(|t| t.k == k_small) {
        for s in &t.steps {
            let consumed = s.accepted.as_ref().map_or(0, |a| a.consumed_chars);
            small.insert((t.conversation_id.as_str(), t.turn_index, s.position), (&s.shown, consumed));
        }
    }
    let mut out = MonotonicityCheck::default();
    for t in traces.iter().filter(|t| t.k == k_large) {
        for s in &t.steps {
            let Some((shown, consumed)) = small.get(&(t.conversation_id.as_str(), t.turn_index, s.position)) else {
                continue;
            };
            if s.shown.len() < shown.len() || s.shown[..shown.len()] != **shown {
                continue;
            }
            out.compared += 1;
            let large = s.accepted.as_ref().map_or(0, |a| a.consumed_chars);
            if large < *consumed {
                out.violations += 1;
            }
        }
    }
    out
}

/// Re-decides every recorded step under its top-`k_small` and
/// top-`k_large` prefixes against the ground truth and counts steps where
/// the larger list consumed less.
pub fn k_monotonicity_recomputed<'a>(
    traces: &[TurnTrace],
    instances: impl IntoIterator<Item = &'a PrefixInstance>,
    k_small: usize,
    k_large: usize,
) -> MonotonicityCheck {
    let turns: HashMap<(&str, usize), String> =
        instances.into_iter().map(|i| ((i.conversation_id.as_str(), i.turn_index), i.turn_text())).collect();
    let mut out = MonotonicityCheck::default();
    for t in traces {
        let Some(turn) = turns.get(&(t.conversation_id.as_str(), t.turn_index)) else { continue };
        let offsets = crate::text::char_offsets(turn);
        for s in &t.steps {
            let gt = &turn[offsets[s.position]..];
            let pick = |k: usize| best_acceptance(&s.shown[..k.min(s.shown.len())], gt).map_or(0, |a| a.consumed_chars);
            out.compared += 1;
            if pick(k_large) < pick(k_small) {
                out.violations += 1;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n_c: Vec<usize>,
    pub n_t: Vec<usize>,
    pub history_caps: Vec<ContextCap>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            n_c: vec![3, 4, 5],
            n_t: vec![3, 5, 10, 20],
            history_caps: vec![ContextCap::Chars(50), ContextCap::Chars(250), ContextCap::Chars(1000), ContextCap::Full],
        }
    }
}

impl SweepGrid {
    /// Grid points in (n_c, n_t, cap) lexicographic order.
    pub fn points(&self) -> Vec<(usize, usize, ContextCap)> {
        let mut out = Vec::with_capacity(self.n_c.len() * self.n_t.len() * self.history_caps.len());
        for &c in &self.n_c {
            for &t in &self.n_t {
                for &h in &self.history_caps {
                    out.push((c, t, h));
                }
            }
        }
        out
    }
}

/// A latency budget in milliseconds, or no budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    Ms(f64),
    Unbounded,
}

impl Budget {
    pub fn admits(&self, p90_ms: f64) -> bool {
        match *self {
            Budget::Ms(b) => p90_ms <= b,
            Budget::Unbounded => true,
        }
    }

    pub fn defaults() -> Vec<Budget> {
        let mut v: Vec<Budget> = [150.0, 300.0, 450.0, 600.0, 750.0].into_iter().map(Budget::Ms).collect();
        v.push(Budget::Unbounded);
        v
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Ms(b) => write!(f, "{b}"),
            Budget::Unbounded => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity" | "none" | "unbounded") {
            return Ok(Budget::Unbounded);
        }
        match t.parse::<f64>() {
            Ok(b) if b >= 0.0 && b.is_finite() => Ok(Budget::Ms(b)),
            _ => Err(format!("invalid budget {s:?}: expected milliseconds or \"inf\"")),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Budget::Ms(b) => s.serialize_f64(*b),
            Budget::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Budget::Ms(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub n_c: usize,
    pub n_t: usize,
    pub history_cap: ContextCap,
    pub saved_at_100: f64,
    pub acc_rate_at_100: f64,
    pub latency_mean_ms: f64,
    pub latency_p90_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetCell {
    pub budget: Budget,
    /// `None` when no configuration fits the budget.
    pub row: Option<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Sorted by saved@100, best first; ties keep grid order.
    pub rows: Vec<SweepRow>,
    pub budget_table: Vec<BudgetCell>,
}

/// For each budget, the row with the highest saved@100 whose p90 fits;
/// ties go to the lower p90, then to the earlier row.
pub fn select_budgets(rows: &[SweepRow], budgets: &[Budget]) -> Vec<BudgetCell> {
    budgets
        .iter()
        .map(|&budget| {
            let mut best: Option<&SweepRow> = None;
            for r in rows.iter().filter(|r| budget.admits(r.latency_p90_ms)) {
                let better = match best {
                    None => true,
                    Some(b) => {
                        r.saved_at_100 > b.saved_at_100
                            || (r.saved_at_100 == b.saved_at_100 && r.latency_p90_ms < b.latency_p90_ms)
                    }
                };
                if better {
                    best = Some(r);
                }
            }
            BudgetCell { budget, row: best.cloned() }
        })
        .collect()
}

/// Evaluates every grid point at k = 100 and builds the budget table.
/// `progress` sees each finished row with its grid index.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    instances: &[PrefixInstance],
    provider: &dyn CompletionProvider,
    base: &GenConfig,
    mode: SuggestionMode,
    grid: &SweepGrid,
    budgets: &[Budget],
    opts: &RunOptions,
    mut progress: impl FnMut(usize, &SweepRow),
) -> Result<SweepResult, MetricsError> {
    let points = grid.points();
    if points.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    let mut rows = Vec::with_capacity(points.len());
    for (i, (n_c, n_t, cap)) in points.into_iter().enumerate() {
        let cfg = GenConfig { n_c, n_t, k: SWEEP_K, history_cap: cap, ..base.clone() };
        let (traces, _) = run_dataset(instances, provider, &cfg, mode, &[SWEEP_K], opts)?;
        let r = aggregate(&traces, SWEEP_K)?;
        let row = SweepRow {
            n_c,
            n_t,
            history_cap: cap,
            saved_at_100: r.saved_at_k,
            acc_rate_at_100: r.acc_rate_at_k,
            latency_mean_ms: r.latency_mean_ms,
            latency_p90_ms: r.latency_p90_ms,
        };
        progress(i, &row);
        rows.push(row);
    }
    let budget_table = select_budgets(&rows, budgets);
    rows.sort_by(|a, b| b.saved_at_100.total_cmp(&a.saved_at_100));
    Ok(SweepResult { rows, budget_table })
}

// ---------------------------------------------------------------------------
// CSV and table output

pub fn write_k_curve_csv<W: Write>(w: W, report: &RunReport) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "k",
        "saved_at_k",
        "acc_rate_at_k",
        "latency_mean_ms",
        "latency_p90_ms",
        "turns",
        "steps",
        "acceptances",
        "excluded_turns",
        "failed_turns",
    ])?;
    for r in &report.reports {
        out.write_record([
            r.k.to_string(),
            r.saved_at_k.to_string(),
            r.acc_rate_at_k.to_string(),
            r.latency_mean_ms.to_string(),
            r.latency_p90_ms.to_string(),
            r.turns.to_string(),
            r.steps.to_string(),
            r.acceptances.to_string(),
            r.excluded_turns.to_string(),
            r.failed_turns.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_hist_csv<W: Write>(w: W, report: &RunReport) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["k", "words", "frequency"])?;
    for r in &report.reports {
        for (words, freq) in &r.accepted_length_hist {
            out.write_record([r.k.to_string(), words.to_string(), freq.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["n_c", "n_t", "history_cap", "saved_at_100", "acc_rate_at_100", "latency_mean_ms", "latency_p90_ms"])?;
    for r in rows {
        out.write_record([
            r.n_c.to_string(),
            r.n_t.to_string(),
            r.history_cap.to_string(),
            r.saved_at_100.to_string(),
            r.acc_rate_at_100.to_string(),
            r.latency_mean_ms.to_string(),
            r.latency_p90_ms.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_budget_csv<W: Write>(w: W, cells: &[BudgetCell]) -> Result<(), MetricsError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["budget_ms", "n_c", "n_t", "history_cap", "saved_at_100", "latency_p90_ms"])?;
    for c in cells {
        let mut rec = vec![c.budget.to_string()];
        match &c.row {
            Some(r) => rec.extend([
                r.n_c.to_string(),
                r.n_t.to_string(),
                r.history_cap.to_string(),
                r.saved_at_100.to_string(),
                r.latency_p90_ms.to_string(),
            ]),
            None => rec.extend(std::iter::repeat_n(String::new(), 5)),
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Markdown budget table with saved@100 in percent, rounded for display.
pub fn render_budget_table(cells: &[BudgetCell]) -> String {
    let mut s = String::from("| budget (ms) | n_c | n_t | len(C) | saved@100 | p90 (ms) |\n|---|---|---|---|---|---|\n");
    for c in cells {
        let budget = match c.budget {
            Budget::Ms(b) => format!("<{b}"),
            Budget::Unbounded => "∞".into(),
        };
        match &c.row {
            Some(r) => s.push_str(&format!(
                "| {budget} | {} | {} | {} | {:.2} | {:.0} |\n",
                r.n_c,
                r.n_t,
                r.history_cap,
                r.saved_at_100 * 100.0,
                r.latency_p90_ms
            )),
            None => s.push_str(&format!("| {budget} | | | | | |\n")),
        }
    }
    s.push_str(&format!("\nReference: mean time between typed words {INTER_WORD_REFERENCE_MS} ms.\n"));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::candgen::Candidate;
    use crate::simulator::{Accepted, StepRecord};
    use proptest::prelude::*;

    fn step(position: usize, accepted: Option<(&str, usize)>, latency_ms: f64) -> StepRecord {
        StepRecord {
            position,
            prefix_len: position,
            shown: Vec::new(),
            accepted: accepted.map(|(t, n)| Accepted { text: t.into(), consumed_chars: n, rank: 0 }),
            latency_ms,
            candidates_total: 0,
            failed: None,
        }
    }

    fn trace(len: usize, steps: Vec<StepRecord>) -> TurnTrace {
        let accepted: Vec<&Accepted> = steps.iter().filter_map(|s| s.accepted.as_ref()).collect();
        TurnTrace {
            conversation_id: "c".into(),
            turn_index: 0,
            k: 1,
            full_turn_len: len,
            accepted_chars_total: accepted.iter().map(|a| a.consumed_chars).sum(),
            acceptance_count: accepted.len(),
            steps,
            aborted: false,
        }
    }

    #[test]
    fn saved_examples() {
        assert_eq!(saved_at_k(&trace(11, vec![step(0, None, 1.0)])).unwrap().saved, 0.0);
        assert_eq!(saved_at_k(&trace(11, vec![step(0, Some(("hello world", 11)), 1.0)])).unwrap().saved, 1.0);
        let t = trace(11, vec![step(0, Some(("hello ", 7)), 1.0), step(7, None, 1.0)]);
        assert_eq!(saved_at_k(&t).unwrap().saved, (7.0 - 1.0) / (11.0 - 1.0));
        assert!(saved_at_k(&trace(1, vec![step(0, None, 1.0)])).is_none());
    }

    #[test]
    fn acceptance_rate_examples() {
        let all = trace(5, vec![step(0, Some(("abcde", 5)), 1.0)]);
        assert_eq!(acceptance_rate([&all]).unwrap(), 1.0);
        let mut traces = Vec::new();
        for i in 0..4 {
            let steps = (0..3).map(|j| step(j, if j == 0 && i < 3 { Some(("a", 1)) } else { None }, 1.0)).collect();
            traces.push(trace(10, steps));
        }
        assert_eq!(acceptance_rate(&traces).unwrap(), 0.25);
        assert_eq!(acceptance_rate(&[]).unwrap_err().to_string(), "no steps recorded");
    }

    #[test]
    fn latency_examples() {
        let s = latency_of(&[10.0; 10]).unwrap();
        assert_eq!((s.mean_ms, s.p90_ms), (10.0, 10.0));
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        let s = latency_of(&v).unwrap();
        assert_eq!((s.mean_ms, s.p90_ms), (5.5, 9.0));
        assert_eq!(latency_of(&[3.0]).unwrap().p90_ms, 3.0);
        assert!(latency_of(&[]).is_none());
    }

    #[test]
    fn hist_examples() {
        let t = trace(
            40,
            vec![step(0, Some(("you", 4)), 1.0), step(4, Some(("the", 4)), 1.0), step(8, Some(("64", 3)), 1.0)],
        );
        assert_eq!(accepted_length_hist([&t]), BTreeMap::from([(1, 3)]));
        let t = trace(40, vec![step(0, Some(("tell me more about", 19)), 1.0)]);
        assert_eq!(accepted_length_hist([&t]), BTreeMap::from([(4, 1)]));
        assert!(accepted_length_hist([&trace(3, vec![step(0, None, 1.0)])]).is_empty());
    }

    #[test]
    fn aggregate_macro_average_and_exclusions() {
        let zero = trace(5, vec![step(0, None, 2.0)]);
        let one = trace(5, vec![step(0, Some(("abcde", 5)), 4.0)]);
        let short = trace(1, vec![step(0, None, 100.0)]);
        let mut failed = trace(5, vec![step(0, None, 100.0)]);
        failed.aborted = true;
        let r = aggregate([&zero, &one, &short, &failed], 1).unwrap();
        assert_eq!(r.saved_at_k, 0.5);
        assert_eq!(r.acc_rate_at_k, 0.5);
        assert_eq!(r.latency_mean_ms, 3.0);
        assert_eq!((r.excluded_turns, r.failed_turns, r.turns), (1, 1, 2));
        assert!(matches!(aggregate([&short], 1), Err(MetricsError::NoTurns { .. })));
    }

    fn row(p90: f64, saved: f64) -> SweepRow {
        SweepRow {
            n_c: 3,
            n_t: 3,
            history_cap: ContextCap::Full,
            saved_at_100: saved,
            acc_rate_at_100: 0.0,
            latency_mean_ms: p90,
            latency_p90_ms: p90,
        }
    }

    #[test]
    fn budget_examples() {
        let rows = vec![row(148.0, 0.2345), row(275.0, 0.3832)];
        let cells = select_budgets(&rows, &[Budget::Ms(300.0), Budget::Ms(100.0), Budget::Unbounded]);
        assert_eq!(cells[0].row.as_ref().unwrap().saved_at_100, 0.3832);
        assert!(cells[1].row.is_none());
        assert_eq!(cells[2].row.as_ref().unwrap().saved_at_100, 0.3832);
        let tie = select_budgets(&[row(200.0, 1.0), row(150.0, 1.0)], &[Budget::Unbounded]);
        assert_eq!(tie[0].row.as_ref().unwrap().latency_p90_ms, 150.0);
        assert_eq!(SweepGrid::default().points().len(), 48);
        assert_eq!("inf".parse::<Budget>(), Ok(Budget::Unbounded));
        assert_eq!(serde_json::to_string(&Budget::defaults()).unwrap(), "[150.0,300.0,450.0,600.0,750.0,\"inf\"]");
        let table = render_budget_table(&cells);
        assert!(table.contains("| <300 | 3 | 3 | Full | 38.32 | 275 |"));
        assert!(table.contains("718"));
    }

    #[test]
    fn csv_outputs_have_headers() {
        let mut buf = Vec::new();
        write_budget_csv(&mut buf, &select_budgets(&[row(1.0, 0.5)], &[Budget::Ms(0.5), Budget::Unbounded])).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().nth(1).unwrap(), "0.5,,,,,");
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &[row(1.0, 0.5)]).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("n_c,n_t,history_cap"));
    }

    #[test]
    fn monotonicity_on_shared_steps() {
        let c = |t: &str| Candidate { text: t.into(), token_logprobs: vec![0.0], ppl: 1.0, source_sample: 0, token_count: 1 };
        let mut s1 = step(0, Some(("a", 2)), 1.0);
        s1.shown = vec![c("a")];
        let mut s3 = step(0, Some(("a b", 4)), 1.0);
        s3.shown = vec![c("a"), c("a b"), c("x")];
        let mut t1 = trace(5, vec![s1]);
        t1.k = 1;
        let mut t3 = trace(5, vec![s3.clone()]);
        t3.k = 3;
        assert_eq!(k_monotonicity(&[t1.clone(), t3.clone()], 1, 3), MonotonicityCheck { compared: 1, violations: 0 });
        t3.steps[0].accepted = None;
        t3.acceptance_count = 0;
        assert_eq!(k_monotonicity(&[t1, t3], 1, 3).violations, 1);
    }

    proptest! {
        #[test]
        fn budget_selection_properties(
            raw in prop::collection::vec((0.0f64..1000.0, 0.0f64..1.0), 1..48),
            budgets in prop::collection::vec(0.0f64..1200.0, 1..8),
        ) {
            let rows: Vec<SweepRow> = raw.iter().map(|(p, s)| row(*p, *s)).collect();
            let mut budgets: Vec<Budget> = budgets.into_iter().map(Budget::Ms).collect();
            budgets.sort_by(|a, b| match (a, b) { (Budget::Ms(x), Budget::Ms(y)) => x.total_cmp(y), _ => std::cmp::Ordering::Equal });
            let cells = select_budgets(&rows, &budgets);
            let mut last = f64::NEG_INFINITY;
            for c in &cells {
                let fits: Vec<&SweepRow> = rows.iter().filter(|r| c.budget.admits(r.latency_p90_ms)).collect();
                match &c.row {
                    None => prop_assert!(fits.is_empty()),
                    Some(r) => {
                        prop_assert!(c.budget.admits(r.latency_p90_ms));
                        prop_assert!(fits.iter().all(|f| f.saved_at_100 <= r.saved_at_100));
                        prop_assert!(r.saved_at_100 >= last);
                        last = r.saved_at_100;
                    }
                }
            }
        }

        #[test]
        fn saved_is_bounded_and_rate_order_free(
            turns in prop::collection::vec((2usize..60, prop::collection::vec(0usize..4, 1..6)), 1..10),
        ) {
            let mut traces = Vec::new();
            for (len, accs) in &turns {
                let mut pos = 0;
                let mut steps = Vec::new();
                for a in accs {
                    if pos >= *len { break; }
                    let n = (*a).min(len - pos);
                    steps.push(step(pos, (n > 0).then_some(("x", n)), 1.0));
                    pos += n.max(1);
                }
                traces.push(trace(*len, steps));
            }
            for t in &traces {
                let s = saved_at_k(t).unwrap().saved;
                prop_assert!((0.0..=1.0).contains(&s));
                prop_assert_eq!(s == 0.0, t.accepted_chars_total == t.acceptance_count);
            }
            let fwd = acceptance_rate(&traces).unwrap();
            let rev: Vec<TurnTrace> = traces.iter().rev().cloned().collect();
            prop_assert_eq!(fwd, acceptance_rate(&rev).unwrap());
            let hist: u64 = accepted_length_hist(&traces).values().sum();
            prop_assert_eq!(hist as usize, traces.iter().map(|t| t.acceptance_count).sum::<usize>());
        }
    }
}
