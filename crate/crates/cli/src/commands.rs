use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::{info, warn};

use chatac_core::corpus::{
    self, instance_cache_name, read_canonical, turn_starts, write_canonical, write_instance_cache, CorpusStats,
    Granularity,
};
use chatac_core::metrics::{self, build_report, RunMeta, RunReport};
use chatac_core::provider::doubles::{GroundTruth, NullProvider, OracleProvider, SyntheticProvider};
use chatac_core::provider::http::HttpProvider;
use chatac_core::provider::ngram::{NgramModel, NgramProvider, SmoothingConfig};
use chatac_core::provider::TimingMode;
use chatac_core::simulator::{run_dataset, RunOptions};
use chatac_core::steplog::{read_step_log, StepLogWriter};
use chatac_core::{CompletionProvider, Conversation, PrefixInstance};

use crate::config::{DatasetConfig, DatasetFormat, GenerationConfig, ProviderSpec, RunConfig, SweepSection};
use crate::{CurateArgs, InvalidInput, RawFormat, ReportArgs, RunArgs, StatsArgs, SweepArgs, TrainArgs};

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| InvalidInput(format!("cannot open {}: {e}", path.display())).into())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn stats_line(s: &CorpusStats) -> String {
    format!("conversations={}, messages={}, prefixes={}", s.conversations, s.messages, s.char_prefixes)
}

fn print_stats(s: &CorpusStats) {
    println!("{s}");
    println!("{}", stats_line(s));
}

pub fn curate(a: &CurateArgs) -> Result<()> {
    let meta = fs::metadata(&a.input).map_err(|e| InvalidInput(format!("cannot open {}: {e}", a.input.display())))?;
    if meta.len() == 0 {
        bail!(InvalidInput(format!("empty training corpus: {} has no records", a.input.display())));
    }
    let (name, parsed) = match a.dataset {
        RawFormat::Oasst => ("oasst", corpus::parse_oasst(open(&a.input)?)),
        RawFormat::Sharegpt => ("sharegpt", corpus::parse_sharegpt(open(&a.input)?)),
    };
    let parsed = parsed.map_err(|e| InvalidInput(format!("{}: {e}", a.input.display())))?;
    let r = &parsed.report;
    eprintln!(
        "parsed {}: kept {}, rejected {} {:?}, malformed {}, orphan subtrees {} ({} messages), empty messages {}",
        a.input.display(),
        parsed.conversations.len(),
        r.rejected_total(),
        r.rejected,
        r.malformed_records,
        r.orphan_subtrees,
        r.orphaned_messages,
        r.dropped_empty_messages
    );
    if parsed.conversations.is_empty() {
        bail!(InvalidInput(format!("empty training corpus: no conversation in {} survived curation", a.input.display())));
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{name}-{}.jsonl", a.split)));
    let mut w = create(&out)?;
    write_canonical(&mut w, &parsed.conversations)?;
    w.flush()?;
    if a.instance_cache {
        let dir = out.parent().unwrap_or(Path::new("."));
        for g in [Granularity::Char, Granularity::WordBoundary] {
            let path = dir.join(instance_cache_name(name, &a.split, g));
            let n = write_instance_cache(create(&path)?, &parsed.conversations, g)?;
            info!("wrote {n} instance keys to {}", path.display());
        }
    }
    print_stats(&CorpusStats::compute(&parsed.conversations));
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<Conversation>> {
    read_canonical(open(path)?).map_err(|e| InvalidInput(format!("{}: {e}", path.display())).into())
}

pub fn stats(a: &StatsArgs) -> Result<()> {
    let s = CorpusStats::compute(&read_corpus(&a.input)?);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        print_stats(&s);
    }
    Ok(())
}

pub fn train_ngram(a: &TrainArgs) -> Result<()> {
    let convs = read_corpus(&a.input)?;
    let smoothing = SmoothingConfig { weights: a.weights.clone(), unk_floor: a.unk_floor };
    let model = NgramModel::train(&convs, a.order, &smoothing).map_err(|e| InvalidInput(e.to_string()))?;
    let mut w = create(&a.out)?;
    model.write_jsonl(&mut w)?;
    w.flush()?;
    println!(
        "order={}, vocab={}, weights={:?}, out={}",
        model.order(),
        model.vocab_size(),
        model.weights(),
        a.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Config resolution

fn provider_kind(spec: &ProviderSpec) -> &'static str {
    match spec {
        ProviderSpec::Ngram { .. } => "ngram",
        ProviderSpec::Http { .. } => "http",
        ProviderSpec::Oracle => "oracle",
        ProviderSpec::Null => "null",
        ProviderSpec::Synthetic { .. } => "synthetic",
    }
}

fn resolve_provider(a: &RunArgs, base: Option<ProviderSpec>) -> Result<ProviderSpec> {
    if a.model.is_some() && a.endpoint.is_some() {
        bail!(InvalidInput("give either --model or --endpoint, not both".into()));
    }
    let implied = if a.model.is_some() {
        Some("ngram")
    } else if a.endpoint.is_some() {
        Some("http")
    } else {
        None
    };
    let kind = match (a.provider.as_deref(), implied) {
        (Some(p), Some(i)) if p != i => bail!(InvalidInput(format!("--provider {p} conflicts with the {i} provider flags"))),
        (Some(p), _) => Some(p.to_string()),
        (None, i) => i.map(str::to_string),
    };
    let mut spec = match (kind, base) {
        (None, Some(b)) => b,
        (None, None) => bail!(InvalidInput("no provider: use --model, --endpoint, --provider or a config file".into())),
        (Some(k), Some(b)) if k == provider_kind(&b) => b,
        (Some(k), _) => match k.as_str() {
            "ngram" => {
                let model = a.model.clone().ok_or_else(|| InvalidInput("the ngram provider needs --model".into()))?;
                ProviderSpec::Ngram { model, timing: TimingMode::Wall }
            }
            "http" => ProviderSpec::Http { endpoint: None, timeout_s: 120 },
            "oracle" => ProviderSpec::Oracle,
            "null" => ProviderSpec::Null,
            "synthetic" => ProviderSpec::Synthetic { hit_rate: 0.5, latency: Default::default() },
            other => bail!(InvalidInput(format!("unknown provider {other:?} (ngram, http, oracle, null, synthetic)"))),
        },
    };
    match &mut spec {
        ProviderSpec::Ngram { model, timing } => {
            if let Some(m) = &a.model {
                *model = m.clone();
            }
            if a.virtual_timing {
                *timing = TimingMode::virtual_default();
            }
        }
        ProviderSpec::Http { endpoint, .. } => {
            if let Some(e) = &a.endpoint {
                *endpoint = Some(e.clone());
            }
        }
        ProviderSpec::Synthetic { hit_rate, .. } => {
            if let Some(h) = a.hit_rate {
                *hit_rate = h;
            }
        }
        ProviderSpec::Oracle | ProviderSpec::Null => {}
    }
    if a.virtual_timing && !matches!(spec, ProviderSpec::Ngram { .. }) {
        warn!("--virtual-timing only applies to the ngram provider");
    }
    Ok(spec)
}

/// Config file (if any) with flags on top. Generation settings come back
/// fully explicit so the persisted config does not depend on preset tables.
pub fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let base = a.config.as_deref().map(RunConfig::load).transpose()?;
    let mut cfg = match base {
        Some(mut c) => {
            c.provider = resolve_provider(a, Some(c.provider.clone()))?;
            if let Some(p) = &a.dataset {
                c.dataset.path = p.clone();
            }
            c
        }
        None => {
            let path = a.dataset.clone().ok_or_else(|| InvalidInput("no dataset: use --dataset or --config".into()))?;
            RunConfig {
                dataset: DatasetConfig {
                    path,
                    format: DatasetFormat::Canonical,
                    name: None,
                    split: None,
                    max_turns: None,
                    min_turn_len: 1,
                    unique_contexts: false,
                },
                provider: resolve_provider(a, None)?,
                generation: GenerationConfig::default(),
                run: Default::default(),
                sweep: None,
            }
        }
    };
    let d = &mut cfg.dataset;
    if let Some(f) = a.format {
        d.format = f;
    }
    if let Some(s) = &a.split {
        d.split = Some(s.clone());
    }
    if let Some(m) = a.max_turns {
        d.max_turns = Some(m);
    }
    if let Some(m) = a.min_turn_len {
        d.min_turn_len = m;
    }
    d.unique_contexts |= a.unique_contexts;

    let g = &mut cfg.generation;
    if let Some(p) = &a.preset {
        *g = GenerationConfig { preset: Some(p.clone()), ..GenerationConfig::default() };
    }
    g.n_c = a.n_c.or(g.n_c);
    g.n_t = a.n_t.or(g.n_t);
    g.policy = a.policy.or(g.policy);
    g.temperature = a.temperature.or(g.temperature);
    g.history_cap = a.history_cap.or(g.history_cap);

    let r = &mut cfg.run;
    if let Some(m) = a.mode {
        r.mode = m;
    }
    if let Some(k) = &a.k {
        r.k_list = k.clone();
    }
    if a.seed.is_some() {
        r.seed = a.seed;
    }
    if let Some(w) = a.workers {
        r.workers = w;
    }
    if let Some(o) = &a.out {
        r.out_dir = o.clone();
    }
    cfg.finalize()?;
    let resolved = cfg.generation.resolve()?;
    cfg.generation = GenerationConfig {
        preset: cfg.generation.preset.clone(),
        n_c: Some(resolved.n_c),
        n_t: Some(resolved.n_t),
        policy: Some(resolved.policy),
        temperature: Some(resolved.temperature),
        history_cap: Some(resolved.history_cap),
    };
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Runs

fn load_instances(d: &DatasetConfig) -> Result<Vec<PrefixInstance>> {
    let convs = match d.format {
        DatasetFormat::Canonical => read_corpus(&d.path)?,
        DatasetFormat::Oasst => {
            corpus::parse_oasst(open(&d.path)?).map_err(|e| InvalidInput(format!("{}: {e}", d.path.display())))?.conversations
        }
        DatasetFormat::Sharegpt => {
            corpus::parse_sharegpt(open(&d.path)?)
                .map_err(|e| InvalidInput(format!("{}: {e}", d.path.display())))?
                .conversations
        }
    };
    let mut seen = HashSet::new();
    let mut instances: Vec<PrefixInstance> = convs
        .iter()
        .flat_map(turn_starts)
        .filter(|i| i.full_turn_len >= d.min_turn_len)
        .filter(|i| !d.unique_contexts || seen.insert(i.context.clone()))
        .collect();
    if let Some(m) = d.max_turns {
        instances.truncate(m);
    }
    if instances.is_empty() {
        bail!(InvalidInput(format!("no turns to evaluate in {}", d.path.display())));
    }
    info!("{} turns from {}", instances.len(), d.path.display());
    Ok(instances)
}

fn build_provider(spec: &ProviderSpec, instances: &[PrefixInstance]) -> Result<(Box<dyn CompletionProvider>, TimingMode)> {
    let modelled = TimingMode::Virtual { per_request_ms: 0.0, per_token_ms: 0.0, per_kchar_ms: 0.0 };
    Ok(match spec {
        ProviderSpec::Ngram { model, timing } => {
            let m = NgramModel::read_jsonl(open(model)?)
                .map_err(|e| InvalidInput(format!("{}: {e}", model.display())))?;
            (Box::new(NgramProvider::new(Arc::new(m)).with_timing(*timing)), *timing)
        }
        ProviderSpec::Http { endpoint, timeout_s } => {
            let endpoint = endpoint.clone().ok_or_else(|| InvalidInput("http provider without endpoint".into()))?;
            let p = HttpProvider::with_timeout(endpoint, Duration::from_secs(*timeout_s));
            let h = p.health().with_context(|| format!("health check of {}", p.endpoint()))?;
            if !h.ready {
                bail!("provider at {} reports it is not ready", p.endpoint());
            }
            info!("provider {} serving {}", p.endpoint(), h.model);
            (Box::new(p), TimingMode::Wall)
        }
        ProviderSpec::Oracle => (Box::new(OracleProvider::new(GroundTruth::new(instances))), modelled),
        ProviderSpec::Null => (Box::new(NullProvider), modelled),
        ProviderSpec::Synthetic { hit_rate, latency } => {
            (Box::new(SyntheticProvider::new(GroundTruth::new(instances), *latency, *hit_rate)), modelled)
        }
    })
}

fn run_meta(cfg: &RunConfig, provider: &dyn CompletionProvider, timing: TimingMode) -> Result<RunMeta> {
    Ok(RunMeta {
        dataset: cfg.dataset_label(),
        provider: provider.name(),
        gen: cfg.generation.resolve()?,
        mode: cfg.run.mode,
        k_list: cfg.run.k_list.clone(),
        seed: cfg.run.seed,
        timing,
        config: serde_json::to_value(cfg)?,
    })
}

fn run_options(cfg: &RunConfig) -> RunOptions {
    RunOptions { seed: cfg.run.seed, workers: cfg.run.workers, memoize: true }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn write_report_files(report: &RunReport, json: Option<&Path>, k_csv: Option<&Path>, hist_csv: Option<&Path>) -> Result<()> {
    if let Some(p) = json {
        write_text(p, &report.to_json_pretty())?;
    }
    if let Some(p) = k_csv {
        metrics::write_k_curve_csv(create(p)?, report)?;
    }
    if let Some(p) = hist_csv {
        metrics::write_hist_csv(create(p)?, report)?;
    }
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!("{:>5} {:>10} {:>10} {:>12} {:>12} {:>7} {:>9}", "k", "saved@k", "acc_rate", "mean_ms", "p90_ms", "turns", "failed");
    for r in &report.reports {
        println!(
            "{:>5} {:>9.2}% {:>9.2}% {:>12.1} {:>12.1} {:>7} {:>9}",
            r.k,
            r.saved_at_k * 100.0,
            r.acc_rate_at_k * 100.0,
            r.latency_mean_ms,
            r.latency_p90_ms,
            r.turns,
            r.failed_turns
        );
    }
}

pub fn run(a: &RunArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let instances = load_instances(&cfg.dataset)?;
    let (provider, timing) = build_provider(&cfg.provider, &instances)?;
    let meta = run_meta(&cfg, provider.as_ref(), timing)?;
    let out = &cfg.run.out_dir;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;

    let (traces, stats) =
        run_dataset(&instances, provider.as_ref(), &meta.gen, cfg.run.mode, &cfg.run.k_list, &run_options(&cfg))?;
    info!("{} provider calls", stats.provider_calls);
    let mut log = StepLogWriter::new(create(&out.join("steps.jsonl"))?, &meta)?;
    for t in &traces {
        log.write_trace(t)?;
    }
    let failed = traces.iter().filter(|t| t.aborted).count();
    if failed == traces.len() {
        bail!("every turn failed; first error: {}", first_failure(&traces));
    }
    if failed > 0 {
        warn!("{failed} of {} turns aborted on provider errors; first: {}", traces.len(), first_failure(&traces));
    }
    let report = build_report(&meta, &traces)?;
    write_report_files(
        &report,
        Some(&out.join("report.json")),
        Some(&out.join("k_curve.csv")),
        Some(&out.join("hist.csv")),
    )?;
    print_summary(&report);
    Ok(())
}

fn first_failure(traces: &[chatac_core::TurnTrace]) -> String {
    traces
        .iter()
        .flat_map(|t| &t.steps)
        .find_map(|s| s.failed.clone())
        .unwrap_or_else(|| "unknown".into())
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    let mut section = cfg.sweep.clone().unwrap_or_default();
    if let Some(b) = &a.budgets {
        section.budgets = b.clone();
    }
    if let Some(v) = &a.grid_n_c {
        section.n_c = v.clone();
    }
    if let Some(v) = &a.grid_n_t {
        section.n_t = v.clone();
    }
    if let Some(v) = &a.grid_caps {
        section.history_caps = v.clone();
    }
    validate_sweep(&section)?;
    cfg.sweep = Some(section.clone());

    let instances = load_instances(&cfg.dataset)?;
    let (provider, _) = build_provider(&cfg.provider, &instances)?;
    let out = &cfg.run.out_dir;
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;
    let grid = section.grid();
    let total = grid.points().len();
    let base = cfg.generation.resolve()?;
    let result = metrics::sweep(
        &instances,
        provider.as_ref(),
        &base,
        cfg.run.mode,
        &grid,
        &section.budgets,
        &run_options(&cfg),
        |i, row| {
            info!(
                "[{}/{total}] n_c={} n_t={} cap={}: saved@100={:.4} p90={:.1}ms",
                i + 1,
                row.n_c,
                row.n_t,
                row.history_cap,
                row.saved_at_100,
                row.latency_p90_ms
            )
        },
    )?;
    write_text(&out.join("sweep.json"), &(serde_json::to_string_pretty(&result)? + "\n"))?;
    metrics::write_sweep_csv(create(&out.join("sweep.csv"))?, &result.rows)?;
    metrics::write_budget_csv(create(&out.join("budgets.csv"))?, &result.budget_table)?;
    let table = metrics::render_budget_table(&result.budget_table);
    write_text(&out.join("budgets.md"), &table)?;
    print!("{table}");
    if result.budget_table.iter().all(|c| c.row.is_none()) {
        warn!("no configuration fits any of the budgets");
        eprintln!("warning: no configuration fits any of the budgets");
    }
    Ok(())
}

fn validate_sweep(s: &SweepSection) -> Result<()> {
    if s.n_c.is_empty() || s.n_t.is_empty() || s.history_caps.is_empty() {
        bail!(InvalidInput("sweep grid has an empty axis".into()));
    }
    if s.n_c.contains(&0) || s.n_t.contains(&0) {
        bail!(InvalidInput("sweep grid values must be positive".into()));
    }
    if s.budgets.is_empty() {
        bail!(InvalidInput("no latency budgets given".into()));
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let (meta, traces) =
        read_step_log(open(&a.from)?).map_err(|e| InvalidInput(format!("{}: {e}", a.from.display())))?;
    let report = build_report(&meta, &traces)?;
    write_report_files(&report, a.out.as_deref(), a.plot_csv.as_deref(), a.hist_csv.as_deref())?;
    if a.out.is_none() {
        print!("{}", report.to_json_pretty());
    }
    Ok(())
}
