//! Run configuration: a TOML (or JSON) file, overridden by command-line
//! flags, resolved into the values a run actually uses.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use chatac_core::corpus::ContextCap;
use chatac_core::metrics::{Budget, SweepGrid};
use chatac_core::provider::doubles::SyntheticLatency;
use chatac_core::provider::http::ENDPOINT_ENV;
use chatac_core::provider::TimingMode;
use chatac_core::{ExpansionPolicy, GenConfig, SuggestionMode};

use crate::InvalidInput;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// Curated JSONL written by `curate`.
    #[default]
    Canonical,
    Oasst,
    Sharegpt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: DatasetFormat,
    /// Label used in reports; defaults to the file stem.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    /// Use only the first N turns (after filtering).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_turns: Option<usize>,
    #[serde(default = "one")]
    pub min_turn_len: usize,
    /// Drop turns whose serialized starting context was already seen, so
    /// that every remaining turn is identified by its context.
    #[serde(default)]
    pub unique_contexts: bool,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    Ngram {
        model: PathBuf,
        #[serde(default)]
        timing: TimingMode,
    },
    Http {
        /// Falls back to `CHAITEA_ENDPOINT`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        endpoint: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_s: u64,
    },
    /// Answers with the ground-truth remainder (diagnostics).
    Oracle,
    /// Never matches (diagnostics).
    Null,
    /// Continues the ground truth with probability `hit_rate` under a
    /// modelled latency (exercises sweeps without a model).
    Synthetic {
        #[serde(default = "default_hit_rate")]
        hit_rate: f64,
        #[serde(default)]
        latency: SyntheticLatency,
    },
}

fn default_hit_rate() -> f64 {
    0.5
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_c: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<ExpansionPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history_cap: Option<ContextCap>,
}

impl GenerationConfig {
    /// Preset values first, explicit fields on top. Without a preset the
    /// base is the `best` configuration.
    pub fn resolve(&self) -> Result<GenConfig> {
        let mut g = match self.preset.as_deref() {
            None => GenConfig::best(),
            Some(p) => GenConfig::preset(p).ok_or_else(|| InvalidInput(format!("unknown preset {p:?} (best, fast)")))?,
        };
        if let Some(v) = self.n_c {
            g.n_c = v;
        }
        if let Some(v) = self.n_t {
            g.n_t = v;
        }
        if let Some(v) = self.policy {
            g.policy = v;
        }
        if let Some(v) = self.temperature {
            g.temperature = v;
        }
        if let Some(v) = self.history_cap {
            g.history_cap = v;
        }
        g.validate().map_err(InvalidInput)?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default)]
    pub mode: SuggestionMode,
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// 0 uses every available core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
}

fn default_k_list() -> Vec<usize> {
    vec![1, 3, 100]
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunSection {
    fn default() -> Self {
        Self { mode: SuggestionMode::WordLevel, k_list: default_k_list(), seed: Some(0), workers: 0, out_dir: default_out() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default = "grid_n_c")]
    pub n_c: Vec<usize>,
    #[serde(default = "grid_n_t")]
    pub n_t: Vec<usize>,
    #[serde(default = "grid_caps")]
    pub history_caps: Vec<ContextCap>,
    #[serde(default = "Budget::defaults")]
    pub budgets: Vec<Budget>,
}

fn grid_n_c() -> Vec<usize> {
    SweepGrid::default().n_c
}

fn grid_n_t() -> Vec<usize> {
    SweepGrid::default().n_t
}

fn grid_caps() -> Vec<ContextCap> {
    SweepGrid::default().history_caps
}

impl Default for SweepSection {
    fn default() -> Self {
        Self { n_c: grid_n_c(), n_t: grid_n_t(), history_caps: grid_caps(), budgets: Budget::defaults() }
    }
}

impl SweepSection {
    pub fn grid(&self) -> SweepGrid {
        SweepGrid { n_c: self.n_c.clone(), n_t: self.n_t.clone(), history_caps: self.history_caps.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub provider: ProviderSpec,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

impl RunConfig {
    /// Reads a TOML config, a JSON config, or a report JSON whose metadata
    /// embeds the config that produced it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InvalidInput(format!("cannot read config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| InvalidInput(format!("{}: {e}", path.display())))?;
            let v = match v.pointer("/meta/config") {
                Some(embedded) => embedded.clone(),
                None => v,
            };
            serde_json::from_value(v).map_err(|e| InvalidInput(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| InvalidInput(format!("{}: {e}", path.display())))?
        };
        Ok(parsed)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing resolved config")
    }

    pub fn dataset_label(&self) -> String {
        let name = self.dataset.name.clone().unwrap_or_else(|| {
            self.dataset.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
        });
        match &self.dataset.split {
            Some(split) => format!("{name}-{split}"),
            None => name,
        }
    }

    /// Fills in environment defaults and checks cross-field rules.
    pub fn finalize(&mut self) -> Result<()> {
        if let ProviderSpec::Http { endpoint, .. } = &mut self.provider {
            if endpoint.is_none() {
                *endpoint = std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.trim().is_empty());
            }
            if endpoint.is_none() {
                bail!(InvalidInput(format!("http provider needs an endpoint (flag, config or {ENDPOINT_ENV})")));
            }
        }
        if let ProviderSpec::Synthetic { hit_rate, .. } = self.provider {
            if !(0.0..=1.0).contains(&hit_rate) {
                bail!(InvalidInput(format!("hit_rate must be in [0, 1], got {hit_rate}")));
            }
        }
        let k = &self.run.k_list;
        if k.is_empty() || k.contains(&0) || k.windows(2).any(|w| w[0] >= w[1]) {
            bail!(InvalidInput(format!("k_list must be non-empty, positive, ascending and distinct, got {k:?}")));
        }
        if self.dataset.min_turn_len == 0 {
            bail!(InvalidInput("min_turn_len must be at least 1".into()));
        }
        self.generation.resolve()?;
        Ok(())
    }
}
