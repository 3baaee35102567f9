//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 1
//!
//! [dataset]
//! synthetic = "a1a"        # or: path = "data/a1a"
//! n_clients = 10
//! mu = 1e-3
//!
//! [[algo]]
//! name = "fednew"
//! label = "fednew_r1"
//! alpha = 0.0
//! rho = 0.1
//! r = 1.0
//! max_rounds = 50
//! ```
//!
//! Unknown keys are rejected. Relative dataset and cache paths resolve
//! against the directory holding the config file.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::algorithms::{AlgoConfig, AlgorithmKind};
use crate::error::{Error, Result};
use crate::quantizer::DEFAULT_RANGE_BITS;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpectBlock {
    pub n_samples: Option<usize>,
    pub samples_per_client: Option<usize>,
    pub dim: Option<usize>,
    pub n_clients: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetBlock {
    pub path: Option<PathBuf>,
    /// Name of a built-in synthetic profile, used instead of `path`.
    pub synthetic: Option<String>,
    #[serde(default)]
    pub synthetic_seed: u64,
    pub dim_override: Option<usize>,
    pub n_clients: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub truncate_to_multiple: bool,
    pub shuffle_seed: Option<u64>,
    pub expect: Option<ExpectBlock>,
}

fn default_mu() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgoBlock {
    pub name: String,
    /// Output file stem; defaults to `name`.
    pub label: Option<String>,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "one")]
    pub rho: f64,
    #[serde(default = "one")]
    pub r: f64,
    pub gd_step: Option<f64>,
    #[serde(default = "default_bits")]
    pub bits: u8,
    #[serde(default = "default_range_bits")]
    pub range_bits: u32,
    #[serde(default = "one_usize")]
    pub inner_passes: usize,
    #[serde(default = "default_rounds")]
    pub max_rounds: usize,
    pub seed: Option<u64>,
    pub fstar_cache_path: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}
fn one_usize() -> usize {
    1
}
fn default_bits() -> u8 {
    3
}
fn default_range_bits() -> u32 {
    DEFAULT_RANGE_BITS
}
fn default_rounds() -> usize {
    50
}

impl AlgoBlock {
    pub fn label(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    pub fn to_algo_config(&self, global_seed: u64) -> Result<AlgoConfig> {
        let cfg = AlgoConfig {
            kind: self.name.parse::<AlgorithmKind>()?,
            alpha: self.alpha,
            rho: self.rho,
            hessian_rate: self.r,
            gd_step: self.gd_step,
            bits: self.bits,
            range_bits: self.range_bits,
            inner_passes: self.inner_passes,
            max_rounds: self.max_rounds,
            seed: self.seed.unwrap_or(global_seed),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountBlock {
    #[serde(default)]
    pub symmetric_matrices: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagBlock {
    #[serde(default)]
    pub enabled: bool,
    /// Overrides the default `β₁ = L_q²/ρ`.
    pub beta1: Option<f64>,
    #[serde(default = "default_probes")]
    pub lq_probes: usize,
}

fn default_probes() -> usize {
    4
}

impl Default for DiagBlock {
    fn default() -> Self {
        DiagBlock {
            enabled: false,
            beta1: None,
            lq_probes: default_probes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default)]
    pub message_log: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputBlock {
    fn default() -> Self {
        OutputBlock {
            dir: default_out(),
            message_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SummaryBlock {
    #[serde(default = "default_targets")]
    pub targets: Vec<f64>,
}

pub fn default_targets() -> Vec<f64> {
    vec![1e-2, 1e-4, 1e-6]
}

impl Default for SummaryBlock {
    fn default() -> Self {
        SummaryBlock {
            targets: default_targets(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetBlock,
    pub algo: Vec<AlgoBlock>,
    #[serde(default)]
    pub account: AccountBlock,
    #[serde(default)]
    pub diag: DiagBlock,
    #[serde(default)]
    pub output: OutputBlock,
    #[serde(default)]
    pub summary: SummaryBlock,
    /// Directory relative paths resolve against; set by [`ExperimentConfig::load`].
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let ds = &self.dataset;
        match (&ds.path, &ds.synthetic) {
            (Some(_), Some(_)) => return fail("set only one of dataset.path / dataset.synthetic".into()),
            (None, None) => return fail("dataset.path or dataset.synthetic is required".into()),
            (None, Some(name)) => {
                crate::synth::profile(name)?;
            }
            _ => {}
        }
        if ds.n_clients == 0 {
            return fail("dataset.n_clients must be >= 1".into());
        }
        if !(ds.mu >= 0.0) || !ds.mu.is_finite() {
            return fail(format!("dataset.mu must be finite and >= 0, got {}", ds.mu));
        }
        if let Some(0) = ds.dim_override {
            return fail("dataset.dim_override must be >= 1".into());
        }
        if self.algo.is_empty() {
            return fail("at least one [[algo]] block is required".into());
        }
        let mut labels = BTreeSet::new();
        for a in &self.algo {
            let label = a.label();
            if label.is_empty()
                || !label
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
            {
                return fail(format!("algo label `{label}` must be [A-Za-z0-9_.-]+"));
            }
            if label == "summary" {
                return fail("algo label `summary` is reserved".into());
            }
            if !labels.insert(label.to_string()) {
                return fail(format!("duplicate algo label `{label}`"));
            }
            a.to_algo_config(self.seed)?;
            if matches!(a.name.as_str(), "fednew" | "qfednew") && ds.mu == 0.0 && a.alpha == 0.0 {
                log::warn!("{label}: mu = 0 and alpha = 0; local systems rely on rho alone");
            }
        }
        if self.summary.targets.iter().any(|t| !(*t > 0.0)) {
            return fail("summary targets must be > 0".into());
        }
        if self.diag.enabled && self.diag.lq_probes < 2 {
            return fail("diag.lq_probes must be >= 2".into());
        }
        if let Some(b) = self.diag.beta1 {
            if !(b > 0.0) {
                return fail("diag.beta1 must be > 0".into());
            }
        }
        Ok(())
    }
}
