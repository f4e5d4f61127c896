//! Experiment configuration (TOML).
//!
//! Unknown keys are rejected everywhere. A top-level `seed` feeds every
//! seed that a section leaves unset.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use subboost::adapter::{AdapterConfig, Basis};
use subboost::boosting::BoostConfig;
use subboost::data::SyntheticSpec;
use subboost::model::{Architecture, PretrainConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub adapter: AdapterSection,
    #[serde(default)]
    pub boost: BoostSection,
    #[serde(default)]
    pub arms: Vec<ArmSection>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// CSV file with a `label` column; relative to the config file.
    pub csv: Option<PathBuf>,
    pub synthetic: Option<SyntheticSection>,
    pub split_seed: Option<u64>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    pub seed: Option<u64>,
}

fn default_separation() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: Architecture,
    pub hidden: usize,
    pub seed: Option<u64>,
    pub pretrain: PretrainSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: Architecture::Mlp,
            hidden: 64,
            seed: None,
            pretrain: PretrainSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: Option<u64>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            epochs: d.epochs,
            lr: d.lr,
            batch_size: d.batch_size,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    pub proj_dim: usize,
    pub groups: usize,
    pub basis: Basis,
    pub seed: Option<u64>,
    pub epsilon_rank_eps: f64,
    pub recompute_top: bool,
}

impl Default for AdapterSection {
    fn default() -> Self {
        let d = AdapterConfig::default();
        Self {
            rank: d.rank,
            proj_dim: d.proj_dim,
            groups: d.groups,
            basis: d.basis,
            seed: None,
            epsilon_rank_eps: d.epsilon_rank_eps,
            recompute_top: d.recompute_top,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostSection {
    pub rounds: usize,
    pub lr_base: f64,
    pub lr_scaling: bool,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub early_stop_threshold: Option<usize>,
    pub two_phase: bool,
    pub head_lr: f64,
    pub head_epochs: usize,
    pub seed: Option<u64>,
    pub store_deltas: bool,
}

impl Default for BoostSection {
    fn default() -> Self {
        let d = BoostConfig::default();
        Self {
            rounds: d.rounds,
            lr_base: d.lr_base,
            lr_scaling: d.lr_scaling,
            epochs_per_round: d.epochs_per_round,
            batch_size: d.batch_size,
            warmup_ratio: d.warmup_ratio,
            grad_clip: d.grad_clip,
            weight_decay: d.weight_decay,
            early_stop_threshold: d.early_stop_threshold,
            two_phase: d.two_phase,
            head_lr: d.head_lr,
            head_epochs: d.head_epochs,
            seed: None,
            store_deltas: d.store_deltas,
        }
    }
}

/// A named variant; unset fields inherit from `[adapter]` and `[boost]`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmSection {
    pub name: String,
    pub basis: Option<Basis>,
    pub rank: Option<usize>,
    pub proj_dim: Option<usize>,
    pub groups: Option<usize>,
    pub recompute_top: Option<bool>,
    pub rounds: Option<usize>,
    pub two_phase: Option<bool>,
    pub lr_base: Option<f64>,
    pub epochs_per_round: Option<usize>,
}

/// One arm with every field resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedArm {
    pub name: String,
    pub boost: BoostConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {e}")))
    }

    /// Reads `path` and resolves a relative CSV path against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(csv) = cfg.data.csv.as_mut() {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    /// Structural checks that need no data.
    pub fn validate(&self) -> Result<(), CliError> {
        let field = |name: &str, msg: String| Err(CliError::Usage(format!("{name}: {msg}")));
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return field("name", format!("{:?} is not a usable directory name", self.name));
        }
        match (&self.data.csv, &self.data.synthetic) {
            (Some(_), Some(_)) => return field("data", "set exactly one of data.csv and data.synthetic".into()),
            (None, None) => return field("data.csv", "no dataset given (set data.csv or data.synthetic)".into()),
            (Some(p), None) if !p.is_file() => {
                return field("data.csv", format!("{} does not exist", p.display()));
            }
            _ => {}
        }
        let (tr, te) = (self.data.train_fraction, self.data.test_fraction);
        if !(tr > 0.0 && tr <= 1.0) {
            return field("data.train_fraction", format!("{tr} is outside (0, 1]"));
        }
        if !(0.0..=1.0).contains(&te) || tr + te > 1.0 + 1e-12 {
            return field("data.test_fraction", format!("{te} is outside [0, 1 - train_fraction]"));
        }
        if self.model.kind == Architecture::Mlp && self.model.hidden == 0 {
            return field("model.hidden", "must be positive".into());
        }
        let mut seen = std::collections::HashSet::new();
        for arm in &self.arms {
            if arm.name.is_empty() || arm.name.contains(['/', '\\']) {
                return field("arms.name", format!("{:?} is not a usable directory name", arm.name));
            }
            if !seen.insert(arm.name.as_str()) {
                return field("arms.name", format!("duplicate arm {:?}", arm.name));
            }
        }
        for arm in self.resolve_arms() {
            arm.boost
                .validate()
                .map_err(|e| CliError::Usage(format!("arm {}: {e}", arm.name)))?;
        }
        Ok(())
    }

    fn or_seed(&self, explicit: Option<u64>) -> u64 {
        explicit.unwrap_or(self.seed)
    }

    pub fn split_seed(&self) -> u64 {
        self.or_seed(self.data.split_seed)
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        self.data.synthetic.as_ref().map(|s| SyntheticSpec {
            classes: s.classes,
            dim: s.dim,
            n: s.n,
            separation: s.separation,
            noise: s.noise,
            seed: self.or_seed(s.seed),
        })
    }

    pub fn model_seed(&self) -> u64 {
        self.or_seed(self.model.seed)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.model.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            lr: p.lr,
            batch_size: p.batch_size,
            seed: self.or_seed(p.seed),
        }
    }

    fn base_boost(&self) -> BoostConfig {
        let a = &self.adapter;
        let b = &self.boost;
        BoostConfig {
            rounds: b.rounds,
            adapter: AdapterConfig {
                rank: a.rank,
                proj_dim: a.proj_dim,
                groups: a.groups,
                basis: a.basis,
                seed: self.or_seed(a.seed),
                epsilon_rank_eps: a.epsilon_rank_eps,
                recompute_top: a.recompute_top,
            },
            lr_base: b.lr_base,
            lr_scaling: b.lr_scaling,
            epochs_per_round: b.epochs_per_round,
            batch_size: b.batch_size,
            warmup_ratio: b.warmup_ratio,
            grad_clip: b.grad_clip,
            weight_decay: b.weight_decay,
            early_stop_threshold: b.early_stop_threshold,
            two_phase: b.two_phase,
            head_lr: b.head_lr,
            head_epochs: b.head_epochs,
            seed: self.or_seed(b.seed),
            store_deltas: b.store_deltas,
        }
    }

    /// Arms in file order, or a single arm named `default`.
    pub fn resolve_arms(&self) -> Vec<ResolvedArm> {
        let base = self.base_boost();
        if self.arms.is_empty() {
            return vec![ResolvedArm {
                name: "default".into(),
                boost: base,
            }];
        }
        self.arms
            .iter()
            .map(|arm| {
                let mut b = base.clone();
                if let Some(x) = arm.basis {
                    b.adapter.basis = x;
                }
                if let Some(x) = arm.rank {
                    b.adapter.rank = x;
                }
                if let Some(x) = arm.proj_dim {
                    b.adapter.proj_dim = x;
                }
                if let Some(x) = arm.groups {
                    b.adapter.groups = x;
                }
                if let Some(x) = arm.recompute_top {
                    b.adapter.recompute_top = x;
                }
                if let Some(x) = arm.rounds {
                    b.rounds = x;
                }
                if let Some(x) = arm.two_phase {
                    b.two_phase = x;
                }
                if let Some(x) = arm.lr_base {
                    b.lr_base = x;
                }
                if let Some(x) = arm.epochs_per_round {
                    b.epochs_per_round = x;
                }
                ResolvedArm {
                    name: arm.name.clone(),
                    boost: b,
                }
            })
            .collect()
    }
}
