//! Experiment configuration: one TOML file with a section per module.
//! Every field has a default, unknown keys are rejected, and validation
//! collects every problem before reporting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{FimSettings, SplitFractions};
use crate::dp_optimizer::{AdamConfig, DpConfig};
use crate::error::{Error, Result};
use crate::metrics::{ChrfParams, LmThresholds};
use crate::mia::Strategy;
use crate::model::{LoraConfig, ModelConfig, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Directory of source files (relative paths resolve against the config file).
    pub path: PathBuf,
    /// Optional separate corpus used only for pre-training the base. When
    /// unset, the base pre-trains on the documents left over by the splits.
    pub public_path: Option<PathBuf>,
    pub extensions: Vec<String>,
    /// Files longer than this are truncated at a character boundary.
    pub max_bytes: usize,
    pub member_fraction: f64,
    pub nonmember_fraction: f64,
    pub eval_fraction: f64,
    pub min_middle: usize,
    /// Longest FIM sequence, sentinels included.
    pub max_len: usize,
    /// Fraction of members repeated as canaries.
    pub canary_fraction: f64,
    /// Total occurrences of each canary in the training set.
    pub canary_repeats: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: PathBuf::from("corpus"),
            public_path: None,
            extensions: vec!["kt".into(), "kts".into(), "java".into()],
            max_bytes: 4096,
            member_fraction: 0.5,
            nonmember_fraction: 0.2,
            eval_fraction: 0.1,
            min_middle: 4,
            max_len: 128,
            canary_fraction: 0.1,
            canary_repeats: 8,
        }
    }
}

impl CorpusConfig {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            members: self.member_fraction,
            nonmembers: self.nonmember_fraction,
            eval: self.eval_fraction,
        }
    }

    pub fn fim(&self) -> FimSettings {
        FimSettings {
            min_middle: self.min_middle,
            max_len: self.max_len,
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        for (name, f) in [
            ("member_fraction", self.member_fraction),
            ("nonmember_fraction", self.nonmember_fraction),
            ("eval_fraction", self.eval_fraction),
            ("canary_fraction", self.canary_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                p.push(format!("corpus.{name} = {f} outside [0, 1]"));
            }
        }
        let sum = self.member_fraction + self.nonmember_fraction + self.eval_fraction;
        if sum > 1.0 + 1e-9 {
            p.push(format!("corpus split fractions sum to {sum} > 1"));
        }
        if self.canary_repeats == 0 {
            p.push("corpus.canary_repeats must be >= 1".into());
        }
        if self.min_middle == 0 {
            p.push("corpus.min_middle must be >= 1".into());
        }
        if self.max_len < self.min_middle + 6 {
            p.push(format!(
                "corpus.max_len = {} too small for min_middle = {}",
                self.max_len, self.min_middle
            ));
        }
        if self.extensions.is_empty() {
            p.push("corpus.extensions is empty".into());
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// AdamW learning rate of the non-private run.
    pub learning_rate: f64,
    /// AdamW learning rate of the DP run.
    pub dp_learning_rate: f64,
    pub weight_decay: f64,
    /// Write a resumable checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 1e-2,
            dp_learning_rate: 1e-2,
            weight_decay: 0.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, dp: bool) -> AdamConfig {
        AdamConfig {
            learning_rate: if dp { self.dp_learning_rate } else { self.learning_rate },
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.epochs == 0 {
            p.push("train.epochs must be >= 1".into());
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("dp_learning_rate", self.dp_learning_rate),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("train.{name} = {v} must be finite and >= 0"));
            }
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AccountantConfig {
    /// Target δ. Unset means one over the training-set size.
    pub delta: Option<f64>,
    /// Stop DP training before any step that would push ε above this.
    pub eps_max: Option<f64>,
    /// If set, overrides `dp.noise_multiplier` with the smallest σ for which
    /// the full training run ends at ε ≤ target.
    pub target_epsilon: Option<f64>,
}

impl Default for AccountantConfig {
    fn default() -> Self {
        AccountantConfig {
            delta: None,
            eps_max: None,
            target_epsilon: None,
        }
    }
}

impl AccountantConfig {
    /// δ used for a training set of `n` examples.
    pub fn delta_for(&self, n: usize) -> f64 {
        self.delta.unwrap_or(1.0 / n.max(1) as f64)
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if let Some(d) = self.delta {
            if !(d > 0.0 && d < 1.0) {
                p.push(format!("accountant.delta = {d} outside (0, 1)"));
            }
        }
        for (name, v) in [("eps_max", self.eps_max), ("target_epsilon", self.target_epsilon)] {
            if let Some(v) = v {
                if !(v > 0.0) {
                    p.push(format!("accountant.{name} = {v} must be > 0"));
                }
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub chrf: ChrfParams,
    /// `[min ratio, score]` pairs for the LM score.
    pub lm_thresholds: LmThresholds,
    /// Generation budget beyond the reference middle length.
    pub extra_new_tokens: usize,
    /// Evaluate at most this many eval examples (0 = all).
    pub max_examples: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            chrf: ChrfParams::default(),
            lm_thresholds: LmThresholds::default(),
            extra_new_tokens: 8,
            max_examples: 0,
        }
    }
}

impl MetricsConfig {
    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.chrf.char_order + self.chrf.word_order == 0 {
            p.push("metrics.chrf needs at least one n-gram order".into());
        }
        if !(self.chrf.beta > 0.0) {
            p.push(format!("metrics.chrf.beta = {} must be > 0", self.chrf.beta));
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub strategies: Vec<Strategy>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            strategies: Strategy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ranks: Vec<usize>,
    pub eps_max: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            ranks: vec![4, 8, 16, 32, 64],
            eps_max: vec![4.0, 30.0, 100.0, 1000.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub dp: DpConfig,
    pub accountant: AccountantConfig,
    pub metrics: MetricsConfig,
    pub attack: AttackConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig {
                d_model: 48,
                n_layers: 2,
                n_heads: 4,
                context_len: 128,
                ..ModelConfig::default()
            },
            lora: LoraConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            dp: DpConfig {
                lot_size: 32,
                ..DpConfig::default()
            },
            accountant: AccountantConfig::default(),
            metrics: MetricsConfig::default(),
            attack: AttackConfig::default(),
            sweep: SweepConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    /// Parse and validate a config file. A relative corpus path is resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            if cfg.corpus.path.is_relative() {
                cfg.corpus.path = dir.join(&cfg.corpus.path);
            }
            if let Some(p) = cfg.corpus.public_path.as_mut().filter(|p| p.is_relative()) {
                *p = dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = self.corpus.problems();
        p.extend(self.model.problems());
        p.extend(self.lora.problems(&self.model));
        p.extend(self.pretrain.problems());
        p.extend(self.train.problems());
        p.extend(self.dp.problems());
        p.extend(self.accountant.problems());
        p.extend(self.metrics.problems());
        if self.attack.strategies.is_empty() {
            p.push("attack.strategies is empty".into());
        }
        if self.corpus.max_len > self.model.context_len {
            p.push(format!(
                "corpus.max_len = {} exceeds model.context_len = {}",
                self.corpus.max_len, self.model.context_len
            ));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }
}
