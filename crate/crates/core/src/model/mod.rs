//! Tiny pre-norm decoder-only transformer with LoRA adapters on the query and
//! value projections, with hand-written backpropagation in `f64`.
//!
//! Weights live in two flat vectors: `base` (every transformer weight) and
//! `adapters` (all LoRA factors). Layout structs map names to index ranges.

pub mod checkpoint;
pub mod generate;
pub mod pretrain;
pub mod transformer;

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use generate::generate_completion;
pub use pretrain::{pretrain, PretrainConfig};
pub use transformer::{forward_loss, logits_all, loss_and_grad, per_example_gradients, Batch, GradRequest, LossReport};

use crate::corpus::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};
use crate::rng::{substream, STREAM_INIT, STREAM_INIT_ADAPTERS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            context_len: 256,
            ffn_mult: 4,
        }
    }
}

impl ModelConfig {
    pub fn d_ffn(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.vocab_size != VOCAB_SIZE {
            p.push(format!("model.vocab_size must be {VOCAB_SIZE}, got {}", self.vocab_size));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.ffn_mult == 0 {
            p.push("model dimensions must be positive".into());
        } else if self.d_model % self.n_heads != 0 {
            p.push(format!(
                "model.d_model {} not divisible by model.n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.context_len < 8 {
            p.push(format!("model.context_len {} too small", self.context_len));
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scaling numerator; the adapter output is multiplied by `alpha / rank`.
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn problems(&self, model: &ModelConfig) -> Vec<String> {
        let mut p = Vec::new();
        if self.rank == 0 || self.rank > model.d_model {
            p.push(format!(
                "lora.rank must be in 1..={}, got {}",
                model.d_model, self.rank
            ));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            p.push(format!("lora.alpha must be positive, got {}", self.alpha));
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct LayerLayout {
    pub norm1: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub norm2: Range<usize>,
    pub w1: Range<usize>,
    pub w2: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct BaseLayout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub norm_f: Range<usize>,
    pub head: Range<usize>,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct AdapterLayout {
    /// Per layer: (A_q, B_q, A_v, B_v). A is `rank × d_model`, B is `d_model × rank`.
    pub layers: Vec<[Range<usize>; 4]>,
    pub len: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

impl BaseLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (v, d, f) = (cfg.vocab_size, cfg.d_model, cfg.d_ffn());
        let mut c = Cursor(0);
        let tok_emb = c.take(v * d);
        let pos_emb = c.take(cfg.context_len * d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerLayout {
                norm1: c.take(d),
                wq: c.take(d * d),
                wk: c.take(d * d),
                wv: c.take(d * d),
                wo: c.take(d * d),
                norm2: c.take(d),
                w1: c.take(f * d),
                w2: c.take(d * f),
            })
            .collect();
        let norm_f = c.take(d);
        let head = c.take(v * d);
        BaseLayout {
            tok_emb,
            pos_emb,
            layers,
            norm_f,
            head,
            len: c.0,
        }
    }
}

impl AdapterLayout {
    pub fn new(cfg: &ModelConfig, lora: &LoraConfig) -> Self {
        let (d, r) = (cfg.d_model, lora.rank);
        let mut c = Cursor(0);
        let layers = (0..cfg.n_layers)
            .map(|_| [c.take(r * d), c.take(d * r), c.take(r * d), c.take(d * r)])
            .collect();
        AdapterLayout { layers, len: c.0 }
    }
}

/// Frozen base weights plus trainable low-rank adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub base: Vec<f64>,
    pub adapters: Vec<f64>,
}

impl ParameterSet {
    pub fn base_layout(&self) -> BaseLayout {
        BaseLayout::new(&self.model)
    }

    pub fn adapter_layout(&self) -> AdapterLayout {
        AdapterLayout::new(&self.model, &self.lora)
    }

    /// Number of trainable adapter scalars.
    pub fn trainable_dim(&self) -> usize {
        self.adapters.len()
    }

    pub fn base_hash(&self) -> String {
        hash_f64(&self.base)
    }

    pub fn adapter_hash(&self) -> String {
        hash_f64(&self.adapters)
    }

    /// Replace the adapters with a fresh initialization for `lora`.
    pub fn with_fresh_adapters(&self, lora: LoraConfig, seed: u64) -> Result<ParameterSet> {
        let problems = lora.problems(&self.model);
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(ParameterSet {
            model: self.model,
            lora,
            base: self.base.clone(),
            adapters: init_adapters(&self.model, &lora, seed),
        })
    }
}

pub fn hash_f64(xs: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in xs {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn fill_normal<R: Rng>(out: &mut [f64], std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).expect("finite std");
    for x in out {
        *x = dist.sample(rng);
    }
}

/// Adapter init: every A from N(0, (1/rank)^2), every B zero.
pub fn init_adapters(cfg: &ModelConfig, lora: &LoraConfig, seed: u64) -> Vec<f64> {
    let layout = AdapterLayout::new(cfg, lora);
    let mut rng = substream(seed, STREAM_INIT_ADAPTERS);
    let mut adapters = vec![0.0; layout.len];
    let std = 1.0 / lora.rank as f64;
    for [aq, _, av, _] in &layout.layers {
        fill_normal(&mut adapters[aq.clone()], std, &mut rng);
        fill_normal(&mut adapters[av.clone()], std, &mut rng);
    }
    adapters
}

/// Scaled-normal init (std 0.02; residual output projections additionally
/// scaled by `1/sqrt(2 n_layers)`), unit norm gains, zero-output adapters.
pub fn init_model(cfg: &ModelConfig, lora: &LoraConfig, seed: u64) -> Result<ParameterSet> {
    let mut problems = cfg.problems();
    if problems.is_empty() {
        problems.extend(lora.problems(cfg));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let layout = BaseLayout::new(cfg);
    let mut rng = substream(seed, STREAM_INIT);
    let mut base = vec![0.0; layout.len];
    let std = 0.02;
    let resid_std = std / (2.0 * cfg.n_layers as f64).sqrt();
    fill_normal(&mut base[layout.tok_emb.clone()], std, &mut rng);
    fill_normal(&mut base[layout.pos_emb.clone()], std, &mut rng);
    for l in &layout.layers {
        base[l.norm1.clone()].fill(1.0);
        fill_normal(&mut base[l.wq.clone()], std, &mut rng);
        fill_normal(&mut base[l.wk.clone()], std, &mut rng);
        fill_normal(&mut base[l.wv.clone()], std, &mut rng);
        fill_normal(&mut base[l.wo.clone()], resid_std, &mut rng);
        base[l.norm2.clone()].fill(1.0);
        fill_normal(&mut base[l.w1.clone()], std, &mut rng);
        fill_normal(&mut base[l.w2.clone()], resid_std, &mut rng);
    }
    base[layout.norm_f.clone()].fill(1.0);
    fill_normal(&mut base[layout.head.clone()], std, &mut rng);

    Ok(ParameterSet {
        model: *cfg,
        lora: *lora,
        base,
        adapters: init_adapters(cfg, lora, seed),
    })
}
