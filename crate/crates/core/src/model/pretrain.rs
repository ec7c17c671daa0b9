//! Non-private pre-training of the base weights on the public split. This
//! stands in for the large pre-trained model that fine-tuning starts from.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::transformer::{loss_and_grad, GradRequest};
use super::ParameterSet;
use crate::corpus::FimExample;
use crate::dp_optimizer::{adamw_update, AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::rng::{substream, STREAM_PRETRAIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 3e-3,
        }
    }
}

impl PretrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.batch_size == 0 {
            p.push("pretrain.batch_size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0) {
            p.push(format!("pretrain.learning_rate {} must be >= 0", self.learning_rate));
        }
        p
    }
}

/// Train every base weight with AdamW on mean minibatch gradients. Adapters
/// are left untouched. Returns the trained parameters and the mean loss of
/// each epoch.
pub fn pretrain(
    mut params: ParameterSet,
    public: &[FimExample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(ParameterSet, Vec<f64>)> {
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    if cfg.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    if public.is_empty() {
        return Err(Error::Invalid("pre-training needs a non-empty public split".into()));
    }
    let adam = AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(params.base.len());
    let mut rng = substream(seed, STREAM_PRETRAIN);
    let mut order: Vec<usize> = (0..public.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut counted) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.base.len()];
            let mut n = 0usize;
            for &i in chunk {
                if let Some((l, g)) = loss_and_grad(&params, &public[i], GradRequest::BASE)? {
                    for (s, x) in grad.iter_mut().zip(g.base.expect("base grads requested")) {
                        *s += x;
                    }
                    total += l;
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            counted += n;
            grad.iter_mut().for_each(|g| *g /= n as f64);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite pre-training gradient in epoch {epoch}")));
            }
            adamw_update(&mut opt, &mut params.base, &grad, &adam)?;
        }
        let mean = total / counted.max(1) as f64;
        log::info!("pretrain epoch {epoch}: mean loss {mean:.4}");
        epoch_losses.push(mean);
    }
    Ok((params, epoch_losses))
}
