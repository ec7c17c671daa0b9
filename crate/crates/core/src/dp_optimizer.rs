//! DP-SGD: per-example clipping, noisy aggregation, Poisson lot sampling and
//! AdamW updates on the adapter parameters, plus the non-private baseline loop
//! that shares the same gradient path.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::accountant::AccountantState;
use crate::corpus::FimExample;
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::model::{per_example_gradients, Batch, ParameterSet};
use crate::rng::{substream, RngState, STREAM_NOISE, STREAM_SAMPLING};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Expected lot size B; the sampling rate is `B / N`.
    pub lot_size: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        DpConfig {
            clip_norm: 0.5,
            noise_multiplier: 0.2746,
            lot_size: 32,
        }
    }
}

impl DpConfig {
    pub fn sampling_rate(&self, n: usize) -> f64 {
        (self.lot_size as f64 / n as f64).min(1.0)
    }

    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.clip_norm > 0.0) {
            p.push(format!("dp.clip_norm must be > 0, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            p.push(format!("dp.noise_multiplier must be >= 0, got {}", self.noise_multiplier));
        }
        if self.lot_size == 0 {
            p.push("dp.lot_size must be >= 1".into());
        }
        p
    }
}

pub fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `g · min(1, C/‖g‖₂)`. Vectors already within the bound are returned as-is.
pub fn clip(g: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= c {
        return g.to_vec();
    }
    let scale = c / norm;
    let mut out: Vec<f64> = g.iter().map(|x| x * scale).collect();
    // rounding can leave the scaled norm a few ulps above C
    while l2_norm(&out) > c {
        for x in &mut out {
            *x *= 1.0 - 1e-15;
        }
    }
    out
}

/// `(Σ clipped + z) / B` with `z ~ N(0, σ²C² I)`.
///
/// Division is by the expected lot size, not the realized batch size. With
/// `σ = 0` no noise is drawn.
pub fn noisy_aggregate(
    clipped: &[Vec<f64>],
    dim: usize,
    c: f64,
    sigma: f64,
    lot_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; dim];
    for (i, g) in clipped.iter().enumerate() {
        if g.len() != dim {
            return Err(Error::Invalid(format!("gradient {i} has length {}, expected {dim}", g.len())));
        }
        let norm = l2_norm(g);
        if norm > c + 1e-9 {
            return Err(Error::Numeric(format!(
                "gradient {i} has norm {norm} above clip bound {c}: clipping skipped upstream"
            )));
        }
        for (s, x) in sum.iter_mut().zip(g) {
            *s += x;
        }
    }
    if sigma > 0.0 {
        let std = sigma * c;
        for s in &mut sum {
            let z: f64 = rng.sample(StandardNormal);
            *s += std * z;
        }
    }
    let b = lot_size as f64;
    Ok(sum.into_iter().map(|s| s / b).collect())
}

/// Indices (ascending) of members included independently with probability `q`.
pub fn poisson_sample(n: usize, q: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if q >= 1.0 {
        return (0..n).collect();
    }
    (0..n).filter(|_| rng.gen::<f64>() < q).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            t: self.t,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn from_snapshot(s: &OptimizerSnapshot) -> Self {
        OptimizerState {
            m: s.m.clone(),
            v: s.v.clone(),
            t: s.t,
        }
    }
}

/// One bias-corrected AdamW update of `weights` in place.
pub fn adamw_update(state: &mut OptimizerState, weights: &mut [f64], grad: &[f64], cfg: &AdamConfig) -> Result<()> {
    if grad.len() != weights.len() || state.m.len() != weights.len() {
        return Err(Error::Invalid(format!(
            "gradient length {} does not match {} trainable parameters",
            grad.len(),
            weights.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..weights.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        let w = weights[i];
        let next = w - cfg.learning_rate * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * w);
        if !next.is_finite() {
            return Err(Error::Numeric(format!("non-finite AdamW update at step {}", state.t)));
        }
        weights[i] = next;
    }
    Ok(())
}

/// AdamW on the adapter scalars; the base weights are carried over untouched.
pub fn adamw_step(
    state: &OptimizerState,
    params: &ParameterSet,
    grad: &[f64],
    cfg: &AdamConfig,
) -> Result<(OptimizerState, ParameterSet)> {
    let mut state = state.clone();
    let mut params = params.clone();
    adamw_update(&mut state, &mut params.adapters, grad, cfg)?;
    Ok((state, params))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Baseline,
    Dp,
}

/// One row of the step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub realized_batch: usize,
    pub mean_preclip_norm: f64,
    pub frac_clipped: f64,
    pub loss: f64,
    /// Cumulative ε after this step (DP mode only).
    pub epsilon: Option<f64>,
    /// Largest post-clip norm entering aggregation (DP mode only).
    pub max_postclip_norm: f64,
}

pub const STEP_LOG_HEADER: &str = "step,realized_batch,mean_preclip_norm,frac_clipped,loss,epsilon";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.realized_batch,
            self.mean_preclip_norm,
            self.frac_clipped,
            self.loss,
            self.epsilon.map(|e| e.to_string()).unwrap_or_default()
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<StepLog> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Invalid(format!("step log row has {} fields: {line}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {s:?} in step log")));
        Ok(StepLog {
            step: f[0].parse().map_err(|_| Error::Invalid(format!("bad step {:?}", f[0])))?,
            realized_batch: f[1].parse().map_err(|_| Error::Invalid(format!("bad batch {:?}", f[1])))?,
            mean_preclip_norm: num(f[2])?,
            frac_clipped: num(f[3])?,
            loss: num(f[4])?,
            epsilon: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            max_postclip_norm: f64::NAN,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Completed,
    BudgetExhausted,
}

/// Training loop state for either mode. Advances one optimizer step at a time
/// and can be checkpointed and resumed between steps.
pub struct Trainer<'a> {
    pub params: ParameterSet,
    pub opt: OptimizerState,
    pub mode: TrainMode,
    pub dp: DpConfig,
    pub adam: AdamConfig,
    pub accountant: Option<AccountantState>,
    pub delta: f64,
    pub step: u64,
    members: &'a [FimExample],
    seed: u64,
    sampling: ChaCha8Rng,
    noise: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(
        params: ParameterSet,
        members: &'a [FimExample],
        mode: TrainMode,
        dp: DpConfig,
        adam: AdamConfig,
        delta: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut problems = dp.problems();
        if members.is_empty() {
            problems.push("member set is empty".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let accountant = match mode {
            TrainMode::Dp => Some(AccountantState::new(dp.sampling_rate(members.len()), dp.noise_multiplier)?),
            TrainMode::Baseline => None,
        };
        let dim = params.trainable_dim();
        Ok(Trainer {
            params,
            opt: OptimizerState::new(dim),
            mode,
            dp,
            adam,
            accountant,
            delta,
            step: 0,
            members,
            seed,
            sampling: substream(seed, STREAM_SAMPLING),
            noise: substream(seed, STREAM_NOISE),
        })
    }

    /// Rebuild a trainer from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(
        ck: &Checkpoint,
        members: &'a [FimExample],
        mode: TrainMode,
        dp: DpConfig,
        adam: AdamConfig,
        delta: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut t = Trainer::new(ck.params.clone(), members, mode, dp, adam, delta, seed)?;
        t.step = ck.step;
        if let Some(o) = &ck.optimizer {
            t.opt = OptimizerState::from_snapshot(o);
        }
        let restore = |name: &str| -> Result<Option<ChaCha8Rng>> {
            match ck.rngs.get(name) {
                Some(s) => s
                    .restore()
                    .map(Some)
                    .ok_or_else(|| Error::Checkpoint(format!("bad rng state for {name}"))),
                None => Ok(None),
            }
        };
        if let Some(r) = restore(STREAM_SAMPLING)? {
            t.sampling = r;
        }
        if let Some(r) = restore(STREAM_NOISE)? {
            t.noise = r;
        }
        if let Some(acc) = &mut t.accountant {
            *acc = acc.accumulate(ck.step);
        }
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.params.clone());
        ck.step = self.step;
        ck.optimizer = Some(self.opt.snapshot());
        ck.rngs.insert(STREAM_SAMPLING.into(), RngState::capture(&self.sampling));
        ck.rngs.insert(STREAM_NOISE.into(), RngState::capture(&self.noise));
        ck.meta = serde_json::json!({
            "mode": self.mode,
            "dp": self.dp,
            "adam": self.adam,
            "delta": self.delta,
            "accountant_steps": self.accountant.as_ref().map(|a| a.steps),
            "sampling_rate": self.sampling_rate(),
        });
        ck
    }

    pub fn n_members(&self) -> usize {
        self.members.len()
    }

    pub fn sampling_rate(&self) -> f64 {
        self.dp.sampling_rate(self.members.len())
    }

    /// Optimizer steps in one pass over the members: `ceil(N / B)`.
    pub fn steps_per_epoch(&self) -> u64 {
        self.members.len().div_ceil(self.dp.lot_size) as u64
    }

    pub fn epsilon(&self) -> Option<f64> {
        self.accountant
            .as_ref()
            .and_then(|a| a.epsilon(self.delta).ok().map(|(e, _)| e))
    }

    fn baseline_batch(&self) -> Vec<usize> {
        let per_epoch = self.steps_per_epoch();
        let epoch = self.step / per_epoch;
        let k = (self.step % per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.members.len()).collect();
        order.shuffle(&mut substream(self.seed, &format!("{STREAM_SAMPLING}/epoch{epoch}")));
        let b = self.dp.lot_size;
        let mut idx = order[k * b..((k + 1) * b).min(order.len())].to_vec();
        idx.sort_unstable();
        idx
    }

    /// Whether one more DP step would push ε past `eps_max`.
    pub fn next_step_exceeds(&self, eps_max: f64) -> bool {
        match &self.accountant {
            Some(acc) => match acc.accumulate(1).epsilon(self.delta) {
                Ok((e, _)) => e > eps_max,
                Err(_) => true,
            },
            None => false,
        }
    }

    /// One optimizer step.
    pub fn step(&mut self) -> Result<StepLog> {
        let idx = match self.mode {
            TrainMode::Baseline => self.baseline_batch(),
            TrainMode::Dp => poisson_sample(self.members.len(), self.sampling_rate(), &mut self.sampling),
        };
        let dim = self.params.trainable_dim();
        let batch = Batch::new(idx.iter().map(|&i| &self.members[i]).collect());
        let grads = if batch.is_empty() {
            Vec::new()
        } else {
            per_example_gradients(&self.params, &batch)?
        };
        let n = grads.len();
        let norms: Vec<f64> = grads.iter().map(|(_, g)| l2_norm(g)).collect();
        let loss = if n == 0 {
            f64::NAN
        } else {
            grads.iter().map(|(l, _)| l).sum::<f64>() / n as f64
        };
        let mean_norm = if n == 0 { f64::NAN } else { norms.iter().sum::<f64>() / n as f64 };

        let (update, frac_clipped, max_post) = match self.mode {
            TrainMode::Baseline => {
                let mut sum = vec![0.0; dim];
                for (_, g) in &grads {
                    for (s, x) in sum.iter_mut().zip(g) {
                        *s += x;
                    }
                }
                let b = n.max(1) as f64;
                (sum.into_iter().map(|s| s / b).collect::<Vec<_>>(), 0.0, f64::NAN)
            }
            TrainMode::Dp => {
                let c = self.dp.clip_norm;
                let clipped: Vec<Vec<f64>> = grads.iter().map(|(_, g)| clip(g, c)).collect();
                let max_post = clipped.iter().map(|g| l2_norm(g)).fold(0.0, f64::max);
                if max_post > c + 1e-9 {
                    return Err(Error::Numeric(format!(
                        "post-clip norm {max_post} exceeds C = {c} at step {}",
                        self.step
                    )));
                }
                let frac = if n == 0 {
                    0.0
                } else {
                    norms.iter().filter(|&&x| x > c).count() as f64 / n as f64
                };
                let agg = noisy_aggregate(&clipped, dim, c, self.dp.noise_multiplier, self.dp.lot_size, &mut self.noise)?;
                (agg, frac, max_post)
            }
        };
        adamw_update(&mut self.opt, &mut self.params.adapters, &update, &self.adam)?;
        self.step += 1;
        if let Some(acc) = &mut self.accountant {
            *acc = acc.accumulate(1);
        }
        Ok(StepLog {
            step: self.step,
            realized_batch: n,
            mean_preclip_norm: mean_norm,
            frac_clipped,
            loss,
            epsilon: self.epsilon(),
            max_postclip_norm: max_post,
        })
    }

    /// Run until `target_steps` total steps, stopping early (before the
    /// offending step) if a DP step would exceed `eps_max`.
    pub fn run_until(
        &mut self,
        target_steps: u64,
        eps_max: Option<f64>,
        mut on_step: impl FnMut(&StepLog),
    ) -> Result<(Vec<StepLog>, StopReason)> {
        let mut logs = Vec::new();
        while self.step < target_steps {
            if let Some(e) = eps_max {
                if self.next_step_exceeds(e) {
                    return Ok((logs, StopReason::BudgetExhausted));
                }
            }
            let log = self.step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok((logs, StopReason::Completed))
    }
}

/// One pass over the members (`ceil(N/B)` steps) of DP-SGD with budget early
/// stop. Returns the updated parameters together with the accountant and the
/// step log.
pub fn dp_train_epoch(
    params: ParameterSet,
    members: &[FimExample],
    dp: DpConfig,
    adam: AdamConfig,
    delta: f64,
    eps_max: f64,
    seed: u64,
) -> Result<(ParameterSet, AccountantState, Vec<StepLog>)> {
    let mut t = Trainer::new(params, members, TrainMode::Dp, dp, adam, delta, seed)?;
    let steps = t.steps_per_epoch();
    let (logs, _) = t.run_until(steps, Some(eps_max), |_| {})?;
    let acc = t.accountant.take().expect("dp mode has an accountant");
    Ok((t.params, acc, logs))
}
