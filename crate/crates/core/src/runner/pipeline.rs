//! Pipeline stages as plain functions over in-memory data. The CLI commands
//! wrap these with file I/O; the acceptance suite calls them directly.

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::accountant::{noise_for_budget, AccountantState};
use crate::corpus::{self, build_splits, inject_duplicates, CorpusSplit, Document, FimExample};
use crate::dp_optimizer::{StepLog, StopReason, TrainMode, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, chrf_pp, lm_score, MetricReport};
use crate::mia::{self, AttackOutcome, Strategy};
use crate::model::{generate::generate_tokens, init_model, pretrain, ParameterSet};
use crate::rng::{substream, STREAM_DUPLICATES};
use crate::corpus::tokenizer;

/// Splits plus the training set with canary copies.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub split: CorpusSplit,
    /// Members with canaries repeated; this is what training iterates over.
    pub train_set: Vec<FimExample>,
    pub canary_ids: Vec<String>,
    pub fingerprint: String,
    pub public_fingerprint: Option<String>,
    pub n_documents: usize,
    pub n_public_documents: usize,
}

/// Splits `docs` and injects canaries. Examples built from `public_docs`, a
/// separate corpus that may be empty, are appended to the public split.
pub fn prepare_data(cfg: &ExperimentConfig, docs: &[Document], public_docs: &[Document]) -> Result<PreparedData> {
    let mut split = build_splits(docs, cfg.seed, cfg.corpus.fractions(), cfg.corpus.fim())?;
    split
        .public
        .extend(corpus::public_examples(public_docs, cfg.seed, cfg.corpus.fim())?);
    let mut rng = substream(cfg.seed, STREAM_DUPLICATES);
    let (train_set, canary_ids) = inject_duplicates(
        &split.members,
        cfg.corpus.canary_repeats,
        cfg.corpus.canary_fraction,
        &mut rng,
    )?;
    // canary flags belong on the member list too, for the attack
    let n = split.members.len();
    split.members = train_set[..n].to_vec();
    Ok(PreparedData {
        split,
        train_set,
        canary_ids,
        fingerprint: corpus::fingerprint(docs),
        public_fingerprint: (!public_docs.is_empty()).then(|| corpus::fingerprint(public_docs)),
        n_documents: docs.len(),
        n_public_documents: public_docs.len(),
    })
}

/// Initialize and pre-train the shared base model on the public split.
pub fn build_base(cfg: &ExperimentConfig, public: &[FimExample]) -> Result<(ParameterSet, Vec<f64>)> {
    let p = init_model(&cfg.model, &cfg.lora, cfg.seed)?;
    pretrain(p, public, &cfg.pretrain, cfg.seed)
}

/// Noise multiplier actually used: the configured value, or the smallest σ
/// reaching `target_epsilon` after the full run when that is set.
pub fn resolve_sigma(cfg: &ExperimentConfig, n_train: usize) -> Result<f64> {
    match cfg.accountant.target_epsilon {
        None => Ok(cfg.dp.noise_multiplier),
        Some(target) => {
            let q = cfg.dp.sampling_rate(n_train);
            let steps = total_steps(cfg, n_train);
            noise_for_budget(q, steps, cfg.accountant.delta_for(n_train), target)
        }
    }
}

pub fn total_steps(cfg: &ExperimentConfig, n_train: usize) -> u64 {
    (cfg.train.epochs * n_train.div_ceil(cfg.dp.lot_size)) as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub logs: Vec<StepLog>,
    pub stop: StopReason,
    pub sigma: Option<f64>,
    pub accountant: Option<AccountantState>,
    pub epsilon: Option<f64>,
}

/// Fine-tune the adapters of `base` for `train.epochs` epochs.
pub fn train(
    cfg: &ExperimentConfig,
    base: &ParameterSet,
    train_set: &[FimExample],
    mode: TrainMode,
    on_step: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    let mut dp = cfg.dp;
    let sigma = match mode {
        TrainMode::Dp => {
            dp.noise_multiplier = resolve_sigma(cfg, train_set.len())?;
            Some(dp.noise_multiplier)
        }
        TrainMode::Baseline => None,
    };
    let adam = cfg.train.adam(mode == TrainMode::Dp);
    let delta = cfg.accountant.delta_for(train_set.len());
    let mut t = Trainer::new(base.clone(), train_set, mode, dp, adam, delta, cfg.seed)?;
    let eps_max = match mode {
        TrainMode::Dp => cfg.accountant.eps_max,
        TrainMode::Baseline => None,
    };
    if let Some(e) = eps_max {
        if t.next_step_exceeds(e) {
            return Err(Error::BudgetExhausted(format!(
                "a single step already exceeds eps_max = {e} (sigma = {}, q = {})",
                dp.noise_multiplier,
                t.sampling_rate()
            )));
        }
    }
    let (logs, stop) = t.run_until(total_steps(cfg, train_set.len()), eps_max, on_step)?;
    let epsilon = t.epsilon();
    Ok(TrainOutcome {
        params: t.params,
        logs,
        stop,
        sigma,
        accountant: t.accountant,
        epsilon,
    })
}

/// Both attack strategies against `target`, with `reference` as the
/// calibration model.
pub fn attack(
    cfg: &ExperimentConfig,
    target: &ParameterSet,
    reference: &ParameterSet,
    members: &[FimExample],
    nonmembers: &[FimExample],
) -> Result<Vec<AttackOutcome>> {
    let unique = mia::unique_members(members);
    let table = mia::compute_losses(target, reference, &unique, nonmembers, cfg.seed)?;
    cfg.attack
        .strategies
        .iter()
        .map(|&s| mia::attack_from_losses(&table, s))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub chrf: f64,
    pub lm: f64,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub rows: Vec<EvalRow>,
    pub chrf: MetricReport,
    pub lm: MetricReport,
    /// Examples with an empty reference middle.
    pub excluded: Vec<String>,
}

/// Greedy completion of every eval example, scored against its middle.
pub fn evaluate(cfg: &ExperimentConfig, params: &ParameterSet, eval: &[FimExample]) -> Result<EvalOutcome> {
    let limit = match cfg.metrics.max_examples {
        0 => eval.len(),
        k => k.min(eval.len()),
    };
    if limit == 0 {
        return Err(Error::Invalid("eval split is empty".into()));
    }
    let mut rows = Vec::with_capacity(limit);
    let mut excluded = Vec::new();
    for ex in &eval[..limit] {
        let reference = tokenizer::detokenize_lossy(&ex.middle);
        let prompt = ex.prompt();
        let room = params.model.context_len.saturating_sub(prompt.len());
        let max_new = (ex.middle.len() + cfg.metrics.extra_new_tokens).min(room);
        let completion = tokenizer::detokenize_lossy(&generate_tokens(params, &prompt, max_new)?);
        match (
            chrf_pp(&completion, &reference, &cfg.metrics.chrf),
            lm_score(&completion, &reference, &cfg.metrics.lm_thresholds),
        ) {
            (Some(chrf), Some(lm)) => rows.push(EvalRow {
                id: ex.id.clone(),
                chrf,
                lm,
                completion,
            }),
            _ => excluded.push(ex.id.clone()),
        }
    }
    if rows.is_empty() {
        return Err(Error::Invalid("every eval example has an empty reference".into()));
    }
    let chrf = aggregate(&rows.iter().map(|r| r.chrf).collect::<Vec<_>>())?;
    let lm = aggregate(&rows.iter().map(|r| r.lm).collect::<Vec<_>>())?;
    Ok(EvalOutcome {
        rows,
        chrf,
        lm,
        excluded,
    })
}

pub fn find_outcome(outcomes: &[AttackOutcome], s: Strategy) -> Option<&AttackOutcome> {
    outcomes.iter().find(|o| o.strategy == s)
}
