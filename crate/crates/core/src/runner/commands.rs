//! The CLI commands. Each reads and writes files under a run directory:
//!
//! ```text
//! manifest.json
//! splits/{members,train,nonmembers,eval,public}.jsonl
//! checkpoints/{base,baseline,dp}.ck, {mode}_resume.ck
//! logs/{baseline,dp}_steps.csv
//! attack/{target}_{strategy}_records.csv, attack/{target}_{strategy}_roc.csv
//! metrics/{checkpoint}_metrics.csv, metrics/{checkpoint}_completions.jsonl
//! report/*.svg, report/summary.md
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::manifest::{
    AccountantSummary, AttackSummary, CheckpointRef, CorpusInfo, MetricSummary, PublicCorpusInfo, RunManifest,
    TrainSummary,
};
use super::pipeline;
use crate::corpus::{ingest_corpus, read_jsonl, synth, write_jsonl, FimExample};
use crate::dp_optimizer::{StepLog, StopReason, TrainMode, Trainer, STEP_LOG_HEADER};
use crate::error::{Error, Result};
use crate::mia::{AttackOutcome, RocCurve, RECORDS_HEADER};
use crate::model::checkpoint::Checkpoint;
use crate::model::ParameterSet;

pub const SPLIT_NAMES: [&str; 5] = ["members", "train", "nonmembers", "eval", "public"];

pub fn mode_name(mode: TrainMode) -> &'static str {
    match mode {
        TrainMode::Baseline => "baseline",
        TrainMode::Dp => "dp",
    }
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        ensure_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn split_path(run: &Path, name: &str) -> PathBuf {
    run.join("splits").join(format!("{name}.jsonl"))
}

pub fn checkpoint_path(run: &Path, name: &str) -> PathBuf {
    run.join("checkpoints").join(format!("{name}.ck"))
}

pub fn resume_path(run: &Path, mode: TrainMode) -> PathBuf {
    checkpoint_path(run, &format!("{}_resume", mode_name(mode)))
}

pub fn step_log_path(run: &Path, mode: TrainMode) -> PathBuf {
    run.join("logs").join(format!("{}_steps.csv", mode_name(mode)))
}

pub fn records_path(run: &Path, target: &str, strategy: &str) -> PathBuf {
    run.join("attack").join(format!("{target}_{strategy}_records.csv"))
}

pub fn roc_path(run: &Path, target: &str, strategy: &str) -> PathBuf {
    run.join("attack").join(format!("{target}_{strategy}_roc.csv"))
}

pub fn metrics_path(run: &Path, name: &str) -> PathBuf {
    run.join("metrics").join(format!("{name}_metrics.csv"))
}

/// Ingest, split, inject canaries, and write split files plus a manifest stub.
/// Configuration problems are reported before anything is written.
pub fn prepare(cfg: &ExperimentConfig, run: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let docs = ingest_corpus(&cfg.corpus.path, &cfg.corpus.extensions, cfg.corpus.max_bytes)?;
    if docs.is_empty() {
        return Err(Error::Invalid(format!(
            "no usable documents under {}",
            cfg.corpus.path.display()
        )));
    }
    let public_docs = match &cfg.corpus.public_path {
        Some(p) => {
            let d = ingest_corpus(p, &cfg.corpus.extensions, cfg.corpus.max_bytes)?;
            if d.is_empty() {
                return Err(Error::Invalid(format!("no usable documents under {}", p.display())));
            }
            d
        }
        None => Vec::new(),
    };
    let data = pipeline::prepare_data(cfg, &docs, &public_docs)?;
    ensure_dir(&run.join("splits"))?;
    let s = &data.split;
    for (name, exs) in SPLIT_NAMES
        .iter()
        .zip([&s.members, &data.train_set, &s.nonmembers, &s.eval, &s.public])
    {
        write_jsonl(&split_path(run, name), exs)?;
    }
    let mut m = RunManifest::new(cfg)?;
    m.corpus = Some(CorpusInfo {
        fingerprint: data.fingerprint.clone(),
        n_documents: data.n_documents,
        public_corpus: data.public_fingerprint.clone().map(|fingerprint| PublicCorpusInfo {
            fingerprint,
            n_documents: data.n_public_documents,
        }),
        members: s.members.len(),
        train_set: data.train_set.len(),
        nonmembers: s.nonmembers.len(),
        eval: s.eval.len(),
        public: s.public.len(),
        canaries: data.canary_ids.len(),
    });
    m.stamp("prepare");
    m.save(run)?;
    log::info!(
        "prepared {} documents: {} members ({} canaries), {} non-members, {} eval, {} public",
        data.n_documents,
        s.members.len(),
        data.canary_ids.len(),
        s.nonmembers.len(),
        s.eval.len(),
        s.public.len()
    );
    Ok(m)
}

fn checkpoint_ref(run: &Path, path: &Path, ck: &Checkpoint) -> CheckpointRef {
    CheckpointRef {
        path: path.strip_prefix(run).unwrap_or(path).display().to_string(),
        step: ck.step,
        base_hash: ck.params.base_hash(),
        adapter_hash: ck.params.adapter_hash(),
    }
}

/// Load the pre-trained base, training it first if no checkpoint exists.
pub fn ensure_base(cfg: &ExperimentConfig, run: &Path, m: &mut RunManifest) -> Result<ParameterSet> {
    let path = checkpoint_path(run, "base");
    if path.exists() {
        return Ok(Checkpoint::load(&path)?.params);
    }
    let public = read_jsonl(&split_path(run, "public"))?;
    let (params, losses) = pipeline::build_base(cfg, &public)?;
    let mut ck = Checkpoint::new(params);
    ck.meta = serde_json::json!({ "role": "pre-trained base", "pretrain": cfg.pretrain });
    ensure_dir(&run.join("checkpoints"))?;
    ck.save(&path)?;
    m.pretrain_losses = losses;
    m.checkpoints.insert("base".into(), checkpoint_ref(run, &path, &ck));
    m.stamp("pretrain");
    Ok(ck.params)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the last resumable checkpoint if one exists.
    pub resume: bool,
    /// Stop after this many total steps (simulates an interruption).
    pub max_steps: Option<u64>,
}

fn read_step_log(path: &Path) -> Result<Vec<StepLog>> {
    let text = fs::read_to_string(path).map_err(|_| Error::MissingInput(path.to_path_buf()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(StepLog::parse_csv_row)
        .collect()
}

/// Fine-tune adapters on the training set in the given mode.
pub fn train(cfg: &ExperimentConfig, run: &Path, mode: TrainMode, opts: TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut m = RunManifest::load(run)?;
    m.config = cfg.clone();
    let train_set = read_jsonl(&split_path(run, "train"))?;
    let base = ensure_base(cfg, run, &mut m)?;
    m.save(run)?;

    let mut dp = cfg.dp;
    if mode == TrainMode::Dp {
        dp.noise_multiplier = pipeline::resolve_sigma(cfg, train_set.len())?;
    }
    let adam = cfg.train.adam(mode == TrainMode::Dp);
    let delta = cfg.accountant.delta_for(train_set.len());
    let rpath = resume_path(run, mode);
    let (mut trainer, mut logs) = if opts.resume && rpath.exists() {
        let ck = Checkpoint::load(&rpath)?;
        let t = Trainer::resume(&ck, &train_set, mode, dp, adam, delta, cfg.seed)?;
        let mut logs = read_step_log(&step_log_path(run, mode))?;
        logs.retain(|l| l.step <= ck.step);
        log::info!("resuming {} training at step {}", mode_name(mode), ck.step);
        (t, logs)
    } else {
        (Trainer::new(base, &train_set, mode, dp, adam, delta, cfg.seed)?, Vec::new())
    };
    let eps_max = if mode == TrainMode::Dp { cfg.accountant.eps_max } else { None };
    if let Some(e) = eps_max {
        if trainer.step == 0 && trainer.next_step_exceeds(e) {
            return Err(Error::BudgetExhausted(format!(
                "one step at sigma = {}, q = {:.6}, delta = {delta:e} already exceeds eps_max = {e}",
                dp.noise_multiplier,
                trainer.sampling_rate()
            )));
        }
    }

    let total = pipeline::total_steps(cfg, train_set.len());
    let target = opts.max_steps.map_or(total, |s| s.min(total));
    let every = cfg.train.checkpoint_every;
    let mut stop = StopReason::Completed;
    while trainer.step < target {
        if let Some(e) = eps_max {
            if trainer.next_step_exceeds(e) {
                stop = StopReason::BudgetExhausted;
                break;
            }
        }
        let log = trainer.step()?;
        if trainer.step % 100 == 0 {
            log::info!(
                "{} step {}/{}: loss {:.4}, eps {:?}",
                mode_name(mode),
                log.step,
                total,
                log.loss,
                log.epsilon
            );
        }
        logs.push(log);
        if every > 0 && trainer.step % every == 0 {
            trainer.checkpoint().save(&rpath)?;
        }
    }

    let lpath = step_log_path(run, mode);
    let mut csv = String::from(STEP_LOG_HEADER);
    csv.push('\n');
    for l in &logs {
        csv.push_str(&l.csv_row());
        csv.push('\n');
    }
    write_file(&lpath, &csv)?;

    let ck = trainer.checkpoint();
    if trainer.step < total && stop == StopReason::Completed {
        // interrupted on request: leave a resumable checkpoint only
        ck.save(&rpath)?;
        log::info!("stopped at step {} of {total}; resume with --resume", trainer.step);
    } else {
        let cpath = checkpoint_path(run, mode_name(mode));
        ck.save(&cpath)?;
        m.checkpoints.insert(mode_name(mode).into(), checkpoint_ref(run, &cpath, &ck));
    }

    // sigma = 0 gives no finite epsilon: the summary then carries no accountant
    let acc = trainer.accountant.as_ref().filter(|a| a.sigma > 0.0);
    if trainer.accountant.is_some() && acc.is_none() {
        log::warn!("noise multiplier is 0: this run has no privacy guarantee");
    }
    let accountant = match acc {
        Some(acc) => {
            let (epsilon, best_order) = acc.epsilon(delta)?;
            Some(AccountantSummary {
                q: acc.q,
                sigma: acc.sigma,
                steps: acc.steps,
                delta,
                epsilon,
                best_order,
            })
        }
        None => None,
    };
    let epsilon_alt_delta = match acc {
        Some(acc) => {
            let alt = if cfg.accountant.delta.is_some() {
                1.0 / train_set.len() as f64
            } else {
                1e-5
            };
            Some((alt, acc.epsilon(alt)?.0))
        }
        None => None,
    };
    let summary = TrainSummary {
        steps: trainer.step,
        examples_seen: logs.iter().map(|l| l.realized_batch as u64).sum(),
        stopped_early: stop == StopReason::BudgetExhausted,
        final_loss: logs.iter().rev().map(|l| l.loss).find(|l| l.is_finite()).unwrap_or(0.0),
        accountant,
        epsilon_alt_delta,
    };
    m.training.insert(mode_name(mode).into(), summary.clone());
    m.stamp(&format!("train_{}", mode_name(mode)));
    m.save(run)?;
    Ok(summary)
}

fn write_attack_files(run: &Path, target: &str, o: &AttackOutcome) -> Result<()> {
    let name = o.strategy.name();
    let mut w = String::from(RECORDS_HEADER);
    w.push('\n');
    for r in &o.records {
        w.push_str(&r.csv_row());
        w.push('\n');
    }
    write_file(&records_path(run, target, name), &w)?;
    write_file(&roc_path(run, target, name), &roc_csv(&o.curve))
}

pub fn roc_csv(c: &RocCurve) -> String {
    let mut s = String::from("fpr,tpr\n");
    for (f, t) in &c.points {
        s.push_str(&format!("{f},{t}\n"));
    }
    s
}

pub fn parse_roc_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Invalid(format!("bad roc row {l:?}")))?;
            let p = |s: &str| s.parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {s:?}")));
            Ok((p(a)?, p(b)?))
        })
        .collect()
}

/// Attack each named target checkpoint, with the base as reference model.
pub fn attack(cfg: &ExperimentConfig, run: &Path, targets: &[String]) -> Result<BTreeMap<String, Vec<AttackOutcome>>> {
    let mut m = RunManifest::load(run)?;
    let base_path = checkpoint_path(run, "base");
    let reference = Checkpoint::load(&base_path)?.params;
    let members = read_jsonl(&split_path(run, "members"))?;
    let nonmembers = read_jsonl(&split_path(run, "nonmembers"))?;
    let mut out = BTreeMap::new();
    for target in targets {
        let ck = Checkpoint::load(&checkpoint_path(run, target))?;
        let outcomes = pipeline::attack(cfg, &ck.params, &reference, &members, &nonmembers)?;
        let mut summaries = BTreeMap::new();
        for o in &outcomes {
            write_attack_files(run, target, o)?;
            summaries.insert(
                o.strategy.name().to_string(),
                AttackSummary {
                    auc: o.curve.auc,
                    canary_auc: o.canary_curve.as_ref().map(|c| c.auc),
                    n_members: o.curve.n_members,
                    n_nonmembers: o.curve.n_nonmembers,
                    dropped: o.dropped.len(),
                },
            );
            log::info!("{target} / {}: AUC {:.4}", o.strategy.name(), o.curve.auc);
        }
        m.attacks.insert(target.clone(), summaries);
        out.insert(target.clone(), outcomes);
    }
    m.stamp("attack");
    m.save(run)?;
    Ok(out)
}

/// Greedy completions and utility metrics for each named checkpoint.
pub fn evaluate(cfg: &ExperimentConfig, run: &Path, names: &[String]) -> Result<BTreeMap<String, MetricSummary>> {
    let mut m = RunManifest::load(run)?;
    let eval: Vec<FimExample> = read_jsonl(&split_path(run, "eval"))?;
    let mut out = BTreeMap::new();
    for name in names {
        let ck = Checkpoint::load(&checkpoint_path(run, name))?;
        let res = pipeline::evaluate(cfg, &ck.params, &eval)?;
        let mut csv = String::from("example_id,chrf_pp,lm_score\n");
        for r in &res.rows {
            csv.push_str(&format!("{},{},{}\n", r.id, r.chrf, r.lm));
        }
        csv.push_str(&format!(
            "# chrf_pp mean {} stderr {} n {}\n# lm_score mean {} stderr {} n {}\n# excluded {}\n",
            res.chrf.mean, res.chrf.stderr, res.chrf.n, res.lm.mean, res.lm.stderr, res.lm.n, res.excluded.len()
        ));
        write_file(&metrics_path(run, name), &csv)?;
        let cpath = run.join("metrics").join(format!("{name}_completions.jsonl"));
        let mut w = BufWriter::new(fs::File::create(&cpath).map_err(|e| Error::io(&cpath, e))?);
        for r in &res.rows {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n").map_err(|e| Error::io(&cpath, e))?;
        }
        w.flush().map_err(|e| Error::io(&cpath, e))?;
        let summary = MetricSummary {
            chrf: res.chrf.clone(),
            lm: res.lm.clone(),
            excluded: res.excluded.len(),
        };
        log::info!("{name}: chrF++ {:.2} ± {:.2}, LM {:.3}", summary.chrf.mean, summary.chrf.stderr, summary.lm.mean);
        m.metrics.insert(name.clone(), summary.clone());
        out.insert(name.clone(), summary);
    }
    m.stamp("evaluate");
    m.save(run)?;
    Ok(out)
}

/// Cross-product of LoRA ranks and ε ceilings, one run directory per cell.
/// The base model is pre-trained once and shared; each cell gets fresh
/// adapters of its rank.
pub fn sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut cells = Vec::new();
    let shared = out.join("shared");
    prepare(cfg, &shared)?;
    let mut m = RunManifest::load(&shared)?;
    let base = ensure_base(cfg, &shared, &mut m)?;
    m.save(&shared)?;
    for &rank in &cfg.sweep.ranks {
        for &eps in &cfg.sweep.eps_max {
            let mut c = cfg.clone();
            c.lora.rank = rank;
            c.lora.alpha = cfg.lora.scaling() * rank as f64;
            c.accountant.eps_max = Some(eps);
            let dir = out.join(format!("r{rank}_eps{eps}"));
            log::info!("sweep cell {}", dir.display());
            prepare(&c, &dir)?;
            let mut ck = Checkpoint::new(base.with_fresh_adapters(c.lora, c.seed)?);
            ck.meta = serde_json::json!({ "role": "pre-trained base", "shared_from": "shared" });
            ck.save(&checkpoint_path(&dir, "base"))?;
            let mut cm = RunManifest::load(&dir)?;
            cm.checkpoints.insert("base".into(), checkpoint_ref(&dir, &checkpoint_path(&dir, "base"), &ck));
            cm.pretrain_losses = m.pretrain_losses.clone();
            cm.save(&dir)?;
            match train(&c, &dir, TrainMode::Dp, TrainOptions::default()) {
                Ok(_) => {
                    attack(&c, &dir, &["dp".to_string()])?;
                    evaluate(&c, &dir, &["dp".to_string()])?;
                }
                Err(Error::BudgetExhausted(msg)) => log::warn!("cell {}: {msg}", dir.display()),
                Err(e) => return Err(e),
            }
            cells.push(dir);
        }
    }
    Ok(cells)
}

/// Write a synthetic corpus of `n` snippet files.
pub fn synth_corpus(dir: &Path, n: usize, seed: u64) -> Result<()> {
    synth::write_corpus(dir, n, seed)
}
