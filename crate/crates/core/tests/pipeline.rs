use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use dpfim::dp_optimizer::{AdamConfig, DpConfig, StepLog, TrainMode, Trainer};
use dpfim::error::Error;
use dpfim::mia::{roc_and_auc, AttackRecord};
use dpfim::model::checkpoint::Checkpoint;
use dpfim::runner::commands::{self, checkpoint_path, records_path, step_log_path, TrainOptions};
use dpfim::runner::report;
use dpfim::runner::{ExperimentConfig, RunManifest};
use walkdir::WalkDir;

fn tiny_config(corpus: &Path, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = 5;
    c.corpus.path = corpus.to_path_buf();
    c.corpus.max_len = 80;
    c.model.d_model = 16;
    c.model.n_layers = 1;
    c.model.n_heads = 2;
    c.model.context_len = 96;
    c.lora.rank = 4;
    c.lora.alpha = 8.0;
    c.pretrain.epochs = 1;
    c.train.epochs = 2;
    c.dp.lot_size = 8;
    c.dp.noise_multiplier = 1.0;
    c.metrics.max_examples = 6;
    c.output.dir = out.to_path_buf();
    c
}

fn synth(dir: &Path, n: usize) -> PathBuf {
    let corpus = dir.join("corpus");
    commands::synth_corpus(&corpus, n, 1).unwrap();
    corpus
}

/// Every file under `dir` keyed by relative path; manifests lose timestamps.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in WalkDir::new(dir).sort_by_file_name() {
        let e = e.unwrap();
        if !e.file_type().is_file() {
            continue;
        }
        let rel = e.path().strip_prefix(dir).unwrap().display().to_string();
        let mut bytes = fs::read(e.path()).unwrap();
        if rel == "manifest.json" {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            v.as_object_mut().unwrap().remove("timestamps");
            bytes = serde_json::to_vec(&v).unwrap();
        }
        out.insert(rel, bytes);
    }
    out
}

fn full_pipeline(cfg: &ExperimentConfig, run: &Path) {
    commands::prepare(cfg, run).unwrap();
    commands::train(cfg, run, TrainMode::Baseline, TrainOptions::default()).unwrap();
    commands::train(cfg, run, TrainMode::Dp, TrainOptions::default()).unwrap();
    let targets = vec!["baseline".to_string(), "dp".to_string()];
    commands::attack(cfg, run, &targets).unwrap();
    commands::evaluate(cfg, run, &targets).unwrap();
    report::report(run).unwrap();
}

#[test]
fn full_pipeline_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 120);
    let run = tmp.path().join("run");
    let cfg = tiny_config(&corpus, &run);
    full_pipeline(&cfg, &run);
    let first = snapshot(&run);
    fs::remove_dir_all(&run).unwrap();
    full_pipeline(&cfg, &run);
    let second = snapshot(&run);
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (k, v) in &first {
        assert!(v == &second[k], "{k} differs between runs");
    }
    for f in ["report/loss_epsilon.svg", "report/roc.svg", "report/summary.md", "manifest.json"] {
        assert!(first.contains_key(f), "missing {f}");
    }

    // attack files parse back and reproduce the manifest AUC
    let m = RunManifest::load(&run).unwrap();
    for (target, by) in &m.attacks {
        for (strategy, s) in by {
            let text = fs::read_to_string(records_path(&run, target, strategy)).unwrap();
            let recs: Vec<AttackRecord> = text.lines().skip(1).map(|l| AttackRecord::parse_csv_row(l).unwrap()).collect();
            assert_eq!(roc_and_auc(&recs).unwrap().auc, s.auc);
        }
    }

    // every number in the summary table comes from the manifest
    let summary = fs::read_to_string(run.join("report/summary.md")).unwrap();
    let dp_auc = m.attacks["dp"]["calibrated"].auc;
    assert!(summary.contains(&format!("{dp_auc:.4}")));
    let eps = m.training["dp"].accountant.as_ref().unwrap().epsilon;
    assert!(summary.contains(&format!("{eps:.3}")));

    // the DP step log has a non-decreasing epsilon column
    let log = fs::read_to_string(step_log_path(&run, TrainMode::Dp)).unwrap();
    let eps: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| StepLog::parse_csv_row(l).unwrap().epsilon.unwrap())
        .collect();
    assert!(!eps.is_empty() && eps.windows(2).all(|w| w[1] >= w[0]));

    // regenerating the report is byte-identical
    let before = fs::read(run.join("report/roc.svg")).unwrap();
    report::report(&run).unwrap();
    assert_eq!(before, fs::read(run.join("report/roc.svg")).unwrap());
}

#[test]
fn prepare_is_deterministic_and_fails_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 60);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ma = commands::prepare(&tiny_config(&corpus, &a), &a).unwrap();
    let mb = commands::prepare(&tiny_config(&corpus, &b), &b).unwrap();
    assert_eq!(ma.corpus, mb.corpus);
    assert_eq!(
        fs::read(a.join("splits/train.jsonl")).unwrap(),
        fs::read(b.join("splits/train.jsonl")).unwrap()
    );

    let missing = tmp.path().join("no-such-corpus");
    let c = tiny_config(&missing, &tmp.path().join("c"));
    match commands::prepare(&c, &tmp.path().join("c")) {
        Err(Error::MissingInput(p)) => assert_eq!(p, missing),
        other => panic!("expected missing input, got {other:?}"),
    }

    let bad_dir = tmp.path().join("bad");
    let mut bad = tiny_config(&corpus, &bad_dir);
    bad.corpus.member_fraction = 0.9;
    assert!(matches!(commands::prepare(&bad, &bad_dir), Err(Error::Config(_))));
    assert!(!bad_dir.exists(), "nothing may be written on a config error");
}

#[test]
fn interrupted_training_resumes_to_identical_state() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 120);
    let run = tmp.path().join("run");
    let mut cfg = tiny_config(&corpus, &run);
    cfg.train.epochs = 50; // capped at 50 steps below
    cfg.train.checkpoint_every = 10;
    commands::prepare(&cfg, &run).unwrap();

    // library level: 50 steps straight vs 20 + checkpoint bytes + 30
    let train_set = dpfim::corpus::read_jsonl(&run.join("splits/train.jsonl")).unwrap();
    let base = dpfim::model::init_model(&cfg.model, &cfg.lora, 1).unwrap();
    let dp = DpConfig {
        lot_size: 8,
        ..DpConfig::default()
    };
    let adam = AdamConfig::default();
    let mut straight = Trainer::new(base.clone(), &train_set, TrainMode::Dp, dp, adam, 1e-5, 9).unwrap();
    straight.run_until(50, None, |_| {}).unwrap();
    let mut first = Trainer::new(base, &train_set, TrainMode::Dp, dp, adam, 1e-5, 9).unwrap();
    first.run_until(20, None, |_| {}).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::resume(&ck, &train_set, TrainMode::Dp, dp, adam, 1e-5, 9).unwrap();
    resumed.run_until(50, None, |_| {}).unwrap();
    assert_eq!(straight.params, resumed.params);
    assert_eq!(straight.opt.m, resumed.opt.m);
    assert_eq!(straight.epsilon(), resumed.epsilon());

    // command level: interrupted at 20 then resumed, against one 50-step run
    let whole = tmp.path().join("whole");
    fs::create_dir_all(&whole).unwrap();
    commands::prepare(&tiny_config(&corpus, &whole), &whole).unwrap();
    let opts = |resume, max| TrainOptions {
        resume,
        max_steps: Some(max),
    };
    commands::train(&cfg, &whole, TrainMode::Dp, opts(false, 50)).unwrap();
    commands::train(&cfg, &run, TrainMode::Dp, opts(false, 20)).unwrap();
    assert!(!checkpoint_path(&run, "dp").exists());
    // an interrupted run does not leave a final checkpoint, only the resume point
    let s = commands::train(&cfg, &run, TrainMode::Dp, opts(true, 50)).unwrap();
    assert_eq!(s.steps, 50);
    let ckpt_whole = Checkpoint::load(&commands::resume_path(&whole, TrainMode::Dp)).unwrap();
    let ckpt_run = Checkpoint::load(&commands::resume_path(&run, TrainMode::Dp)).unwrap();
    assert_eq!(ckpt_whole.params, ckpt_run.params);
    assert_eq!(
        fs::read(step_log_path(&whole, TrainMode::Dp)).unwrap(),
        fs::read(step_log_path(&run, TrainMode::Dp)).unwrap()
    );
}

#[test]
fn degenerate_dp_run_matches_baseline_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 60);
    let run = tmp.path().join("run");
    let mut cfg = tiny_config(&corpus, &run);
    cfg.corpus.canary_fraction = 0.0;
    commands::prepare(&cfg, &run).unwrap();
    let n = RunManifest::load(&run).unwrap().corpus.unwrap().train_set;
    cfg.dp = DpConfig {
        clip_norm: 1e9,
        noise_multiplier: 0.0,
        lot_size: n,
    };
    cfg.train.epochs = 5;
    cfg.train.dp_learning_rate = cfg.train.learning_rate;
    commands::train(&cfg, &run, TrainMode::Baseline, TrainOptions::default()).unwrap();
    commands::train(&cfg, &run, TrainMode::Dp, TrainOptions::default()).unwrap();
    let a = Checkpoint::load(&checkpoint_path(&run, "baseline")).unwrap();
    let b = Checkpoint::load(&checkpoint_path(&run, "dp")).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.optimizer, b.optimizer);
}

#[test]
fn baseline_only_report_notes_missing_epsilon_axis() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 60);
    let run = tmp.path().join("run");
    let cfg = tiny_config(&corpus, &run);
    commands::prepare(&cfg, &run).unwrap();
    commands::train(&cfg, &run, TrainMode::Baseline, TrainOptions::default()).unwrap();
    let out = report::report(&run).unwrap();
    let svg = fs::read_to_string(run.join("report/loss_epsilon.svg")).unwrap();
    assert!(svg.contains("no DP run: epsilon axis omitted"));
    assert!(out.gaps.iter().any(|g| g.contains("dp step log")));
    assert!(out.gaps.iter().any(|g| g.contains("no attack results")));
}

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dpfim")).args(args).output().unwrap()
}

#[test]
fn cli_exit_codes_and_print_config() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cli(&["print-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let parsed = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, ExperimentConfig::default());

    // missing corpus directory: exit 3, message names the path
    let cfg_path = tmp.path().join("c.toml");
    fs::write(&cfg_path, "[corpus]\npath = \"absent-dir\"\n").unwrap();
    let run = tmp.path().join("run");
    let out = cli(&["prepare", "--config", cfg_path.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent-dir"));

    // invalid config: exit 2, every problem listed
    fs::write(&cfg_path, "[dp]\nclip_norm = -1.0\nlot_size = 0\n").unwrap();
    let out = cli(&["prepare", "--config", cfg_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clip_norm") && err.contains("lot_size"), "{err}");

    // missing checkpoint: nonzero exit naming the path
    let out = cli(&["attack", "--out", run.to_str().unwrap(), "--target", "dp"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn cli_budget_exhausted_at_step_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 60);
    let run = tmp.path().join("run");
    let mut cfg = tiny_config(&corpus, &run);
    cfg.accountant.eps_max = Some(0.01);
    let cfg_path = tmp.path().join("c.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let c = cfg_path.to_str().unwrap();
    assert!(cli(&["prepare", "--config", c]).status.success());
    let out = cli(&["train", "--mode", "dp", "--config", c]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eps_max"));
}

#[test]
fn separate_public_corpus_feeds_only_pretraining() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = synth(tmp.path(), 60);
    let public = tmp.path().join("public");
    commands::synth_corpus(&public, 40, 2).unwrap();
    let run = tmp.path().join("run");
    let mut cfg = tiny_config(&corpus, &run);
    let plain = commands::prepare(&cfg, &tmp.path().join("plain")).unwrap().corpus.unwrap();
    cfg.corpus.public_path = Some(public.clone());
    let with = commands::prepare(&cfg, &run).unwrap().corpus.unwrap();

    // the private splits are unchanged; the public split grows by the new corpus
    assert_eq!((with.members, with.nonmembers, with.eval), (plain.members, plain.nonmembers, plain.eval));
    assert_eq!(with.public, plain.public + 40);
    assert_eq!(with.public_corpus.as_ref().unwrap().n_documents, 40);
    let pub_split = dpfim::corpus::read_jsonl(&run.join("splits/public.jsonl")).unwrap();
    assert_eq!(pub_split.iter().filter(|e| e.id.starts_with("public/")).count(), 40);

    cfg.corpus.public_path = Some(tmp.path().join("nowhere"));
    assert!(matches!(commands::prepare(&cfg, &run), Err(Error::MissingInput(_))));
}
