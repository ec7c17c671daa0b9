use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use dpfim::accountant::AccountantState;
use dpfim::dp_optimizer::TrainMode;
use dpfim::runner::commands::{self, checkpoint_path, TrainOptions};
use dpfim::runner::report;
use dpfim::runner::{ExperimentConfig, RunManifest};
use dpfim::{Error, Result};

/// Desk-scale DP fine-tuning of a fill-in-the-middle code model, with
/// privacy accounting and membership-inference auditing.
#[derive(Parser, Debug)]
#[command(name = "dpfim", version)]
struct Cli {
    /// TOML experiment config. Without it, stage commands reuse the config
    /// recorded in the run manifest, falling back to built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Run directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Log progress at info level.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Baseline,
    Dp,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Baseline => TrainMode::Baseline,
            Mode::Dp => TrainMode::Dp,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest the corpus, build FIM splits and inject canaries.
    Prepare,
    /// Fine-tune adapters (pre-trains the shared base first if needed).
    Train {
        #[arg(long, value_enum)]
        mode: Mode,
        /// Continue from the last resumable checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps, leaving a resumable checkpoint.
        #[arg(long)]
        max_steps: Option<u64>,
    },
    /// Membership inference against trained checkpoints, base as reference.
    Attack {
        /// Checkpoint names to attack (default: every trained model present).
        #[arg(long = "target")]
        targets: Vec<String>,
    },
    /// Greedy completions and ChrF++ / LM scores on the eval split.
    Evaluate {
        /// Checkpoint names to evaluate (default: base and every trained model).
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
    },
    /// Regenerate SVG plots and the markdown summary.
    Report,
    /// Print the effective configuration, every default included.
    PrintConfig,
    /// Run the rank × ε_max grid, one run directory per cell.
    Sweep,
    /// prepare, train both modes, attack, evaluate and report in one go.
    Run,
    /// Write a synthetic Kotlin-like corpus.
    SynthCorpus {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
    },
    /// Print the per-order ε table for given accountant parameters.
    Epsilon {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
    },
}

fn resolve_config(cli: &Cli, use_manifest: bool) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    let run = cfg.output.dir.clone();
    if cli.config.is_none() && use_manifest {
        if let Ok(m) = RunManifest::load(&run) {
            cfg = m.config;
            cfg.output.dir = run.clone();
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, run))
}

fn trained_models(run: &Path) -> Vec<String> {
    ["baseline", "dp"]
        .into_iter()
        .filter(|n| checkpoint_path(run, n).exists())
        .map(String::from)
        .collect()
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::PrintConfig => {
            let (cfg, _) = resolve_config(cli, false)?;
            println!("# effective configuration; unset optional keys:");
            println!("#   accountant.delta          (default: 1 / training-set size)");
            println!("#   accountant.eps_max        (default: no early stop)");
            println!("#   accountant.target_epsilon (default: use dp.noise_multiplier as is)");
            print!("{}", cfg.to_toml());
        }
        Command::Prepare => {
            let (cfg, run) = resolve_config(cli, false)?;
            let m = commands::prepare(&cfg, &run)?;
            if let Some(c) = m.corpus {
                println!("corpus fingerprint {}", c.fingerprint);
            }
        }
        Command::Train {
            mode,
            resume,
            max_steps,
        } => {
            let (cfg, run) = resolve_config(cli, true)?;
            let opts = TrainOptions {
                resume: *resume,
                max_steps: *max_steps,
            };
            let s = commands::train(&cfg, &run, (*mode).into(), opts)?;
            match &s.accountant {
                Some(a) => println!(
                    "{} steps, final loss {:.4}, epsilon {:.3} (delta {:e}){}",
                    s.steps,
                    s.final_loss,
                    a.epsilon,
                    a.delta,
                    if s.stopped_early { ", stopped at budget" } else { "" }
                ),
                None => println!("{} steps, final loss {:.4}", s.steps, s.final_loss),
            }
        }
        Command::Attack { targets } => {
            let (cfg, run) = resolve_config(cli, true)?;
            let targets = if targets.is_empty() { trained_models(&run) } else { targets.clone() };
            if targets.is_empty() {
                return Err(Error::MissingInput(checkpoint_path(&run, "baseline")));
            }
            for (t, outcomes) in commands::attack(&cfg, &run, &targets)? {
                for o in outcomes {
                    println!("{t} {}: AUC {:.4}", o.strategy.name(), o.curve.auc);
                }
            }
        }
        Command::Evaluate { checkpoints } => {
            let (cfg, run) = resolve_config(cli, true)?;
            let names = if checkpoints.is_empty() {
                let mut v = vec!["base".to_string()];
                v.extend(trained_models(&run));
                v
            } else {
                checkpoints.clone()
            };
            for (n, s) in commands::evaluate(&cfg, &run, &names)? {
                println!(
                    "{n}: chrF++ {:.2} ± {:.2}, LM {:.3} ± {:.3}",
                    s.chrf.mean, s.chrf.stderr, s.lm.mean, s.lm.stderr
                );
            }
        }
        Command::Report => {
            let (_, run) = resolve_config(cli, true)?;
            let out = report::report(&run)?;
            for f in out.files {
                println!("wrote {f}");
            }
            for g in out.gaps {
                println!("gap: {g}");
            }
        }
        Command::Sweep => {
            let (cfg, run) = resolve_config(cli, false)?;
            for dir in commands::sweep(&cfg, &run)? {
                println!("{}", dir.display());
            }
        }
        Command::Run => {
            let (cfg, run) = resolve_config(cli, false)?;
            commands::prepare(&cfg, &run)?;
            for mode in [TrainMode::Baseline, TrainMode::Dp] {
                commands::train(&cfg, &run, mode, TrainOptions::default())?;
            }
            let trained = trained_models(&run);
            commands::attack(&cfg, &run, &trained)?;
            let mut names = vec!["base".to_string()];
            names.extend(trained);
            commands::evaluate(&cfg, &run, &names)?;
            report::report(&run)?;
            print!("{}", std::fs::read_to_string(run.join("report/summary.md")).unwrap_or_default());
        }
        Command::SynthCorpus { dir, n } => {
            let seed = cli.seed.unwrap_or(0);
            commands::synth_corpus(dir, *n, seed)?;
            println!("wrote {n} files to {}", dir.display());
        }
        Command::Epsilon { q, sigma, steps, delta } => {
            let acc = AccountantState::new(*q, *sigma)?.accumulate(*steps);
            print!("{}", acc.report(*delta)?.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
