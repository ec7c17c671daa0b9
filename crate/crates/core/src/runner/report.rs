//! Report emission: loss/ε curve, ROC plot and a markdown summary, all
//! regenerated from the run directory. Missing inputs become listed gaps.

use std::fs;
use std::path::Path;

use super::commands::{mode_name, parse_roc_csv, roc_path, step_log_path};
use super::manifest::{reference_epsilon_markdown, RunManifest};
use super::svg::{Plot, Series};
use crate::dp_optimizer::{StepLog, TrainMode};
use crate::error::{Error, Result};

/// Trailing window for smoothing per-step losses in the loss plot.
const LOSS_WINDOW: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutput {
    pub files: Vec<String>,
    pub gaps: Vec<String>,
}

fn read_logs(path: &Path) -> Option<Vec<StepLog>> {
    let text = fs::read_to_string(path).ok()?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(StepLog::parse_csv_row)
        .collect::<Result<Vec<_>>>()
        .ok()
}

/// `(examples seen, smoothed loss)` and `(examples seen, ε)` series.
fn curves(logs: &[StepLog]) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    let mut seen = 0.0;
    let mut loss = Vec::with_capacity(logs.len());
    let mut eps = Vec::new();
    let mut window: Vec<f64> = Vec::new();
    for l in logs {
        seen += l.realized_batch as f64;
        if l.loss.is_finite() {
            window.push(l.loss);
            if window.len() > LOSS_WINDOW {
                window.remove(0);
            }
            loss.push((seen, window.iter().sum::<f64>() / window.len() as f64));
        }
        if let Some(e) = l.epsilon {
            eps.push((seen, e));
        }
    }
    (loss, eps)
}

const COLORS: [(&str, &str); 3] = [("baseline", "#1f77b4"), ("dp", "#d62728"), ("base", "#2ca02c")];

fn color(name: &str) -> &'static str {
    COLORS.iter().find(|c| c.0 == name).map_or("#7f7f7f", |c| c.1)
}

pub fn loss_epsilon_plot(run: &Path, gaps: &mut Vec<String>) -> Plot {
    let mut plot = Plot {
        title: "Training loss and privacy budget vs. examples seen".into(),
        x_label: "examples seen".into(),
        y_label: format!("training loss ({LOSS_WINDOW}-step mean)"),
        y2_label: Some("epsilon".into()),
        ..Default::default()
    };
    let mut have_eps = false;
    for mode in [TrainMode::Baseline, TrainMode::Dp] {
        let name = mode_name(mode);
        let Some(logs) = read_logs(&step_log_path(run, mode)) else {
            gaps.push(format!("no {name} step log"));
            continue;
        };
        let (loss, eps) = curves(&logs);
        plot.series.push(Series {
            name: format!("{name} loss"),
            points: loss,
            color: color(name),
            dashed: false,
            right_axis: false,
        });
        if !eps.is_empty() {
            have_eps = true;
            plot.series.push(Series {
                name: format!("{name} epsilon"),
                points: eps,
                color: color(name),
                dashed: true,
                right_axis: true,
            });
        }
    }
    if !have_eps {
        plot.y2_label = None;
        plot.notes.push("no DP run: epsilon axis omitted".into());
    }
    plot
}

pub fn roc_plot(run: &Path, m: &RunManifest, gaps: &mut Vec<String>) -> Plot {
    let mut plot = Plot {
        title: "Membership inference ROC".into(),
        x_label: "false positive rate".into(),
        y_label: "true positive rate".into(),
        unit_square: true,
        ..Default::default()
    };
    if m.attacks.is_empty() {
        gaps.push("no attack results".into());
    }
    for (target, by_strategy) in &m.attacks {
        for (strategy, summary) in by_strategy {
            let path = roc_path(run, target, strategy);
            let Some(points) = fs::read_to_string(&path).ok().and_then(|t| parse_roc_csv(&t).ok()) else {
                gaps.push(format!("missing ROC file {}", path.display()));
                continue;
            };
            plot.series.push(Series {
                name: format!("{target} / {strategy} (AUC {:.3})", summary.auc),
                points,
                color: color(target),
                dashed: strategy != "calibrated",
                right_axis: false,
            });
        }
    }
    plot.notes.push("dashed grey: chance".into());
    plot
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.prec$}"))
}

pub fn summary_markdown(m: &RunManifest, gaps: &[String]) -> String {
    let mut s = String::from("# Run summary\n\n");
    if let Some(c) = &m.corpus {
        s.push_str(&format!(
            "Corpus fingerprint `{}`: {} documents, {} members ({} canaries, {} training examples), {} non-members, {} eval, {} public.\n\n",
            c.fingerprint, c.n_documents, c.members, c.canaries, c.train_set, c.nonmembers, c.eval, c.public
        ));
    }
    s.push_str("| model | chrF++ | LM score | AUC raw | AUC calibrated | canary AUC (calibrated) | epsilon | delta | steps |\n");
    s.push_str("|---|---|---|---|---|---|---|---|---|\n");
    let mut names: Vec<&String> = m.metrics.keys().chain(m.attacks.keys()).chain(m.training.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        let metric = m.metrics.get(name);
        let attacks = m.attacks.get(name);
        let auc = |k: &str| attacks.and_then(|a| a.get(k)).map(|x| x.auc);
        let canary = attacks.and_then(|a| a.get("calibrated")).and_then(|x| x.canary_auc);
        let train = m.training.get(name);
        let acc = train.and_then(|t| t.accountant.as_ref());
        s.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            metric.map_or("n/a".into(), |x| format!("{:.2} ± {:.2}", x.chrf.mean, x.chrf.stderr)),
            metric.map_or("n/a".into(), |x| format!("{:.3} ± {:.3}", x.lm.mean, x.lm.stderr)),
            fmt_opt(auc("raw"), 4),
            fmt_opt(auc("calibrated"), 4),
            fmt_opt(canary, 4),
            fmt_opt(acc.map(|a| a.epsilon), 3),
            acc.map_or("n/a".into(), |a| format!("{:.3e}", a.delta)),
            train.map_or("n/a".into(), |t| t.steps.to_string()),
        ));
    }
    s.push_str("\n## Epsilon of the reference configuration (sigma 0.2746, B 512, one epoch over 80K)\n\n");
    s.push_str(&reference_epsilon_markdown(&m.reference_epsilon));
    if !gaps.is_empty() {
        s.push_str("\n## Gaps\n\n");
        for g in gaps {
            s.push_str(&format!("- {g}\n"));
        }
    }
    s
}

/// Regenerate every report file under `run/report`.
pub fn report(run: &Path) -> Result<ReportOutput> {
    let m = RunManifest::load(run)?;
    let dir = run.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut gaps = Vec::new();
    let loss = loss_epsilon_plot(run, &mut gaps);
    let roc = roc_plot(run, &m, &mut gaps);
    let summary = summary_markdown(&m, &gaps);
    let mut files = Vec::new();
    for (name, text) in [
        ("loss_epsilon.svg", loss.render()),
        ("roc.svg", roc.render()),
        ("summary.md", summary),
    ] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push(path.display().to_string());
    }
    for g in &gaps {
        log::warn!("report gap: {g}");
    }
    Ok(ReportOutput { files, gaps })
}
