//! Run manifest: a JSON record of everything needed to reproduce a run and
//! every number that reports display.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::accountant::{default_orders, AccountantState};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::rng::{substream_seed, ALL_STREAMS};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub fingerprint: String,
    pub n_documents: usize,
    /// Documents in the separate public corpus, if one was configured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_corpus: Option<PublicCorpusInfo>,
    pub members: usize,
    pub train_set: usize,
    pub nonmembers: usize,
    pub eval: usize,
    pub public: usize,
    pub canaries: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicCorpusInfo {
    pub fingerprint: String,
    pub n_documents: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub path: String,
    pub step: u64,
    pub base_hash: String,
    pub adapter_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantSummary {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    pub epsilon: f64,
    pub best_order: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub examples_seen: u64,
    pub stopped_early: bool,
    pub final_loss: f64,
    pub accountant: Option<AccountantSummary>,
    /// ε of the same run at the other reported δ.
    pub epsilon_alt_delta: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub auc: f64,
    pub canary_auc: Option<f64>,
    pub n_members: usize,
    pub n_nonmembers: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub chrf: MetricReport,
    pub lm: MetricReport,
    pub excluded: usize,
}

/// ε of one reading of the reference training configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonInterpretation {
    pub label: String,
    pub q: f64,
    pub delta: f64,
    pub steps: u64,
    pub epsilon: f64,
    pub best_order: f64,
    /// Set on the interpretation whose ε lies closest to the reported ≈ 30.
    pub closest_to_reported: bool,
}

pub const REFERENCE_SIGMA: f64 = 0.2746;
pub const REFERENCE_LOT: usize = 512;
pub const REFERENCE_TRAIN_SIZE: usize = 80_000;
pub const REFERENCE_POOL_SIZE: usize = 8_000_000;
pub const REPORTED_EPSILON: f64 = 30.0;

/// ε for σ = 0.2746, B = 512, one epoch over 80K examples, under each
/// combination of sampling rate (B over the 80K training set or over the 8M
/// pool) and δ (1e-5 or one over the matching population size).
pub fn reference_epsilon_table() -> Result<Vec<EpsilonInterpretation>> {
    let steps = REFERENCE_TRAIN_SIZE.div_ceil(REFERENCE_LOT) as u64;
    let mut rows = Vec::new();
    for (pop_label, pop) in [("80K", REFERENCE_TRAIN_SIZE), ("8M", REFERENCE_POOL_SIZE)] {
        let q = REFERENCE_LOT as f64 / pop as f64;
        let acc = AccountantState::new(q, REFERENCE_SIGMA)?.accumulate(steps);
        for (d_label, delta) in [("1e-5".to_string(), 1e-5), (format!("1/{pop_label}"), 1.0 / pop as f64)] {
            let (epsilon, best_order) = acc.epsilon(delta)?;
            rows.push(EpsilonInterpretation {
                label: format!("q = 512/{pop_label}, delta = {d_label}"),
                q,
                delta,
                steps,
                epsilon,
                best_order,
                closest_to_reported: false,
            });
        }
    }
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (a.1.epsilon - REPORTED_EPSILON).abs();
            let db = (b.1.epsilon - REPORTED_EPSILON).abs();
            da.total_cmp(&db)
        })
        .map(|(i, _)| i)
        .expect("four rows");
    rows[best].closest_to_reported = true;
    Ok(rows)
}

pub fn reference_epsilon_markdown(rows: &[EpsilonInterpretation]) -> String {
    let mut s = String::from("| interpretation | q | delta | steps | epsilon | best order |\n|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {}{} | {:.3e} | {:.3e} | {} | {:.2} | {} |\n",
            r.label,
            if r.closest_to_reported { " (closest to 30)" } else { "" },
            r.q,
            r.delta,
            r.steps,
            r.epsilon,
            r.best_order
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: ExperimentConfig,
    /// Hex seed of every named random substream.
    pub seeds: BTreeMap<String, String>,
    pub rdp_orders: Vec<f64>,
    pub corpus: Option<CorpusInfo>,
    pub pretrain_losses: Vec<f64>,
    pub checkpoints: BTreeMap<String, CheckpointRef>,
    pub training: BTreeMap<String, TrainSummary>,
    pub attacks: BTreeMap<String, BTreeMap<String, AttackSummary>>,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub reference_epsilon: Vec<EpsilonInterpretation>,
    /// Unix seconds at which each stage finished. Excluded from determinism
    /// comparisons.
    pub timestamps: BTreeMap<String, u64>,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        let seeds = ALL_STREAMS
            .iter()
            .map(|s| (s.to_string(), hex::encode(substream_seed(config.seed, s))))
            .collect();
        Ok(RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            seeds,
            rdp_orders: default_orders(),
            corpus: None,
            pretrain_losses: Vec::new(),
            checkpoints: BTreeMap::new(),
            training: BTreeMap::new(),
            attacks: BTreeMap::new(),
            metrics: BTreeMap::new(),
            reference_epsilon: reference_epsilon_table()?,
            timestamps: BTreeMap::new(),
        })
    }

    pub fn stamp(&mut self, stage: &str) {
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        self.timestamps.insert(stage.to_string(), now);
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::MissingInput(path.clone()))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_table_has_four_rows_and_one_marked() {
        let rows = reference_epsilon_table().unwrap();
        assert_eq!(rows.len(), 4);
        assert_eq!(rows.iter().filter(|r| r.closest_to_reported).count(), 1);
        assert!(rows.iter().all(|r| r.epsilon > 0.0 && r.epsilon.is_finite()));
        // the larger sampling rate costs more privacy at equal δ
        assert!(rows[0].epsilon > rows[2].epsilon);
        // smaller δ costs more privacy at equal q
        assert!(rows[3].epsilon > rows[2].epsilon);
    }

    #[test]
    fn manifest_json_roundtrip() {
        let m = RunManifest::new(&ExperimentConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        assert_eq!(RunManifest::load(dir.path()).unwrap(), m);
    }
}
