//! Gray-box membership inference from per-example losses.
//!
//! Two scores: raw loss (`-target_loss`) and reference-calibrated
//! (`reference_loss - target_loss`, the reference being the pre-fine-tuning
//! base). AUC is the Mann–Whitney statistic; the ROC sweep's trapezoidal area
//! is computed independently and equals it exactly (both are formed from the
//! same integer pair counts).

use std::collections::HashSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::corpus::FimExample;
use crate::error::{Error, Result};
use crate::model::{loss_and_grad, GradRequest, ParameterSet};
use crate::rng::{substream, STREAM_ATTACK};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Raw,
    Calibrated,
}

impl Strategy {
    pub const ALL: [Strategy; 2] = [Strategy::Raw, Strategy::Calibrated];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Raw => "raw",
            Strategy::Calibrated => "calibrated",
        }
    }

    pub fn score(&self, target_loss: f64, reference_loss: f64) -> f64 {
        match self {
            Strategy::Raw => score_raw_loss(target_loss),
            Strategy::Calibrated => score_calibrated(target_loss, reference_loss),
        }
    }
}

pub fn score_raw_loss(target_loss: f64) -> f64 {
    -target_loss
}

pub fn score_calibrated(target_loss: f64, reference_loss: f64) -> f64 {
    reference_loss - target_loss
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub id: String,
    pub is_member: bool,
    pub is_canary: bool,
    pub target_loss: f64,
    pub reference_loss: f64,
    pub score: f64,
}

pub const RECORDS_HEADER: &str = "id,is_member,is_canary,target_loss,reference_loss,score";

impl AttackRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.id, self.is_member as u8, self.is_canary as u8, self.target_loss, self.reference_loss, self.score
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        // ids may contain commas; the five numeric fields are at the end
        let f: Vec<&str> = line.rsplitn(6, ',').collect();
        if f.len() != 6 {
            return Err(Error::Invalid(format!("attack record row malformed: {line}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Invalid(format!("bad number {s:?}")));
        let flag = |s: &str| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            _ => Err(Error::Invalid(format!("bad flag {s:?}"))),
        };
        Ok(AttackRecord {
            id: f[5].to_string(),
            is_member: flag(f[4])?,
            is_canary: flag(f[3])?,
            target_loss: num(f[2])?,
            reference_loss: num(f[1])?,
            score: num(f[0])?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from (0,0) to (1,1), one point per distinct score threshold.
    pub points: Vec<(f64, f64)>,
    /// Trapezoidal area under `points`.
    pub auc: f64,
    pub n_members: usize,
    pub n_nonmembers: usize,
}

fn class_counts(records: &[AttackRecord]) -> Result<(u64, u64)> {
    let p = records.iter().filter(|r| r.is_member).count() as u64;
    let n = records.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::Invalid(format!(
            "AUC needs both classes: {p} members, {n} non-members"
        )));
    }
    Ok((p, n))
}

fn by_score_desc(records: &[AttackRecord]) -> Vec<&AttackRecord> {
    let mut sorted: Vec<&AttackRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    sorted
}

/// Mann–Whitney AUC: `P(member > non-member) + ½ P(tie)` from mid-ranks.
pub fn mann_whitney_auc(records: &[AttackRecord]) -> Result<f64> {
    let (p, n) = class_counts(records)?;
    if records.iter().any(|r| r.score.is_nan()) {
        return Err(Error::Numeric("NaN attack score".into()));
    }
    let mut sorted: Vec<&AttackRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));
    // twice the member rank sum; mid-rank of positions a..=b (1-based) is (a+b)/2
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].score == sorted[i].score {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let members = sorted[i..=j].iter().filter(|r| r.is_member).count() as u128;
        twice_rank_sum += members * twice_mid;
        i = j + 1;
    }
    // 2U = 2R - p(p+1)
    let twice_u = twice_rank_sum - (p as u128) * (p as u128 + 1);
    Ok(twice_u as f64 / (2 * p as u128 * n as u128) as f64)
}

/// ROC by sweeping every distinct score threshold from high to low.
pub fn roc_and_auc(records: &[AttackRecord]) -> Result<RocCurve> {
    let (p, n) = class_counts(records)?;
    if records.iter().any(|r| r.score.is_nan()) {
        return Err(Error::Numeric("NaN attack score".into()));
    }
    let sorted = by_score_desc(records);
    let mut counts: Vec<(u64, u64)> = vec![(0, 0)];
    let (mut fp, mut tp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].is_member {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        counts.push((fp, tp));
    }
    // exact trapezoid in integer units of 1/(2pn)
    let twice_area: u128 = counts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) as u128 * (w[0].1 + w[1].1) as u128)
        .sum();
    let auc = twice_area as f64 / (2 * p as u128 * n as u128) as f64;
    let points = counts
        .into_iter()
        .map(|(f, t)| (f as f64 / n as f64, t as f64 / p as f64))
        .collect();
    Ok(RocCurve {
        points,
        auc,
        n_members: p as usize,
        n_nonmembers: n as usize,
    })
}

/// Per-example losses under both models, before scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTable {
    pub records: Vec<AttackRecord>,
    /// Ids whose loss could not be evaluated.
    pub dropped: Vec<String>,
}

fn example_loss(p: &ParameterSet, ex: &FimExample) -> Option<f64> {
    let none = GradRequest {
        base: false,
        adapters: false,
    };
    match loss_and_grad(p, ex, none) {
        Ok(Some((l, _))) if l.is_finite() => Some(l),
        _ => None,
    }
}

/// Evaluate target and reference losses on a balanced member / non-member
/// sample. The larger class is subsampled (seeded) to the size of the smaller.
pub fn compute_losses(
    target: &ParameterSet,
    reference: &ParameterSet,
    members: &[FimExample],
    nonmembers: &[FimExample],
    seed: u64,
) -> Result<LossTable> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Invalid(format!(
            "attack needs members and non-members: got {} and {}",
            members.len(),
            nonmembers.len()
        )));
    }
    let k = members.len().min(nonmembers.len());
    let mut rng = substream(seed, STREAM_ATTACK);
    let mut pick = |xs: &[FimExample]| -> Vec<usize> {
        if xs.len() == k {
            return (0..k).collect();
        }
        let mut idx = sample(&mut rng, xs.len(), k).into_vec();
        idx.sort_unstable();
        idx
    };
    let mi = pick(members);
    let ni = pick(nonmembers);
    let mut records = Vec::with_capacity(2 * k);
    let mut dropped = Vec::new();
    let chosen = mi
        .iter()
        .map(|&i| (&members[i], true))
        .chain(ni.iter().map(|&i| (&nonmembers[i], false)));
    for (ex, is_member) in chosen {
        match (example_loss(target, ex), example_loss(reference, ex)) {
            (Some(t), Some(r)) => records.push(AttackRecord {
                id: ex.id.clone(),
                is_member,
                is_canary: is_member && ex.is_canary,
                target_loss: t,
                reference_loss: r,
                score: f64::NAN,
            }),
            _ => {
                log::warn!("dropping {} from attack: loss evaluation failed", ex.id);
                dropped.push(ex.id.clone());
            }
        }
    }
    Ok(LossTable { records, dropped })
}

pub fn score_records(records: &[AttackRecord], strategy: Strategy) -> Vec<AttackRecord> {
    records
        .iter()
        .map(|r| AttackRecord {
            score: strategy.score(r.target_loss, r.reference_loss),
            ..r.clone()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub strategy: Strategy,
    pub records: Vec<AttackRecord>,
    pub curve: RocCurve,
    /// Canary members against the same non-members, if any canaries exist.
    pub canary_curve: Option<RocCurve>,
    pub dropped: Vec<String>,
}

pub fn attack_from_losses(table: &LossTable, strategy: Strategy) -> Result<AttackOutcome> {
    let records = score_records(&table.records, strategy);
    let curve = roc_and_auc(&records)?;
    let canaries: Vec<AttackRecord> = records
        .iter()
        .filter(|r| !r.is_member || r.is_canary)
        .cloned()
        .collect();
    let canary_curve = if canaries.iter().any(|r| r.is_member) {
        Some(roc_and_auc(&canaries)?)
    } else {
        None
    };
    Ok(AttackOutcome {
        strategy,
        records,
        curve,
        canary_curve,
        dropped: table.dropped.clone(),
    })
}

/// Losses under both models, then scores and the ROC curve, in one call.
pub fn run_attack(
    target: &ParameterSet,
    reference: &ParameterSet,
    members: &[FimExample],
    nonmembers: &[FimExample],
    strategy: Strategy,
    seed: u64,
) -> Result<AttackOutcome> {
    let table = compute_losses(target, reference, members, nonmembers, seed)?;
    attack_from_losses(&table, strategy)
}

/// Unique members (first occurrence of each id), dropping injected copies.
pub fn unique_members(members: &[FimExample]) -> Vec<FimExample> {
    let mut seen = HashSet::new();
    members.iter().filter(|e| seen.insert(e.id.clone())).cloned().collect()
}

/// Fixture helper: records with given member and non-member scores.
pub fn records_from_scores(members: &[f64], nonmembers: &[f64]) -> Vec<AttackRecord> {
    let mk = |(i, &s): (usize, &f64), m: bool| AttackRecord {
        id: format!("{}{i}", if m { "m" } else { "n" }),
        is_member: m,
        is_canary: false,
        target_loss: -s,
        reference_loss: 0.0,
        score: s,
    };
    members
        .iter()
        .enumerate()
        .map(|x| mk(x, true))
        .chain(nonmembers.iter().enumerate().map(|x| mk(x, false)))
        .collect()
}
