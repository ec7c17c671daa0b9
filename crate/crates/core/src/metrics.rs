//! Completion quality metrics: ChrF++, longest-match (LM) score, and
//! mean ± standard error aggregation.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionPair {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChrfParams {
    pub char_order: usize,
    pub word_order: usize,
    pub beta: f64,
}

impl Default for ChrfParams {
    fn default() -> Self {
        ChrfParams {
            char_order: 6,
            word_order: 2,
            beta: 2.0,
        }
    }
}

fn ngram_counts<T: Eq + Hash>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// (matches, hypothesis total, reference total) for one n-gram order.
fn order_stats<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| r.get(g).map_or(0, |&rc| c.min(rc)))
        .sum();
    (
        matches,
        hyp.len().saturating_sub(n - 1).min(hyp.len()),
        reference.len().saturating_sub(n - 1).min(reference.len()),
    )
}

/// ChrF++ in [0, 100]. Character n-grams ignore whitespace; word n-grams use
/// whitespace-separated tokens. Precision and recall are averaged over the
/// orders with at least one reference n-gram, then combined as F_β.
///
/// Returns `None` if the reference has no n-grams at all (empty reference).
pub fn chrf_pp(hyp: &str, reference: &str, params: &ChrfParams) -> Option<f64> {
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hw: Vec<&str> = hyp.split_whitespace().collect();
    let rw: Vec<&str> = reference.split_whitespace().collect();

    let mut stats = Vec::with_capacity(params.char_order + params.word_order);
    for n in 1..=params.char_order {
        stats.push(order_stats(&hc, &rc, n));
    }
    for n in 1..=params.word_order {
        stats.push(order_stats(&hw, &rw, n));
    }
    let (mut p_sum, mut r_sum, mut k) = (0.0, 0.0, 0usize);
    for (m, h, r) in stats {
        if r == 0 {
            continue;
        }
        p_sum += if h == 0 { 0.0 } else { m as f64 / h as f64 };
        r_sum += m as f64 / r as f64;
        k += 1;
    }
    if k == 0 {
        return None;
    }
    let (p, r) = (p_sum / k as f64, r_sum / k as f64);
    let b2 = params.beta * params.beta;
    let denom = b2 * p + r;
    Some(if denom == 0.0 { 0.0 } else { 100.0 * (1.0 + b2) * p * r / denom })
}

/// Ratio thresholds `(min ratio, score)`, checked in descending ratio order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LmThresholds(pub Vec<(f64, f64)>);

impl Default for LmThresholds {
    fn default() -> Self {
        LmThresholds(vec![(1.0, 1.0), (0.75, 0.75), (0.5, 0.5), (0.25, 0.25)])
    }
}

impl LmThresholds {
    pub fn score(&self, ratio: f64) -> f64 {
        self.0
            .iter()
            .filter(|(min, _)| ratio >= *min)
            .map(|&(_, v)| v)
            .fold(0.0, f64::max)
    }
}

/// Longest run of consecutive lines shared by both texts (after trimming
/// trailing whitespace), divided by the reference line count and mapped
/// through `thresholds`. `None` for an empty reference.
pub fn lm_score(hyp: &str, reference: &str, thresholds: &LmThresholds) -> Option<f64> {
    let h: Vec<&str> = hyp.lines().map(str::trim_end).collect();
    let r: Vec<&str> = reference.lines().map(str::trim_end).collect();
    if r.is_empty() {
        return None;
    }
    let ratio = longest_common_run(&h, &r) as f64 / r.len() as f64;
    Some(thresholds.score(ratio))
}

fn longest_common_run(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut best = 0;
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            if x == y {
                cur[j + 1] = prev[j] + 1;
                best = best.max(cur[j + 1]);
            }
        }
        prev = cur;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; 0 when `n = 1`.
    pub stderr: f64,
    pub single_sample: bool,
}

/// Mean and standard error, summed in sorted order so the result does not
/// depend on input order.
pub fn aggregate(scores: &[f64]) -> Result<MetricReport> {
    if scores.is_empty() {
        return Err(Error::Invalid("cannot aggregate zero scores".into()));
    }
    let mut xs = scores.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Ok(MetricReport {
            n,
            mean,
            stderr: 0.0,
            single_sample: true,
        });
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(MetricReport {
        n,
        mean,
        stderr: var.sqrt() / (n as f64).sqrt(),
        single_sample: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chrf_identity_and_disjoint() {
        let p = ChrfParams::default();
        assert_eq!(chrf_pp("fun main() { println(1) }", "fun main() { println(1) }", &p), Some(100.0));
        assert_eq!(chrf_pp("abc", "xyz", &p), Some(0.0));
        assert_eq!(chrf_pp("", "xyz", &p), Some(0.0));
        assert_eq!(chrf_pp("abc", "", &p), None);
        assert_eq!(chrf_pp("abc", "  \n", &p), None);
    }

    #[test]
    fn lm_examples() {
        let t = LmThresholds::default();
        let r = "a\nb\nc\nd";
        assert_eq!(lm_score(r, r, &t), Some(1.0));
        assert_eq!(lm_score("x\ny", r, &t), Some(0.0));
        assert_eq!(lm_score("q\nb\nc\nz", r, &t), Some(0.5));
        assert_eq!(lm_score("b  \nc\t", r, &t), Some(0.5));
        assert_eq!(lm_score("a", "", &t), None);
        // three of four lines, non-consecutive in hyp -> run of 2
        assert_eq!(lm_score("a\nb\nX\nd", r, &t), Some(0.5));
        assert_eq!(lm_score("a\nb\nc", r, &t), Some(0.75));
    }

    #[test]
    fn lm_monotone_when_extending_run() {
        let t = LmThresholds::default();
        let r: Vec<String> = (0..8).map(|i| format!("line {i}")).collect();
        let reference = r.join("\n");
        let mut prev = 0.0;
        for k in 1..=r.len() {
            let hyp = r[2.min(k - 1)..k].join("\n");
            let s = lm_score(&hyp, &reference, &t).unwrap();
            assert!(s >= prev);
            prev = s;
        }
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((r.mean, r.stderr), (1.0, 0.0));
        let r = aggregate(&[0.0, 1.0]).unwrap();
        assert_eq!(r.mean, 0.5);
        assert!((r.stderr - 0.5).abs() < 1e-15);
        let r = aggregate(&[0.7]).unwrap();
        assert!(r.single_sample && r.stderr == 0.0);
        assert!(aggregate(&[]).is_err());
        assert_eq!(aggregate(&[3.0, 0.1, 2.5, 9.0]).unwrap(), aggregate(&[9.0, 2.5, 0.1, 3.0]).unwrap());
    }
}
