//! Rényi-DP accountant for the Poisson-subsampled Gaussian mechanism.
//!
//! Integer orders use the binomial closed form
//! `A_α = Σ_k C(α,k) (1-q)^(α-k) q^k exp((k²-k)/(2σ²))`; fractional orders
//! integrate `A_α = E_{z~N(0,σ²)}[(1 - q + q·exp((2z-1)/(2σ²)))^α]`
//! numerically. Per-step RDP is `ln(A_α)/(α-1)`; conversion to (ε, δ) uses
//! `ε = min_α rdp_α + ln(1/δ)/(α-1)`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRACTIONAL_ORDERS: &[f64] = &[
    1.25, 1.5, 1.75, 2.25, 2.5, 2.75, 3.25, 3.5, 3.75, 4.5, 5.5, 6.5, 7.5,
];

/// Integer orders 2..=64 merged with a fixed set of fractional orders, ascending.
pub fn default_orders() -> Vec<f64> {
    let mut orders: Vec<f64> = (2..=64).map(f64::from).collect();
    orders.extend_from_slice(FRACTIONAL_ORDERS);
    orders.sort_by(|a, b| a.partial_cmp(b).unwrap());
    orders
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `n · ln_v`, with `0 · (-inf) = 0`.
fn times_log(n: f64, ln_v: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else {
        n * ln_v
    }
}

/// Per-step RDP at order `alpha`. `σ = 0` gives `+inf` (no privacy).
pub fn rdp_single_step(q: f64, sigma: f64, alpha: f64) -> f64 {
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    if q == 0.0 {
        return 0.0;
    }
    if alpha.fract() == 0.0 && alpha >= 2.0 {
        rdp_integer_order(q, sigma, alpha as u32)
    } else {
        rdp_by_quadrature(q, sigma, alpha)
    }
}

/// Closed-form binomial expansion, evaluated in log space.
pub fn rdp_integer_order(q: f64, sigma: f64, alpha: u32) -> f64 {
    assert!(alpha >= 2, "integer order must be >= 2");
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let a = f64::from(alpha);
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());
    let two_s2 = 2.0 * sigma * sigma;
    let mut ln_binom = 0.0;
    let log_terms: Vec<f64> = (0..=alpha)
        .map(|k| {
            let kf = f64::from(k);
            if k > 0 {
                ln_binom += (a - kf + 1.0).ln() - kf.ln();
            }
            ln_binom + times_log(a - kf, ln_1mq) + times_log(kf, ln_q) + (kf * kf - kf) / two_s2
        })
        .collect();
    let ln_a = log_sum_exp(&log_terms);
    if ln_a > 1.0 {
        return ln_a / (a - 1.0);
    }
    // Small divergence: form A - 1 without cancellation. Terms k = 0, 1 sum to
    // (1-q)^(α-1) (1 + (α-1) q), whose deviation from 1 is O(q²).
    let low = ((a - 1.0) * ln_1mq + ((a - 1.0) * q).ln_1p()).exp_m1();
    let high: f64 = log_terms[2..].iter().map(|&x| x.exp()).sum();
    (low + high).ln_1p() / (a - 1.0)
}

/// Quadrature of the mixture divergence integral; valid for any order > 1.
///
/// Trapezoid rule with step σ/32 over `[-14σ, α + 14σ]`; the integrand is
/// smooth and Gaussian-tailed, where the trapezoid rule converges
/// geometrically.
pub fn rdp_by_quadrature(q: f64, sigma: f64, alpha: f64) -> f64 {
    assert!(alpha > 1.0, "order must exceed 1");
    if sigma == 0.0 {
        return f64::INFINITY;
    }
    let s2 = sigma * sigma;
    let (lo, hi) = (-14.0 * sigma, alpha + 14.0 * sigma);
    let step = sigma / 32.0;
    let n = ((hi - lo) / step).ceil() as usize;
    let step = (hi - lo) / n as f64;
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * s2).ln();
    let (ln_q, ln_1mq) = (q.ln(), (-q).ln_1p());

    // (z, weight, ln μ0(z), ln L(z)) where L is the likelihood ratio N(1,σ²)/N(0,σ²)
    let nodes: Vec<(f64, f64, f64)> = (0..=n)
        .map(|i| {
            let z = lo + step * i as f64;
            let w = if i == 0 || i == n { 0.5 * step } else { step };
            (w, ln_norm - z * z / (2.0 * s2), (2.0 * z - 1.0) / (2.0 * s2))
        })
        .collect();
    let ln_mix = |ln_l: f64| -> f64 {
        if q == 1.0 {
            ln_l
        } else if ln_l < 700.0 {
            (q * ln_l.exp_m1()).ln_1p()
        } else {
            log_sum_exp(&[ln_1mq, ln_q + ln_l])
        }
    };
    let log_terms: Vec<f64> = nodes
        .iter()
        .map(|&(w, ln_mu, ln_l)| w.ln() + ln_mu + alpha * ln_mix(ln_l))
        .collect();
    let ln_a = log_sum_exp(&log_terms);
    if ln_a > 1.0 {
        return ln_a / (alpha - 1.0);
    }
    // A - 1 = E[(1+u)^α - 1 - α u] since E[u] = 0 under μ0, u = q (L - 1)
    let mut acc = 0.0;
    for &(w, ln_mu, ln_l) in &nodes {
        let u = q * ln_l.exp_m1();
        let lm = ln_mix(ln_l);
        let h = if (alpha * lm).abs() < 1.0 {
            (alpha * lm).exp_m1() - alpha * u
        } else {
            (alpha * lm).exp() - 1.0 - alpha * u
        };
        acc += w * ln_mu.exp() * h;
    }
    acc.ln_1p() / (alpha - 1.0)
}

/// Cumulative RDP of `steps` identical subsampled-Gaussian steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountantState {
    pub orders: Vec<f64>,
    /// Per-step RDP at each order.
    pub single_step: Vec<f64>,
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
}

impl AccountantState {
    pub fn new(q: f64, sigma: f64) -> Result<Self> {
        Self::with_orders(q, sigma, default_orders())
    }

    pub fn with_orders(q: f64, sigma: f64, orders: Vec<f64>) -> Result<Self> {
        let mut problems = Vec::new();
        if !(q > 0.0 && q <= 1.0) {
            problems.push(format!("sampling rate q = {q} outside (0, 1]"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            problems.push(format!("noise multiplier σ = {sigma} must be a finite value >= 0"));
        }
        if orders.is_empty() || orders.iter().any(|&a| !(a > 1.0)) {
            problems.push("RDP orders must be non-empty and all > 1".into());
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        let single_step = orders.iter().map(|&a| rdp_single_step(q, sigma, a)).collect();
        Ok(AccountantState {
            orders,
            single_step,
            q,
            sigma,
            steps: 0,
        })
    }

    /// Cumulative RDP per order: `steps × single_step`.
    pub fn rdp(&self) -> Vec<f64> {
        let t = self.steps as f64;
        self.single_step
            .iter()
            .map(|&r| if self.steps == 0 { 0.0 } else { t * r })
            .collect()
    }

    pub fn accumulate(&self, n_steps: u64) -> Self {
        let mut s = self.clone();
        s.steps += n_steps;
        s
    }

    pub fn epsilon(&self, delta: f64) -> Result<(f64, f64)> {
        epsilon_from_rdp(&self.orders, &self.rdp(), delta)
    }

    pub fn report(&self, delta: f64) -> Result<EpsilonReport> {
        let rdp = self.rdp();
        let (epsilon, best_order) = epsilon_from_rdp(&self.orders, &rdp, delta)?;
        let ln_inv_delta = (1.0 / delta).ln();
        let rows = self
            .orders
            .iter()
            .zip(&rdp)
            .map(|(&a, &r)| (a, r, r + ln_inv_delta / (a - 1.0)))
            .collect();
        Ok(EpsilonReport {
            q: self.q,
            sigma: self.sigma,
            steps: self.steps,
            delta,
            rows,
            epsilon,
            best_order,
        })
    }
}

/// `ε = min_α rdp[α] + ln(1/δ)/(α-1)`, skipping infinite orders.
/// Returns `(ε, minimizing order)`.
pub fn epsilon_from_rdp(orders: &[f64], rdp: &[f64], delta: f64) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Invalid(format!("δ = {delta} outside (0, 1)")));
    }
    let ln_inv_delta = (1.0 / delta).ln();
    let mut best: Option<(f64, f64)> = None;
    for (&a, &r) in orders.iter().zip(rdp) {
        if !r.is_finite() {
            continue;
        }
        let eps = r + ln_inv_delta / (a - 1.0);
        if best.map_or(true, |(e, _)| eps < e) {
            best = Some((eps, a));
        }
    }
    best.ok_or_else(|| Error::Numeric("no finite RDP order: no privacy guarantee".into()))
}

/// Largest number of steps whose ε stays within `eps_max`.
///
/// Doubling to bracket the crossing, then binary search. Returns 0 when a
/// single step already exceeds the budget.
pub fn steps_until_budget(q: f64, sigma: f64, delta: f64, eps_max: f64) -> Result<u64> {
    let fresh = AccountantState::new(q, sigma)?;
    let within = |t: u64| -> Result<bool> {
        match fresh.accumulate(t).epsilon(delta) {
            Ok((e, _)) => Ok(e <= eps_max),
            Err(Error::Numeric(_)) => Ok(false),
            Err(e) => Err(e),
        }
    };
    if !within(1)? {
        return Ok(0);
    }
    const CAP: u64 = 1 << 50;
    let mut lo = 1u64;
    let mut hi = 2u64;
    while within(hi)? {
        lo = hi;
        if hi >= CAP {
            return Ok(CAP);
        }
        hi *= 2;
    }
    // invariant: within(lo) && !within(hi)
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if within(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Smallest noise multiplier (to a relative tolerance of 1e-6) whose ε after
/// `steps` steps is at most `eps_target`.
pub fn noise_for_budget(q: f64, steps: u64, delta: f64, eps_target: f64) -> Result<f64> {
    let eps_at = |sigma: f64| -> Result<f64> {
        Ok(AccountantState::new(q, sigma)?.accumulate(steps).epsilon(delta)?.0)
    };
    let (mut lo, mut hi) = (0.05, 1.0);
    while eps_at(hi)? > eps_target {
        hi *= 2.0;
        if hi > 1e4 {
            return Err(Error::config(format!(
                "no noise multiplier below 1e4 reaches ε = {eps_target}"
            )));
        }
    }
    if eps_at(lo)? <= eps_target {
        return Ok(lo);
    }
    while (hi - lo) / hi > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= eps_target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Per-order table behind an ε value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub q: f64,
    pub sigma: f64,
    pub steps: u64,
    pub delta: f64,
    /// `(α, cumulative rdp, ε at α)`.
    pub rows: Vec<(f64, f64, f64)>,
    pub epsilon: f64,
    pub best_order: f64,
}

impl EpsilonReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# q = {}  sigma = {}  steps = {}  delta = {:e}",
            self.q, self.sigma, self.steps, self.delta
        );
        let _ = writeln!(s, "{:>8}  {:>16}  {:>16}", "alpha", "rdp", "eps_at_alpha");
        for &(a, r, e) in &self.rows {
            let _ = writeln!(s, "{a:>8}  {r:>16.6}  {e:>16.6}");
        }
        let _ = writeln!(s, "epsilon = {:.6} at alpha = {}", self.epsilon, self.best_order);
        s
    }
}
