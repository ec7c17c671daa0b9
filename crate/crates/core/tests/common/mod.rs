//! Independent reference implementations used as test oracles. They favour
//! obviousness over speed: plain loops, no hashing, no shared code with the
//! library.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Every contiguous n-gram of `items`, in order.
fn ngrams<T: Clone>(items: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    if n == 0 || items.len() < n {
        return out;
    }
    for start in 0..=items.len() - n {
        out.push(items[start..start + n].to_vec());
    }
    out
}

fn count<T: PartialEq>(list: &[Vec<T>], g: &[T]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

/// Clipped matches: for each distinct hypothesis n-gram, the smaller of its
/// counts in the two lists.
fn clipped_matches<T: PartialEq + Clone>(hyp: &[Vec<T>], reference: &[Vec<T>]) -> usize {
    let mut seen: Vec<Vec<T>> = Vec::new();
    let mut total = 0;
    for g in hyp {
        if seen.iter().any(|s| s == g) {
            continue;
        }
        seen.push(g.clone());
        total += count(hyp, g).min(count(reference, g));
    }
    total
}

/// Brute-force ChrF++ (char order 6 without whitespace, word order 2, β = 2).
pub fn chrf_oracle(hyp: &str, reference: &str) -> Option<f64> {
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let hw: Vec<String> = hyp.split_whitespace().map(String::from).collect();
    let rw: Vec<String> = reference.split_whitespace().map(String::from).collect();
    let mut precisions = Vec::new();
    let mut recalls = Vec::new();
    let mut push = |h: usize, r: usize, m: usize| {
        if r > 0 {
            precisions.push(if h > 0 { m as f64 / h as f64 } else { 0.0 });
            recalls.push(m as f64 / r as f64);
        }
    };
    for n in 1..=6 {
        let (h, r) = (ngrams(&hc, n), ngrams(&rc, n));
        push(h.len(), r.len(), clipped_matches(&h, &r));
    }
    for n in 1..=2 {
        let (h, r) = (ngrams(&hw, n), ngrams(&rw, n));
        push(h.len(), r.len(), clipped_matches(&h, &r));
    }
    if precisions.is_empty() {
        return None;
    }
    let p = precisions.iter().sum::<f64>() / precisions.len() as f64;
    let r = recalls.iter().sum::<f64>() / recalls.len() as f64;
    if p + r == 0.0 {
        return Some(0.0);
    }
    Some(100.0 * 5.0 * p * r / (4.0 * p + r))
}

/// Longest run of equal consecutive lines, found by trying every pair of
/// starting offsets.
pub fn longest_line_run_oracle(hyp: &str, reference: &str) -> usize {
    let h: Vec<&str> = hyp.lines().map(|l| l.trim_end()).collect();
    let r: Vec<&str> = reference.lines().map(|l| l.trim_end()).collect();
    let mut best = 0;
    for i in 0..h.len() {
        for j in 0..r.len() {
            let mut k = 0;
            while i + k < h.len() && j + k < r.len() && h[i + k] == r[j + k] {
                k += 1;
            }
            best = best.max(k);
        }
    }
    best
}

/// P(member score > non-member score) + ½ P(tie) by visiting every pair.
pub fn pair_count_auc(members: &[f64], nonmembers: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &m in members {
        for &n in nonmembers {
            if m > n {
                wins += 1.0;
            } else if m == n {
                wins += 0.5;
            }
        }
    }
    wins / (members.len() * nonmembers.len()) as f64
}

/// Random text over a small alphabet that includes whitespace and a few
/// multi-byte characters, so n-grams repeat often.
pub fn fuzz_text(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    const ALPHABET: &[char] = &['a', 'b', 'c', 'd', ' ', ' ', '\n', '(', ')', '=', 'é', 'λ'];
    let n = rng.gen_range(0..=max_len);
    (0..n).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())]).collect()
}

/// Member and non-member scores drawn from a coarse grid so ties occur.
pub fn fuzz_scores(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let nm = rng.gen_range(1..40);
    let nn = rng.gen_range(1..40);
    let levels = rng.gen_range(2..30);
    let shift = rng.gen_range(0..levels);
    let m = (0..nm).map(|_| (rng.gen_range(0..levels) + shift / 2) as f64 * 0.25).collect();
    let n = (0..nn).map(|_| rng.gen_range(0..levels) as f64 * 0.25).collect();
    (m, n)
}

/// Rényi divergence of order `alpha` between the Poisson-subsampled Gaussian
/// mixture `(1-q) N(0, σ²) + q N(1, σ²)` and `N(0, σ²)`, by composite Simpson
/// integration of `E_Q[(P/Q)^α] - 1`.
pub fn rdp_simpson_oracle(q: f64, sigma: f64, alpha: f64) -> f64 {
    let s2 = sigma * sigma;
    let lo = -14.0 * sigma - 1.0;
    let hi = alpha + 14.0 * sigma + 1.0;
    let n = 200_000usize; // even
    let h = (hi - lo) / n as f64;
    let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let f = |x: f64| {
        let dens = norm * (-x * x / (2.0 * s2)).exp();
        let u = q * ((2.0 * x - 1.0) / (2.0 * s2)).exp_m1();
        dens * (alpha * u.ln_1p()).exp_m1()
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    let a_minus_1 = acc * h / 3.0;
    a_minus_1.ln_1p() / (alpha - 1.0)
}
