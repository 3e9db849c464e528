//! Significance testing: Wilcoxon signed-rank, one-sample Student t and
//! Benjamini-Hochberg false-discovery-rate correction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest number of non-zero differences for which the Wilcoxon null
/// distribution is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

const BETA_CF_TOLERANCE: f64 = 1e-15;
const BETA_CF_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("t-test needs at least 2 values, got {0}")]
    TooFewValues(usize),
    #[error("sample variance is zero")]
    ZeroVariance,
    #[error("p-value {0} at index {1} is outside [0, 1]")]
    InvalidPValue(f64, usize),
    #[error("alpha {0} is outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("input contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    WilcoxonExact,
    WilcoxonNormalApprox,
    TOneSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Sample size the p-value is based on (non-zero differences for
    /// Wilcoxon).
    pub n: usize,
    pub method: TestMethod,
}

/// Two-sided Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped. Tied absolute differences get midranks.
/// The reported statistic is `min(W+, W-)`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<TestResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let n = diffs.len();
    let doubled = doubled_midranks(&diffs);
    let w_plus2: u64 = diffs.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| *r).sum();
    let total2: u64 = doubled.iter().sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let statistic = w_plus.min((total2 - w_plus2) as f64 / 2.0);

    if n <= WILCOXON_EXACT_MAX_N {
        let counts = signed_rank_null_counts(&doubled);
        let total: f64 = counts.iter().sum();
        let w = w_plus2 as usize;
        let lower: f64 = counts[..=w].iter().sum();
        let upper: f64 = counts[w..].iter().sum();
        let p_value = (2.0 * lower.min(upper) / total).min(1.0);
        Ok(TestResult { statistic, p_value, n, method: TestMethod::WilcoxonExact })
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_group_sizes(&doubled).map(|t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let p_value = statrs::function::erf::erfc(z / std::f64::consts::SQRT_2).min(1.0);
        Ok(TestResult { statistic, p_value, n, method: TestMethod::WilcoxonNormalApprox })
    }
}

/// Midranks of `|d|`, doubled so that they are integers.
fn doubled_midranks(diffs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..diffs.len()).collect();
    order.sort_by(|&a, &b| diffs[a].abs().total_cmp(&diffs[b].abs()));
    let mut ranks = vec![0u64; diffs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        // Positions i..=j hold 1-based ranks i+1..=j+1; twice their mean is i+j+2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

fn tie_group_sizes(doubled: &[u64]) -> impl Iterator<Item = u64> {
    let mut sorted = doubled.to_vec();
    sorted.sort_unstable();
    let mut groups = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        groups.push(j as u64);
        i += j;
    }
    groups.into_iter()
}

/// Number of sign assignments giving each value of the doubled positive
/// rank sum, by dynamic programming over the ranks.
fn signed_rank_null_counts(doubled: &[u64]) -> Vec<f64> {
    let total: usize = doubled.iter().sum::<u64>() as usize;
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in doubled {
        let r = r as usize;
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0.0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    counts
}

/// Two-sided one-sample Student t-test of `values` against `mu0`.
pub fn t_one_sample(values: &[f64], mu0: f64) -> Result<TestResult, StatsError> {
    let n = values.len();
    if n < 2 {
        return Err(StatsError::TooFewValues(n));
    }
    if !mu0.is_finite() || values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let t = (mean - mu0) / (var.sqrt() / nf.sqrt());
    Ok(TestResult {
        statistic: t,
        p_value: student_t_two_sided_p(t, nf - 1.0),
        n,
        method: TestMethod::TOneSample,
    })
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// Regularized incomplete beta function `I_x(a, b)`, evaluated with a
/// modified-Lentz continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        (ln_front.exp() * beta_continued_fraction(x, a, b)) / a
    } else {
        1.0 - (ln_front.exp() * beta_continued_fraction(1.0 - x, b, a)) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=BETA_CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < BETA_CF_TOLERANCE {
            break;
        }
    }
    h
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Lanczos approximation (g = 7, n = 9), accurate to ~1e-15 for x > 0.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Outcome of a Benjamini-Hochberg step-up correction. All vectors are in
/// the caller's input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BHDecision {
    pub raw_p: Vec<f64>,
    pub adjusted_p: Vec<f64>,
    pub significant: Vec<bool>,
    pub alpha: f64,
}

pub fn bh_correct(p: &[f64], alpha: f64) -> Result<BHDecision, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    if let Some((i, &bad)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(StatsError::InvalidPValue(bad, i));
    }
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &idx) in order.iter().enumerate().rev() {
        let rank = (pos + 1) as f64;
        running = running.min(p[idx] * m as f64 / rank);
        adjusted[idx] = running.min(1.0);
    }
    let significant = adjusted.iter().map(|&q| q <= alpha).collect();
    Ok(BHDecision { raw_p: p.to_vec(), adjusted_p: adjusted, significant, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    /// Two-sided exact p by enumerating all 2^n sign flips.
    fn wilcoxon_enumerate(x: &[f64], y: &[f64]) -> f64 {
        let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|v| *v != 0.0).collect();
        let n = d.len();
        let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
        let ranks: Vec<f64> = abs
            .iter()
            .map(|a| {
                let below = abs.iter().filter(|b| *b < a).count() as f64;
                let equal = abs.iter().filter(|b| *b == a).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect();
        let center = ranks.iter().sum::<f64>() / 2.0;
        let observed: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
        let dev = (observed - center).abs();
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            if (s - center).abs() >= dev - 1e-9 {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_all_zero_is_error() {
        assert_eq!(
            wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]),
            Err(StatsError::AllZeroDifferences)
        );
        assert_eq!(wilcoxon_signed_rank(&[1.0], &[]), Err(StatsError::LengthMismatch(1, 0)));
    }

    #[test]
    fn wilcoxon_all_positive_n6() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let y = [0.0; 6];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, TestMethod::WilcoxonExact);
        assert_eq!(r.p_value, 2.0 / 64.0);
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.n, 6);
    }

    #[test]
    fn wilcoxon_matches_enumeration_with_ties_and_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..=12);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-3..=3) as f64).collect();
            let Ok(r) = wilcoxon_signed_rank(&x, &y) else { continue };
            let oracle = wilcoxon_enumerate(&x, &y);
            assert!((r.p_value - oracle).abs() < 1e-12, "{x:?} {y:?}: {} vs {oracle}", r.p_value);
        }
    }

    #[test]
    fn wilcoxon_swap_symmetry() {
        let x = [0.61, 0.64, 0.66, 0.58, 0.70, 0.63, 0.65];
        let y = [0.60, 0.65, 0.61, 0.59, 0.66, 0.60, 0.62];
        let a = wilcoxon_signed_rank(&x, &y).unwrap();
        let b = wilcoxon_signed_rank(&y, &x).unwrap();
        assert_eq!(a.p_value, b.p_value);
    }

    #[test]
    fn wilcoxon_large_n_uses_normal_approx() {
        let x: Vec<f64> = (1..=40).map(|i| i as f64).collect();
        let y = vec![0.0; 40];
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, TestMethod::WilcoxonNormalApprox);
        // W+ = 820, mean 410, var 40*41*81/24 = 5535, z = 409.5 / sqrt(5535).
        let z: f64 = 409.5 / 5535f64.sqrt();
        let expected = statrs::function::erf::erfc(z / std::f64::consts::SQRT_2);
        assert!((r.p_value - expected).abs() < 1e-15);
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn wilcoxon_normal_approx_close_to_exact_at_boundary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..25).map(|_| rng.gen::<f64>()).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.gen::<f64>() * 0.8).collect();
        let exact = wilcoxon_signed_rank(&x, &y).unwrap();
        let mut x26 = x.clone();
        x26.push(0.5);
        let mut y26 = y.clone();
        y26.push(0.4);
        let approx = wilcoxon_signed_rank(&x26, &y26).unwrap();
        assert_eq!(approx.method, TestMethod::WilcoxonNormalApprox);
        assert!((exact.p_value - approx.p_value).abs() < 0.05);
    }

    #[test]
    fn t_test_examples() {
        assert_eq!(t_one_sample(&[5.0; 5], 5.0), Err(StatsError::ZeroVariance));
        assert_eq!(t_one_sample(&[1.0], 0.0), Err(StatsError::TooFewValues(1)));

        let r = t_one_sample(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.0).unwrap();
        assert!((r.statistic - 3.0 / (2.5f64.sqrt() / 5f64.sqrt())).abs() < 1e-12);
        assert!((r.statistic - 4.2426).abs() < 1e-4);
        assert!((r.p_value - 0.0132).abs() < 1e-4);
    }

    #[test]
    fn t_test_matches_statrs_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let n = rng.gen_range(2..30);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.4..0.7)).collect();
            let mu0 = rng.gen_range(0.4..0.7);
            let r = t_one_sample(&values, mu0).unwrap();
            let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).unwrap();
            let oracle = 2.0 * dist.cdf(-r.statistic.abs());
            assert!(((r.p_value - oracle) / oracle).abs() < 1e-9, "{} vs {oracle}", r.p_value);
        }
    }

    #[test]
    fn t_test_p_decreases_with_effect() {
        let base = [-0.2, -0.1, 0.0, 0.1, 0.2];
        let mut last = 1.1;
        for shift in [0.0, 0.05, 0.1, 0.2, 0.4, 0.8] {
            let v: Vec<f64> = base.iter().map(|b| b + shift).collect();
            let p = t_one_sample(&v, 0.0).unwrap().p_value;
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn incomplete_beta_known_values() {
        // I_x(1, 1) = x; I_x(a, 1) = x^a; I_0.5(a, a) = 0.5.
        assert!((regularized_incomplete_beta(0.3, 1.0, 1.0) - 0.3).abs() < 1e-14);
        assert!((regularized_incomplete_beta(0.6, 3.0, 1.0) - 0.216).abs() < 1e-14);
        assert!((regularized_incomplete_beta(0.5, 4.5, 4.5) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn bh_reference_decisions() {
        let d = bh_correct(&[0.7047, 0.2049, 0.0157], 0.05).unwrap();
        assert_eq!(d.significant, vec![false, false, true]);
        assert!((d.adjusted_p[2] - 0.0471).abs() < 1e-12);
    }

    #[test]
    fn bh_single_is_identity() {
        let d = bh_correct(&[0.01], 0.05).unwrap();
        assert_eq!(d.adjusted_p, vec![0.01]);
        assert_eq!(d.significant, vec![true]);
    }

    #[test]
    fn bh_errors() {
        assert!(matches!(bh_correct(&[1.2], 0.05), Err(StatsError::InvalidPValue(_, 0))));
        assert!(matches!(bh_correct(&[f64::NAN], 0.05), Err(StatsError::InvalidPValue(_, 0))));
        assert!(matches!(bh_correct(&[0.1], 1.0), Err(StatsError::InvalidAlpha(_))));
    }

    fn bh_step_up_oracle(p: &[f64], alpha: f64) -> Vec<bool> {
        let m = p.len();
        let mut sorted = p.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let k_star = (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 / m as f64 * alpha);
        match k_star {
            None => vec![false; m],
            Some(k) => p.iter().map(|&v| v <= sorted[k - 1]).collect(),
        }
    }

    #[test]
    fn bh_matches_step_up_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let p: Vec<f64> = (0..20).map(|_| rng.gen::<f64>().powi(3)).collect();
            let d = bh_correct(&p, 0.05).unwrap();
            assert_eq!(d.significant, bh_step_up_oracle(&p, 0.05));
            let mut order: Vec<usize> = (0..20).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            for w in order.windows(2) {
                assert!(d.adjusted_p[w[0]] <= d.adjusted_p[w[1]]);
            }
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn bh_permutation_invariant(p in proptest::collection::vec(0.0f64..=1.0, 1..15), seed in any::<u64>()) {
                let d = bh_correct(&p, 0.05).unwrap();
                let mut perm: Vec<usize> = (0..p.len()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for i in (1..perm.len()).rev() {
                    perm.swap(i, rng.gen_range(0..=i));
                }
                let shuffled: Vec<f64> = perm.iter().map(|&i| p[i]).collect();
                let ds = bh_correct(&shuffled, 0.05).unwrap();
                for (j, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(ds.significant[j], d.significant[i]);
                    prop_assert_eq!(ds.adjusted_p[j], d.adjusted_p[i]);
                }
            }

            #[test]
            fn wilcoxon_p_in_unit_interval(x in proptest::collection::vec(-5.0f64..5.0, 1..30)) {
                let y = vec![0.0; x.len()];
                if let Ok(r) = wilcoxon_signed_rank(&x, &y) {
                    prop_assert!((0.0..=1.0).contains(&r.p_value));
                }
            }
        }
    }
}
