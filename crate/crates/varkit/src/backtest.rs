//! VaR violation counting and the statistical backtest battery: Kupiec
//! proportion-of-failures, Christoffersen independence and conditional
//! coverage, Wilcoxon signed-rank (exact for small n), and Mann-Whitney U.

use crate::special::norm_cdf;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("empty sample")]
    EmptySample,
}

/// Binary hit series, hit_t = 1{r_t < VaR_t}.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViolationSeries {
    pub hits: Vec<u8>,
    pub n: usize,
    pub x: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    AcceptH0,
    RejectH0,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    /// chi-square degrees of freedom; None for the exact/rank tests
    pub df: Option<u32>,
    /// rejection threshold on the statistic where one applies
    pub critical_value: Option<f64>,
    pub p_value: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    Less,
    Greater,
    TwoSided,
}

pub const CHI2_CRIT_DF1: f64 = 3.8415;
pub const CHI2_CRIT_DF2: f64 = 5.9915;

/// Strict-inequality violation rule.
pub fn count_violations(returns: &[f64], var: &[f64]) -> Result<ViolationSeries, BacktestError> {
    if returns.len() != var.len() {
        return Err(BacktestError::LengthMismatch {
            left: returns.len(),
            right: var.len(),
        });
    }
    let hits: Vec<u8> = returns
        .iter()
        .zip(var)
        .map(|(r, v)| u8::from(r < v))
        .collect();
    let x = hits.iter().map(|&h| h as usize).sum();
    Ok(ViolationSeries {
        n: hits.len(),
        x,
        hits,
    })
}

/// chi-square survival function, closed form for df 1 and 2.
pub fn chi_square_sf(statistic: f64, df: u32) -> f64 {
    assert!(statistic >= 0.0);
    match df {
        1 => 2.0 * (1.0 - norm_cdf(statistic.sqrt())),
        2 => (-statistic / 2.0).exp(),
        _ => panic!("only df 1 and 2 are supported"),
    }
}

/// Kupiec proportion-of-failures likelihood ratio, df = 1.
pub fn kupiec_pof(x: usize, n: usize, alpha: f64) -> Result<TestResult, BacktestError> {
    if n == 0 {
        return Err(BacktestError::DegenerateInput("n = 0".into()));
    }
    let (xf, nf) = (x as f64, n as f64);
    let ll_null = (nf - xf) * (1.0 - alpha).ln() + xf * alpha.ln();
    // ratio form: the terms cancel exactly when x/n equals alpha
    let ln_ratio = |k: f64| if k == 0.0 { 0.0 } else { k * (k / nf).ln() };
    let ll_alt = ln_ratio(nf - xf) + ln_ratio(xf);
    let lr = (-2.0 * (ll_null - ll_alt)).max(0.0);
    let p = chi_square_sf(lr, 1);
    Ok(TestResult {
        statistic: lr,
        df: Some(1),
        critical_value: Some(CHI2_CRIT_DF1),
        p_value: p,
        decision: if lr > CHI2_CRIT_DF1 {
            Decision::RejectH0
        } else {
            Decision::AcceptH0
        },
    })
}

/// Christoffersen independence likelihood ratio over hit transitions,
/// df = 1; empty transition rows contribute zero.
pub fn christoffersen_independence(hits: &[u8]) -> Result<TestResult, BacktestError> {
    if hits.len() < 2 {
        return Err(BacktestError::DegenerateInput(
            "need at least one transition".into(),
        ));
    }
    let mut n = [[0.0f64; 2]; 2];
    for w in hits.windows(2) {
        n[w[0] as usize][w[1] as usize] += 1.0;
    }
    let (n00, n01, n10, n11) = (n[0][0], n[0][1], n[1][0], n[1][1]);
    let total = n00 + n01 + n10 + n11;
    let pi = (n01 + n11) / total;
    let ll_null = xlnx_pair(n00 + n10, 1.0 - pi) + xlnx_pair(n01 + n11, pi);
    let pi01 = if n00 + n01 > 0.0 { n01 / (n00 + n01) } else { 0.0 };
    let pi11 = if n10 + n11 > 0.0 { n11 / (n10 + n11) } else { 0.0 };
    let ll_alt = xlnx_pair(n00, 1.0 - pi01)
        + xlnx_pair(n01, pi01)
        + xlnx_pair(n10, 1.0 - pi11)
        + xlnx_pair(n11, pi11);
    let lr = (-2.0 * (ll_null - ll_alt)).max(0.0);
    let p = chi_square_sf(lr, 1);
    Ok(TestResult {
        statistic: lr,
        df: Some(1),
        critical_value: Some(CHI2_CRIT_DF1),
        p_value: p,
        decision: if lr > CHI2_CRIT_DF1 {
            Decision::RejectH0
        } else {
            Decision::AcceptH0
        },
    })
}

fn xlnx_pair(count: f64, prob: f64) -> f64 {
    if count <= 0.0 {
        0.0
    } else {
        count * prob.ln()
    }
}

/// Conditional coverage: LR_cc = LR_uc + LR_ind, df = 2.
pub fn christoffersen_cc(hits: &[u8], alpha: f64) -> Result<TestResult, BacktestError> {
    let x = hits.iter().map(|&h| h as usize).sum();
    let uc = kupiec_pof(x, hits.len(), alpha)?;
    let ind = christoffersen_independence(hits)?;
    let lr = uc.statistic + ind.statistic;
    let p = chi_square_sf(lr, 2);
    Ok(TestResult {
        statistic: lr,
        df: Some(2),
        critical_value: Some(CHI2_CRIT_DF2),
        p_value: p,
        decision: if lr > CHI2_CRIT_DF2 {
            Decision::RejectH0
        } else {
            Decision::AcceptH0
        },
    })
}

/// Exact null distribution of the doubled signed-rank sum: counts[s] is
/// the number of sign patterns with 2*W+ = s.
fn signed_rank_counts(doubled_ranks: &[u64]) -> Vec<f64> {
    let max: u64 = doubled_ranks.iter().sum();
    let mut counts = vec![0.0f64; max as usize + 1];
    counts[0] = 1.0;
    for &r in doubled_ranks {
        for s in (r..=max).rev() {
            let add = counts[(s - r) as usize];
            if add > 0.0 {
                counts[s as usize] += add;
            }
        }
    }
    counts
}

/// Midranks of absolute values, doubled so ties stay integral.
fn doubled_midranks(abs: &[f64]) -> Vec<u64> {
    let n = abs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut doubled = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // midrank of positions i..=j (1-based ranks), doubled: (i+1 + j+1)
        let d = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            doubled[k] = d;
        }
        i = j + 1;
    }
    doubled
}

const WILCOXON_EXACT_MAX: usize = 25;

/// Wilcoxon signed-rank test on paired samples. Zero differences are
/// dropped; exact enumeration of the null up to n = 25, normal
/// approximation beyond. `Less` tests whether `a` tends below `b`.
pub fn wilcoxon_signed_rank(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
) -> Result<TestResult, BacktestError> {
    if a.len() != b.len() {
        return Err(BacktestError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(BacktestError::AllZeroDifferences);
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let doubled = doubled_midranks(&abs);
    let w_plus_doubled: u64 = diffs
        .iter()
        .zip(&doubled)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let total: u64 = doubled.iter().sum();
    let w_minus_doubled = total - w_plus_doubled;
    let w = (w_plus_doubled.min(w_minus_doubled) as f64) / 2.0;

    let p = if n <= WILCOXON_EXACT_MAX {
        let counts = signed_rank_counts(&doubled);
        let denom = 2.0f64.powi(n as i32);
        let cdf_leq = |s: u64| -> f64 {
            counts[..=(s as usize).min(counts.len() - 1)].iter().sum::<f64>() / denom
        };
        match alternative {
            Alternative::Less => cdf_leq(w_plus_doubled),
            Alternative::Greater => cdf_leq(w_minus_doubled),
            Alternative::TwoSided => {
                (2.0 * cdf_leq(w_plus_doubled.min(w_minus_doubled))).min(1.0)
            }
        }
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        // tie correction on the variance
        let tie_adj: f64 = tie_correction_signed(&abs);
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_adj;
        let w_plus = w_plus_doubled as f64 / 2.0;
        let z = |stat: f64| (stat + 0.5 - mean) / var.sqrt();
        match alternative {
            Alternative::Less => norm_cdf(z(w_plus)),
            Alternative::Greater => norm_cdf(z(w_minus_doubled as f64 / 2.0)),
            Alternative::TwoSided => {
                let lo = w_plus.min(w_minus_doubled as f64 / 2.0);
                (2.0 * norm_cdf(z(lo))).min(1.0)
            }
        }
    };

    Ok(TestResult {
        statistic: w,
        df: None,
        critical_value: None,
        p_value: p,
        decision: if p < 0.05 {
            Decision::RejectH0
        } else {
            Decision::AcceptH0
        },
    })
}

fn tie_correction_signed(abs: &[f64]) -> f64 {
    let mut sorted = abs.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut adj = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        adj += t * t * t - t;
        i = j + 1;
    }
    adj / 48.0
}

/// Mann-Whitney U with midrank ties; normal approximation with tie and
/// continuity corrections. `Less` tests whether `a` tends below `b`.
pub fn mann_whitney_u(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
) -> Result<TestResult, BacktestError> {
    if a.is_empty() || b.is_empty() {
        return Err(BacktestError::EmptySample);
    }
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let n = n1 + n2;

    let mut combined: Vec<(f64, bool)> = a
        .iter()
        .map(|&x| (x, true))
        .chain(b.iter().map(|&x| (x, false)))
        .collect();
    combined.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut rank_sum_a = 0.0;
    let mut tie_adj = 0.0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j + 1 < combined.len() && combined[j + 1].0 == combined[i].0 {
            j += 1;
        }
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        let t = (j - i + 1) as f64;
        tie_adj += t * t * t - t;
        for item in &combined[i..=j] {
            if item.1 {
                rank_sum_a += midrank;
            }
        }
        i = j + 1;
    }

    let u1 = rank_sum_a - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_adj / (n * (n - 1.0)));
    if var <= 0.0 {
        // all observations tied; no evidence either way
        return Ok(TestResult {
            statistic: u1,
            df: None,
            critical_value: None,
            p_value: 1.0,
            decision: Decision::AcceptH0,
        });
    }
    let sd = var.sqrt();
    let p = match alternative {
        // a below b <=> few a-over-b wins <=> small U1
        Alternative::Less => norm_cdf((u1 + 0.5 - mean) / sd),
        Alternative::Greater => 1.0 - norm_cdf((u1 - 0.5 - mean) / sd),
        Alternative::TwoSided => {
            let z = ((u1 - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * (1.0 - norm_cdf(z))).min(1.0)
        }
    };
    Ok(TestResult {
        statistic: u1,
        df: None,
        critical_value: None,
        p_value: p,
        decision: if p < 0.05 {
            Decision::RejectH0
        } else {
            Decision::AcceptH0
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn violations_strict_inequality() {
        let v = count_violations(&[-0.03, -0.03], &[-0.03, -0.03]).unwrap();
        assert_eq!(v.x, 0);
        let v = count_violations(&[-0.05, 0.01], &[-0.03, -0.03]).unwrap();
        assert_eq!(v.x, 1);
        assert_eq!(v.hits, vec![1, 0]);
    }

    #[test]
    fn kupiec_zero_at_exact_coverage() {
        let r = kupiec_pof(50, 1000, 0.05).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert!((r.p_value - 1.0).abs() < 1e-9);
        assert_eq!(r.decision, Decision::AcceptH0);
    }

    #[test]
    fn kupiec_closed_form_zero_hits() {
        let r = kupiec_pof(0, 100, 0.05).unwrap();
        let expect = -2.0 * 100.0 * 0.95f64.ln();
        assert!((r.statistic - expect).abs() < 1e-10);
        assert!((r.statistic - 10.259).abs() < 1e-3);
        assert_eq!(r.decision, Decision::RejectH0);
    }

    #[test]
    fn kupiec_73_of_1000() {
        let r = kupiec_pof(73, 1000, 0.05).unwrap();
        assert!((r.statistic - 9.8131).abs() < 0.001, "LR = {}", r.statistic);
        assert_eq!(r.decision, Decision::RejectH0);
    }

    #[test]
    fn kupiec_minimized_at_nominal_coverage() {
        let n = 400;
        let alpha = 0.05;
        let at_nominal = kupiec_pof(20, n, alpha).unwrap().statistic;
        for x in 0..=n {
            let lr = kupiec_pof(x, n, alpha).unwrap().statistic;
            assert!(lr + 1e-12 >= at_nominal);
        }
        assert!(at_nominal.abs() < 1e-12);
    }

    #[test]
    fn independence_null_fixed_point() {
        // one transition of each kind: pi01 = pi11 = 1/2 exactly
        let hits = [0u8, 0, 1, 1, 0];
        let r = christoffersen_independence(&hits).unwrap();
        assert!(r.statistic.abs() < 1e-12);
        assert_eq!(r.decision, Decision::AcceptH0);
    }

    #[test]
    fn clustered_hits_rejected() {
        let mut hits = vec![0u8; 100];
        for h in hits.iter_mut().take(60).skip(40) {
            *h = 1;
        }
        let r = christoffersen_independence(&hits).unwrap();
        assert!(r.statistic > CHI2_CRIT_DF1, "LR = {}", r.statistic);
        assert_eq!(r.decision, Decision::RejectH0);
    }

    #[test]
    fn alternating_hits_rejected() {
        // anti-clustering also violates independence
        let hits: Vec<u8> = (0..100).map(|i| (i % 2) as u8).collect();
        let mut n = [[0.0f64; 2]; 2];
        for w in hits.windows(2) {
            n[w[0] as usize][w[1] as usize] += 1.0;
        }
        // transition-count oracle: pi01 = 1, pi11 = 0
        assert_eq!(n[0][1], 50.0);
        assert_eq!(n[1][1], 0.0);
        let pi = (n[0][1] + n[1][1]) / 99.0;
        let oracle = -2.0
            * ((n[0][0] + n[1][0]) * (1.0 - pi).ln() + (n[0][1] + n[1][1]) * pi.ln());
        let r = christoffersen_independence(&hits).unwrap();
        assert!((r.statistic - oracle).abs() < 1e-9);
        assert_eq!(r.decision, Decision::RejectH0);
    }

    #[test]
    fn cc_is_sum_of_components() {
        let mut rng = crate::rng::StreamRng::new(11, "backtest-prop", 0);
        for _ in 0..50 {
            let hits: Vec<u8> = (0..200).map(|_| u8::from(rng.next_f64() < 0.07)).collect();
            if hits.iter().all(|&h| h == 0) {
                continue;
            }
            let x = hits.iter().map(|&h| h as usize).sum::<usize>();
            let uc = kupiec_pof(x, hits.len(), 0.05).unwrap();
            let ind = christoffersen_independence(&hits).unwrap();
            let cc = christoffersen_cc(&hits, 0.05).unwrap();
            assert!((cc.statistic - uc.statistic - ind.statistic).abs() < 1e-12);
        }
    }

    #[test]
    fn chi_square_criticals() {
        assert!((chi_square_sf(0.0, 1) - 1.0).abs() < 1e-15);
        assert!((chi_square_sf(0.0, 2) - 1.0).abs() < 1e-15);
        assert!((chi_square_sf(3.8415, 1) - 0.05).abs() < 1e-4);
        assert!((chi_square_sf(5.9915, 2) - 0.05).abs() < 1e-4);
        // monotone decreasing
        let mut prev = 1.0;
        for i in 1..100 {
            let p = chi_square_sf(i as f64 * 0.2, 1);
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn wilcoxon_all_negative_n8() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let b = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0, 16.0];
        let r = wilcoxon_signed_rank(&a, &b, Alternative::Less).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert_eq!(r.p_value, 1.0 / 256.0);
        assert_eq!(r.decision, Decision::RejectH0);
    }

    #[test]
    fn wilcoxon_w8_n8_matches_exact_enumeration() {
        // construct n = 8 with W+ = 8 under `less`
        // positive differences carry ranks summing to 8: use ranks {8}
        let a = [10.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let b = [2.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        // diffs: +8, -1, -2, -3, -4, -5, -6, -7 -> |d| ranks: 8 for +8
        let r = wilcoxon_signed_rank(&a, &b, Alternative::Less).unwrap();
        assert_eq!(r.statistic, 8.0);
        assert!((r.p_value - 25.0 / 256.0).abs() < 5e-4);
        assert!((r.p_value - 0.09765625).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_all_zero_differences() {
        let a = [1.0, 2.0];
        assert!(matches!(
            wilcoxon_signed_rank(&a, &a, Alternative::Less),
            Err(BacktestError::AllZeroDifferences)
        ));
    }

    #[test]
    fn wilcoxon_exact_distribution_sums_to_one() {
        for n in 1..=12usize {
            let doubled: Vec<u64> = (1..=n as u64).map(|r| 2 * r).collect();
            let counts = signed_rank_counts(&doubled);
            let total: f64 = counts.iter().sum();
            assert!((total - 2.0f64.powi(n as i32)).abs() < 1e-6, "n={n}");
        }
    }

    #[test]
    fn mann_whitney_identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = mann_whitney_u(&a, &a, Alternative::TwoSided).unwrap();
        assert_eq!(r.statistic, 8.0); // n1*n2/2
        assert!(r.p_value > 0.9);
        assert_eq!(r.decision, Decision::AcceptH0);
    }

    #[test]
    fn mann_whitney_extreme_separation() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| 1000.0 + i as f64).collect();
        let r = mann_whitney_u(&a, &b, Alternative::Less).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value < 1e-6);
        let r2 = mann_whitney_u(&b, &a, Alternative::Greater).unwrap();
        assert_eq!(r2.statistic, 900.0); // n1*n2
        assert!(r2.p_value < 1e-6);
    }

    #[test]
    fn mann_whitney_power_on_shifted_gaussians() {
        let mut hits = 0;
        let trials = 40;
        for seed in 0..trials {
            let mut rng = crate::rng::StreamRng::new(seed, "mwu-power", 0);
            let a: Vec<f64> = (0..700).map(|_| rng.next_standard_normal()).collect();
            let b: Vec<f64> = (0..700).map(|_| 0.5 + rng.next_standard_normal()).collect();
            let r = mann_whitney_u(&a, &b, Alternative::Less).unwrap();
            if r.p_value < 0.01 {
                hits += 1;
            }
        }
        assert!(hits as f64 >= 0.95 * trials as f64, "power {hits}/{trials}");
    }

    #[test]
    fn decision_consistent_with_critical_value() {
        let mut rng = crate::rng::StreamRng::new(13, "backtest-prop", 1);
        for _ in 0..200 {
            let n = 100 + rng.next_index(400);
            let x = rng.next_index(n / 4);
            let r = kupiec_pof(x, n, 0.05).unwrap();
            assert_eq!(
                r.decision == Decision::RejectH0,
                r.statistic > r.critical_value.unwrap()
            );
        }
    }
}
