//! Validation statistics for candidate outcome summaries: test–retest
//! reliability (ICC), known-groups discrimination (Mann–Whitney U, ROC AUC)
//! and agreement with a reference outcome (correlation, simple regression).

pub mod special;

use crate::error::{Error, Result};

/// Threshold on `n1 + n2` up to which tie-free Mann–Whitney p-values are
/// computed exactly.
pub const EXACT_MW_MAX_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSquares {
    /// Between subjects (rows).
    pub rows: f64,
    /// Between occasions (columns).
    pub columns: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IccResult {
    pub icc_a1: f64,
    pub icc_c1: f64,
    pub mean_squares: MeanSquares,
    pub n: usize,
    pub k: usize,
}

/// ICC(A,1) and ICC(C,1) from the two-way ANOVA of an `n × k` table with one
/// value per subject (row) and occasion (column). Negative estimates are
/// returned as computed. A non-finite cell counts as missing.
pub fn icc(values: &[Vec<f64>]) -> Result<IccResult> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("ICC needs at least 2 subjects, got {n}")));
    }
    let k = values[0].len();
    if k < 2 {
        return Err(Error::InsufficientData(format!("ICC needs at least 2 occasions, got {k}")));
    }
    for (i, row) in values.iter().enumerate() {
        if row.len() != k || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::IncompleteDesign(format!(
                "subject row {i} does not have {k} finite values"
            )));
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    let grand = values.iter().flatten().sum::<f64>() / (nf * kf);
    let row_means: Vec<f64> = values.iter().map(|r| r.iter().sum::<f64>() / kf).collect();
    let col_means: Vec<f64> = (0..k).map(|j| values.iter().map(|r| r[j]).sum::<f64>() / nf).collect();

    let total: f64 = values.iter().flatten().map(|v| (v - grand).powi(2)).sum();
    if total == 0.0 {
        return Err(Error::Undefined("ICC of a table with zero total variance".into()));
    }
    let ssr = kf * row_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let ssc = nf * col_means.iter().map(|m| (m - grand).powi(2)).sum::<f64>();
    let mut sse = 0.0;
    for (row, rm) in values.iter().zip(&row_means) {
        for (v, cm) in row.iter().zip(&col_means) {
            sse += (v - rm - cm + grand).powi(2);
        }
    }
    let msr = ssr / (nf - 1.0);
    let msc = ssc / (kf - 1.0);
    let mse = sse / ((nf - 1.0) * (kf - 1.0));
    let icc_c1 = (msr - mse) / (msr + (kf - 1.0) * mse);
    let icc_a1 = (msr - mse) / (msr + (kf - 1.0) * mse + kf / nf * (msc - mse));
    Ok(IccResult {
        icc_a1,
        icc_c1,
        mean_squares: MeanSquares {
            rows: msr,
            columns: msc,
            error: mse,
        },
        n,
        k,
    })
}

/// Midranks (1-based) of `values`; tied values share the average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MannWhitneyResult {
    /// Wins plus half-ties of the second sample over the first.
    pub u: f64,
    /// `min(u, n1·n2 − u)`.
    pub u_min: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Two-sided Mann–Whitney U test of `x` (first group) against `y`.
pub fn mann_whitney(x: &[f64], y: &[f64]) -> Result<MannWhitneyResult> {
    let (n1, n2) = (x.len(), y.len());
    if n1 == 0 || n2 == 0 {
        return Err(Error::InsufficientData(format!(
            "Mann-Whitney needs two non-empty groups, got sizes {n1} and {n2}"
        )));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::Undefined("Mann-Whitney input contains NaN".into()));
    }
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    let u = u_from_ranks(&ranks[n1..]);
    let nn = (n1 * n2) as f64;
    let u_min = u.min(nn - u);

    let tie_sum = tie_correction(&pooled);
    let (p_value, exact) = if n1 + n2 <= EXACT_MW_MAX_N && tie_sum == 0.0 {
        (exact_p(n1, n2, u_min), true)
    } else {
        (normal_p(n1, n2, u, tie_sum), false)
    };
    Ok(MannWhitneyResult {
        u,
        u_min,
        p_value,
        exact,
    })
}

fn u_from_ranks(second_group_ranks: &[f64]) -> f64 {
    let n2 = second_group_ranks.len() as f64;
    second_group_ranks.iter().sum::<f64>() - n2 * (n2 + 1.0) / 2.0
}

/// `Σ (t³ − t)` over groups of tied values.
fn tie_correction(pooled: &[f64]) -> f64 {
    let mut sorted = pooled.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sum = 0.0;
    let mut start = 0;
    while start < sorted.len() {
        let mut end = start + 1;
        while end < sorted.len() && sorted[end] == sorted[start] {
            end += 1;
        }
        let t = (end - start) as f64;
        sum += t * t * t - t;
        start = end;
    }
    sum
}

/// `2·P(U ≤ u_min)` under the permutation null, by counting how many of the
/// `C(n1+n2, n1)` rank arrangements give each value of U.
fn exact_p(n1: usize, n2: usize, u_min: f64) -> f64 {
    let max_u = n1 * n2;
    // counts[i][j][u]: arrangements of i first-group and j second-group items
    // with statistic u, built one item at a time
    let mut prev: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n2 + 1];
    for row in prev.iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; max_u + 1]; n2 + 1];
        cur[0][0] = 1.0;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // largest item belongs to the second group: it beats all i
                // items of the first group
                let from_second = if u >= i { cur[j - 1][u - i] } else { 0.0 };
                let from_first = prev[j][u];
                cur[j][u] = from_second + from_first;
            }
        }
        prev = cur;
    }
    let dist = &prev[n2];
    let total: f64 = dist.iter().sum();
    let cutoff = u_min.floor() as usize;
    let count: f64 = dist[..=cutoff.min(max_u)].iter().sum();
    ((2.0 * count) / total).min(1.0)
}

fn normal_p(n1: usize, n2: usize, u: f64, tie_sum: f64) -> f64 {
    let (a, b) = (n1 as f64, n2 as f64);
    let n = a + b;
    let mean = a * b / 2.0;
    let var = a * b / 12.0 * ((n + 1.0) - tie_sum / (n * (n - 1.0)).max(1.0));
    if !(var > 0.0) {
        return 1.0;
    }
    let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * special::normal_sf(z)).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupTestResult {
    pub u_statistic: f64,
    pub p_value: f64,
    /// `u_statistic / (n1·n2)`: chance that a group-2 value exceeds a
    /// group-1 value, ties counted one half.
    pub auc: f64,
    pub n1: usize,
    pub n2: usize,
}

/// Mann–Whitney test and AUC of group 2 against group 1.
pub fn group_test(group1: &[f64], group2: &[f64]) -> Result<GroupTestResult> {
    let mw = mann_whitney(group1, group2)?;
    let (n1, n2) = (group1.len(), group2.len());
    Ok(GroupTestResult {
        u_statistic: mw.u,
        p_value: mw.p_value,
        auc: mw.u / (n1 * n2) as f64,
        n1,
        n2,
    })
}

/// ROC AUC of `scores` for the positive class (`true` labels).
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let negatives: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    let positives: Vec<f64> = scores.iter().zip(labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    if negatives.is_empty() || positives.is_empty() {
        return Err(Error::InsufficientData("AUC needs both label classes".into()));
    }
    let mut pooled = negatives.clone();
    pooled.extend(&positives);
    let ranks = midranks(&pooled);
    let u = u_from_ranks(&ranks[negatives.len()..]);
    Ok(u / (negatives.len() * positives.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMethod {
    Pearson,
    Spearman,
}

pub fn correlation(x: &[f64], y: &[f64], method: CorrelationMethod) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} x values for {} y values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "correlation needs at least 3 pairs, got {}",
            x.len()
        )));
    }
    match method {
        CorrelationMethod::Pearson => pearson(x, y),
        CorrelationMethod::Spearman => pearson(&midranks(x), &midranks(y)),
    }
}

fn centered_sums(x: &[f64], y: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    (mx, my, sxx, syy, sxy)
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (_, _, sxx, syy, sxy) = centered_sums(x, y);
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined("correlation with a constant variable".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OlsResult {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Two-sided t-test of zero slope with `n − 2` degrees of freedom.
    pub p_slope: f64,
    pub n: usize,
}

/// Least-squares line `y = intercept + slope·x`. A constant `y` gives
/// `r_squared = 0` and `p_slope = 1`.
pub fn ols_simple(x: &[f64], y: &[f64]) -> Result<OlsResult> {
    if x.len() != y.len() {
        return Err(Error::Dimension(format!("{} x values for {} y values", x.len(), y.len())));
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "regression needs at least 3 observations for a residual degree of freedom, got {n}"
        )));
    }
    let (mx, my, sxx, syy, sxy) = centered_sums(x, y);
    if sxx == 0.0 {
        return Err(Error::Rank("regressor is constant".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    if syy == 0.0 {
        return Ok(OlsResult {
            slope,
            intercept,
            r_squared: 0.0,
            p_slope: 1.0,
            n,
        });
    }
    let r_squared = (sxy * sxy / (sxx * syy)).min(1.0);
    let df = (n - 2) as f64;
    let sse = (syy - slope * sxy).max(0.0);
    let se = (sse / df / sxx).sqrt();
    let p_slope = if se == 0.0 {
        0.0
    } else {
        special::t_two_sided_p(slope / se, df)
    };
    Ok(OlsResult {
        slope,
        intercept,
        r_squared,
        p_slope,
        n,
    })
}

/// Kolmogorov–Smirnov distance between the empirical distribution of
/// `values` and the uniform distribution on `[0, 1]`.
pub fn ks_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn icc_perfect_agreement_and_consistency() {
        let rows: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64; 2]).collect();
        let r = icc(&rows).unwrap();
        assert_eq!(r.mean_squares.error, 0.0);
        assert_eq!(r.icc_a1, 1.0);
        assert_eq!(r.icc_c1, 1.0);
        let shifted: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[0], r[1] + 5.0]).collect();
        let s = icc(&shifted).unwrap();
        assert!((s.icc_c1 - 1.0).abs() < 1e-12);
        assert!(s.icc_a1 < 1.0);
    }

    #[test]
    fn icc_errors() {
        assert!(matches!(icc(&[vec![1.0, 2.0], vec![1.0]]), Err(Error::IncompleteDesign(_))));
        assert!(matches!(icc(&[vec![1.0, f64::NAN], vec![1.0, 2.0]]), Err(Error::IncompleteDesign(_))));
        assert!(matches!(icc(&[vec![3.0, 3.0], vec![3.0, 3.0]]), Err(Error::Undefined(_))));
    }

    #[test]
    fn icc_two_way_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let col: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let r: f64 = StandardNormal.sample(&mut rng);
                (0..2)
                    .map(|j| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        2.0 * r + col[j] + e
                    })
                    .collect()
            })
            .collect();
        let res = icc(&rows).unwrap();
        assert!((res.icc_c1 - 0.8).abs() < 0.03, "{}", res.icc_c1);
        // with only two occasions the column effect is itself a two-draw
        // sample, so ICC(A,1) is checked in the acceptance suite over many
        // column draws; here only the ordering holds
        assert!(res.icc_a1 <= res.icc_c1 || res.mean_squares.columns < res.mean_squares.error);
    }

    #[test]
    fn icc_is_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect();
        let a = icc(&rows).unwrap();
        let b = icc(&rows.iter().map(|r| r.iter().map(|v| v + 10.0).collect()).collect::<Vec<_>>()).unwrap();
        assert!((a.icc_a1 - b.icc_a1).abs() < 1e-10 && (a.icc_c1 - b.icc_c1).abs() < 1e-10);
        let c = icc(&rows.iter().map(|r| vec![r[0], r[1] - 4.0, r[2]]).collect::<Vec<_>>()).unwrap();
        assert!((a.icc_c1 - c.icc_c1).abs() < 1e-10);
    }

    #[test]
    fn midranks_average_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn exact_mann_whitney_small_case() {
        let r = mann_whitney(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u_min, 0.0);
        assert_eq!(r.u, 4.0);
        assert!(r.exact);
        assert_eq!(r.p_value, 1.0 / 3.0);
    }

    #[test]
    fn exact_distribution_matches_enumeration() {
        // n1 = 3, n2 = 4: enumerate all 35 subsets of ranks for group 1
        let (n1, n2) = (3usize, 4usize);
        let n = n1 + n2;
        let mut counts = vec![0usize; n1 * n2 + 1];
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n1 {
                continue;
            }
            let mut u = 0;
            for a in 0..n {
                if mask & (1 << a) == 0 {
                    // a is in group 2: count group-1 ranks below it
                    u += (0..a).filter(|b| mask & (1 << b) != 0).count();
                }
            }
            counts[u] += 1;
        }
        for u_min in 0..=6 {
            let c: usize = counts[..=u_min].iter().sum();
            let want = (2.0 * c as f64 / 35.0).min(1.0);
            assert!((exact_p(n1, n2, u_min as f64) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_groups_and_full_separation() {
        let x: Vec<f64> = (0..15).map(|i| (i % 5) as f64).collect();
        let r = mann_whitney(&x, &x).unwrap();
        assert_eq!(r.u, 15.0 * 15.0 / 2.0);
        assert!(r.p_value >= 0.99);
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| 100.0 + i as f64).collect();
        let r = mann_whitney(&a, &b).unwrap();
        assert!(!r.exact);
        assert!(r.p_value < 1e-9);
        assert!(mann_whitney(&[], &[1.0]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[1.0, 2.0, 3.0, 4.0], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[2.0; 6], &[false, true, false, true, true, false]).unwrap(), 0.5);
        assert_eq!(auc(&[1.0, 2.0, 3.0, 4.0], &[false, true, false, true]).unwrap(), 0.75);
        assert!(auc(&[1.0, 2.0], &[true, true]).is_err());
    }

    #[test]
    fn auc_equals_u_over_product_and_flips() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x: Vec<f64> = (0..7).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..9).map(|_| rng.random::<f64>() + 0.2).collect();
            let g = group_test(&x, &y).unwrap();
            let mut scores = x.clone();
            scores.extend(&y);
            let labels: Vec<bool> = (0..16).map(|i| i >= 7).collect();
            let a = auc(&scores, &labels).unwrap();
            assert_eq!(a, g.u_statistic / 63.0);
            assert_eq!(a, g.auc);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            assert!((a + auc(&neg, &labels).unwrap() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn p_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in [6, 25] {
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let t = |v: &[f64]| v.iter().map(|a| (3.0 * a).exp() - 7.0).collect::<Vec<_>>();
            assert_eq!(mann_whitney(&x, &y).unwrap().p_value, mann_whitney(&t(&x), &t(&y)).unwrap().p_value);
        }
    }

    #[test]
    fn correlations() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.3).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v + 1.0).collect();
        assert!((correlation(&x, &y, CorrelationMethod::Pearson).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(correlation(&x, &y, CorrelationMethod::Spearman).unwrap(), 1.0);
        let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        assert_eq!(correlation(&x, &e, CorrelationMethod::Spearman).unwrap(), 1.0);
        assert!(correlation(&x, &e, CorrelationMethod::Pearson).unwrap() < 1.0);
        assert!(matches!(
            correlation(&x, &[1.0; 20], CorrelationMethod::Pearson),
            Err(Error::Undefined(_))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        let b: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
        assert!(correlation(&a, &b, CorrelationMethod::Pearson).unwrap().abs() < 0.05);
    }

    #[test]
    fn ols_exact_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let r = ols_simple(&x, &y).unwrap();
        assert!((r.slope - 2.0).abs() < 1e-12 && (r.intercept - 1.0).abs() < 1e-12);
        assert!((r.r_squared - 1.0).abs() < 1e-12);
        assert!(r.p_slope < 1e-12);
        assert!(matches!(ols_simple(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::InsufficientData(_))));
        assert!(matches!(ols_simple(&[1.0; 4], &[1.0, 2.0, 3.0, 4.0]), Err(Error::Rank(_))));
    }

    #[test]
    fn ols_r2_is_squared_pearson_and_null_p_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut ps = Vec::new();
        for rep in 0..2000 {
            let x: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y: Vec<f64> = (0..30).map(|_| StandardNormal.sample(&mut rng)).collect();
            let r = ols_simple(&x, &y).unwrap();
            if rep < 20 {
                let c = correlation(&x, &y, CorrelationMethod::Pearson).unwrap();
                assert!((r.r_squared - c * c).abs() < 1e-12);
            }
            ps.push(r.p_slope);
        }
        assert!(ks_uniform(&ps) < 0.05, "KS = {}", ks_uniform(&ps));
    }

    #[test]
    fn ks_of_perfect_grid() {
        let v: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_uniform(&v) - 0.005).abs() < 1e-12);
    }
}
