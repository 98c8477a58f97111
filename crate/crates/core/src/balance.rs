//! Covariate balance diagnostics: weighted two-sample KS and Welch tests,
//! standardized mean differences, quantile pairs and the min-p summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::matcher::{MatchMethod, MatchedSample};
use crate::model::{CovariateKind, CovariateValue, MatchMode, Portfolio, YearPair};

/// Above this n_a·n_b the KS p-value uses the asymptotic distribution.
const EXACT_KS_LIMIT: usize = 10_000;

/// Observations with positive weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Weighted {
    pub values: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Weighted {
    pub fn unweighted(values: Vec<f64>) -> Self {
        let weights = vec![1.0; values.len()];
        Weighted { values, weights }
    }

    pub fn new(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: values.len(),
                actual: weights.len(),
            });
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidWeights("sample weights must be positive".into()));
        }
        Ok(Weighted { values, weights })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Kish effective sample size (Σw)²/Σw².
    pub fn effective_n(&self) -> f64 {
        let s = self.total();
        s * s / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn mean(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum::<f64>()
            / self.total()
    }

    /// Σw(x−m)²/Σw.
    pub fn population_variance(&self) -> f64 {
        let m = self.mean();
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * (x - m) * (x - m))
            .sum::<f64>()
            / self.total()
    }

    /// Population variance scaled by n_e/(n_e − 1); the usual sample variance for unit weights.
    pub fn sample_variance(&self) -> f64 {
        let ne = self.effective_n();
        if ne <= 1.0 + 1e-12 {
            return 0.0;
        }
        self.population_variance() * ne / (ne - 1.0)
    }

    fn uniform_weights(&self) -> bool {
        self.weights.windows(2).all(|w| w[0] == w[1])
    }

    /// (value, weight) pairs sorted by value.
    fn sorted(&self) -> Vec<(f64, f64)> {
        let mut v: Vec<(f64, f64)> = self.values.iter().copied().zip(self.weights.iter().copied()).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution, Q(λ) = 2Σ(−1)^{k−1} e^{−2k²λ²}.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Dual series, converges fast for small λ.
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * lambda * lambda)).exp();
        let s: f64 = (0..6).map(|k| y.powi((2 * k + 1) * (2 * k + 1))).sum();
        (1.0 - (2.0 * std::f64::consts::PI).sqrt() / lambda * s).clamp(0.0, 1.0)
    } else {
        let x = (-2.0 * lambda * lambda).exp();
        let s: f64 = (1..=20)
            .map(|k: i32| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * x.powi(k * k)
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// Two-sample Kolmogorov–Smirnov test on weighted empirical CDFs.
///
/// Samples with uniform weights and n_a·n_b below 10 000 get the exact
/// permutation p-value (ties handled); otherwise the asymptotic Kolmogorov
/// distribution with Stephens' correction at Kish effective sizes.
pub fn ks_test(a: &Weighted, b: &Weighted) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let sa = a.sorted();
    let sb = b.sorted();
    let (wa, wb) = (a.total(), b.total());
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut d: f64 = 0.0;
    while i < sa.len() || j < sb.len() {
        let x = match (sa.get(i), sb.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < sa.len() && sa[i].0 == x {
            fa += sa[i].1;
            i += 1;
        }
        while j < sb.len() && sb[j].0 == x {
            fb += sb[j].1;
            j += 1;
        }
        d = d.max((fa / wa - fb / wb).abs());
    }
    let d = d.min(1.0);

    let (m, n) = (a.len(), b.len());
    let p_value = if a.uniform_weights() && b.uniform_weights() && m * n < EXACT_KS_LIMIT {
        exact_ks_p(&a.values, &b.values)
    } else {
        let (na, nb) = (a.effective_n(), b.effective_n());
        let ne = na * nb / (na + nb);
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        kolmogorov_q(lambda)
    };
    Ok(TestResult {
        statistic: d,
        p_value,
    })
}

/// P(D ≥ D_obs) over all equally likely splits of the pooled data into
/// groups of sizes m and n, counted along lattice paths.
fn exact_ks_p(a: &[f64], b: &[f64]) -> f64 {
    let (m, n) = (a.len(), b.len());
    let mut pooled: Vec<(f64, bool)> = a.iter().map(|&x| (x, true)).chain(b.iter().map(|&x| (x, false))).collect();
    pooled.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total = m + n;
    // Steps after which the ECDFs are observable (end of a tie block).
    let observable: Vec<bool> = (1..=total)
        .map(|k| k == total || pooled[k - 1].0 != pooled[k].0)
        .collect();
    let gap = |i: usize, j: usize| (i as i64 * n as i64 - j as i64 * m as i64).unsigned_abs();

    let (mut i, mut j) = (0, 0);
    let mut observed = 0;
    for k in 0..total {
        if pooled[k].1 {
            i += 1;
        } else {
            j += 1;
        }
        if observable[k] {
            observed = observed.max(gap(i, j));
        }
    }
    if observed == 0 {
        return 1.0;
    }

    // paths[j] = number of paths reaching (i, j) while staying below `observed`.
    let mut paths = vec![0.0f64; n + 1];
    paths[0] = 1.0;
    for j in 1..=n {
        paths[j] = if observable[j - 1] && gap(0, j) >= observed { 0.0 } else { paths[j - 1] };
    }
    for i in 1..=m {
        paths[0] = if observable[i - 1] && gap(i, 0) >= observed { 0.0 } else { paths[0] };
        for j in 1..=n {
            paths[j] = if observable[i + j - 1] && gap(i, j) >= observed {
                0.0
            } else {
                paths[j] + paths[j - 1]
            };
        }
    }
    let all = binomial(total, m);
    (1.0 - paths[n] / all).clamp(0.0, 1.0)
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Welch two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn t_test(a: &Weighted, b: &Weighted) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (na, nb) = (a.effective_n(), b.effective_n());
    let (qa, qb) = (a.sample_variance() / na, b.sample_variance() / nb);
    let se2 = qa + qb;
    let diff = ma - mb;
    if !(se2 > 0.0) || !se2.is_finite() {
        let equal = diff.abs() <= 1e-12 * ma.abs().max(mb.abs()).max(1.0);
        return Ok(if equal {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult {
                statistic: diff.signum() * f64::INFINITY,
                p_value: 0.0,
            }
        });
    }
    let t = diff / se2.sqrt();
    let term = |q: f64, n: f64| if q > 0.0 { q * q / (n - 1.0) } else { 0.0 };
    let df = se2 * se2 / (term(qa, na) + term(qb, nb));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| Error::DegenerateVariance)?;
    Ok(TestResult {
        statistic: t,
        p_value: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

/// (mean_a − mean_b) / √((var_a + var_b)/2) with weight-normalized variances.
pub fn smd(a: &Weighted, b: &Weighted) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let diff = a.mean() - b.mean();
    let pooled = (a.population_variance() + b.population_variance()) / 2.0;
    if pooled > 0.0 {
        Ok(diff / pooled.sqrt())
    } else if diff.abs() <= 1e-12 * a.mean().abs().max(1.0) {
        Ok(0.0)
    } else {
        Err(Error::DegenerateVariance)
    }
}

/// Weighted quantile with linear interpolation between weight midpoints.
fn quantile(sorted: &[(f64, f64)], total: f64, prob: f64) -> f64 {
    let mut cum = 0.0;
    let mut positions = Vec::with_capacity(sorted.len());
    for &(x, w) in sorted {
        positions.push(((cum + w / 2.0) / total, x));
        cum += w;
    }
    if prob <= positions[0].0 {
        return positions[0].1;
    }
    for pair in positions.windows(2) {
        let ((p0, x0), (p1, x1)) = (pair[0], pair[1]);
        if prob <= p1 {
            return x0 + (x1 - x0) * (prob - p0) / (p1 - p0);
        }
    }
    positions[positions.len() - 1].1
}

/// `n_points` matched quantiles at probabilities (k − ½)/n_points.
pub fn qq_pairs(a: &Weighted, b: &Weighted, n_points: usize) -> Result<Vec<(f64, f64)>> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    let (sa, sb) = (a.sorted(), b.sorted());
    let (ta, tb) = (a.total(), b.total());
    Ok((1..=n_points)
        .map(|k| {
            let prob = (k as f64 - 0.5) / n_points as f64;
            (quantile(&sa, ta, prob), quantile(&sb, tb, prob))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Before,
    After,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TestKind {
    Ks,
    T,
    Smd,
}

impl TestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TestKind::Ks => "ks",
            TestKind::T => "t",
            TestKind::Smd => "smd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceEntry {
    pub covariate: String,
    pub test: TestKind,
    pub statistic: f64,
    /// Absent for SMD rows.
    pub p_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub stage: Stage,
    pub entries: Vec<BalanceEntry>,
    /// Smallest p-value over KS and t rows.
    pub min_p: f64,
    /// Target-year policies in the (matched) sample.
    pub n_target: usize,
    /// Distinct comparison-year policies in the (matched) sample.
    pub n_comparison: usize,
}

impl BalanceReport {
    /// p-values of the tested rows in ascending order.
    pub fn sorted_p_values(&self) -> Vec<f64> {
        let mut p: Vec<f64> = self.entries.iter().filter_map(|e| e.p_value).collect();
        p.sort_by(f64::total_cmp);
        p
    }

    pub fn p_value(&self, covariate: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.covariate == covariate && e.p_value.is_some())
            .and_then(|e| e.p_value)
    }

    pub fn tested_covariates(&self) -> usize {
        self.entries.iter().filter(|e| e.p_value.is_some()).count()
    }
}

/// One side of a comparison as (portfolio index, weight).
type Side = Vec<(usize, f64)>;

fn covariate_sample(portfolio: &Portfolio, side: &Side, j: usize) -> Weighted {
    Weighted {
        values: side
            .iter()
            .map(|(i, _)| portfolio.policies[*i].covariates[j].as_f64().unwrap_or(f64::NAN))
            .collect(),
        weights: side.iter().map(|(_, w)| *w).collect(),
    }
}

fn indicator_sample(portfolio: &Portfolio, side: &Side, j: usize, level: &str) -> Weighted {
    Weighted {
        values: side
            .iter()
            .map(|(i, _)| match &portfolio.policies[*i].covariates[j] {
                CovariateValue::Categorical(l) if l == level => 1.0,
                _ => 0.0,
            })
            .collect(),
        weights: side.iter().map(|(_, w)| *w).collect(),
    }
}

/// Balance of the raw portfolio between the two years, unit weights.
pub fn balance_before(portfolio: &Portfolio, years: YearPair) -> Result<BalanceReport> {
    portfolio.require_years(years)?;
    let side = |y| portfolio.indices_in_year(y).into_iter().map(|i| (i, 1.0)).collect::<Side>();
    build_report(portfolio, Stage::Before, &side(years.target), &side(years.comparison), &[])
}

/// Balance in a matched sample: each matched target once, comparison policies weighted by θ.
pub fn balance_after(portfolio: &Portfolio, sample: &MatchedSample) -> Result<BalanceReport> {
    let targets: Side = sample.targets().into_iter().map(|t| (t, 1.0)).collect();
    let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
    for pair in &sample.pairs {
        *merged.entry(pair.comparison).or_default() += pair.weight;
    }
    let comparisons: Side = merged.into_iter().collect();
    let exact: Vec<usize> = portfolio
        .specs
        .iter()
        .enumerate()
        .filter(|(_, s)| match sample.options.method {
            MatchMethod::Complete => s.match_mode != MatchMode::Ignore,
            _ => s.match_mode == MatchMode::Exact,
        })
        .map(|(j, _)| j)
        .collect();
    build_report(portfolio, Stage::After, &targets, &comparisons, &exact)
}

fn is_binary(portfolio: &Portfolio, j: usize) -> bool {
    let mut distinct = BTreeSet::new();
    for p in &portfolio.policies {
        if let Some(x) = p.covariates[j].as_f64() {
            distinct.insert(x.to_bits());
            if distinct.len() > 2 {
                return false;
            }
        }
    }
    true
}

fn build_report(
    portfolio: &Portfolio,
    stage: Stage,
    target: &Side,
    comparison: &Side,
    exact: &[usize],
) -> Result<BalanceReport> {
    if target.is_empty() || comparison.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut entries = Vec::new();
    for (j, spec) in portfolio.specs.iter().enumerate() {
        if !spec.confounder {
            continue;
        }
        let forced = exact.contains(&j);
        match spec.kind {
            CovariateKind::Categorical => {
                let levels: BTreeSet<String> = target
                    .iter()
                    .chain(comparison)
                    .filter_map(|(i, _)| match &portfolio.policies[*i].covariates[j] {
                        CovariateValue::Categorical(l) => Some(l.clone()),
                        _ => None,
                    })
                    .collect();
                let tested: Vec<&String> = if levels.len() == 2 {
                    levels.iter().skip(1).collect()
                } else {
                    levels.iter().collect()
                };
                let mut best = TestResult { statistic: 0.0, p_value: 1.0 };
                if !forced {
                    for level in tested {
                        let r = t_test(
                            &indicator_sample(portfolio, target, j, level),
                            &indicator_sample(portfolio, comparison, j, level),
                        )?;
                        if r.p_value < best.p_value {
                            best = r;
                        }
                    }
                }
                entries.push(BalanceEntry {
                    covariate: spec.name.clone(),
                    test: TestKind::T,
                    statistic: best.statistic,
                    p_value: Some(best.p_value),
                });
            }
            CovariateKind::Numeric | CovariateKind::Ordinal => {
                let a = covariate_sample(portfolio, target, j);
                let b = covariate_sample(portfolio, comparison, j);
                let binary = is_binary(portfolio, j);
                let test = if binary { TestKind::T } else { TestKind::Ks };
                let result = if forced {
                    TestResult { statistic: 0.0, p_value: 1.0 }
                } else if binary {
                    t_test(&a, &b)?
                } else {
                    ks_test(&a, &b)?
                };
                entries.push(BalanceEntry {
                    covariate: spec.name.clone(),
                    test,
                    statistic: result.statistic,
                    p_value: Some(result.p_value),
                });
                if let Ok(s) = smd(&a, &b) {
                    entries.push(BalanceEntry {
                        covariate: spec.name.clone(),
                        test: TestKind::Smd,
                        statistic: s,
                        p_value: None,
                    });
                }
            }
        }
    }
    let min_p = entries
        .iter()
        .filter_map(|e| e.p_value)
        .fold(1.0, f64::min);
    Ok(BalanceReport {
        stage,
        entries,
        min_p,
        n_target: target.len(),
        n_comparison: comparison.len(),
    })
}

/// `covariate,test,statistic,p_before,p_after`; the statistic is the after-matching
/// value when an after report is given.
pub fn write_balance_csv<W: Write>(
    writer: W,
    before: &BalanceReport,
    after: Option<&BalanceReport>,
) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record(["covariate", "test", "statistic", "p_before", "p_after"])?;
    for entry in &before.entries {
        let later = after.and_then(|r| {
            r.entries
                .iter()
                .find(|e| e.covariate == entry.covariate && e.test == entry.test)
        });
        let fmt = |p: Option<f64>| p.map(|v| v.to_string()).unwrap_or_default();
        csv.write_record([
            entry.covariate.clone(),
            entry.test.as_str().to_string(),
            later.map_or(entry.statistic, |e| e.statistic).to_string(),
            fmt(entry.p_value),
            fmt(later.and_then(|e| e.p_value)),
        ])?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Plain-text p-value table, one column per report, plus the matched number row.
pub fn render_table(columns: &[(&str, &BalanceReport)]) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<24}", "p-values (%)");
    for (name, _) in columns {
        let _ = write!(out, "{name:>14}");
    }
    out.push('\n');
    if let Some((_, first)) = columns.first() {
        for entry in first.entries.iter().filter(|e| e.p_value.is_some()) {
            let _ = write!(out, "{:<24}", entry.covariate);
            for (_, report) in columns {
                match report.p_value(&entry.covariate) {
                    Some(p) => {
                        let _ = write!(out, "{:>14.1}", 100.0 * p);
                    }
                    None => {
                        let _ = write!(out, "{:>14}", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    let _ = write!(out, "{:<24}", "matched number");
    for (_, report) in columns {
        let _ = write!(out, "{:>14}", report.n_target);
    }
    out.push('\n');
    out
}
