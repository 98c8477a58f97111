//! Rate-change estimators: matched, naive, regression, inverse-propensity weighted,
//! and chained multi-year contrasts.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{collinear_columns, DesignMap};
use crate::error::{Error, Result};
use crate::matcher::MatchedSample;
use crate::model::{ContrastFunction, Portfolio, RateChangeEstimate, Year, YearPair};
use crate::propensity::PropensityModel;

/// Mix-adjusted means of one coverage for a target/comparison year pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanPair {
    pub years: YearPair,
    pub target_mean: f64,
    pub comparison_mean: f64,
    pub n_matched: usize,
    pub n_dropped: usize,
    pub n_zero_excluded: usize,
}

/// Earlier and later year of a pair.
fn span(years: YearPair) -> (Year, Year) {
    (years.target.min(years.comparison), years.target.max(years.comparison))
}

impl MeanPair {
    /// g(later mean, earlier mean).
    pub fn contrast(&self, contrast: ContrastFunction) -> Result<f64> {
        if self.years.target > self.years.comparison {
            contrast.apply(self.target_mean, self.comparison_mean)
        } else {
            contrast.apply(self.comparison_mean, self.target_mean)
        }
    }

    pub fn estimate(&self, method: &str, coverage: &str, contrast: ContrastFunction) -> Result<RateChangeEstimate> {
        let (from_year, to_year) = span(self.years);
        Ok(RateChangeEstimate {
            method: method.to_string(),
            target_year: self.years.target,
            from_year,
            to_year,
            contrast,
            coverage: coverage.to_string(),
            point: self.contrast(contrast)?,
            ci: None,
            n_matched: self.n_matched,
            n_dropped: self.n_dropped,
            n_zero_excluded: self.n_zero_excluded,
        })
    }
}

fn weighted_mean(values: &[(f64, f64)]) -> Result<f64> {
    let total: f64 = values.iter().map(|(_, w)| w).sum();
    if values.is_empty() || !(total > 0.0) {
        return Err(Error::EmptySample);
    }
    Ok(values.iter().map(|(x, w)| x * w).sum::<f64>() / total)
}

/// Target mean over matched targets (each once) and θ-weighted comparison mean.
/// Under a ratio contrast, policies with a zero premium are left out.
pub fn matched_means(
    sample: &MatchedSample,
    portfolio: &Portfolio,
    coverage: &str,
    contrast: ContrastFunction,
) -> Result<MeanPair> {
    let skip_zero = contrast == ContrastFunction::Ratio;
    let mut excluded = BTreeSet::new();
    let mut targets = Vec::new();
    let mut comparisons = Vec::new();
    for group in sample.groups() {
        let t = group[0].target;
        let pt = portfolio.policies[t].premium(coverage)?;
        if skip_zero && pt == 0.0 {
            excluded.insert(t);
            for pair in group {
                if portfolio.policies[pair.comparison].premium(coverage)? == 0.0 {
                    excluded.insert(pair.comparison);
                }
            }
            continue;
        }
        let mut kept: Vec<(f64, f64)> = Vec::with_capacity(group.len());
        for pair in group {
            let pc = portfolio.policies[pair.comparison].premium(coverage)?;
            if skip_zero && pc == 0.0 {
                excluded.insert(pair.comparison);
            } else {
                kept.push((pc, pair.weight));
            }
        }
        if kept.is_empty() {
            excluded.insert(t);
            continue;
        }
        // Renormalize so each target group carries unit weight.
        let total: f64 = kept.iter().map(|(_, w)| w).sum();
        comparisons.extend(kept.into_iter().map(|(x, w)| (x, w / total)));
        targets.push((pt, 1.0));
    }
    if targets.is_empty() {
        return Err(if excluded.is_empty() { Error::EmptySample } else { Error::ZeroDenominator });
    }
    Ok(MeanPair {
        years: sample.years,
        target_mean: weighted_mean(&targets)?,
        comparison_mean: weighted_mean(&comparisons)?,
        n_matched: sample.n_matched(),
        n_dropped: sample.dropped.len(),
        n_zero_excluded: excluded.len(),
    })
}

pub fn estimate_matched(
    sample: &MatchedSample,
    portfolio: &Portfolio,
    coverage: &str,
    contrast: ContrastFunction,
) -> Result<RateChangeEstimate> {
    let method = sample.options.method.name();
    matched_means(sample, portfolio, coverage, contrast)?.estimate(method, coverage, contrast)
}

fn year_mean(
    portfolio: &Portfolio,
    year: Year,
    coverage: &str,
    skip_zero: bool,
    weight: &dyn Fn(usize) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut values = Vec::new();
    let mut excluded = 0;
    for i in portfolio.indices_in_year(year) {
        let x = portfolio.policies[i].premium(coverage)?;
        if skip_zero && x == 0.0 {
            excluded += 1;
        } else {
            values.push((x, weight(i)?));
        }
    }
    if values.is_empty() && excluded > 0 {
        return Err(Error::ZeroDenominator);
    }
    Ok((weighted_mean(&values)?, excluded))
}

pub fn naive_means(
    portfolio: &Portfolio,
    years: YearPair,
    coverage: &str,
    contrast: ContrastFunction,
) -> Result<MeanPair> {
    portfolio.require_years(years)?;
    let skip = contrast == ContrastFunction::Ratio;
    let unit = |_| Ok(1.0);
    let (target_mean, zt) = year_mean(portfolio, years.target, coverage, skip, &unit)?;
    let (comparison_mean, zc) = year_mean(portfolio, years.comparison, coverage, skip, &unit)?;
    Ok(MeanPair {
        years,
        target_mean,
        comparison_mean,
        n_matched: portfolio.count_in_year(years.target),
        n_dropped: 0,
        n_zero_excluded: zt + zc,
    })
}

/// Unadjusted contrast of the two year means.
pub fn estimate_naive(
    portfolio: &Portfolio,
    years: YearPair,
    coverage: &str,
    contrast: ContrastFunction,
) -> Result<RateChangeEstimate> {
    naive_means(portfolio, years, coverage, contrast)?.estimate("naive", coverage, contrast)
}

pub fn ipw_means(
    portfolio: &Portfolio,
    model: &PropensityModel,
    years: YearPair,
    coverage: &str,
    contrast: ContrastFunction,
) -> Result<MeanPair> {
    portfolio.require_years(years)?;
    let skip = contrast == ContrastFunction::Ratio;
    let odds = |i: usize| {
        let policy = &portfolio.policies[i];
        let p = model.propensity(policy)?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::PropensityBounds {
                id: policy.id.clone(),
                p,
            });
        }
        Ok(p / (1.0 - p))
    };
    for i in portfolio.indices_in_year(years.target) {
        odds(i)?;
    }
    let (target_mean, zt) = year_mean(portfolio, years.target, coverage, skip, &|_| Ok(1.0))?;
    let (comparison_mean, zc) = year_mean(portfolio, years.comparison, coverage, skip, &odds)?;
    Ok(MeanPair {
        years,
        target_mean,
        comparison_mean,
        n_matched: portfolio.count_in_year(years.target),
        n_dropped: 0,
        n_zero_excluded: zt + zc,
    })
}

/// Target-year policies weighted 1, comparison-year policies weighted p/(1−p).
pub fn estimate_ipw(
    portfolio: &Portfolio,
    model: &PropensityModel,
    years: YearPair,
    coverage: &str,
    contrast: ContrastFunction,
) -> Result<RateChangeEstimate> {
    ipw_means(portfolio, model, years, coverage, contrast)?.estimate("ipw", coverage, contrast)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Log,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Identity => "identity",
            Link::Log => "log",
        }
    }

    /// The contrast whose rate change does not depend on the covariates under this link.
    pub fn contrast(self) -> ContrastFunction {
        match self {
            Link::Identity => ContrastFunction::Difference,
            Link::Log => ContrastFunction::Ratio,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionFit {
    pub link: Link,
    pub coverage: String,
    pub design: DesignMap,
    pub coefficients: Vec<f64>,
    pub residual_variance: f64,
    pub n: usize,
    pub n_zero_excluded: usize,
}

impl RegressionFit {
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.design
            .terms
            .iter()
            .position(|t| t.name == term)
            .map(|k| self.coefficients[k])
    }

    /// Coefficient of the target-year indicator.
    pub fn year_coefficient(&self) -> f64 {
        *self.coefficients.last().expect("design has a year term")
    }

    pub fn years(&self) -> YearPair {
        self.design.years.expect("regression design has years")
    }
}

/// Least squares of h(premium) on intercept, confounder main effects and the
/// target-year indicator. Under the log link, `exclude_zero` drops zero premiums
/// instead of failing.
pub fn fit_premium_regression(
    portfolio: &Portfolio,
    years: YearPair,
    coverage: &str,
    link: Link,
    exclude_zero: bool,
) -> Result<RegressionFit> {
    portfolio.require_years(years)?;
    let mut rows = Vec::new();
    let mut response = Vec::new();
    let mut excluded = 0;
    for (i, policy) in portfolio.policies.iter().enumerate() {
        if years.indicator(policy.year).is_none() {
            continue;
        }
        let x = policy.premium(coverage)?;
        let y = match link {
            Link::Identity => x,
            Link::Log if x > 0.0 => x.ln(),
            Link::Log if exclude_zero => {
                excluded += 1;
                continue;
            }
            Link::Log => {
                return Err(Error::NonPositivePremium {
                    coverage: coverage.to_string(),
                })
            }
        };
        rows.push(i);
        response.push(y);
    }
    for year in [years.target, years.comparison] {
        if !rows.iter().any(|&i| portfolio.policies[i].year == year) {
            return Err(Error::EmptyYear(year));
        }
    }
    let covariates: Vec<usize> = portfolio
        .specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.confounder)
        .map(|(j, _)| j)
        .collect();
    let design = DesignMap::build(portfolio, &covariates, &rows, Some(years))?;
    let x = design.matrix(portfolio, &rows)?;
    let p = x.ncols();
    let dependent = collinear_columns(&x, &design.terms);
    if !dependent.is_empty() || rows.len() < p {
        return Err(Error::RankDeficient { columns: dependent });
    }
    let y = DVector::from_vec(response);
    let beta = least_squares(&x, &y)?;
    let resid = &y - &x * &beta;
    let dof = rows.len().saturating_sub(p);
    let residual_variance = if dof > 0 {
        resid.norm_squared() / dof as f64
    } else {
        0.0
    };
    Ok(RegressionFit {
        link,
        coverage: coverage.to_string(),
        design,
        coefficients: beta.iter().copied().collect(),
        residual_variance,
        n: rows.len(),
        n_zero_excluded: excluded,
    })
}

fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * y;
    qr.r()
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficient { columns: Vec::new() })
}

/// Year effect as a rate change; only (identity, difference) and (log, ratio) are defined.
pub fn regression_rate_change(fit: &RegressionFit, contrast: ContrastFunction) -> Result<RateChangeEstimate> {
    if fit.link.contrast() != contrast {
        return Err(Error::LinkContrastMismatch {
            link: fit.link.name(),
            contrast: contrast.name(),
        });
    }
    let years = fit.years();
    // The indicator marks the target year; flip when the target is the earlier one.
    let beta = if years.target > years.comparison {
        fit.year_coefficient()
    } else {
        -fit.year_coefficient()
    };
    let point = match contrast {
        ContrastFunction::Difference => beta,
        ContrastFunction::Ratio => (beta.exp() - 1.0) * 100.0,
    };
    let (from_year, to_year) = span(years);
    Ok(RateChangeEstimate {
        method: format!("regression-{}", fit.link.name()),
        target_year: years.target,
        from_year,
        to_year,
        contrast,
        coverage: fit.coverage.clone(),
        point,
        ci: None,
        n_matched: fit.n,
        n_dropped: 0,
        n_zero_excluded: fit.n_zero_excluded,
    })
}

/// Consecutive-year contrasts holding `target_year`'s mix fixed, followed by the
/// chained first-to-last contrast. `means` runs the pairwise method with the
/// anchor year as target.
pub fn estimate_multi_year<F>(
    years: &[Year],
    target_year: Year,
    method: &str,
    coverage: &str,
    contrast: ContrastFunction,
    means: F,
) -> Result<Vec<RateChangeEstimate>>
where
    F: Fn(YearPair) -> Result<MeanPair>,
{
    let mut years: Vec<Year> = years.to_vec();
    years.sort_unstable();
    years.dedup();
    if years.len() < 2 {
        return Err(Error::Config("multi-year estimation needs at least two years".into()));
    }
    if !years.contains(&target_year) {
        return Err(Error::Config(format!("target year {target_year} is not among the years")));
    }
    let label = |from: Year, to: Year| {
        move |e: Error| Error::YearPair {
            from,
            to,
            source: Box::new(e),
        }
    };
    let mut anchored = std::collections::BTreeMap::new();
    for &y in years.iter().filter(|&&y| y != target_year) {
        let pair = YearPair::new(target_year, y);
        let (from, to) = span(pair);
        anchored.insert(y, means(pair).map_err(label(from, to))?);
    }

    let mut out = Vec::new();
    for step in years.windows(2) {
        let (from, to) = (step[0], step[1]);
        let estimate = if from == target_year {
            anchored[&to].estimate(method, coverage, contrast)
        } else if to == target_year {
            anchored[&from].estimate(method, coverage, contrast)
        } else {
            let (a, b) = (&anchored[&from], &anchored[&to]);
            contrast
                .apply(b.comparison_mean, a.comparison_mean)
                .map(|point| RateChangeEstimate {
                    method: method.to_string(),
                    target_year,
                    from_year: from,
                    to_year: to,
                    contrast,
                    coverage: coverage.to_string(),
                    point,
                    ci: None,
                    n_matched: a.n_matched.min(b.n_matched),
                    n_dropped: a.n_dropped.max(b.n_dropped),
                    n_zero_excluded: a.n_zero_excluded.max(b.n_zero_excluded),
                })
        };
        out.push(estimate.map_err(label(from, to))?);
    }
    if out.len() > 1 {
        let steps: Vec<f64> = out.iter().map(|e| e.point).collect();
        let mut chained = out[0].clone();
        chained.to_year = out[out.len() - 1].to_year;
        chained.point = contrast.chain(&steps);
        chained.n_matched = out.iter().map(|e| e.n_matched).min().unwrap_or(0);
        chained.n_dropped = out.iter().map(|e| e.n_dropped).max().unwrap_or(0);
        out.push(chained);
    }
    Ok(out)
}

/// `method,coverage,point,ci_low,ci_high,n_matched,n_dropped` plus the year span.
pub fn write_estimates_csv<W: Write>(writer: W, estimates: &[RateChangeEstimate]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "method",
        "coverage",
        "point",
        "ci_low",
        "ci_high",
        "n_matched",
        "n_dropped",
        "target_year",
        "from_year",
        "to_year",
        "contrast",
        "n_zero_excluded",
    ])?;
    for e in estimates {
        let (low, high) = match e.ci {
            Some(ci) => (ci.low.to_string(), ci.high.to_string()),
            None => (String::new(), String::new()),
        };
        csv.write_record([
            e.method.clone(),
            e.coverage.clone(),
            e.point.to_string(),
            low,
            high,
            e.n_matched.to_string(),
            e.n_dropped.to_string(),
            e.target_year.to_string(),
            e.from_year.to_string(),
            e.to_year.to_string(),
            e.contrast.name().to_string(),
            e.n_zero_excluded.to_string(),
        ])?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}
