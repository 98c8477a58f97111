//! Logistic propensity model p(T = target | X) fitted by iteratively reweighted
//! least squares, and its linear predictor as a matching covariate.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{collinear_columns, DesignMap, TermSource};
use crate::error::{Error, Result};
use crate::model::{CovariateKind, CovariateSpec, CovariateValue, MatchMode, Policy, Portfolio, YearPair};

/// Name of the derived covariate holding the propensity linear predictor.
pub const PSCORE_COVARIATE: &str = "pscore_lin";

/// Largest admissible |coefficient| on the standardized scale.
const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticOptions {
    /// Ridge penalty on standardized non-intercept coefficients.
    pub ridge: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions {
            ridge: 0.0,
            max_iterations: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub design: DesignMap,
    /// Aligned with `design.terms`, on the original covariate scale.
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub deviance: f64,
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn deviance(eta: &DVector<f64>, y: &[f64]) -> f64 {
    2.0 * eta
        .iter()
        .zip(y)
        .map(|(&e, &t)| if t > 0.5 { softplus(-e) } else { softplus(e) })
        .sum::<f64>()
}

/// Fit p(T = `years.target` | confounders) on the policies of both years.
pub fn fit_logistic(
    portfolio: &Portfolio,
    years: YearPair,
    options: LogisticOptions,
) -> Result<PropensityModel> {
    portfolio.require_years(years)?;
    let rows: Vec<usize> = (0..portfolio.len())
        .filter(|&i| years.indicator(portfolio.policies[i].year).is_some())
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .map(|&i| match years.indicator(portfolio.policies[i].year) {
            Some(true) => 1.0,
            _ => 0.0,
        })
        .collect();
    let confounders: Vec<usize> = portfolio
        .specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.confounder)
        .map(|(j, _)| j)
        .collect();
    let design = DesignMap::build(portfolio, &confounders, &rows, None)?;
    if options.ridge == 0.0 {
        check_level_separation(portfolio, &confounders, &rows, years)?;
    }
    let x = design.matrix(portfolio, &rows)?;

    // Standardize non-intercept columns; the fit runs on this scale.
    let p = x.ncols();
    let n = x.nrows() as f64;
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    let mut xs = x.clone();
    for c in 1..p {
        let col = x.column(c);
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        center[c] = m;
        scale[c] = sd;
        for r in 0..x.nrows() {
            xs[(r, c)] = (x[(r, c)] - m) / sd;
        }
    }
    let collinear = collinear_columns(&xs, &design.terms);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient { columns: collinear });
    }

    let (beta_std, iterations, dev) = irls(&xs, &y, options, &design)?;

    let mut coefficients = vec![0.0; p];
    let mut intercept = beta_std[0];
    for c in 1..p {
        coefficients[c] = beta_std[c] / scale[c];
        intercept -= beta_std[c] * center[c] / scale[c];
    }
    coefficients[0] = intercept;
    Ok(PropensityModel {
        design,
        coefficients,
        iterations,
        deviance: dev,
    })
}

/// A categorical level written in only one of the two years predicts the year perfectly.
fn check_level_separation(
    portfolio: &Portfolio,
    covariates: &[usize],
    rows: &[usize],
    years: YearPair,
) -> Result<()> {
    use std::collections::BTreeMap;
    for &j in covariates {
        let spec = &portfolio.specs[j];
        if spec.kind != CovariateKind::Categorical {
            continue;
        }
        let mut by_level: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for &i in rows {
            let policy = &portfolio.policies[i];
            if let CovariateValue::Categorical(label) = &policy.covariates[j] {
                let entry = by_level.entry(label.as_str()).or_default();
                if years.indicator(policy.year) == Some(true) {
                    entry.0 += 1;
                } else {
                    entry.1 += 1;
                }
            }
        }
        if by_level.len() < 2 {
            continue;
        }
        if let Some((level, _)) = by_level.iter().find(|(_, (t, c))| *t == 0 || *c == 0) {
            return Err(Error::Separation {
                covariate: format!("{}={}", spec.name, level),
            });
        }
    }
    Ok(())
}

fn irls(
    x: &DMatrix<f64>,
    y: &[f64],
    options: LogisticOptions,
    design: &DesignMap,
) -> Result<(DVector<f64>, usize, f64)> {
    let p = x.ncols();
    let yv = DVector::from_column_slice(y);
    let mut penalty = DMatrix::<f64>::identity(p, p) * options.ridge;
    penalty[(0, 0)] = 0.0;
    let objective = |beta: &DVector<f64>| {
        let eta = x * beta;
        deviance(&eta, y) + options.ridge * beta.rows(1, p - 1).norm_squared()
    };

    let mut beta = DVector::zeros(p);
    let mut current = objective(&beta);
    for iteration in 1..=options.max_iterations {
        let eta = x * &beta;
        let mu = eta.map(logistic);
        let w = mu.map(|m| m * (1.0 - m));
        let mut xtw = x.transpose();
        for (c, wi) in w.iter().enumerate() {
            xtw.column_mut(c).scale_mut(*wi);
        }
        let hessian = &xtw * x + &penalty;
        let gradient = x.transpose() * (&yv - &mu) - &penalty * &beta;
        let step = match hessian.clone().cholesky() {
            Some(chol) => chol.solve(&gradient),
            None => hessian
                .lu()
                .solve(&gradient)
                .ok_or_else(|| Error::RankDeficient {
                    columns: design.terms.iter().skip(1).map(|t| t.name.clone()).collect(),
                })?,
        };

        let mut next = &beta + &step;
        let mut next_obj = objective(&next);
        let mut halvings = 0;
        while next_obj > current * (1.0 + 1e-12) + 1e-12 && halvings < 30 {
            next = (&beta + &next) * 0.5;
            next_obj = objective(&next);
            halvings += 1;
        }
        let change = (&next - &beta).amax();
        beta = next;
        current = next_obj;

        if let Some(c) = (1..p).find(|&c| beta[c].abs() > SEPARATION_BOUND) {
            return Err(Error::Separation {
                covariate: design.terms[c].name.clone(),
            });
        }
        if change < options.tolerance {
            let eta = x * &beta;
            return Ok((beta, iteration, deviance(&eta, y)));
        }
    }
    Err(Error::NotConverged {
        iterations: options.max_iterations,
    })
}

impl PropensityModel {
    /// x'β for a policy.
    pub fn linear_predictor(&self, policy: &Policy) -> Result<f64> {
        let row = self.design.row(policy)?;
        Ok(row.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }

    pub fn propensity(&self, policy: &Policy) -> Result<f64> {
        self.linear_predictor(policy).map(logistic)
    }

    pub fn linear_predictors(&self, portfolio: &Portfolio) -> Result<Vec<f64>> {
        portfolio
            .policies
            .iter()
            .map(|p| self.linear_predictor(p))
            .collect()
    }

    /// Coefficient of a categorical level or numeric covariate, by term name.
    pub fn coefficient(&self, term: &str) -> Option<f64> {
        self.design
            .terms
            .iter()
            .position(|t| t.name == term)
            .map(|i| self.coefficients[i])
    }

    pub fn intercept(&self) -> f64 {
        debug_assert!(matches!(self.design.terms[0].source, TermSource::Intercept));
        self.coefficients[0]
    }

    /// `term,estimate` CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["term", "estimate"])?;
        for (term, b) in self.design.terms.iter().zip(&self.coefficients) {
            csv.write_record([term.name.clone(), b.to_string()])?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Copy of the portfolio with the linear predictor appended as an approximate,
/// non-confounder numeric covariate named [`PSCORE_COVARIATE`].
pub fn append_linear_predictor(portfolio: &Portfolio, model: &PropensityModel) -> Result<Portfolio> {
    let values = model.linear_predictors(portfolio)?;
    let spec = CovariateSpec::numeric(PSCORE_COVARIATE, MatchMode::Approximate).with_confounder(false);
    portfolio.with_derived_covariate(spec, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Policy;

    /// Portfolio with one binary covariate: counts (x=1,T=1)=a, (x=0,T=1)=b,
    /// (x=1,T=0)=c, (x=0,T=0)=d.
    fn two_by_two(a: usize, b: usize, c: usize, d: usize) -> Portfolio {
        let mut policies = Vec::new();
        let mut push = |count: usize, x: f64, year: i32| {
            for _ in 0..count {
                let id = policies.len().to_string();
                policies.push(Policy::with_total(id, year, 1.0, vec![CovariateValue::Numeric(x)]).unwrap());
            }
        };
        push(a, 1.0, 1);
        push(b, 0.0, 1);
        push(c, 1.0, 0);
        push(d, 0.0, 0);
        Portfolio::new(vec![CovariateSpec::numeric("x", MatchMode::Approximate)], policies).unwrap()
    }

    #[test]
    fn two_by_two_matches_log_odds() {
        let (a, b, c, d) = (30usize, 12usize, 9usize, 25usize);
        let m = fit_logistic(&two_by_two(a, b, c, d), YearPair::new(1, 0), Default::default()).unwrap();
        let slope = ((a * d) as f64 / (b * c) as f64).ln();
        let intercept = (b as f64 / d as f64).ln();
        assert!((m.intercept() - intercept).abs() < 1e-8);
        assert!((m.coefficient("x").unwrap() - slope).abs() < 1e-8);

        let p1 = Policy::with_total("q", 1, 1.0, vec![CovariateValue::Numeric(1.0)]).unwrap();
        assert!((m.linear_predictor(&p1).unwrap() - (intercept + slope)).abs() < 1e-8);
    }

    #[test]
    fn symmetric_data_gives_zero_coefficients() {
        let m = fit_logistic(&two_by_two(10, 10, 10, 10), YearPair::new(1, 0), Default::default()).unwrap();
        assert!(m.coefficients.iter().all(|b| b.abs() < 1e-6));
    }

    #[test]
    fn level_present_in_one_year_is_separation() {
        let specs = vec![CovariateSpec::categorical("region", MatchMode::Exact)];
        let policies = [("A", 0), ("A", 1), ("B", 1), ("B", 1), ("A", 0)]
            .iter()
            .enumerate()
            .map(|(i, (r, y))| {
                Policy::with_total(i.to_string(), *y, 1.0, vec![CovariateValue::Categorical(r.to_string())])
                    .unwrap()
            })
            .collect();
        let p = Portfolio::new(specs, policies).unwrap();
        match fit_logistic(&p, YearPair::new(1, 0), Default::default()) {
            Err(Error::Separation { covariate }) => assert_eq!(covariate, "region=B"),
            other => panic!("expected separation, got {other:?}"),
        }
        // A ridge penalty keeps the coefficients finite.
        let opts = LogisticOptions {
            ridge: 1.0,
            ..Default::default()
        };
        assert!(fit_logistic(&p, YearPair::new(1, 0), opts).is_ok());
    }

    #[test]
    fn numeric_separation_is_detected() {
        let specs = vec![CovariateSpec::numeric("x", MatchMode::Approximate)];
        let policies = (0..20)
            .map(|i| {
                Policy::with_total(i.to_string(), (i >= 10) as i32, 1.0, vec![CovariateValue::Numeric(i as f64)])
                    .unwrap()
            })
            .collect();
        let p = Portfolio::new(specs, policies).unwrap();
        assert!(matches!(
            fit_logistic(&p, YearPair::new(1, 0), Default::default()),
            Err(Error::Separation { .. })
        ));
    }

    #[test]
    fn collinear_covariates_are_named() {
        let specs = vec![
            CovariateSpec::numeric("x", MatchMode::Approximate),
            CovariateSpec::numeric("twice_x", MatchMode::Approximate),
        ];
        let policies = (0..12)
            .map(|i| {
                let x = (i % 5) as f64;
                Policy::with_total(
                    i.to_string(),
                    (i % 3 == 0) as i32,
                    1.0,
                    vec![CovariateValue::Numeric(x), CovariateValue::Numeric(2.0 * x)],
                )
                .unwrap()
            })
            .collect();
        let p = Portfolio::new(specs, policies).unwrap();
        match fit_logistic(&p, YearPair::new(1, 0), Default::default()) {
            Err(Error::RankDeficient { columns }) => assert_eq!(columns, ["twice_x"]),
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn zero_model_predicts_zero() {
        let p = two_by_two(3, 4, 5, 6);
        let mut m = fit_logistic(&p, YearPair::new(1, 0), Default::default()).unwrap();
        m.coefficients.iter_mut().for_each(|b| *b = 0.0);
        assert!(p.policies.iter().all(|q| m.linear_predictor(q).unwrap() == 0.0));
        m.coefficients[0] = 0.7;
        assert!(p.policies.iter().all(|q| m.linear_predictor(q).unwrap() == 0.7));
        assert!((0.0..1.0).contains(&logistic(-800.0)) && logistic(800.0) <= 1.0);
    }

    #[test]
    fn coefficient_csv() {
        let m = fit_logistic(&two_by_two(3, 4, 5, 6), YearPair::new(1, 0), Default::default()).unwrap();
        let mut out = Vec::new();
        m.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("term,estimate\n(intercept),"));
        assert_eq!(text.lines().count(), 3);
    }
}
