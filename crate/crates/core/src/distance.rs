//! Policy similarity: pooled covariance, its inverse Cholesky factor,
//! Mahalanobis and weighted (generalized) Mahalanobis distances, and
//! admissibility under exact constraints and calipers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateSpec, CovariateValue, MatchMode, Policy, Portfolio};

const RIDGE_START: f64 = 1e-8;
const RIDGE_MAX: f64 = 1e-2;
/// Smallest admissible squared Cholesky pivot relative to the diagonal entry.
const PIVOT_FLOOR: f64 = 1e-10;

/// Diagonal weights applied in the standardized coordinate system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix {
    diagonal: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.is_empty() {
            return Err(Error::InvalidWeights("no weights".into()));
        }
        if diagonal.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        if diagonal.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidWeights("at least one weight must be positive".into()));
        }
        Ok(WeightMatrix { diagonal })
    }

    pub fn identity(k: usize) -> Self {
        WeightMatrix {
            diagonal: vec![1.0; k],
        }
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diagonal
    }

    pub fn len(&self) -> usize {
        self.diagonal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diagonal.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricContext {
    /// Spec indices of the approximate-mode covariates, in metric order.
    pub covariates: Vec<usize>,
    pub names: Vec<String>,
    /// Pooled sample covariance, after any ridge.
    pub covariance: DMatrix<f64>,
    /// Lower-triangular `L⁻¹` where `S = L Lᵀ`, so `(L⁻¹)ᵀ L⁻¹ = S⁻¹`.
    pub inv_factor: DMatrix<f64>,
    /// Ridge multiplier ε that was needed (0 when S factored as is).
    pub ridge: f64,
    /// Pooled standard deviations before regularization.
    pub sd: Vec<f64>,
    /// Per-covariate caliper in standard deviations.
    pub calipers: Vec<Option<f64>>,
}

/// Spec indices of approximate-mode covariates.
pub fn approximate_covariates(specs: &[CovariateSpec]) -> Vec<usize> {
    specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.match_mode == MatchMode::Approximate)
        .map(|(j, _)| j)
        .collect()
}

/// Covariance and factor over all policies of the portfolio (both years pooled).
pub fn build_context(portfolio: &Portfolio) -> Result<MetricContext> {
    let covariates = approximate_covariates(&portfolio.specs);
    if covariates.is_empty() {
        return Err(Error::NoApproximateCovariates);
    }
    let n = portfolio.len();
    if n < 2 {
        return Err(Error::EmptySample);
    }
    let k = covariates.len();
    let data = DMatrix::from_fn(n, k, |i, c| {
        portfolio.policies[i].covariates[covariates[c]]
            .as_f64()
            .unwrap_or(f64::NAN)
    });
    let mut s = sample_covariance(&data);
    let names: Vec<String> = covariates
        .iter()
        .map(|&j| portfolio.specs[j].name.clone())
        .collect();
    for c in 0..k {
        if !(s[(c, c)] > 0.0) {
            return Err(Error::ZeroVariance(names[c].clone()));
        }
    }
    let sd: Vec<f64> = (0..k).map(|c| s[(c, c)].sqrt()).collect();
    let diag = DMatrix::from_diagonal(&s.diagonal());

    let mut ridge = 0.0;
    let factor = loop {
        if let Some(l) = stable_cholesky(&s) {
            break l;
        }
        ridge = if ridge == 0.0 { RIDGE_START } else { ridge * 10.0 };
        if ridge > RIDGE_MAX * (1.0 + 1e-9) {
            return Err(Error::SingularCovariance);
        }
        s = sample_covariance(&data) + &diag * ridge;
    };
    let inv_factor = factor
        .solve_lower_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::SingularCovariance)?;

    Ok(MetricContext {
        calipers: covariates
            .iter()
            .map(|&j| portfolio.specs[j].caliper)
            .collect(),
        covariates,
        names,
        covariance: s,
        inv_factor,
        ridge,
        sd,
    })
}

fn sample_covariance(data: &DMatrix<f64>) -> DMatrix<f64> {
    let n = data.nrows();
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let s = centered.transpose() * &centered / (n as f64 - 1.0);
    // Exact symmetry.
    (&s + s.transpose()) * 0.5
}

fn stable_cholesky(s: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = s.clone().cholesky()?.unpack();
    let ok = (0..s.nrows()).all(|i| l[(i, i)] * l[(i, i)] > PIVOT_FLOOR * s[(i, i)]);
    ok.then_some(l)
}

impl MetricContext {
    pub fn dim(&self) -> usize {
        self.covariates.len()
    }

    /// Raw values of the metric covariates for one policy.
    pub fn features(&self, policy: &Policy) -> Vec<f64> {
        self.covariates
            .iter()
            .map(|&j| policy.covariates[j].as_f64().unwrap_or(f64::NAN))
            .collect()
    }

    /// `S^{-1/2} x`.
    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x.len())?;
        let z = &self.inv_factor * DVector::from_column_slice(x);
        Ok(z.iter().copied().collect())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: len,
            });
        }
        Ok(())
    }

    fn standardized_difference(&self, xi: &[f64], xj: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(xi.len())?;
        self.check_dim(xj.len())?;
        let diff: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
        self.standardize(&diff)
    }
}

/// `√((xi−xj)ᵀ S⁻¹ (xi−xj))`.
pub fn md(ctx: &MetricContext, xi: &[f64], xj: &[f64]) -> Result<f64> {
    let z = ctx.standardized_difference(xi, xj)?;
    Ok(z.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// `√((xi−xj)ᵀ (S^{-1/2})ᵀ W S^{-1/2} (xi−xj))` with diagonal `W`.
pub fn gmd(ctx: &MetricContext, w: &WeightMatrix, xi: &[f64], xj: &[f64]) -> Result<f64> {
    if w.len() != ctx.dim() {
        return Err(Error::DimensionMismatch {
            expected: ctx.dim(),
            actual: w.len(),
        });
    }
    let z = ctx.standardized_difference(xi, xj)?;
    Ok(z.iter()
        .zip(w.diagonal())
        .map(|(v, wk)| wk * v * v)
        .sum::<f64>()
        .sqrt())
}

/// Whether a value pair is identical for exact matching purposes.
pub(crate) fn same_value(a: &CovariateValue, b: &CovariateValue) -> bool {
    match (a, b) {
        (CovariateValue::Numeric(x), CovariateValue::Numeric(y)) => x == y,
        _ => a == b,
    }
}

/// True iff all exact-mode covariates agree and every caliper is satisfied.
pub fn admissible(ctx: &MetricContext, specs: &[CovariateSpec], pi: &Policy, pj: &Policy) -> bool {
    let exact_ok = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.match_mode == MatchMode::Exact)
        .all(|(j, _)| same_value(&pi.covariates[j], &pj.covariates[j]));
    exact_ok
        && ctx.covariates.iter().enumerate().all(|(c, &j)| {
            match ctx.calipers[c] {
                None => true,
                Some(caliper) => {
                    let a = pi.covariates[j].as_f64().unwrap_or(f64::NAN);
                    let b = pj.covariates[j].as_f64().unwrap_or(f64::NAN);
                    (a - b).abs() <= caliper * ctx.sd[c]
                }
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Policy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn portfolio_from(rows: &[Vec<f64>], exact: &[&str]) -> Portfolio {
        let k = rows[0].len();
        let mut specs: Vec<CovariateSpec> = (0..k)
            .map(|c| CovariateSpec::numeric(format!("x{c}"), MatchMode::Approximate))
            .collect();
        specs.push(CovariateSpec::categorical("region", MatchMode::Exact));
        let policies = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut cov: Vec<CovariateValue> = r.iter().map(|&v| CovariateValue::Numeric(v)).collect();
                cov.push(CovariateValue::Categorical(exact[i % exact.len()].to_string()));
                Policy::with_total(i.to_string(), (i % 2) as i32, 1.0, cov).unwrap()
            })
            .collect();
        Portfolio::new(specs, policies).unwrap()
    }

    #[test]
    fn diagonal_covariance_factor() {
        // Variances 4 and 9, zero covariance.
        let rows = vec![
            vec![2.0, 3.0],
            vec![-2.0, 3.0],
            vec![2.0, -3.0],
            vec![-2.0, -3.0],
        ];
        let mut ctx = build_context(&portfolio_from(&rows, &["A"])).unwrap();
        // n−1 denominator: 16/3 and 36/3; rescale rows so variances are exactly 4 and 9.
        assert!((ctx.covariance[(0, 0)] - 16.0 / 3.0).abs() < 1e-12);
        let scale = (3.0f64 / 4.0).sqrt();
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|v| v * scale).collect()).collect();
        ctx = build_context(&portfolio_from(&rows, &["A"])).unwrap();
        assert!((ctx.covariance[(0, 0)] - 4.0).abs() < 1e-12);
        assert!((ctx.covariance[(1, 1)] - 9.0).abs() < 1e-12);
        assert!(ctx.covariance[(0, 1)].abs() < 1e-12);
        assert!((ctx.inv_factor[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((ctx.inv_factor[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(ctx.ridge, 0.0);
    }

    #[test]
    fn euclidean_when_identity() {
        let rows = vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]];
        let mut ctx = build_context(&portfolio_from(&rows, &["A"])).unwrap();
        ctx.inv_factor = DMatrix::identity(2, 2);
        assert!((md(&ctx, &[3.0, 4.0], &[0.0, 0.0]).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(md(&ctx, &[1.5, 2.5], &[1.5, 2.5]).unwrap(), 0.0);
        assert!(md(&ctx, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn duplicated_column_takes_the_ridge_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let x: f64 = rng.gen();
                vec![x, x, rng.gen()]
            })
            .collect();
        let ctx = build_context(&portfolio_from(&rows, &["A"])).unwrap();
        assert!(ctx.ridge >= RIDGE_START);
        let z = ctx.inv_factor.transpose() * &ctx.inv_factor;
        let inv = ctx.covariance.clone().try_inverse().unwrap();
        assert!((z - &inv).norm() / inv.norm() < 1e-8);
    }

    #[test]
    fn zero_variance_covariate_is_named() {
        let rows = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        match build_context(&portfolio_from(&rows, &["A"])) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "x1"),
            other => panic!("expected zero variance, got {other:?}"),
        }
    }

    #[test]
    fn weights_scale_and_drop_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen::<f64>()).collect()).collect();
        let ctx = build_context(&portfolio_from(&rows, &["A"])).unwrap();
        let (a, b) = (&rows[0], &rows[1]);
        let base = md(&ctx, a, b).unwrap();
        let c = 7.0;
        let scaled = gmd(&ctx, &WeightMatrix::new(vec![c; 3]).unwrap(), a, b).unwrap();
        assert!((scaled - c.sqrt() * base).abs() < 1e-12);

        let last = WeightMatrix::new(vec![0.0, 0.0, 1.0]).unwrap();
        let z = ctx.standardize(&a.iter().zip(b.iter()).map(|(x, y)| x - y).collect::<Vec<_>>()).unwrap();
        assert!((gmd(&ctx, &last, a, b).unwrap() - z[2].abs()).abs() < 1e-12);
        assert!(gmd(&ctx, &WeightMatrix::identity(2), a, b).is_err());
    }

    #[test]
    fn weight_matrix_invariants() {
        assert!(WeightMatrix::new(vec![0.0, 0.0]).is_err());
        assert!(WeightMatrix::new(vec![-1.0, 2.0]).is_err());
        assert!(WeightMatrix::new(vec![]).is_err());
        assert!(WeightMatrix::new(vec![0.0, 2.0]).is_ok());
    }

    #[test]
    fn admissibility_rules() {
        let rows = vec![vec![0.0, 0.0], vec![0.1, 1.0], vec![1.0, 2.0], vec![2.0, 0.5]];
        let mut p = portfolio_from(&rows, &["A", "A", "B", "A"]);
        let ctx = build_context(&p).unwrap();
        let pol = &p.policies;
        assert!(admissible(&ctx, &p.specs, &pol[0], &pol[0]));
        assert!(admissible(&ctx, &p.specs, &pol[0], &pol[1]));
        assert!(!admissible(&ctx, &p.specs, &pol[0], &pol[2]), "different region");

        p.specs[0].caliper = Some(0.0);
        let ctx = build_context(&p).unwrap();
        assert!(!admissible(&ctx, &p.specs, &p.policies[0], &p.policies[1]), "zero caliper, Δ = 0.1");
        assert!(admissible(&ctx, &p.specs, &p.policies[1], &p.policies[1]));
    }
}
