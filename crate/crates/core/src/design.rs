//! Additive design matrices: intercept, numeric columns and k−1 dummy coding.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CovariateKind, CovariateValue, Policy, Portfolio, YearPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TermSource {
    Intercept,
    /// Numeric or ordinal covariate entered linearly.
    Value { covariate: usize },
    /// Indicator of one non-reference level of a categorical covariate.
    Dummy { covariate: usize, level: String },
    /// Indicator of the target year.
    Year,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSet {
    pub covariate: usize,
    pub name: String,
    /// Sorted.
    pub levels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    /// Name of the covariate the term comes from; empty for intercept and year.
    pub covariate: String,
    pub source: TermSource,
}

/// Column map of a design matrix, including which categorical levels were seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMap {
    pub terms: Vec<Term>,
    /// Categorical levels seen while building, reference included.
    pub levels: Vec<LevelSet>,
    /// Covariates that were constant over the rows and left out.
    pub dropped_constant: Vec<String>,
    pub years: Option<YearPair>,
}

impl DesignMap {
    /// Build the map for `covariates` over `rows`, optionally with a year indicator.
    pub fn build(
        portfolio: &Portfolio,
        covariates: &[usize],
        rows: &[usize],
        years: Option<YearPair>,
    ) -> Result<DesignMap> {
        let mut terms = vec![Term {
            name: "(intercept)".into(),
            covariate: String::new(),
            source: TermSource::Intercept,
        }];
        let mut levels_seen = Vec::new();
        let mut dropped_constant = Vec::new();
        for &j in covariates {
            let spec = &portfolio.specs[j];
            match spec.kind {
                CovariateKind::Numeric | CovariateKind::Ordinal => {
                    let mut values = rows
                        .iter()
                        .filter_map(|&i| portfolio.policies[i].covariates[j].as_f64());
                    let first = values.next();
                    let constant = match first {
                        Some(x0) => values.all(|x| x == x0),
                        None => true,
                    };
                    if constant {
                        dropped_constant.push(spec.name.clone());
                        continue;
                    }
                    terms.push(Term {
                        name: spec.name.clone(),
                        covariate: spec.name.clone(),
                        source: TermSource::Value { covariate: j },
                    });
                }
                CovariateKind::Categorical => {
                    let seen: BTreeSet<String> = rows
                        .iter()
                        .filter_map(|&i| match &portfolio.policies[i].covariates[j] {
                            CovariateValue::Categorical(label) => Some(label.clone()),
                            _ => None,
                        })
                        .collect();
                    let reference = match &spec.reference {
                        Some(r) if seen.contains(r) => r.clone(),
                        Some(r) => {
                            return Err(Error::Schema(format!(
                                "reference level `{r}` of `{}` does not occur",
                                spec.name
                            )))
                        }
                        None => match seen.iter().next() {
                            Some(first) => first.clone(),
                            None => continue,
                        },
                    };
                    if seen.len() < 2 {
                        dropped_constant.push(spec.name.clone());
                    }
                    for level in seen.iter().filter(|l| **l != reference) {
                        terms.push(Term {
                            name: format!("{}={}", spec.name, level),
                            covariate: spec.name.clone(),
                            source: TermSource::Dummy {
                                covariate: j,
                                level: level.clone(),
                            },
                        });
                    }
                    levels_seen.push(LevelSet {
                        covariate: j,
                        name: spec.name.clone(),
                        levels: seen.into_iter().collect(),
                    });
                }
            }
        }
        if let Some(y) = years {
            terms.push(Term {
                name: format!("year={}", y.target),
                covariate: String::new(),
                source: TermSource::Year,
            });
        }
        Ok(DesignMap {
            terms,
            levels: levels_seen,
            dropped_constant,
            years,
        })
    }

    pub fn width(&self) -> usize {
        self.terms.len()
    }

    /// Design row for one policy.
    pub fn row(&self, policy: &Policy) -> Result<Vec<f64>> {
        for set in &self.levels {
            if let CovariateValue::Categorical(label) = &policy.covariates[set.covariate] {
                if set.levels.binary_search(label).is_err() {
                    return Err(Error::UnseenLevel {
                        covariate: set.name.clone(),
                        level: label.clone(),
                    });
                }
            }
        }
        self.terms
            .iter()
            .map(|t| match &t.source {
                TermSource::Intercept => Ok(1.0),
                TermSource::Value { covariate } => policy.covariates[*covariate]
                    .as_f64()
                    .ok_or_else(|| Error::Schema(format!("`{}` is not numeric", t.covariate))),
                TermSource::Dummy { covariate, level } => Ok(match &policy.covariates[*covariate] {
                    CovariateValue::Categorical(l) if l == level => 1.0,
                    _ => 0.0,
                }),
                TermSource::Year => {
                    let years = self.years.expect("year term implies years");
                    match years.indicator(policy.year) {
                        Some(t) => Ok(if t { 1.0 } else { 0.0 }),
                        None => Err(Error::Config(format!(
                            "policy {} written in year {}, outside the fitted pair",
                            policy.id, policy.year
                        ))),
                    }
                }
            })
            .collect()
    }

    pub fn matrix(&self, portfolio: &Portfolio, rows: &[usize]) -> Result<DMatrix<f64>> {
        let mut x = DMatrix::zeros(rows.len(), self.width());
        for (r, &i) in rows.iter().enumerate() {
            let row = self.row(&portfolio.policies[i])?;
            for (c, v) in row.into_iter().enumerate() {
                x[(r, c)] = v;
            }
        }
        Ok(x)
    }
}

/// Names of columns that are (numerically) linear combinations of earlier columns.
pub fn collinear_columns(x: &DMatrix<f64>, terms: &[Term]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for (j, term) in terms.iter().enumerate().take(x.ncols()) {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&r);
                r.axpy(-proj, q, 1.0);
            }
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= 1e-9 * norm.max(1.0) {
            dependent.push(term.name.clone());
        } else {
            basis.push(r / rn);
        }
    }
    dependent
}
