//! Domain model: policies, covariate roles, portfolios and rate-change results.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Policy year as written in the source data.
pub type Year = i32;

/// Coverage name that every policy must carry.
pub const TOTAL: &str = "total";

/// Default number of equal-frequency bins for approximate covariates in mix profiles.
pub const DEFAULT_MIX_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Numeric,
    Ordinal,
    Categorical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Exact,
    Approximate,
    Ignore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovariateValue {
    Numeric(f64),
    Ordinal(u32),
    Categorical(String),
}

impl CovariateValue {
    pub fn kind(&self) -> CovariateKind {
        match self {
            CovariateValue::Numeric(_) => CovariateKind::Numeric,
            CovariateValue::Ordinal(_) => CovariateKind::Ordinal,
            CovariateValue::Categorical(_) => CovariateKind::Categorical,
        }
    }

    /// Position on the real line; `None` for categorical labels.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CovariateValue::Numeric(x) => Some(*x),
            CovariateValue::Ordinal(level) => Some(f64::from(*level)),
            CovariateValue::Categorical(_) => None,
        }
    }
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateValue::Numeric(x) => write!(f, "{x}"),
            CovariateValue::Ordinal(level) => write!(f, "{level}"),
            CovariateValue::Categorical(label) => f.write_str(label),
        }
    }
}

/// Label → level index for an ordinal covariate.
///
/// Either an explicit ordered list (levels must strictly increase) or a rule
/// that strips a fixed prefix and parses the remainder, e.g. `"P4"` → 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrdinalMapping {
    Levels(Vec<(String, u32)>),
    StripPrefix(String),
}

impl OrdinalMapping {
    /// Levels `0..labels.len()` in the given order.
    pub fn ordered<S: AsRef<str>>(labels: &[S]) -> Self {
        OrdinalMapping::Levels(
            labels
                .iter()
                .enumerate()
                .map(|(i, l)| (l.as_ref().to_string(), i as u32))
                .collect(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OrdinalMapping::Levels(levels) => {
                if levels.is_empty() {
                    return Err(Error::Schema("ordinal mapping has no levels".into()));
                }
                let mut labels = BTreeSet::new();
                for (label, _) in levels {
                    if !labels.insert(label.as_str()) {
                        return Err(Error::Schema(format!(
                            "ordinal label `{label}` listed twice"
                        )));
                    }
                }
                if levels.windows(2).any(|w| w[0].1 >= w[1].1) {
                    return Err(Error::Schema(
                        "ordinal levels must strictly increase in declared order".into(),
                    ));
                }
                Ok(())
            }
            OrdinalMapping::StripPrefix(_) => Ok(()),
        }
    }

    /// Label for a level, used when writing data back out.
    pub fn label(&self, level: u32) -> Option<String> {
        match self {
            OrdinalMapping::Levels(levels) => levels
                .iter()
                .find(|(_, l)| *l == level)
                .map(|(label, _)| label.clone()),
            OrdinalMapping::StripPrefix(prefix) => Some(format!("{prefix}{level}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub match_mode: MatchMode,
    pub confounder: bool,
    /// Maximum admissible |difference|, in pooled standard deviations.
    #[serde(default)]
    pub caliper: Option<f64>,
    #[serde(default)]
    pub ordinal: Option<OrdinalMapping>,
    /// Reference level for categorical dummy coding; the smallest label otherwise.
    #[serde(default)]
    pub reference: Option<String>,
}

impl CovariateSpec {
    pub fn new(name: impl Into<String>, kind: CovariateKind, match_mode: MatchMode) -> Self {
        CovariateSpec {
            name: name.into(),
            kind,
            match_mode,
            confounder: true,
            caliper: None,
            ordinal: None,
            reference: None,
        }
    }

    pub fn numeric(name: impl Into<String>, match_mode: MatchMode) -> Self {
        Self::new(name, CovariateKind::Numeric, match_mode)
    }

    pub fn categorical(name: impl Into<String>, match_mode: MatchMode) -> Self {
        Self::new(name, CovariateKind::Categorical, match_mode)
    }

    pub fn ordinal(name: impl Into<String>, match_mode: MatchMode, mapping: OrdinalMapping) -> Self {
        CovariateSpec {
            ordinal: Some(mapping),
            ..Self::new(name, CovariateKind::Ordinal, match_mode)
        }
    }

    pub fn with_confounder(mut self, confounder: bool) -> Self {
        self.confounder = confounder;
        self
    }

    pub fn with_caliper(mut self, caliper: f64) -> Self {
        self.caliper = Some(caliper);
        self
    }

    pub fn with_reference(mut self, level: impl Into<String>) -> Self {
        self.reference = Some(level.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == CovariateKind::Categorical && self.match_mode == MatchMode::Approximate {
            return Err(Error::Schema(format!(
                "categorical covariate `{}` must be matched exactly or ignored",
                self.name
            )));
        }
        if self.kind == CovariateKind::Ordinal {
            match &self.ordinal {
                Some(mapping) => mapping.validate()?,
                None => {
                    return Err(Error::Schema(format!(
                        "ordinal covariate `{}` needs a level mapping",
                        self.name
                    )))
                }
            }
        }
        if let Some(c) = self.caliper {
            if !(c >= 0.0) {
                return Err(Error::Schema(format!(
                    "caliper on `{}` must be nonnegative",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// One written policy-year record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub id: String,
    pub year: Year,
    /// Premium charged per coverage; `"total"` is mandatory.
    pub premiums: BTreeMap<String, f64>,
    pub covariates: Vec<CovariateValue>,
}

impl Policy {
    pub fn new(
        id: impl Into<String>,
        year: Year,
        premiums: BTreeMap<String, f64>,
        covariates: Vec<CovariateValue>,
    ) -> Result<Self> {
        let id = id.into();
        match premiums.get(TOTAL) {
            None => {
                return Err(Error::InvalidPolicy {
                    id,
                    reason: "missing total premium".into(),
                })
            }
            Some(_) => {}
        }
        for (coverage, &amount) in &premiums {
            if !amount.is_finite() || amount < 0.0 {
                return Err(Error::InvalidPolicy {
                    id,
                    reason: format!("premium `{coverage}` must be finite and nonnegative"),
                });
            }
        }
        Ok(Policy {
            id,
            year,
            premiums,
            covariates,
        })
    }

    /// Convenience for policies that only carry a total premium.
    pub fn with_total(
        id: impl Into<String>,
        year: Year,
        total: f64,
        covariates: Vec<CovariateValue>,
    ) -> Result<Self> {
        Self::new(id, year, BTreeMap::from([(TOTAL.to_string(), total)]), covariates)
    }

    pub fn premium(&self, coverage: &str) -> Result<f64> {
        self.premiums
            .get(coverage)
            .copied()
            .ok_or_else(|| Error::MissingCoverage {
                id: self.id.clone(),
                coverage: coverage.to_string(),
            })
    }
}

/// Which year's mix is held fixed and which year it is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct YearPair {
    pub target: Year,
    pub comparison: Year,
}

impl YearPair {
    pub fn new(target: Year, comparison: Year) -> Self {
        YearPair { target, comparison }
    }

    /// Binary indicator T for a policy year: target → true, comparison → false.
    pub fn indicator(&self, year: Year) -> Option<bool> {
        if year == self.target {
            Some(true)
        } else if year == self.comparison {
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub specs: Vec<CovariateSpec>,
    pub policies: Vec<Policy>,
}

impl Portfolio {
    pub fn new(specs: Vec<CovariateSpec>, policies: Vec<Policy>) -> Result<Self> {
        for spec in &specs {
            spec.validate()?;
        }
        let mut names = BTreeSet::new();
        for spec in &specs {
            if !names.insert(spec.name.as_str()) {
                return Err(Error::Schema(format!("covariate `{}` declared twice", spec.name)));
            }
        }
        for policy in &policies {
            check_conforms(&specs, policy)?;
        }
        Ok(Portfolio { specs, policies })
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn years(&self) -> BTreeSet<Year> {
        self.policies.iter().map(|p| p.year).collect()
    }

    pub fn indices_in_year(&self, year: Year) -> Vec<usize> {
        self.policies
            .iter()
            .enumerate()
            .filter(|(_, p)| p.year == year)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_in_year(&self, year: Year) -> usize {
        self.policies.iter().filter(|p| p.year == year).count()
    }

    /// Errors unless both years of the pair have at least one policy.
    pub fn require_years(&self, years: YearPair) -> Result<()> {
        for y in [years.target, years.comparison] {
            if self.count_in_year(y) == 0 {
                return Err(Error::EmptyYear(y));
            }
        }
        Ok(())
    }

    pub fn spec_index(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Restrict to the policies written in either year of the pair.
    pub fn restrict_to(&self, years: YearPair) -> Portfolio {
        Portfolio {
            specs: self.specs.clone(),
            policies: self
                .policies
                .iter()
                .filter(|p| years.indicator(p.year).is_some())
                .cloned()
                .collect(),
        }
    }

    /// Copy with an extra numeric covariate appended to every policy.
    pub fn with_derived_covariate(&self, spec: CovariateSpec, values: &[f64]) -> Result<Portfolio> {
        if values.len() != self.policies.len() {
            return Err(Error::DimensionMismatch {
                expected: self.policies.len(),
                actual: values.len(),
            });
        }
        if spec.kind != CovariateKind::Numeric {
            return Err(Error::Schema("derived covariates must be numeric".into()));
        }
        let mut specs = self.specs.clone();
        specs.push(spec);
        let policies = self
            .policies
            .iter()
            .zip(values)
            .map(|(p, &v)| {
                let mut p = p.clone();
                p.covariates.push(CovariateValue::Numeric(v));
                p
            })
            .collect();
        Portfolio::new(specs, policies)
    }
}

fn check_conforms(specs: &[CovariateSpec], policy: &Policy) -> Result<()> {
    if policy.covariates.len() != specs.len() {
        return Err(Error::InvalidPolicy {
            id: policy.id.clone(),
            reason: format!(
                "expected {} covariates, found {}",
                specs.len(),
                policy.covariates.len()
            ),
        });
    }
    for (spec, value) in specs.iter().zip(&policy.covariates) {
        if spec.kind != value.kind() {
            return Err(Error::InvalidPolicy {
                id: policy.id.clone(),
                reason: format!("covariate `{}` has the wrong kind", spec.name),
            });
        }
        if let CovariateValue::Numeric(x) = value {
            if !x.is_finite() {
                return Err(Error::InvalidPolicy {
                    id: policy.id.clone(),
                    reason: format!("covariate `{}` is not finite", spec.name),
                });
            }
        }
    }
    Ok(())
}

/// Empirical distribution of covariate profiles among the policies of one year.
///
/// A profile is the tuple of exact-mode values plus the equal-frequency bin of
/// each approximate-mode value (bins computed on the pooled portfolio so that
/// profiles are comparable across years). Ignored covariates do not enter.
pub fn empirical_mix(
    portfolio: &Portfolio,
    year: Year,
    bins: usize,
) -> Result<BTreeMap<Vec<String>, f64>> {
    let rows = portfolio.indices_in_year(year);
    if rows.is_empty() {
        return Err(Error::EmptyYear(year));
    }
    let bins = bins.max(1);
    let edges: Vec<Option<Vec<f64>>> = portfolio
        .specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            (spec.match_mode == MatchMode::Approximate).then(|| {
                let mut pooled: Vec<f64> = portfolio
                    .policies
                    .iter()
                    .filter_map(|p| p.covariates[j].as_f64())
                    .collect();
                pooled.sort_by(f64::total_cmp);
                let n = pooled.len();
                let mut cuts: Vec<f64> = (1..bins).map(|k| pooled[k * n / bins]).collect();
                cuts.dedup();
                cuts
            })
        })
        .collect();

    let mut counts: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    for &i in &rows {
        let policy = &portfolio.policies[i];
        let key: Vec<String> = portfolio
            .specs
            .iter()
            .zip(&policy.covariates)
            .zip(&edges)
            .filter(|((spec, _), _)| spec.match_mode != MatchMode::Ignore)
            .map(|((_, value), cuts)| match cuts {
                Some(cuts) => {
                    let x = value.as_f64().unwrap_or(0.0);
                    format!("bin{}", cuts.partition_point(|&c| c <= x))
                }
                None => value.to_string(),
            })
            .collect();
        *counts.entry(key).or_default() += 1;
    }
    let n = rows.len() as f64;
    Ok(counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastFunction {
    Difference,
    Ratio,
}

impl ContrastFunction {
    /// Contrast of the later-year mean against the earlier-year mean.
    /// Ratios are reported as percentages, `(later / earlier - 1) * 100`.
    pub fn apply(self, later: f64, earlier: f64) -> Result<f64> {
        match self {
            ContrastFunction::Difference => Ok(later - earlier),
            ContrastFunction::Ratio => {
                if !(earlier > 0.0) {
                    return Err(Error::ZeroDenominator);
                }
                Ok((later / earlier - 1.0) * 100.0)
            }
        }
    }

    /// Compose consecutive contrasts into one: ratios multiply, differences add.
    pub fn chain(self, steps: &[f64]) -> f64 {
        match self {
            ContrastFunction::Difference => steps.iter().sum(),
            ContrastFunction::Ratio => {
                (steps.iter().map(|s| 1.0 + s / 100.0).product::<f64>() - 1.0) * 100.0
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ContrastFunction::Difference => "difference",
            ContrastFunction::Ratio => "ratio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub low: f64,
    pub high: f64,
    pub level: f64,
}

/// A rate-change estimate for one coverage, holding `target_year`'s mix fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateChangeEstimate {
    pub method: String,
    pub target_year: Year,
    pub from_year: Year,
    pub to_year: Year,
    pub contrast: ContrastFunction,
    pub coverage: String,
    pub point: f64,
    pub ci: Option<ConfidenceInterval>,
    pub n_matched: usize,
    pub n_dropped: usize,
    /// Policies left out because the coverage premium was zero under a ratio contrast.
    pub n_zero_excluded: usize,
}

impl RateChangeEstimate {
    pub fn with_ci(mut self, ci: ConfidenceInterval) -> Self {
        self.ci = Some(ci);
        self
    }
}
