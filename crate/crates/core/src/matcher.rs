//! Greedy nearest-neighbour construction of the matched sample.
//!
//! Every target-year policy is paired with its nearest admissible
//! comparison-year policies. Ties either share the target's unit weight
//! equally or are broken at random; targets without an admissible partner are
//! dropped with a reason.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distance::{MetricContext, WeightMatrix};
use crate::error::{Error, Result};
use crate::model::{CovariateValue, MatchMode, Portfolio, YearPair};
use crate::propensity::PSCORE_COVARIATE;
use crate::seed;

/// Relative tolerance under which two squared distances count as tied.
const TIE_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ties {
    KeepAll,
    BreakRandom { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOrder {
    DataOrder,
    RandomOrder { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    /// Weighted Mahalanobis distance over all approximate covariates.
    Classic,
    /// Absolute difference of the propensity linear predictor only.
    PropensityOnly,
    /// Every non-ignored covariate must be identical.
    Complete,
}

impl MatchMethod {
    pub fn name(self) -> &'static str {
        match self {
            MatchMethod::Classic => "classic",
            MatchMethod::PropensityOnly => "pscore",
            MatchMethod::Complete => "complete",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchOptions {
    pub replace: bool,
    pub ties: Ties,
    pub n_matches: usize,
    pub order: MatchOrder,
    pub method: MatchMethod,
}

impl Default for MatchOptions {
    fn default() -> Self {
        MatchOptions {
            replace: false,
            ties: Ties::BreakRandom { seed: 0 },
            n_matches: 1,
            order: MatchOrder::DataOrder,
            method: MatchMethod::Classic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    NoExactCounterpart,
    CaliperExhausted,
    PoolExhausted,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::NoExactCounterpart => "no-exact-counterpart",
            DropReason::CaliperExhausted => "caliper-exhausted",
            DropReason::PoolExhausted => "pool-exhausted",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            DropReason::NoExactCounterpart,
            DropReason::CaliperExhausted,
            DropReason::PoolExhausted,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    /// Index into the portfolio the sample was built from.
    pub target: usize,
    pub comparison: usize,
    pub weight: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedTarget {
    pub target: usize,
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedSample {
    pub years: YearPair,
    /// Grouped by target, in processing order.
    pub pairs: Vec<MatchedPair>,
    pub dropped: Vec<DroppedTarget>,
    pub options: MatchOptions,
    pub metric: String,
}

impl MatchedSample {
    /// Pair groups, one per matched target.
    pub fn groups(&self) -> impl Iterator<Item = &[MatchedPair]> {
        self.pairs.chunk_by(|a, b| a.target == b.target)
    }

    /// Distinct matched targets in processing order.
    pub fn targets(&self) -> Vec<usize> {
        self.groups().map(|g| g[0].target).collect()
    }

    pub fn n_matched(&self) -> usize {
        self.groups().count()
    }

    /// Copy holding only the given pair groups (indices into `groups()`),
    /// repeated as often as they occur.
    pub fn resample_groups(&self, picks: &[usize]) -> MatchedSample {
        let groups: Vec<&[MatchedPair]> = self.groups().collect();
        MatchedSample {
            years: self.years,
            pairs: picks.iter().flat_map(|&g| groups[g].iter().cloned()).collect(),
            dropped: self.dropped.clone(),
            options: self.options,
            metric: self.metric.clone(),
        }
    }

    /// `target_id,comparison_id,weight,distance` CSV.
    pub fn write_pairs_csv<W: Write>(&self, portfolio: &Portfolio, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["target_id", "comparison_id", "weight", "distance"])?;
        for pair in &self.pairs {
            csv.write_record([
                portfolio.policies[pair.target].id.clone(),
                portfolio.policies[pair.comparison].id.clone(),
                pair.weight.to_string(),
                pair.distance.to_string(),
            ])?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// `target_id,reason` CSV.
    pub fn write_drops_csv<W: Write>(&self, portfolio: &Portfolio, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["target_id", "reason"])?;
        for d in &self.dropped {
            csv.write_record([portfolio.policies[d.target].id.as_str(), d.reason.as_str()])?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Rebuild a sample from the pair and drop CSVs written for `portfolio`.
    pub fn read_csv<R1: Read, R2: Read>(
        portfolio: &Portfolio,
        years: YearPair,
        pairs: R1,
        drops: R2,
        options: MatchOptions,
    ) -> Result<MatchedSample> {
        let index = |year: i32| -> HashMap<&str, usize> {
            portfolio
                .policies
                .iter()
                .enumerate()
                .filter(|(_, p)| p.year == year)
                .map(|(i, p)| (p.id.as_str(), i))
                .collect()
        };
        let targets = index(years.target);
        let comparisons = index(years.comparison);
        let lookup = |map: &HashMap<&str, usize>, id: &str| {
            map.get(id).copied().ok_or_else(|| Error::InvalidPolicy {
                id: id.to_string(),
                reason: "referenced by the matched sample but not in the portfolio".into(),
            })
        };
        let mut out = Vec::new();
        for record in csv::Reader::from_reader(pairs).records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("");
            let number = |i: usize| {
                field(i)
                    .parse::<f64>()
                    .map_err(|_| Error::Schema(format!("bad number `{}` in matches", field(i))))
            };
            out.push(MatchedPair {
                target: lookup(&targets, field(0))?,
                comparison: lookup(&comparisons, field(1))?,
                weight: number(2)?,
                distance: number(3)?,
            });
        }
        let mut dropped = Vec::new();
        for record in csv::Reader::from_reader(drops).records() {
            let record = record?;
            let reason = record.get(1).and_then(DropReason::parse).ok_or_else(|| {
                Error::Schema(format!("bad drop reason in {:?}", record.as_slice()))
            })?;
            dropped.push(DroppedTarget {
                target: lookup(&targets, record.get(0).unwrap_or(""))?,
                reason,
            });
        }
        Ok(MatchedSample {
            years,
            pairs: out,
            dropped,
            options,
            metric: "imported".into(),
        })
    }
}

/// |dropped| / (|dropped| + distinct matched targets).
pub fn drop_rate(sample: &MatchedSample) -> f64 {
    let dropped = sample.dropped.len();
    let total = dropped + sample.n_matched();
    if total == 0 {
        0.0
    } else {
        dropped as f64 / total as f64
    }
}

/// Precomputed matching problem; `run` can be called repeatedly with different weights.
#[derive(Debug, Clone)]
pub struct Matcher {
    years: YearPair,
    options: MatchOptions,
    targets: Vec<usize>,
    /// Exact block of each policy (by portfolio index); `None` outside the year pair.
    block_of: Vec<Option<usize>>,
    /// Comparison-year policies of each block, in data order.
    blocks: Vec<Vec<usize>>,
    /// Standardized coordinates, row-major by portfolio index.
    coords: Vec<f64>,
    dim: usize,
    /// (raw values row-major, per-coordinate max |Δ|) for calipered covariates.
    calipers: Vec<(Vec<f64>, f64)>,
    metric: String,
}

impl Matcher {
    pub fn new(
        portfolio: &Portfolio,
        years: YearPair,
        ctx: Option<&MetricContext>,
        options: MatchOptions,
    ) -> Result<Matcher> {
        if options.n_matches == 0 {
            return Err(Error::Config("n_matches must be at least 1".into()));
        }
        portfolio.require_years(years)?;
        let n = portfolio.len();
        let specs = &portfolio.specs;

        let exact: Vec<usize> = specs
            .iter()
            .enumerate()
            .filter(|(_, s)| match options.method {
                MatchMethod::Complete => s.match_mode != MatchMode::Ignore,
                _ => s.match_mode == MatchMode::Exact,
            })
            .map(|(j, _)| j)
            .collect();

        let mut keys: HashMap<Vec<String>, usize> = HashMap::new();
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        let mut block_of = vec![None; n];
        for (i, policy) in portfolio.policies.iter().enumerate() {
            if years.indicator(policy.year).is_none() {
                continue;
            }
            let key: Vec<String> = exact
                .iter()
                .map(|&j| match &policy.covariates[j] {
                    CovariateValue::Numeric(x) => (x + 0.0).to_string(),
                    v => v.to_string(),
                })
                .collect();
            let next = keys.len();
            let b = *keys.entry(key).or_insert(next);
            if b == blocks.len() {
                blocks.push(Vec::new());
            }
            block_of[i] = Some(b);
            if policy.year == years.comparison {
                blocks[b].push(i);
            }
        }

        let (coords, dim, calipers, metric) = match options.method {
            MatchMethod::Complete => (Vec::new(), 0, Vec::new(), "complete".to_string()),
            MatchMethod::PropensityOnly => {
                let j = portfolio.spec_index(PSCORE_COVARIATE).ok_or_else(|| {
                    Error::Config(format!(
                        "propensity matching needs the `{PSCORE_COVARIATE}` covariate"
                    ))
                })?;
                let values: Vec<f64> = portfolio
                    .policies
                    .iter()
                    .map(|p| p.covariates[j].as_f64().unwrap_or(f64::NAN))
                    .collect();
                let mut calipers = Vec::new();
                if let Some(c) = specs[j].caliper {
                    let m = values.iter().sum::<f64>() / n as f64;
                    let sd = (values.iter().map(|v| (v - m).powi(2)).sum::<f64>()
                        / (n as f64 - 1.0))
                        .sqrt();
                    calipers.push((values.clone(), c * sd));
                }
                (values, 1, calipers, "|Δ linear predictor|".to_string())
            }
            MatchMethod::Classic => match ctx {
                None => {
                    if !crate::distance::approximate_covariates(specs).is_empty() {
                        return Err(Error::Config(
                            "classic matching with approximate covariates needs a metric context"
                                .into(),
                        ));
                    }
                    (Vec::new(), 0, Vec::new(), "exact".to_string())
                }
                Some(ctx) => {
                    let dim = ctx.dim();
                    let mut coords = Vec::with_capacity(n * dim);
                    let mut raw = Vec::with_capacity(n * dim);
                    for policy in &portfolio.policies {
                        let x = ctx.features(policy);
                        coords.extend(ctx.standardize(&x)?);
                        raw.extend(x);
                    }
                    let calipers = (0..dim)
                        .filter_map(|c| {
                            ctx.calipers[c].map(|cal| {
                                let column: Vec<f64> = (0..n).map(|i| raw[i * dim + c]).collect();
                                (column, cal * ctx.sd[c])
                            })
                        })
                        .collect();
                    (coords, dim, calipers, "weighted mahalanobis".to_string())
                }
            },
        };

        let mut targets = portfolio.indices_in_year(years.target);
        if let MatchOrder::RandomOrder { seed } = options.order {
            targets.shuffle(&mut seed::rng(seed, &[seed::tag("match-order")]));
        }
        Ok(Matcher {
            years,
            options,
            targets,
            block_of,
            blocks,
            coords,
            dim,
            calipers,
            metric,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Build the matched sample; `weights` defaults to the identity.
    pub fn run(&self, weights: Option<&WeightMatrix>) -> Result<MatchedSample> {
        let scale: Vec<f64> = match weights {
            Some(w) => {
                if self.options.method == MatchMethod::Classic && w.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: w.len(),
                    });
                }
                w.diagonal().to_vec()
            }
            None => vec![1.0; self.dim],
        };
        let distance2 = |a: usize, b: usize| -> f64 {
            let (za, zb) = (
                &self.coords[a * self.dim..(a + 1) * self.dim],
                &self.coords[b * self.dim..(b + 1) * self.dim],
            );
            za.iter()
                .zip(zb)
                .zip(&scale)
                .map(|((x, y), w)| w * (x - y) * (x - y))
                .sum()
        };

        let mut rng = match self.options.ties {
            Ties::BreakRandom { seed } => Some(seed::rng(seed, &[seed::tag("ties")])),
            Ties::KeepAll => None,
        };
        let mut used = vec![false; self.block_of.len()];
        let mut pairs = Vec::new();
        let mut dropped = Vec::new();
        let mut candidates: Vec<(f64, usize)> = Vec::new();

        for &t in &self.targets {
            let block = match self.block_of[t] {
                Some(b) if !self.blocks[b].is_empty() => &self.blocks[b],
                _ => {
                    dropped.push(DroppedTarget {
                        target: t,
                        reason: DropReason::NoExactCounterpart,
                    });
                    continue;
                }
            };
            let within = |c: usize| {
                self.calipers
                    .iter()
                    .all(|(raw, max)| (raw[t] - raw[c]).abs() <= *max)
            };
            candidates.clear();
            let mut any_within = false;
            for &c in block {
                if !within(c) {
                    continue;
                }
                any_within = true;
                if !self.options.replace && used[c] {
                    continue;
                }
                candidates.push((distance2(t, c), c));
            }
            if candidates.is_empty() {
                dropped.push(DroppedTarget {
                    target: t,
                    reason: if any_within {
                        DropReason::PoolExhausted
                    } else {
                        DropReason::CaliperExhausted
                    },
                });
                continue;
            }
            let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            let wanted = self.options.n_matches.min(candidates.len());
            // Keep the `wanted` nearest plus anything tied with the last of them.
            let boundary = candidates.select_nth_unstable_by(wanted - 1, order).1 .0;
            let tied = |d: f64| d <= boundary + TIE_TOLERANCE * boundary;
            let mut keep = wanted;
            for i in wanted..candidates.len() {
                if tied(candidates[i].0) {
                    candidates.swap(keep, i);
                    keep += 1;
                }
            }
            candidates.truncate(keep);
            candidates.sort_by(order);
            let strictly_inside = candidates.iter().take_while(|(d, _)| !tied(*d)).count();
            let at_boundary: Vec<usize> = candidates[strictly_inside..]
                .iter()
                .take_while(|(d, _)| tied(*d))
                .map(|(_, c)| *c)
                .collect();

            let mut chosen: Vec<usize> = candidates[..strictly_inside].iter().map(|(_, c)| *c).collect();
            match rng.as_mut() {
                None => chosen.extend(&at_boundary),
                Some(rng) => {
                    let need = wanted - strictly_inside;
                    let mut pool = at_boundary;
                    for k in 0..need {
                        let pick = rng.gen_range(k..pool.len());
                        pool.swap(k, pick);
                    }
                    chosen.extend(&pool[..need]);
                }
            }
            chosen.sort_unstable();
            let weight = 1.0 / chosen.len() as f64;
            for &c in &chosen {
                if !self.options.replace {
                    used[c] = true;
                }
                pairs.push(MatchedPair {
                    target: t,
                    comparison: c,
                    weight,
                    distance: distance2(t, c).sqrt(),
                });
            }
        }
        if pairs.is_empty() {
            return Err(Error::AllDropped);
        }
        Ok(MatchedSample {
            years: self.years,
            pairs,
            dropped,
            options: self.options,
            metric: self.metric.clone(),
        })
    }
}

/// Match every target-year policy of `portfolio` under `options`.
pub fn match_portfolio(
    portfolio: &Portfolio,
    years: YearPair,
    ctx: Option<&MetricContext>,
    weights: Option<&WeightMatrix>,
    options: MatchOptions,
) -> Result<MatchedSample> {
    Matcher::new(portfolio, years, ctx, options)?.run(weights)
}

/// Pairs only where every non-ignored covariate is identical.
pub fn complete_match(portfolio: &Portfolio, years: YearPair, options: MatchOptions) -> Result<MatchedSample> {
    let options = MatchOptions {
        method: MatchMethod::Complete,
        ..options
    };
    match_portfolio(portfolio, years, None, None, options)
}
