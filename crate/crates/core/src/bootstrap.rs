//! Percentile bootstrap for rate-change estimates.

use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::estimate_matched;
use crate::matcher::MatchedSample;
use crate::model::{ConfidenceInterval, ContrastFunction, Portfolio, YearPair};
use crate::seed::{self, StreamRng};

/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Resample matched target groups with their comparisons and weights.
    PairResample,
    /// Resample each year of the raw portfolio and redo the whole pipeline.
    FullRematch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    #[serde(default = "default_level")]
    pub ci_level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
}

fn default_replicates() -> usize {
    1000
}

fn default_level() -> f64 {
    0.95
}

fn default_scheme() -> Scheme {
    Scheme::PairResample
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            n_replicates: default_replicates(),
            ci_level: default_level(),
            seed: 0,
            scheme: default_scheme(),
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_replicates < 100 {
            return Err(Error::Config(format!(
                "at least 100 bootstrap replicates are needed, got {}",
                self.n_replicates
            )));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(Error::Config(format!("ci_level must lie in (0, 1), got {}", self.ci_level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub point: f64,
    pub ci: ConfidenceInterval,
    /// Successful replicate values in replicate order.
    pub replicates: Vec<f64>,
    pub failed: usize,
}

impl BootstrapResult {
    /// `replicate,value`; failed replicates are absent.
    pub fn write_replicates_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["replicate", "value"])?;
        for (i, v) in self.replicates.iter().enumerate() {
            csv.write_record([i.to_string(), v.to_string()])?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Nearest-rank percentile: the ⌈q·B⌉-th smallest value (rank at least 1).
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let b = sorted.len();
    let rank = ((q * b as f64 - 1e-9).ceil() as usize).clamp(1, b);
    sorted[rank - 1]
}

/// Equal-tailed percentile interval at `level`.
pub fn percentile_ci(values: &[f64], level: f64) -> ConfidenceInterval {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    ConfidenceInterval {
        low: nearest_rank(&sorted, alpha / 2.0),
        high: nearest_rank(&sorted, 1.0 - alpha / 2.0),
        level,
    }
}

/// Runs `replicate` once per index on `workers` threads, each with its own
/// stream derived from (seed, index), and summarizes the successes.
pub fn bootstrap_ci<F>(point: f64, cfg: &BootstrapConfig, workers: usize, replicate: F) -> Result<BootstrapResult>
where
    F: Fn(&mut StreamRng) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let outcomes: Vec<Option<f64>> = pool.install(|| {
        (0..cfg.n_replicates)
            .into_par_iter()
            .map(|i| {
                let mut rng = seed::rng(cfg.seed, &[seed::tag("bootstrap"), i as u64]);
                replicate(&mut rng).ok().filter(|v| v.is_finite())
            })
            .collect()
    });
    let replicates: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let failed = cfg.n_replicates - replicates.len();
    if failed as f64 > MAX_FAILURE_RATE * cfg.n_replicates as f64 {
        return Err(Error::BootstrapFailures {
            failed,
            total: cfg.n_replicates,
        });
    }
    Ok(BootstrapResult {
        point,
        ci: percentile_ci(&replicates, cfg.ci_level),
        replicates,
        failed,
    })
}

/// Matched-sample replicate: draw target groups with replacement and re-estimate.
pub fn pair_resample(
    sample: &MatchedSample,
    portfolio: &Portfolio,
    coverage: &str,
    contrast: ContrastFunction,
    rng: &mut StreamRng,
) -> Result<f64> {
    let g = sample.n_matched();
    if g == 0 {
        return Err(Error::EmptySample);
    }
    let picks: Vec<usize> = (0..g).map(|_| rng.gen_range(0..g)).collect();
    Ok(estimate_matched(&sample.resample_groups(&picks), portfolio, coverage, contrast)?.point)
}

/// Case resample within each year of the pair; other years are left out.
pub fn resample_portfolio(portfolio: &Portfolio, years: YearPair, rng: &mut StreamRng) -> Result<Portfolio> {
    portfolio.require_years(years)?;
    let mut policies = Vec::with_capacity(portfolio.len());
    for year in [years.target, years.comparison] {
        let rows = portfolio.indices_in_year(year);
        for _ in 0..rows.len() {
            policies.push(portfolio.policies[rows[rng.gen_range(0..rows.len())]].clone());
        }
    }
    Portfolio::new(portfolio.specs.clone(), policies)
}
