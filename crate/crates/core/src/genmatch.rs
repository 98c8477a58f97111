//! Genetic search over diagonal metric weights maximizing post-match balance.

use std::cmp::Ordering;
use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::balance::balance_after;
use crate::distance::{MetricContext, WeightMatrix};
use crate::error::{Error, Result};
use crate::matcher::{MatchOptions, Matcher};
use crate::model::{Portfolio, YearPair};
use crate::seed;

const TOURNAMENT: usize = 3;
const CROSSOVER_RATE: f64 = 0.8;
const MUTATION_RATE: f64 = 0.2;
const MUTATION_SD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaConfig {
    pub pop_size: usize,
    pub max_generations: usize,
    pub wait_generations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lo")]
    pub lo: f64,
    #[serde(default = "default_hi")]
    pub hi: f64,
    #[serde(default)]
    pub starting_weights: Option<Vec<f64>>,
}

fn default_lo() -> f64 {
    0.0
}

fn default_hi() -> f64 {
    1000.0
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig {
            pop_size: 50,
            max_generations: 20,
            wait_generations: 5,
            seed: 0,
            lo: default_lo(),
            hi: default_hi(),
            starting_weights: None,
        }
    }
}

impl GaConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.pop_size < 2 {
            return Err(Error::Config("pop_size must be at least 2".into()));
        }
        if !(self.lo >= 0.0) || !(self.hi > self.lo) || !self.hi.is_finite() {
            return Err(Error::Config(format!(
                "weight bounds must satisfy 0 <= lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if let Some(start) = &self.starting_weights {
            if start.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: start.len(),
                });
            }
            if start.iter().any(|g| *g < self.lo || *g > self.hi) {
                return Err(Error::Config("starting weights lie outside the bounds".into()));
            }
        }
        Ok(())
    }
}

/// Ascending balance p-values, compared lexicographically (larger is better).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessValue(pub Vec<f64>);

impl FitnessValue {
    pub fn new(mut p: Vec<f64>) -> Self {
        p.sort_by(f64::total_cmp);
        FitnessValue(p)
    }

    pub fn zeros(len: usize) -> Self {
        FitnessValue(vec![0.0; len])
    }

    pub fn min_p(&self) -> f64 {
        self.0.first().copied().unwrap_or(1.0)
    }
}

impl Eq for FitnessValue {}

impl PartialOrd for FitnessValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for FitnessValue {
    fn cmp(&self, other: &Self) -> Ordering {
        for (a, b) in self.0.iter().zip(&other.0) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                o => return o,
            }
        }
        self.0.len().cmp(&other.0.len())
    }
}

/// Matching problem plus balance scoring; `evaluate` is pure in the weights.
pub struct Fitness<'a> {
    portfolio: &'a Portfolio,
    matcher: Matcher,
    tested: usize,
}

impl<'a> Fitness<'a> {
    pub fn new(
        portfolio: &'a Portfolio,
        years: YearPair,
        ctx: &MetricContext,
        options: MatchOptions,
    ) -> Result<Self> {
        let matcher = Matcher::new(portfolio, years, Some(ctx), options)?;
        let tested = portfolio.specs.iter().filter(|s| s.confounder).count();
        Ok(Fitness {
            portfolio,
            matcher,
            tested,
        })
    }

    pub fn dim(&self) -> usize {
        self.matcher.dim()
    }

    pub fn evaluate(&self, weights: &[f64]) -> FitnessValue {
        let w = match WeightMatrix::new(weights.to_vec()) {
            Ok(w) => w,
            Err(_) => return FitnessValue::zeros(self.tested),
        };
        match self
            .matcher
            .run(Some(&w))
            .and_then(|sample| balance_after(self.portfolio, &sample))
        {
            Ok(report) => FitnessValue::new(report.sorted_p_values()),
            Err(_) => FitnessValue::zeros(self.tested),
        }
    }
}

/// Ascending post-match p-values for one weight vector.
pub fn fitness(
    portfolio: &Portfolio,
    years: YearPair,
    ctx: &MetricContext,
    weights: &WeightMatrix,
    options: MatchOptions,
) -> Result<FitnessValue> {
    Ok(Fitness::new(portfolio, years, ctx, options)?.evaluate(weights.diagonal()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub fitness: FitnessValue,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub weights: Vec<f64>,
    pub fitness: FitnessValue,
    pub history: Vec<GenerationRecord>,
}

impl GaResult {
    pub fn weight_matrix(&self) -> Result<WeightMatrix> {
        WeightMatrix::new(self.weights.clone())
    }

    /// `generation,best_min_p,w1..wk`.
    pub fn write_history_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        let k = self.weights.len();
        let mut header = vec!["generation".to_string(), "best_min_p".to_string()];
        header.extend((1..=k).map(|i| format!("w{i}")));
        csv.write_record(&header)?;
        for rec in &self.history {
            let mut row = vec![rec.generation.to_string(), rec.fitness.min_p().to_string()];
            row.extend(rec.weights.iter().map(|w| w.to_string()));
            csv.write_record(&row)?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// `covariate,weight`.
    pub fn write_weights_csv<W: Write>(&self, names: &[String], writer: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(writer);
        csv.write_record(["covariate", "weight"])?;
        for (name, w) in names.iter().zip(&self.weights) {
            csv.write_record([name.clone(), w.to_string()])?;
        }
        csv.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Reads the `covariate,weight` file written by [`GaResult::write_weights_csv`].
pub fn read_weights_csv<R: std::io::Read>(reader: R, names: &[String]) -> Result<WeightMatrix> {
    let mut csv = csv::Reader::from_reader(reader);
    let mut weights = Vec::new();
    for (i, record) in csv.records().enumerate() {
        let record = record?;
        let name = record.get(0).unwrap_or_default();
        if names.get(i).map(String::as_str) != Some(name) {
            return Err(Error::Schema(format!("weights file lists `{name}` out of order")));
        }
        let w: f64 = record
            .get(1)
            .unwrap_or_default()
            .parse()
            .map_err(|_| Error::Schema(format!("bad weight for `{name}`")))?;
        weights.push(w);
    }
    if weights.len() != names.len() {
        return Err(Error::DimensionMismatch {
            expected: names.len(),
            actual: weights.len(),
        });
    }
    WeightMatrix::new(weights)
}

fn tournament<'p>(rng: &mut impl Rng, scored: &'p [(Vec<f64>, FitnessValue)]) -> &'p [f64] {
    let mut best = rng.gen_range(0..scored.len());
    for _ in 1..TOURNAMENT {
        let c = rng.gen_range(0..scored.len());
        if scored[c].1 > scored[best].1 {
            best = c;
        }
    }
    &scored[best].0
}

fn offspring(cfg: &GaConfig, scored: &[(Vec<f64>, FitnessValue)], generation: usize, index: usize) -> Vec<f64> {
    let mut rng = seed::rng(cfg.seed, &[seed::tag("ga-child"), generation as u64, index as u64]);
    let noise = Normal::new(0.0, MUTATION_SD).expect("finite sd");
    let a = tournament(&mut rng, scored);
    let b = tournament(&mut rng, scored);
    let cross = rng.gen_bool(CROSSOVER_RATE);
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let mut g = if cross && rng.gen_bool(0.5) { y } else { x };
            if rng.gen_bool(MUTATION_RATE) {
                g = if g > 0.0 {
                    g * noise.sample(&mut rng).exp()
                } else {
                    rng.gen_range(cfg.lo..cfg.hi)
                };
            }
            g.clamp(cfg.lo, cfg.hi)
        })
        .collect()
}

fn evaluate_all(fitness: &Fitness, genomes: Vec<Vec<f64>>, pool: &rayon::ThreadPool) -> Vec<(Vec<f64>, FitnessValue)> {
    pool.install(|| {
        genomes
            .into_par_iter()
            .map(|g| {
                let f = fitness.evaluate(&g);
                (g, f)
            })
            .collect()
    })
}

/// Runs the GA on `workers` threads; results do not depend on `workers`.
pub fn optimize(fitness: &Fitness, cfg: &GaConfig, workers: usize) -> Result<GaResult> {
    let dim = fitness.dim();
    cfg.validate(dim)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let start = cfg
        .starting_weights
        .clone()
        .unwrap_or_else(|| vec![1.0f64.clamp(cfg.lo, cfg.hi); dim]);
    let mut genomes = vec![start];
    let mut rng = seed::rng(cfg.seed, &[seed::tag("ga-init")]);
    while genomes.len() < cfg.pop_size {
        genomes.push((0..dim).map(|_| rng.gen_range(cfg.lo..cfg.hi)).collect());
    }

    let mut scored = evaluate_all(fitness, genomes, &pool);
    let best_of = |s: &[(Vec<f64>, FitnessValue)]| {
        // First maximum, so ties keep the earlier individual.
        s.iter()
            .enumerate()
            .fold(0, |b, (i, x)| if x.1 > s[b].1 { i } else { b })
    };
    let mut best = scored[best_of(&scored)].clone();
    let mut history = vec![GenerationRecord {
        generation: 0,
        fitness: best.1.clone(),
        weights: best.0.clone(),
    }];
    let mut stale = 0;
    for generation in 1..=cfg.max_generations {
        let children: Vec<Vec<f64>> = (1..cfg.pop_size)
            .map(|i| offspring(cfg, &scored, generation, i))
            .collect();
        let mut next = vec![best.clone()];
        next.extend(evaluate_all(fitness, children, &pool));
        scored = next;
        let candidate = &scored[best_of(&scored)];
        if candidate.1 > best.1 {
            best = candidate.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(GenerationRecord {
            generation,
            fitness: best.1.clone(),
            weights: best.0.clone(),
        });
        if stale >= cfg.wait_generations {
            break;
        }
    }
    Ok(GaResult {
        weights: best.0,
        fitness: best.1,
        history,
    })
}
