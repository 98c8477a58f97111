//! Run configuration read from one TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ratematch::bootstrap::{BootstrapConfig, Scheme};
use ratematch::genmatch::GaConfig;
use ratematch::ingest::SchemaConfig;
use ratematch::matcher::{MatchMethod, MatchOptions, MatchOrder, Ties};
use ratematch::seed;
use ratematch::{ContrastFunction, Year, YearPair, TOTAL};
use serde::Deserialize;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub workers: Option<usize>,
    pub data: DataSection,
    pub schema: SchemaConfig,
    pub analysis: AnalysisSection,
    #[serde(default, rename = "match")]
    pub matching: MatchSection,
    #[serde(default)]
    pub genmatch: GenmatchSection,
    #[serde(default)]
    pub estimate: EstimateSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Portfolio CSV, relative to the config file.
    pub path: PathBuf,
    /// Analyse a uniform random subset of this many policies.
    #[serde(default)]
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub target_year: Year,
    pub comparison_year: Year,
    /// Further years for chained estimates; the pair above is always included.
    #[serde(default)]
    pub years: Vec<Year>,
    #[serde(default = "ratio")]
    pub contrast: ContrastFunction,
    #[serde(default = "total")]
    pub coverages: Vec<String>,
}

fn ratio() -> ContrastFunction {
    ContrastFunction::Ratio
}

fn total() -> Vec<String> {
    vec![TOTAL.to_string()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TiesChoice {
    KeepAll,
    BreakRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderChoice {
    Data,
    Random,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchSection {
    #[serde(default = "classic")]
    pub method: MatchMethod,
    #[serde(default)]
    pub replace: bool,
    #[serde(default = "break_random")]
    pub ties: TiesChoice,
    #[serde(default = "one")]
    pub n_matches: usize,
    #[serde(default = "data_order")]
    pub order: OrderChoice,
    /// Fit the propensity model and add its linear predictor as a matching covariate.
    #[serde(default)]
    pub propensity: bool,
    /// Caliper on the linear predictor, in standard deviations.
    #[serde(default)]
    pub propensity_caliper: Option<f64>,
    #[serde(default)]
    pub propensity_ridge: f64,
}

fn classic() -> MatchMethod {
    MatchMethod::Classic
}

fn break_random() -> TiesChoice {
    TiesChoice::BreakRandom
}

fn one() -> usize {
    1
}

fn data_order() -> OrderChoice {
    OrderChoice::Data
}

impl Default for MatchSection {
    fn default() -> Self {
        MatchSection {
            method: classic(),
            replace: false,
            ties: break_random(),
            n_matches: 1,
            order: data_order(),
            propensity: false,
            propensity_caliper: None,
            propensity_ridge: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenmatchSection {
    #[serde(default = "pop")]
    pub pop_size: usize,
    #[serde(default = "generations")]
    pub max_generations: usize,
    #[serde(default = "wait")]
    pub wait_generations: usize,
    #[serde(default)]
    pub lo: Option<f64>,
    #[serde(default)]
    pub hi: Option<f64>,
    #[serde(default)]
    pub starting_weights: Option<Vec<f64>>,
}

fn pop() -> usize {
    50
}

fn generations() -> usize {
    20
}

fn wait() -> usize {
    5
}

impl Default for GenmatchSection {
    fn default() -> Self {
        GenmatchSection {
            pop_size: pop(),
            max_generations: generations(),
            wait_generations: wait(),
            lo: None,
            hi: None,
            starting_weights: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Naive,
    Matched,
    Genmatch,
    Regression,
    Ipw,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    /// Defaults to every method, with genmatch only when its weights file exists.
    #[serde(default)]
    pub methods: Option<Vec<MethodChoice>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "replicates")]
    pub n_replicates: usize,
    #[serde(default = "level")]
    pub ci_level: f64,
    #[serde(default = "pair_resample")]
    pub scheme: Scheme,
    /// Write per-replicate values next to the estimates.
    #[serde(default)]
    pub dump_replicates: bool,
}

fn yes() -> bool {
    true
}

fn replicates() -> usize {
    1000
}

fn level() -> f64 {
    0.95
}

fn pair_resample() -> Scheme {
    Scheme::PairResample
}

impl Default for BootstrapSection {
    fn default() -> Self {
        BootstrapSection {
            enabled: true,
            n_replicates: replicates(),
            ci_level: level(),
            scheme: pair_resample(),
            dump_replicates: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "out_dir")]
    pub dir: PathBuf,
    /// Quantile pairs per covariate in the QQ files.
    #[serde(default = "qq_points")]
    pub qq_points: usize,
}

fn out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn qq_points() -> usize {
    20
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: out_dir(),
            qq_points: qq_points(),
        }
    }
}

/// Values overriding the file, from flags and the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

pub const WORKERS_ENV: &str = "RATEMATCH_WORKERS";

impl RunConfig {
    /// Reads the file, resolves relative paths against its directory and applies overrides.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.data.path.is_relative() {
            cfg.data.path = base.join(&cfg.data.path);
        }
        match &overrides.out {
            Some(out) => cfg.output.dir = out.clone(),
            None if cfg.output.dir.is_relative() => cfg.output.dir = base.join(&cfg.output.dir),
            None => {}
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        let env = match std::env::var(WORKERS_ENV) {
            Ok(v) => Some(v.trim().parse::<usize>().with_context(|| format!("{WORKERS_ENV} must be a count"))?),
            Err(_) => None,
        };
        cfg.workers = overrides.workers.or(env).or(cfg.workers);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.analysis;
        if a.target_year == a.comparison_year {
            bail!("target_year and comparison_year must differ");
        }
        if a.coverages.is_empty() {
            bail!("analysis.coverages is empty");
        }
        for coverage in &a.coverages {
            if !self.schema.premium_columns.contains_key(coverage) {
                bail!("coverage `{coverage}` has no premium column in the schema");
            }
        }
        if self.matching.n_matches == 0 {
            bail!("match.n_matches must be at least 1");
        }
        if self.matching.method == MatchMethod::PropensityOnly && !self.matching.propensity {
            bail!("match.method = \"propensity_only\" needs match.propensity = true");
        }
        if self.workers == Some(0) {
            bail!("worker count must be at least 1");
        }
        Ok(())
    }

    pub fn years(&self) -> YearPair {
        YearPair::new(self.analysis.target_year, self.analysis.comparison_year)
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    /// Seed of a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive(self.seed, &[seed::tag(stage)])
    }

    pub fn match_options(&self) -> MatchOptions {
        let m = &self.matching;
        MatchOptions {
            replace: m.replace,
            ties: match m.ties {
                TiesChoice::KeepAll => Ties::KeepAll,
                TiesChoice::BreakRandom => Ties::BreakRandom {
                    seed: self.stage_seed("ties"),
                },
            },
            n_matches: m.n_matches,
            order: match m.order {
                OrderChoice::Data => MatchOrder::DataOrder,
                OrderChoice::Random => MatchOrder::RandomOrder {
                    seed: self.stage_seed("order"),
                },
            },
            method: m.method,
        }
    }

    pub fn ga_config(&self) -> GaConfig {
        let g = &self.genmatch;
        let defaults = GaConfig::default();
        GaConfig {
            pop_size: g.pop_size,
            max_generations: g.max_generations,
            wait_generations: g.wait_generations,
            seed: self.stage_seed("genmatch"),
            lo: g.lo.unwrap_or(defaults.lo),
            hi: g.hi.unwrap_or(defaults.hi),
            starting_weights: g.starting_weights.clone(),
        }
    }

    pub fn bootstrap_config(&self, method: &str) -> BootstrapConfig {
        let b = &self.bootstrap;
        BootstrapConfig {
            n_replicates: b.n_replicates,
            ci_level: b.ci_level,
            seed: seed::derive(self.seed, &[seed::tag("bootstrap"), seed::tag(method)]),
            scheme: b.scheme,
        }
    }
}
