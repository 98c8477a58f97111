//! Subcommand implementations. Every artifact is written under the output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ratematch::balance::{balance_after, balance_before, qq_pairs, BalanceReport, Weighted};
use ratematch::bootstrap::{bootstrap_ci, pair_resample, resample_portfolio, BootstrapResult, Scheme};
use ratematch::distance::{approximate_covariates, build_context, MetricContext, WeightMatrix};
use ratematch::estimator::{
    estimate_ipw, estimate_matched, estimate_multi_year, estimate_naive, fit_premium_regression, ipw_means,
    matched_means, naive_means, regression_rate_change, write_estimates_csv, Link,
};
use ratematch::genmatch::{optimize, read_weights_csv, Fitness};
use ratematch::ingest::{load_portfolio, subset, write_portfolio, write_rejects};
use ratematch::matcher::{drop_rate, MatchMethod, MatchedSample, Matcher};
use ratematch::propensity::{append_linear_predictor, fit_logistic, LogisticOptions, PropensityModel, PSCORE_COVARIATE};
use ratematch::{
    balance, ContrastFunction, CovariateKind, Portfolio, RateChangeEstimate, YearPair,
};

use crate::config::{MethodChoice, RunConfig};

pub const MATCHES: &str = "matches.csv";
pub const DROPS: &str = "drops.csv";
pub const BALANCE: &str = "balance.csv";
pub const PROPENSITY: &str = "propensity.csv";
pub const WEIGHTS: &str = "weights.csv";
pub const GA_HISTORY: &str = "ga_history.csv";
pub const GA_MATCHES: &str = "matches_genmatch.csv";
pub const GA_DROPS: &str = "drops_genmatch.csv";
pub const GA_BALANCE: &str = "balance_genmatch.csv";
pub const ESTIMATES: &str = "estimates.csv";
pub const CHAINED: &str = "estimates_chained.csv";
pub const QQ: &str = "qq.csv";
pub const SUMMARY: &str = "summary.txt";
pub const REJECTS: &str = "rejects.csv";
pub const CLEAN: &str = "portfolio.csv";

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn open(dir: &Path, name: &str) -> Result<File> {
    let path = dir.join(name);
    File::open(&path).with_context(|| format!("missing artifact {}", path.display()))
}

/// Year-pair portfolio with the optional propensity covariate.
pub struct Prepared {
    pub years: YearPair,
    pub portfolio: Portfolio,
    pub model: Option<PropensityModel>,
    pub ctx: Option<MetricContext>,
}

fn logistic_options(cfg: &RunConfig) -> LogisticOptions {
    LogisticOptions {
        ridge: cfg.matching.propensity_ridge,
        ..LogisticOptions::default()
    }
}

fn with_propensity(cfg: &RunConfig, portfolio: Portfolio, years: YearPair) -> Result<(Portfolio, Option<PropensityModel>)> {
    if !cfg.matching.propensity {
        return Ok((portfolio, None));
    }
    let model = fit_logistic(&portfolio, years, logistic_options(cfg))?;
    let mut scored = append_linear_predictor(&portfolio, &model)?;
    if let Some(spec) = scored.specs.last_mut() {
        spec.caliper = cfg.matching.propensity_caliper;
    }
    Ok((scored, Some(model)))
}

fn metric_context(portfolio: &Portfolio) -> Result<Option<MetricContext>> {
    if approximate_covariates(&portfolio.specs).is_empty() {
        Ok(None)
    } else {
        Ok(Some(build_context(portfolio)?))
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let years = cfg.years();
    let loaded = load_portfolio(&cfg.data.path, &cfg.schema)?;
    loaded.portfolio.require_years(years)?;
    let mut portfolio = loaded.portfolio.restrict_to(years);
    if let Some(n) = cfg.data.subset {
        portfolio = subset(&portfolio, n, cfg.stage_seed("subset"))?;
        portfolio.require_years(years)?;
    }
    let (portfolio, model) = with_propensity(cfg, portfolio, years)?;
    let ctx = metric_context(&portfolio)?;
    Ok(Prepared {
        years,
        portfolio,
        model,
        ctx,
    })
}

impl Prepared {
    fn matcher(&self, cfg: &RunConfig) -> Result<Matcher> {
        Ok(Matcher::new(&self.portfolio, self.years, self.ctx.as_ref(), cfg.match_options())?)
    }

    fn names(&self) -> Vec<String> {
        self.ctx.as_ref().map(|c| c.names.clone()).unwrap_or_default()
    }

    fn ga_weights(&self, cfg: &RunConfig) -> Result<Option<WeightMatrix>> {
        let path = cfg.output.dir.join(WEIGHTS);
        if !path.exists() {
            return Ok(None);
        }
        let file = File::open(&path).with_context(|| format!("cannot read {}", path.display()))?;
        Ok(Some(read_weights_csv(file, &self.names())?))
    }
}

fn write_sample(prepared: &Prepared, sample: &MatchedSample, dir: &Path, pairs: &str, drops: &str) -> Result<()> {
    let mut w = create(dir, pairs)?;
    sample.write_pairs_csv(&prepared.portfolio, &mut w)?;
    w.flush()?;
    let mut w = create(dir, drops)?;
    sample.write_drops_csv(&prepared.portfolio, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<String> {
    let loaded = load_portfolio(&cfg.data.path, &cfg.schema)?;
    let dir = &cfg.output.dir;
    let mut w = create(dir, REJECTS)?;
    write_rejects(&mut w, &loaded.header, &loaded.rejects)?;
    w.flush()?;
    let mut w = create(dir, CLEAN)?;
    write_portfolio(&mut w, &loaded.portfolio, &cfg.schema)?;
    w.flush()?;
    let mut out = format!(
        "ingested {} policies, rejected {} rows\n",
        loaded.portfolio.len(),
        loaded.rejects.len()
    );
    for year in loaded.portfolio.years() {
        let _ = writeln!(out, "year {year}: {} policies", loaded.portfolio.count_in_year(year));
    }
    Ok(out)
}

fn match_summary(label: &str, before: &BalanceReport, after: &BalanceReport, sample: &MatchedSample) -> String {
    format!(
        "{label}: min-p before {:.4}, after {:.4}; matched {}, dropped {} ({:.1}%)\n",
        before.min_p,
        after.min_p,
        sample.n_matched(),
        sample.dropped.len(),
        100.0 * drop_rate(sample)
    )
}

pub fn cmd_match(cfg: &RunConfig) -> Result<String> {
    let prepared = prepare(cfg)?;
    let dir = &cfg.output.dir;
    let sample = prepared.matcher(cfg)?.run(None)?;
    write_sample(&prepared, &sample, dir, MATCHES, DROPS)?;
    let before = balance_before(&prepared.portfolio, prepared.years)?;
    let after = balance_after(&prepared.portfolio, &sample)?;
    let mut w = create(dir, BALANCE)?;
    balance::write_balance_csv(&mut w, &before, Some(&after))?;
    w.flush()?;
    if let Some(model) = &prepared.model {
        let mut w = create(dir, PROPENSITY)?;
        model.write_csv(&mut w)?;
        w.flush()?;
    }
    Ok(match_summary(cfg.matching.method.name(), &before, &after, &sample))
}

pub fn cmd_genmatch(cfg: &RunConfig) -> Result<String> {
    let prepared = prepare(cfg)?;
    if cfg.matching.method != MatchMethod::Classic {
        bail!("genmatch searches metric weights and needs match.method = \"classic\"");
    }
    let ctx = prepared
        .ctx
        .as_ref()
        .ok_or_else(|| anyhow!(ratematch::Error::NoApproximateCovariates))?;
    let dir = &cfg.output.dir;
    let fitness = Fitness::new(&prepared.portfolio, prepared.years, ctx, cfg.match_options())?;
    let result = optimize(&fitness, &cfg.ga_config(), cfg.workers())?;
    let mut w = create(dir, WEIGHTS)?;
    result.write_weights_csv(&ctx.names, &mut w)?;
    w.flush()?;
    let mut w = create(dir, GA_HISTORY)?;
    result.write_history_csv(&mut w)?;
    w.flush()?;
    let weights = result.weight_matrix()?;
    let sample = prepared.matcher(cfg)?.run(Some(&weights))?;
    write_sample(&prepared, &sample, dir, GA_MATCHES, GA_DROPS)?;
    let before = balance_before(&prepared.portfolio, prepared.years)?;
    let after = balance_after(&prepared.portfolio, &sample)?;
    let mut w = create(dir, GA_BALANCE)?;
    balance::write_balance_csv(&mut w, &before, Some(&after))?;
    w.flush()?;
    let mut out = format!("genmatch: {} generations\n", result.history.len() - 1);
    out.push_str(&match_summary("genmatch", &before, &after, &sample));
    Ok(out)
}

fn link_for(contrast: ContrastFunction) -> Link {
    match contrast {
        ContrastFunction::Difference => Link::Identity,
        ContrastFunction::Ratio => Link::Log,
    }
}

/// Everything needed to rerun one estimator on a resampled portfolio.
struct Pipeline<'a> {
    cfg: &'a RunConfig,
    prepared: &'a Prepared,
    weights: Option<WeightMatrix>,
}

impl Pipeline<'_> {
    fn rematch(&self, portfolio: &Portfolio) -> Result<(Portfolio, MatchedSample)> {
        let years = self.prepared.years;
        let base = strip_propensity(portfolio);
        let (scored, _) = with_propensity(self.cfg, base, years)?;
        let ctx = metric_context(&scored)?;
        let sample = Matcher::new(&scored, years, ctx.as_ref(), self.cfg.match_options())?.run(self.weights.as_ref())?;
        Ok((scored, sample))
    }
}

fn strip_propensity(portfolio: &Portfolio) -> Portfolio {
    match portfolio.spec_index(PSCORE_COVARIATE) {
        None => portfolio.clone(),
        Some(j) => {
            let mut p = portfolio.clone();
            p.specs.remove(j);
            for policy in &mut p.policies {
                policy.covariates.remove(j);
            }
            p
        }
    }
}

fn method_label(choice: MethodChoice, cfg: &RunConfig) -> String {
    match choice {
        MethodChoice::Naive => "naive".into(),
        MethodChoice::Matched => cfg.matching.method.name().into(),
        MethodChoice::Genmatch => "genmatch".into(),
        MethodChoice::Regression => format!("regression-{}", link_for(cfg.analysis.contrast).name()),
        MethodChoice::Ipw => "ipw".into(),
    }
}

pub fn cmd_estimate(cfg: &RunConfig) -> Result<String> {
    let prepared = prepare(cfg)?;
    let years = prepared.years;
    let contrast = cfg.analysis.contrast;
    let dir = &cfg.output.dir;
    let ga_weights = prepared.ga_weights(cfg)?;
    let methods: Vec<MethodChoice> = match &cfg.estimate.methods {
        Some(m) => m.clone(),
        None => {
            let mut m = vec![MethodChoice::Naive, MethodChoice::Matched];
            if ga_weights.is_some() {
                m.push(MethodChoice::Genmatch);
            }
            m.extend([MethodChoice::Regression, MethodChoice::Ipw]);
            m
        }
    };
    let mut estimates = Vec::new();
    for &choice in &methods {
        let label = method_label(choice, cfg);
        let boot = cfg.bootstrap_config(&label);
        let workers = cfg.workers();
        match choice {
            MethodChoice::Naive => {
                for coverage in &cfg.analysis.coverages {
                    let e = estimate_naive(&prepared.portfolio, years, coverage, contrast)?;
                    let ci = with_bootstrap(cfg, &label, coverage, e, |e| {
                        bootstrap_ci(e.point, &boot, workers, |rng| {
                            let p = resample_portfolio(&prepared.portfolio, years, rng)?;
                            Ok(naive_means(&p, years, coverage, contrast)?.contrast(contrast)?)
                        })
                    })?;
                    estimates.push(ci);
                }
            }
            MethodChoice::Matched | MethodChoice::Genmatch => {
                let weights = if choice == MethodChoice::Genmatch {
                    Some(ga_weights.clone().ok_or_else(|| {
                        anyhow!("missing artifact {}: run genmatch first", dir.join(WEIGHTS).display())
                    })?)
                } else {
                    None
                };
                let sample = prepared.matcher(cfg)?.run(weights.as_ref())?;
                let pipeline = Pipeline {
                    cfg,
                    prepared: &prepared,
                    weights,
                };
                for coverage in &cfg.analysis.coverages {
                    let mut e = estimate_matched(&sample, &prepared.portfolio, coverage, contrast)?;
                    e.method = label.clone();
                    let e = with_bootstrap(cfg, &label, coverage, e, |e| {
                        bootstrap_ci(e.point, &boot, workers, |rng| match boot.scheme {
                            Scheme::PairResample => {
                                pair_resample(&sample, &prepared.portfolio, coverage, contrast, rng)
                            }
                            Scheme::FullRematch => {
                                let p = resample_portfolio(&prepared.portfolio, years, rng)?;
                                let (scored, s) = pipeline.rematch(&p).map_err(to_core)?;
                                Ok(matched_means(&s, &scored, coverage, contrast)?.contrast(contrast)?)
                            }
                        })
                    })?;
                    estimates.push(e);
                }
            }
            MethodChoice::Regression => {
                let link = link_for(contrast);
                let exclude_zero = contrast == ContrastFunction::Ratio;
                for coverage in &cfg.analysis.coverages {
                    let fit = fit_premium_regression(&prepared.portfolio, years, coverage, link, exclude_zero)?;
                    let e = regression_rate_change(&fit, contrast)?;
                    let e = with_bootstrap(cfg, &label, coverage, e, |e| {
                        bootstrap_ci(e.point, &boot, workers, |rng| {
                            let p = resample_portfolio(&prepared.portfolio, years, rng)?;
                            let fit = fit_premium_regression(&p, years, coverage, link, exclude_zero)?;
                            Ok(regression_rate_change(&fit, contrast)?.point)
                        })
                    })?;
                    estimates.push(e);
                }
            }
            MethodChoice::Ipw => {
                let model = match &prepared.model {
                    Some(m) => m.clone(),
                    None => fit_logistic(&prepared.portfolio, years, logistic_options(cfg))?,
                };
                for coverage in &cfg.analysis.coverages {
                    let e = estimate_ipw(&prepared.portfolio, &model, years, coverage, contrast)?;
                    let e = with_bootstrap(cfg, &label, coverage, e, |e| {
                        bootstrap_ci(e.point, &boot, workers, |rng| {
                            let p = resample_portfolio(&prepared.portfolio, years, rng)?;
                            let m = fit_logistic(&p, years, logistic_options(cfg))?;
                            Ok(ipw_means(&p, &m, years, coverage, contrast)?.contrast(contrast)?)
                        })
                    })?;
                    estimates.push(e);
                }
            }
        }
    }
    let mut w = create(dir, ESTIMATES)?;
    write_estimates_csv(&mut w, &estimates)?;
    w.flush()?;

    if !cfg.analysis.years.is_empty() {
        let chained = chained_estimates(cfg, &methods)?;
        let mut w = create(dir, CHAINED)?;
        write_estimates_csv(&mut w, &chained)?;
        w.flush()?;
    }
    let mut out = String::new();
    for e in &estimates {
        let _ = writeln!(out, "{}", estimate_line(e));
    }
    Ok(out)
}

fn to_core(e: anyhow::Error) -> ratematch::Error {
    match e.downcast::<ratematch::Error>() {
        Ok(core) => core,
        Err(other) => ratematch::Error::Config(other.to_string()),
    }
}

fn with_bootstrap<F>(
    cfg: &RunConfig,
    method: &str,
    coverage: &str,
    estimate: RateChangeEstimate,
    run: F,
) -> Result<RateChangeEstimate>
where
    F: FnOnce(&RateChangeEstimate) -> ratematch::Result<BootstrapResult>,
{
    if !cfg.bootstrap.enabled {
        return Ok(estimate);
    }
    let result = run(&estimate).with_context(|| format!("bootstrap of {method} for `{coverage}`"))?;
    if cfg.bootstrap.dump_replicates {
        let mut w = create(&cfg.output.dir, &format!("replicates_{method}_{coverage}.csv"))?;
        result.write_replicates_csv(&mut w)?;
        w.flush()?;
    }
    Ok(estimate.with_ci(result.ci))
}

/// Consecutive-year estimates anchored on the target year, for the mean-based methods.
fn chained_estimates(cfg: &RunConfig, methods: &[MethodChoice]) -> Result<Vec<RateChangeEstimate>> {
    let loaded = load_portfolio(&cfg.data.path, &cfg.schema)?;
    let mut years: BTreeSet<i32> = cfg.analysis.years.iter().copied().collect();
    years.insert(cfg.analysis.target_year);
    years.insert(cfg.analysis.comparison_year);
    let years: Vec<i32> = years.into_iter().collect();
    let contrast = cfg.analysis.contrast;
    let all = &loaded.portfolio;
    let mut out = Vec::new();
    for &choice in methods {
        let label = method_label(choice, cfg);
        for coverage in &cfg.analysis.coverages {
            let rows = match choice {
                MethodChoice::Naive => {
                    estimate_multi_year(&years, cfg.analysis.target_year, &label, coverage, contrast, |pair| {
                        naive_means(all, pair, coverage, contrast)
                    })?
                }
                MethodChoice::Matched => {
                    estimate_multi_year(&years, cfg.analysis.target_year, &label, coverage, contrast, |pair| {
                        let (scored, _) = with_propensity(cfg, all.restrict_to(pair), pair).map_err(to_core)?;
                        let ctx = metric_context(&scored).map_err(to_core)?;
                        let sample = Matcher::new(&scored, pair, ctx.as_ref(), cfg.match_options())?.run(None)?;
                        matched_means(&sample, &scored, coverage, contrast)
                    })?
                }
                MethodChoice::Ipw => {
                    estimate_multi_year(&years, cfg.analysis.target_year, &label, coverage, contrast, |pair| {
                        let p = all.restrict_to(pair);
                        let model = fit_logistic(&p, pair, logistic_options(cfg))?;
                        ipw_means(&p, &model, pair, coverage, contrast)
                    })?
                }
                MethodChoice::Genmatch | MethodChoice::Regression => continue,
            };
            out.extend(rows);
        }
    }
    Ok(out)
}

fn estimate_line(e: &RateChangeEstimate) -> String {
    let unit = if e.contrast == ContrastFunction::Ratio { "%" } else { "" };
    let ci = match e.ci {
        Some(ci) => format!(" [{:.2}, {:.2}]", ci.low, ci.high),
        None => String::new(),
    };
    format!(
        "{} {} {}->{}: {:.2}{unit}{ci}",
        e.method, e.coverage, e.from_year, e.to_year, e.point
    )
}

/// One parsed row of a balance CSV.
struct BalanceRow {
    covariate: String,
    test: String,
    p_before: Option<f64>,
    p_after: Option<f64>,
}

fn read_balance(dir: &Path, name: &str) -> Result<Vec<BalanceRow>> {
    let mut csv = csv::Reader::from_reader(open(dir, name)?);
    let parse = |s: Option<&str>| s.and_then(|v| v.parse::<f64>().ok());
    let mut rows = Vec::new();
    for record in csv.records() {
        let r = record.with_context(|| format!("malformed {name}"))?;
        rows.push(BalanceRow {
            covariate: r.get(0).unwrap_or_default().to_string(),
            test: r.get(1).unwrap_or_default().to_string(),
            p_before: parse(r.get(3)),
            p_after: parse(r.get(4)),
        });
    }
    Ok(rows)
}

struct EstimateRow {
    method: String,
    coverage: String,
    point: f64,
    ci: Option<(f64, f64)>,
    n_matched: String,
    n_dropped: String,
}

fn read_estimates(dir: &Path) -> Result<Vec<EstimateRow>> {
    let mut csv = csv::Reader::from_reader(open(dir, ESTIMATES)?);
    let mut rows = Vec::new();
    for record in csv.records() {
        let r = record.context("malformed estimates.csv")?;
        let num = |i: usize| r.get(i).and_then(|v| v.parse::<f64>().ok());
        rows.push(EstimateRow {
            method: r.get(0).unwrap_or_default().to_string(),
            coverage: r.get(1).unwrap_or_default().to_string(),
            point: num(2).ok_or_else(|| anyhow!("malformed estimates.csv: bad point"))?,
            ci: num(3).zip(num(4)),
            n_matched: r.get(5).unwrap_or_default().to_string(),
            n_dropped: r.get(6).unwrap_or_default().to_string(),
        });
    }
    Ok(rows)
}

fn read_sample(prepared: &Prepared, cfg: &RunConfig, pairs: &str, drops: &str) -> Result<MatchedSample> {
    Ok(MatchedSample::read_csv(
        &prepared.portfolio,
        prepared.years,
        open(&cfg.output.dir, pairs)?,
        open(&cfg.output.dir, drops)?,
        cfg.match_options(),
    )?)
}

fn numeric_side(portfolio: &Portfolio, rows: &[(usize, f64)], j: usize) -> Weighted {
    Weighted {
        values: rows
            .iter()
            .map(|(i, _)| portfolio.policies[*i].covariates[j].as_f64().unwrap_or(f64::NAN))
            .collect(),
        weights: rows.iter().map(|(_, w)| *w).collect(),
    }
}

fn sample_sides(sample: &MatchedSample) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let targets = sample.targets().into_iter().map(|t| (t, 1.0)).collect();
    let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
    for pair in &sample.pairs {
        *merged.entry(pair.comparison).or_default() += pair.weight;
    }
    (targets, merged.into_iter().collect())
}

fn write_qq(cfg: &RunConfig, prepared: &Prepared, samples: &[(&str, &MatchedSample)]) -> Result<()> {
    let portfolio = &prepared.portfolio;
    let unit = |y| portfolio.indices_in_year(y).into_iter().map(|i| (i, 1.0)).collect::<Vec<_>>();
    let mut stages = vec![("before".to_string(), unit(prepared.years.target), unit(prepared.years.comparison))];
    for (name, sample) in samples {
        let (t, c) = sample_sides(sample);
        stages.push((name.to_string(), t, c));
    }
    let mut csv = csv::Writer::from_writer(create(&cfg.output.dir, QQ)?);
    csv.write_record(["covariate", "stage", "k", "target_quantile", "comparison_quantile"])?;
    for (j, spec) in portfolio.specs.iter().enumerate() {
        if !spec.confounder || spec.kind == CovariateKind::Categorical {
            continue;
        }
        for (stage, t, c) in &stages {
            let pairs = qq_pairs(&numeric_side(portfolio, t, j), &numeric_side(portfolio, c, j), cfg.output.qq_points)?;
            for (k, (a, b)) in pairs.into_iter().enumerate() {
                csv.write_record([spec.name.clone(), stage.clone(), (k + 1).to_string(), a.to_string(), b.to_string()])?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let dir = &cfg.output.dir;
    if !dir.is_dir() {
        bail!("missing artifact {}: output directory does not exist", dir.display());
    }
    let classic = read_balance(dir, BALANCE)?;
    let estimates = read_estimates(dir)?;
    let has_ga = dir.join(GA_BALANCE).exists();
    let ga = if has_ga { Some(read_balance(dir, GA_BALANCE)?) } else { None };

    let prepared = prepare(cfg)?;
    let sample = read_sample(&prepared, cfg, MATCHES, DROPS)?;
    let ga_sample = if has_ga {
        Some(read_sample(&prepared, cfg, GA_MATCHES, GA_DROPS)?)
    } else {
        None
    };
    let mut qq_samples = vec![(cfg.matching.method.name(), &sample)];
    if let Some(s) = &ga_sample {
        qq_samples.push(("genmatch", s));
    }
    write_qq(cfg, &prepared, &qq_samples)?;

    let mut out = String::new();
    let years = prepared.years;
    let _ = writeln!(
        out,
        "Rate change holding the {} mix fixed, compared with {}",
        years.target, years.comparison
    );
    let _ = writeln!(
        out,
        "Policies: {} in {}, {} in {}\n",
        prepared.portfolio.count_in_year(years.target),
        years.target,
        prepared.portfolio.count_in_year(years.comparison),
        years.comparison
    );

    // Balance table.
    let method = cfg.matching.method.name();
    let _ = writeln!(out, "Balance p-values (%)");
    let _ = write!(out, "{:<24}{:>6}{:>12}{:>12}", "covariate", "test", "before", method);
    if has_ga {
        let _ = write!(out, "{:>12}", "genmatch");
    }
    out.push('\n');
    let pct = |p: Option<f64>| p.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    let mut min = [1.0f64; 3];
    for row in classic.iter().filter(|r| r.test != "smd") {
        let _ = write!(
            out,
            "{:<24}{:>6}{:>12}{:>12}",
            row.covariate,
            row.test,
            pct(row.p_before),
            pct(row.p_after)
        );
        min[0] = min[0].min(row.p_before.unwrap_or(1.0));
        min[1] = min[1].min(row.p_after.unwrap_or(1.0));
        if let Some(ga) = &ga {
            let p = ga.iter().find(|r| r.covariate == row.covariate && r.test == row.test).and_then(|r| r.p_after);
            min[2] = min[2].min(p.unwrap_or(1.0));
            let _ = write!(out, "{:>12}", pct(p));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<30}{:>12}{:>12}", "min p", pct(Some(min[0])), pct(Some(min[1])));
    if has_ga {
        let _ = write!(out, "{:>12}", pct(Some(min[2])));
    }
    out.push('\n');
    let _ = write!(
        out,
        "{:<30}{:>12}{:>12}",
        "matched number",
        prepared.portfolio.count_in_year(years.target),
        sample.n_matched()
    );
    if let Some(s) = &ga_sample {
        let _ = write!(out, "{:>12}", s.n_matched());
    }
    out.push('\n');
    let _ = write!(out, "{:<30}{:>12}{:>11.1}%", "drop rate", "-", 100.0 * drop_rate(&sample));
    if let Some(s) = &ga_sample {
        let _ = write!(out, "{:>11.1}%", 100.0 * drop_rate(s));
    }
    out.push_str("\n\n");

    // Estimates table.
    let level = (100.0 * cfg.bootstrap.ci_level).round();
    let unit = if cfg.analysis.contrast == ContrastFunction::Ratio { " (%)" } else { "" };
    let _ = writeln!(out, "Rate change estimates{unit} with {level}% intervals");
    let _ = writeln!(
        out,
        "{:<20}{:<16}{:>10}{:>22}{:>10}{:>10}",
        "coverage", "method", "estimate", "interval", "matched", "dropped"
    );
    let mut coverages: Vec<&str> = Vec::new();
    for e in &estimates {
        if !coverages.contains(&e.coverage.as_str()) {
            coverages.push(&e.coverage);
        }
    }
    for coverage in coverages {
        for e in estimates.iter().filter(|e| e.coverage == coverage) {
            let interval = e
                .ci
                .map_or("-".to_string(), |(l, h)| format!("({:.2}, {:.2})", l, h));
            let _ = writeln!(
                out,
                "{:<20}{:<16}{:>10.2}{:>22}{:>10}{:>10}",
                e.coverage, e.method, e.point, interval, e.n_matched, e.n_dropped
            );
        }
    }
    let mut w = create(dir, SUMMARY)?;
    w.write_all(out.as_bytes())?;
    w.flush()?;
    Ok(out)
}

/// Output directory of a loaded config, for messages.
pub fn output_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output.dir.clone()
}
