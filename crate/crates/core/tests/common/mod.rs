#![allow(dead_code)]

pub mod oracles;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use ratematch::{CovariateSpec, CovariateValue, MatchMode, Policy, Portfolio, YearPair, TOTAL};

pub const EARLIER: i32 = 0;
pub const LATER: i32 = 1;

pub fn later_target() -> YearPair {
    YearPair::new(LATER, EARLIER)
}

/// The twelve-policy deductible example; premiums grow 5% for renewed policies.
pub fn deductible_example() -> Portfolio {
    let earlier = [
        ("a", 1.0),
        ("b", 10.0),
        ("c", 10.0),
        ("d", 2.0),
        ("e", 5.0),
        ("f", 2.0),
        ("g", 10.0),
        ("h", 2.0),
        ("i", 1.0),
        ("j", 2.0),
    ];
    let later = [
        ("a", 1.0),
        ("b", 10.0),
        ("c", 10.0),
        ("d", 5.0),
        ("e", 5.0),
        ("g", 10.0),
        ("h", 2.0),
        ("i", 1.0),
        ("k", 2.0),
        ("l", 10.0),
    ];
    let premium = |d: f64| 1000.0 / d.sqrt();
    let mut policies = Vec::new();
    for (id, d) in earlier {
        policies.push(Policy::with_total(id, EARLIER, premium(d), vec![CovariateValue::Numeric(d)]).unwrap());
    }
    for (id, d) in later {
        policies.push(Policy::with_total(id, LATER, 1.05 * premium(d), vec![CovariateValue::Numeric(d)]).unwrap());
    }
    Portfolio::new(vec![CovariateSpec::numeric("deductible", MatchMode::Exact)], policies).unwrap()
}

/// Shape of a synthetic two-year portfolio with one confounder `x`, one noise
/// covariate `z` and an exactly matched `region`.
#[derive(Debug, Clone, Copy)]
pub struct Synthetic {
    pub n: usize,
    /// Share of policies written in the later (target) year.
    pub later_share: f64,
    /// Mean of `x` in the later year; 0 in the earlier year.
    pub shift: f64,
    /// Log-premium slope in `x`.
    pub beta_x: f64,
    pub noise_sd: f64,
    /// Multiplicative rate change, e.g. 1.05.
    pub delta: f64,
    pub region: bool,
}

impl Default for Synthetic {
    fn default() -> Self {
        Synthetic {
            n: 5000,
            later_share: 0.5,
            shift: 1.0,
            beta_x: 0.05,
            noise_sd: 0.05,
            delta: 1.05,
            region: true,
        }
    }
}

impl Synthetic {
    pub fn specs(&self) -> Vec<CovariateSpec> {
        let mut specs = vec![
            CovariateSpec::numeric("x", MatchMode::Approximate),
            CovariateSpec::numeric("z", MatchMode::Approximate),
        ];
        if self.region {
            specs.push(CovariateSpec::categorical("region", MatchMode::Exact));
        }
        specs
    }

    pub fn generate(&self, seed: u64) -> Portfolio {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut policies = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let later = rng.gen_bool(self.later_share);
            let year = if later { LATER } else { EARLIER };
            let x = unit.sample(&mut rng) + if later { self.shift } else { 0.0 };
            let z = unit.sample(&mut rng);
            let mut covariates = vec![CovariateValue::Numeric(x), CovariateValue::Numeric(z)];
            let mut log_premium = 6.0 + self.beta_x * x + self.noise_sd * unit.sample(&mut rng);
            if self.region {
                let north = rng.gen_bool(if later { 0.5 } else { 0.3 });
                covariates.push(CovariateValue::Categorical(if north { "north" } else { "south" }.into()));
                if north {
                    log_premium += 0.03;
                }
            }
            if later {
                log_premium += self.delta.ln();
            }
            let total = log_premium.exp();
            let premiums = BTreeMap::from([(TOTAL.to_string(), total), ("liability".to_string(), 0.4 * total)]);
            policies.push(Policy::new(format!("p{i}"), year, premiums, covariates).unwrap());
        }
        Portfolio::new(self.specs(), policies).unwrap()
    }
}

/// Noiseless portfolio following an additive (or log-additive) main-effects model.
pub fn noiseless(additive: bool, delta: f64) -> Portfolio {
    let specs = vec![
        CovariateSpec::categorical("class", MatchMode::Exact),
        CovariateSpec::numeric("size", MatchMode::Approximate),
    ];
    let base = [("A", 0.0), ("B", 40.0), ("C", -15.0)];
    let mut policies = Vec::new();
    let mut k = 0;
    for year in [EARLIER, LATER] {
        for (class, effect) in base {
            for size in [1.0, 2.0, 3.5, 5.0] {
                // Uneven mix across years.
                if year == LATER && class == "C" && size > 2.0 {
                    continue;
                }
                let t = if year == LATER { 1.0 } else { 0.0 };
                let premium = if additive {
                    500.0 + effect + 12.0 * size + delta * t
                } else {
                    (6.0 + effect / 100.0 + 0.1 * size).exp() * delta.powf(t)
                };
                policies.push(
                    Policy::with_total(
                        format!("n{k}"),
                        year,
                        premium,
                        vec![CovariateValue::Categorical(class.into()), CovariateValue::Numeric(size)],
                    )
                    .unwrap(),
                );
                k += 1;
            }
        }
    }
    Portfolio::new(specs, policies).unwrap()
}
