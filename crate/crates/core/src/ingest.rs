//! CSV ingestion: schema-driven parsing, per-row validation and seeded subsetting.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    CovariateKind, CovariateSpec, CovariateValue, MatchMode, OrdinalMapping, Policy, Portfolio,
    Year, TOTAL,
};
use crate::seed;

/// Column layout of a portfolio extract and the role of each covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub id_column: String,
    pub year_column: String,
    /// coverage name → column; must contain `total`.
    pub premium_columns: BTreeMap<String, String>,
    pub covariates: Vec<CovariateColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateColumn {
    pub name: String,
    /// Source column; defaults to `name`.
    #[serde(default)]
    pub column: Option<String>,
    pub kind: CovariateKind,
    #[serde(rename = "match")]
    pub match_mode: MatchMode,
    #[serde(default = "yes")]
    pub confounder: bool,
    #[serde(default)]
    pub caliper: Option<f64>,
    /// Ordered ordinal labels; level indices count up from `base`.
    #[serde(default)]
    pub levels: Option<Vec<String>>,
    #[serde(default)]
    pub base: Option<u32>,
    /// Alternative to `levels`: strip this prefix and parse the rest as the level.
    #[serde(default)]
    pub strip_prefix: Option<String>,
    #[serde(default)]
    pub reference: Option<String>,
}

fn yes() -> bool {
    true
}

impl CovariateColumn {
    pub fn column(&self) -> &str {
        self.column.as_deref().unwrap_or(&self.name)
    }

    pub fn to_spec(&self) -> Result<CovariateSpec> {
        let ordinal = match (&self.levels, &self.strip_prefix) {
            (Some(_), Some(_)) => {
                return Err(Error::Schema(format!(
                    "`{}`: give either levels or strip_prefix, not both",
                    self.name
                )))
            }
            (Some(levels), None) => {
                let base = self.base.unwrap_or(0);
                Some(OrdinalMapping::Levels(
                    levels
                        .iter()
                        .enumerate()
                        .map(|(i, l)| (l.clone(), base + i as u32))
                        .collect(),
                ))
            }
            (None, Some(prefix)) => Some(OrdinalMapping::StripPrefix(prefix.clone())),
            (None, None) => None,
        };
        if ordinal.is_some() && self.kind != CovariateKind::Ordinal {
            return Err(Error::Schema(format!(
                "`{}`: level mappings only apply to ordinal covariates",
                self.name
            )));
        }
        let spec = CovariateSpec {
            name: self.name.clone(),
            kind: self.kind,
            match_mode: self.match_mode,
            confounder: self.confounder,
            caliper: self.caliper,
            ordinal,
            reference: self.reference.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl SchemaConfig {
    pub fn specs(&self) -> Result<Vec<CovariateSpec>> {
        self.covariates.iter().map(CovariateColumn::to_spec).collect()
    }

    fn validate(&self) -> Result<()> {
        if !self.premium_columns.contains_key(TOTAL) {
            return Err(Error::Schema("premium_columns must include `total`".into()));
        }
        Ok(())
    }
}

/// Map an ordinal label to its level index.
pub fn encode_ordinal(label: &str, mapping: &OrdinalMapping) -> Result<u32> {
    let unknown = || Error::UnknownLabel {
        label: label.to_string(),
    };
    match mapping {
        OrdinalMapping::Levels(levels) => levels
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, level)| *level)
            .ok_or_else(unknown),
        OrdinalMapping::StripPrefix(prefix) => label
            .strip_prefix(prefix.as_str())
            .and_then(|rest| rest.trim().parse::<u32>().ok())
            .ok_or_else(unknown),
    }
}

/// A data row that failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reject {
    /// 1-based data row number (header excluded).
    pub row: usize,
    pub record: Vec<String>,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedPortfolio {
    pub portfolio: Portfolio,
    pub header: Vec<String>,
    pub rejects: Vec<Reject>,
}

pub fn load_portfolio(path: impl AsRef<Path>, schema: &SchemaConfig) -> Result<LoadedPortfolio> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_portfolio(file, schema)
}

struct Columns {
    id: usize,
    year: usize,
    premiums: Vec<(String, usize)>,
    covariates: Vec<usize>,
}

fn locate(header: &[String], schema: &SchemaConfig) -> Result<Columns> {
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    Ok(Columns {
        id: find(&schema.id_column)?,
        year: find(&schema.year_column)?,
        premiums: schema
            .premium_columns
            .iter()
            .map(|(coverage, column)| Ok((coverage.clone(), find(column)?)))
            .collect::<Result<_>>()?,
        covariates: schema
            .covariates
            .iter()
            .map(|c| find(c.column()))
            .collect::<Result<_>>()?,
    })
}

pub fn read_portfolio<R: Read>(reader: R, schema: &SchemaConfig) -> Result<LoadedPortfolio> {
    schema.validate()?;
    let specs = schema.specs()?;
    let mut csv = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = csv.headers()?.iter().map(str::to_string).collect();
    let columns = locate(&header, schema)?;

    let mut policies = Vec::new();
    let mut rejects = Vec::new();
    let mut seen: BTreeSet<(Year, String)> = BTreeSet::new();
    let mut total = 0;
    for (i, record) in csv.records().enumerate() {
        let record = record?;
        total += 1;
        let fields: Vec<String> = record.iter().map(str::to_string).collect();
        let parsed = if fields.len() != header.len() {
            Err(format!(
                "expected {} fields, found {}",
                header.len(),
                fields.len()
            ))
        } else {
            parse_row(&fields, &columns, &specs)
        };
        match parsed {
            Ok(policy) if !seen.insert((policy.year, policy.id.clone())) => rejects.push(Reject {
                row: i + 1,
                record: fields,
                reason: format!("duplicate id `{}` in year {}", policy.id, policy.year),
            }),
            Ok(policy) => policies.push(policy),
            Err(reason) => rejects.push(Reject {
                row: i + 1,
                record: fields,
                reason,
            }),
        }
    }
    if total == 0 {
        return Err(Error::NoPolicies);
    }
    if 2 * rejects.len() > total {
        return Err(Error::TooManyRejects {
            rejected: rejects.len(),
            total,
        });
    }
    Ok(LoadedPortfolio {
        portfolio: Portfolio::new(specs, policies)?,
        header,
        rejects,
    })
}

fn parse_row(
    fields: &[String],
    columns: &Columns,
    specs: &[CovariateSpec],
) -> std::result::Result<Policy, String> {
    let id = fields[columns.id].trim();
    if id.is_empty() {
        return Err("missing id".into());
    }
    let year: Year = fields[columns.year]
        .trim()
        .parse()
        .map_err(|_| format!("unparseable year `{}`", fields[columns.year]))?;

    let mut premiums = BTreeMap::new();
    for (coverage, col) in &columns.premiums {
        let raw = fields[*col].trim();
        let amount: f64 = raw
            .parse()
            .ok()
            .filter(|x: &f64| x.is_finite())
            .ok_or_else(|| format!("unparseable numeric `{raw}` in premium `{coverage}`"))?;
        if amount < 0.0 {
            return Err("negative premium".into());
        }
        premiums.insert(coverage.clone(), amount);
    }

    let mut covariates = Vec::with_capacity(specs.len());
    for (spec, col) in specs.iter().zip(&columns.covariates) {
        let raw = fields[*col].trim();
        if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
            return Err(format!("missing value for `{}`", spec.name));
        }
        let value = match spec.kind {
            CovariateKind::Numeric => raw
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .map(CovariateValue::Numeric)
                .ok_or_else(|| format!("unparseable numeric `{raw}` in `{}`", spec.name))?,
            CovariateKind::Ordinal => {
                let mapping = spec.ordinal.as_ref().expect("validated ordinal spec");
                encode_ordinal(raw, mapping)
                    .map(CovariateValue::Ordinal)
                    .map_err(|_| format!("unknown ordinal label `{raw}` in `{}`", spec.name))?
            }
            CovariateKind::Categorical => CovariateValue::Categorical(raw.to_string()),
        };
        covariates.push(value);
    }
    Policy::new(id, year, premiums, covariates).map_err(|e| e.to_string())
}

/// Write rejected rows with the original header plus a trailing `reason` column.
pub fn write_rejects<W: Write>(writer: W, header: &[String], rejects: &[Reject]) -> Result<()> {
    let mut csv = csv::WriterBuilder::new().flexible(true).from_writer(writer);
    let mut head: Vec<&str> = header.iter().map(String::as_str).collect();
    head.push("reason");
    csv.write_record(&head)?;
    for reject in rejects {
        let mut row: Vec<&str> = reject.record.iter().map(String::as_str).collect();
        row.push(&reject.reason);
        csv.write_record(&row)?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Write a portfolio in the layout `schema` describes, so it can be read back.
pub fn write_portfolio<W: Write>(writer: W, portfolio: &Portfolio, schema: &SchemaConfig) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let mut header = vec![schema.id_column.clone(), schema.year_column.clone()];
    header.extend(schema.premium_columns.values().cloned());
    header.extend(schema.covariates.iter().map(|c| c.column().to_string()));
    csv.write_record(&header)?;
    for p in &portfolio.policies {
        let mut row = vec![p.id.clone(), p.year.to_string()];
        for coverage in schema.premium_columns.keys() {
            row.push(p.premium(coverage)?.to_string());
        }
        for (spec, value) in portfolio.specs.iter().zip(&p.covariates) {
            row.push(match (value, &spec.ordinal) {
                (CovariateValue::Ordinal(level), Some(mapping)) => {
                    mapping.label(*level).unwrap_or_else(|| level.to_string())
                }
                _ => value.to_string(),
            });
        }
        csv.write_record(&row)?;
    }
    csv.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Uniform sample of `n` policies without replacement, keeping the original order.
pub fn subset(portfolio: &Portfolio, n: usize, seed: u64) -> Result<Portfolio> {
    let size = portfolio.len();
    if n > size {
        return Err(Error::SubsetTooLarge {
            requested: n,
            available: size,
        });
    }
    let mut rng = seed::rng(seed, &[seed::tag("subset")]);
    let mut picked = index::sample(&mut rng, size, n).into_vec();
    picked.sort_unstable();
    Ok(Portfolio {
        specs: portfolio.specs.clone(),
        policies: picked.into_iter().map(|i| portfolio.policies[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn schema() -> SchemaConfig {
        SchemaConfig {
            id_column: "policy".into(),
            year_column: "year".into(),
            premium_columns: BTreeMap::from([
                ("total".into(), "premium".into()),
                ("legal".into(), "legal".into()),
            ]),
            covariates: vec![
                CovariateColumn {
                    name: "deductible".into(),
                    column: None,
                    kind: CovariateKind::Numeric,
                    match_mode: MatchMode::Exact,
                    confounder: true,
                    caliper: None,
                    levels: None,
                    base: None,
                    strip_prefix: None,
                    reference: None,
                },
                CovariateColumn {
                    name: "power".into(),
                    column: Some("VehPower".into()),
                    kind: CovariateKind::Ordinal,
                    match_mode: MatchMode::Approximate,
                    confounder: true,
                    caliper: None,
                    levels: None,
                    base: None,
                    strip_prefix: Some("P".into()),
                    reference: None,
                },
            ],
        }
    }

    const DATA: &str = "policy,year,premium,legal,deductible,VehPower
a,0,100,10,1,P4
b,0,120,12,10,P5
a,1,105,11,1,P4
c,1,-5,1,2,P6
d,1,90,9,5,PX
e,1,abc,9,5,P7
";

    #[test]
    fn rows_are_parsed_or_rejected_with_reasons() {
        let loaded = read_portfolio(DATA.as_bytes(), &schema()).unwrap();
        assert_eq!(loaded.portfolio.len(), 3);
        let reasons: Vec<&str> = loaded.rejects.iter().map(|r| r.reason.as_str()).collect();
        assert_eq!(reasons[0], "negative premium");
        assert!(reasons[1].contains("unknown ordinal label `PX`"));
        assert!(reasons[2].contains("unparseable numeric `abc`"));
        let p = &loaded.portfolio.policies[1];
        assert_eq!(p.covariates[1], CovariateValue::Ordinal(5));
        assert_eq!(p.premium("legal").unwrap(), 12.0);
    }

    #[test]
    fn rejects_file_has_reason_column() {
        let loaded = read_portfolio(DATA.as_bytes(), &schema()).unwrap();
        let mut out = Vec::new();
        write_rejects(&mut out, &loaded.header, &loaded.rejects).unwrap();
        let text = String::from_utf8(out).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.ends_with(",reason"));
        assert!(text.contains("c,1,-5,1,2,P6,negative premium"));
    }

    #[test]
    fn empty_and_mostly_bad_files_are_fatal() {
        let header_only = "policy,year,premium,legal,deductible,VehPower\n";
        assert!(matches!(
            read_portfolio(header_only.as_bytes(), &schema()),
            Err(Error::NoPolicies)
        ));
        let bad = "policy,year,premium,legal,deductible,VehPower\na,0,-1,1,1,P1\nb,0,1,1,1,P1\nc,0,1,1,1,Q\n";
        assert!(matches!(
            read_portfolio(bad.as_bytes(), &schema()),
            Err(Error::TooManyRejects { rejected: 2, total: 3 })
        ));
    }

    #[test]
    fn missing_column_is_fatal() {
        let data = "policy,year,premium,deductible,VehPower\na,0,1,1,P1\n";
        match read_portfolio(data.as_bytes(), &schema()) {
            Err(Error::MissingColumn(c)) => assert_eq!(c, "legal"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn short_rows_and_duplicates_are_rejected() {
        let data = "policy,year,premium,legal,deductible,VehPower
a,0,1,1,1,P1
a,0,1,1,1,P1
b,0,1,1
c,0,1,1,1,P1
d,0,1,1,,P1
e,0,1,1,1,P1
f,0,1,1,1,P1
";
        let loaded = read_portfolio(data.as_bytes(), &schema()).unwrap();
        assert_eq!(loaded.portfolio.len(), 4);
        assert!(loaded.rejects[0].reason.starts_with("duplicate id"));
        assert!(loaded.rejects[1].reason.starts_with("expected 6 fields"));
        assert!(loaded.rejects[2].reason.contains("missing value"));
    }

    #[test]
    fn ordinal_encoding() {
        let strip = OrdinalMapping::StripPrefix("P".into());
        assert_eq!(encode_ordinal("P4", &strip).unwrap(), 4);
        assert!(encode_ordinal("PX", &strip).is_err());
        let levels = OrdinalMapping::ordered(&["low", "mid", "high"]);
        assert_eq!(encode_ordinal("low", &levels).unwrap(), 0);
        assert_eq!(encode_ordinal("high", &levels).unwrap(), 2);
        assert!(matches!(
            encode_ordinal("huge", &levels),
            Err(Error::UnknownLabel { .. })
        ));
    }

    #[test]
    fn subset_behaviour() {
        let data: String = std::iter::once("policy,year,premium,legal,deductible,VehPower\n".to_string())
            .chain((0..10).map(|i| format!("p{i},{},1,1,1,P1\n", i % 2)))
            .collect();
        let p = read_portfolio(data.as_bytes(), &schema()).unwrap().portfolio;
        assert_eq!(subset(&p, 10, 3).unwrap(), p);
        assert!(subset(&p, 0, 3).unwrap().is_empty());
        let ids = |q: &Portfolio| q.policies.iter().map(|x| x.id.clone()).collect::<Vec<_>>();
        let a = subset(&p, 5, 42).unwrap();
        let b = subset(&p, 5, 42).unwrap();
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(a.len(), 5);
        assert!(matches!(subset(&p, 11, 0), Err(Error::SubsetTooLarge { .. })));
    }
}
