use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SCHEMA: &str = r#"
[schema]
id_column = "policy"
year_column = "year"
premium_columns = { total = "premium" }
"#;

fn run(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratematch"))
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("RATEMATCH_WORKERS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], config: &Path) -> String {
    let out = run(args, config);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str], config: &Path) -> String {
    let out = run(args, config);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "one-line error expected: {stderr}");
    assert!(stderr.starts_with("error: "), "{stderr}");
    stderr
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(csv: &str, config: &str) -> Fixture {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("policies.csv"), csv).unwrap();
        fs::write(dir.path().join("run.toml"), config).unwrap();
        Fixture { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.toml")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn read(&self, name: &str) -> String {
        fs::read_to_string(self.out().join(name)).unwrap_or_else(|_| panic!("{name} missing"))
    }
}

fn deductible_csv() -> String {
    let earlier = [("a", 1), ("b", 10), ("c", 10), ("d", 2), ("e", 5), ("f", 2), ("g", 10), ("h", 2), ("i", 1), ("j", 2)];
    let later = [("a", 1), ("b", 10), ("c", 10), ("d", 5), ("e", 5), ("g", 10), ("h", 2), ("i", 1), ("k", 2), ("l", 10)];
    let mut s = String::from("policy,year,premium,deductible\n");
    for (year, rows, factor) in [(2020, &earlier, 1.0), (2021, &later, 1.05)] {
        for (id, d) in rows.iter() {
            s.push_str(&format!("{id},{year},{},{d}\n", factor * 1000.0 / (*d as f64).sqrt()));
        }
    }
    s
}

fn deductible_config(extra: &str) -> String {
    format!(
        r#"seed = 3
[data]
path = "policies.csv"
{SCHEMA}
[[schema.covariates]]
name = "deductible"
kind = "numeric"
match = "exact"

[analysis]
target_year = 2021
comparison_year = 2020

[match]
replace = true
{extra}"#
    )
}

/// Two years with a confounder `x`, a noise covariate `z` and a region; prices rise 5%.
fn synthetic_csv(n: usize) -> String {
    let mut state = 17u64;
    let mut uniform = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    };
    let mut s = String::from("policy,year,premium,x,z,region\n");
    for i in 0..n {
        let later = i % 2 == 1;
        let x = 10.0 * uniform() + if later { 1.5 } else { 0.0 };
        let z = uniform();
        let region = if uniform() < 0.5 { "north" } else { "south" };
        let premium = (6.0 + 0.05 * x + if later { 0.05f64.ln_1p() } else { 0.0 } + 0.05 * (uniform() - 0.5)).exp();
        s.push_str(&format!("p{i},{},{premium:.4},{x:.4},{z:.4},{region}\n", if later { 2021 } else { 2020 }));
    }
    s
}

fn synthetic_config(extra: &str) -> String {
    format!(
        r#"seed = 11
[data]
path = "policies.csv"
{SCHEMA}
[[schema.covariates]]
name = "x"
kind = "numeric"
match = "approximate"

[[schema.covariates]]
name = "z"
kind = "numeric"
match = "approximate"

[[schema.covariates]]
name = "region"
kind = "categorical"
match = "exact"

[analysis]
target_year = 2021
comparison_year = 2020

[match]
replace = true

[genmatch]
pop_size = 8
max_generations = 3
wait_generations = 2

[bootstrap]
n_replicates = 100
{extra}"#
    )
}

#[test]
fn deductible_example_matches_within_tie_sets() {
    let f = Fixture::new(&deductible_csv(), &deductible_config(""));
    let stdout = ok(&["match"], &f.config());
    assert!(stdout.contains("dropped 0"), "{stdout}");
    let matches = f.read("matches.csv");
    let partner = |target: &str| -> String {
        matches
            .lines()
            .find(|l| l.starts_with(&format!("{target},")))
            .unwrap()
            .split(',')
            .nth(1)
            .unwrap()
            .to_string()
    };
    assert!(["b", "c", "g"].contains(&partner("l").as_str()));
    assert!(["d", "f", "h", "j"].contains(&partner("k").as_str()));
    assert_eq!(partner("d"), "e");
    assert_eq!(matches.lines().count(), 11);
    assert!(f.read("balance.csv").starts_with("covariate,test,statistic,p_before,p_after"));
}

#[test]
fn keep_all_ties_weight_thirds() {
    let f = Fixture::new(&deductible_csv(), &deductible_config("ties = \"keep_all\"\n"));
    ok(&["match"], &f.config());
    let rows: Vec<String> = f.read("matches.csv").lines().filter(|l| l.starts_with("l,")).map(String::from).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some(&(1.0f64 / 3.0).to_string())));
}

#[test]
fn ingest_writes_rejects() {
    let csv = deductible_csv() + "z,2021,-5,2\ny,2021,abc,2\n";
    let f = Fixture::new(&csv, &deductible_config(""));
    let stdout = ok(&["ingest"], &f.config());
    assert!(stdout.contains("ingested 20 policies, rejected 2 rows"), "{stdout}");
    assert_eq!(f.read("rejects.csv").lines().count(), 3);
    assert_eq!(f.read("portfolio.csv").lines().count(), 21);
}

#[test]
fn missing_data_file_names_the_path() {
    let f = Fixture::new("", &deductible_config("").replace("policies.csv", "absent.csv"));
    let stderr = fail(&["match"], &f.config());
    assert!(stderr.contains("absent.csv"), "{stderr}");
    assert!(stderr.starts_with("error: io: "), "{stderr}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let f = Fixture::new(&deductible_csv(), &deductible_config("colour = 1\n"));
    let stderr = fail(&["match"], &f.config());
    assert!(stderr.contains("colour"), "{stderr}");
}

#[test]
fn report_without_artifacts_errors() {
    let f = Fixture::new(&deductible_csv(), &deductible_config(""));
    let stderr = fail(&["report"], &f.config());
    assert!(stderr.contains("out"), "{stderr}");
    fs::create_dir_all(f.out()).unwrap();
    let stderr = fail(&["report"], &f.config());
    assert!(stderr.contains("balance.csv"), "{stderr}");
}

#[test]
fn identical_premiums_give_zero_change() {
    let mut csv = String::from("policy,year,premium,deductible\n");
    for i in 0..40 {
        csv.push_str(&format!("p{i},{},500,{}\n", 2020 + i % 2, 1 + i % 3));
    }
    let f = Fixture::new(
        &csv,
        &deductible_config("[estimate]\nmethods = [\"naive\", \"matched\"]\n[bootstrap]\nn_replicates = 100\n"),
    );
    ok(&["estimate"], &f.config());
    let estimates = f.read("estimates.csv");
    for row in estimates.lines().skip(1) {
        let cols: Vec<f64> = row.split(',').skip(2).take(3).map(|v| v.parse().unwrap()).collect();
        assert_eq!(cols, vec![0.0, 0.0, 0.0], "{row}");
    }
}

#[test]
fn zero_comparison_premiums_fail_cleanly() {
    let mut csv = String::from("policy,year,premium,deductible\n");
    for i in 0..20 {
        let year = 2020 + i % 2;
        csv.push_str(&format!("p{i},{year},{},1\n", if year == 2020 { 0 } else { 100 }));
    }
    let config = deductible_config("[estimate]\nmethods = [\"naive\"]\n[bootstrap]\nenabled = false\n")
        .replace("[analysis]", "[analysis]\ncontrast = \"difference\"");
    let f = Fixture::new(&csv, &config);
    ok(&["estimate"], &f.config());
    let f = Fixture::new(&csv, &deductible_config("[estimate]\nmethods = [\"naive\"]\n[bootstrap]\nenabled = false\n"));
    let stderr = fail(&["estimate"], &f.config());
    assert!(stderr.starts_with("error: estimate: "), "{stderr}");
}

fn pipeline(f: &Fixture, extra: &[&str]) {
    for cmd in ["match", "genmatch", "estimate", "report"] {
        let mut args = vec![cmd];
        args.extend_from_slice(extra);
        ok(&args, &f.config());
    }
}

fn artifacts(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn same_seed_reproduces_every_artifact() {
    let f = Fixture::new(&synthetic_csv(400), &synthetic_config(""));
    pipeline(&f, &[]);
    let first = artifacts(&f.out());
    for name in ["weights.csv", "ga_history.csv", "estimates.csv", "summary.txt", "qq.csv", "balance_genmatch.csv"] {
        assert!(first.iter().any(|(n, _)| n == name), "{name} missing");
    }
    let summary = f.read("summary.txt");
    assert!(summary.contains("matched number") && summary.contains("genmatch"), "{summary}");
    let estimates = f.read("estimates.csv");
    for method in ["naive", "classic", "genmatch", "regression-log", "ipw"] {
        assert!(estimates.lines().any(|l| l.starts_with(&format!("{method},"))), "{method}: {estimates}");
    }
    ok(&["report"], &f.config());
    assert_eq!(artifacts(&f.out()), first, "report is not idempotent");

    fs::remove_dir_all(f.out()).unwrap();
    pipeline(&f, &[]);
    assert_eq!(artifacts(&f.out()), first);

    fs::remove_dir_all(f.out()).unwrap();
    pipeline(&f, &["--seed", "12"]);
    assert_ne!(f.read("estimates.csv").into_bytes(), first.iter().find(|(n, _)| n == "estimates.csv").unwrap().1);
}

#[test]
fn weights_do_not_depend_on_workers() {
    let f = Fixture::new(&synthetic_csv(300), &synthetic_config(""));
    ok(&["genmatch", "--workers", "1"], &f.config());
    let one = f.read("weights.csv");
    ok(&["genmatch", "--workers", "8"], &f.config());
    assert_eq!(f.read("weights.csv"), one);
    let out = Command::new(env!("CARGO_BIN_EXE_ratematch"))
        .args(["genmatch", "--config"])
        .arg(f.config())
        .env("RATEMATCH_WORKERS", "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(f.read("weights.csv"), one);
}

#[test]
fn ga_stops_after_stale_generations() {
    let config = synthetic_config("").replace("max_generations = 3\nwait_generations = 2", "max_generations = 40\nwait_generations = 1");
    let f = Fixture::new(&synthetic_csv(200), &config);
    ok(&["genmatch"], &f.config());
    let history = f.read("ga_history.csv");
    let rows = history.lines().count() - 1;
    assert!(rows >= 2 && rows < 41, "{rows} generations recorded");
    let best: Vec<f64> = history.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(best.windows(2).all(|w| w[1] >= w[0]));
}
