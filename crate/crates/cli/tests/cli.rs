use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kimlab::compare_runs;
use kimlab::runner::{planned_artifacts, Manifest, MANIFEST_FILE};
use kimlab::{run_experiment, ExperimentConfig, RunOptions, RunReport, Stage};
use tempfile::TempDir;

const CASE_ONE: &str = r#"
seed = 11
n_particles = 3000

[model]
kind = "mixed"
c0 = 0.5
c1 = 2.0

[scheme]
dt = 0.0009765625
t_final = 1.0
snapshot_every = 0.125

[[metrics]]
kind = "w1_to_density"

[[metrics]]
kind = "w1_to_dirac"
target = 1.0

[[metrics]]
kind = "histogram"
bins = 16
at = [0.5, 1.0]
"#;

const TRIANGLE: &str = r#"
seed = 5
n_particles = 2000

[model]
kind = "triangle"
gamma12 = 1.0
gamma13 = 2.0
gamma23 = 1.0

[scheme]
dt = 0.001953125
t_final = 1.0
snapshot_every = 0.25

[initial]
law = "point"
x = 0.1
y = 0.1

[[metrics]]
kind = "mean_distance_to_diagonal"

[[metrics]]
kind = "w1_to_density"

[[metrics]]
kind = "histogram_2d"
bins = 10
"#;

fn kimlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kimlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files_under(root: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel);
            }
        }
    }
    out
}

fn run_lib(text: &str, out: &Path) -> Manifest {
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    match run_experiment(&cfg, &RunOptions::new(out)).unwrap() {
        RunReport::Completed(m) => m,
        RunReport::Planned(_) => unreachable!(),
    }
}

#[test]
fn every_file_is_declared_and_matches_plan() {
    let tmp = TempDir::new().unwrap();
    for (text, name) in [(CASE_ONE, "one"), (TRIANGLE, "two")] {
        let out = tmp.path().join(name);
        let m = run_lib(text, &out);
        let declared: BTreeSet<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
        let mut on_disk = files_under(&out);
        assert!(on_disk.remove(MANIFEST_FILE));
        assert_eq!(declared, on_disk, "{name}");
        let r = ExperimentConfig::from_toml(text).unwrap().resolve().unwrap();
        let planned = planned_artifacts(&r, Stage::Full);
        let written: Vec<String> = m.artifacts.iter().map(|a| a.path.clone()).collect();
        assert_eq!(planned, written, "{name}");
        for a in &m.artifacts {
            let bytes = fs::read(out.join(&a.path)).unwrap();
            assert_eq!(kimlab::io::sha256_hex(&bytes), a.sha256);
        }
        assert!(m.rate_fits.iter().all(|f| f.report.is_some()));
        assert_eq!(m.config_hash, r.hash());
    }
}

#[test]
fn csv_headers() {
    let tmp = TempDir::new().unwrap();
    let one = tmp.path().join("one");
    run_lib(CASE_ONE, &one);
    let first = |p: &str| fs::read_to_string(one.join(p)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(first("snapshots/t_0.500000.csv"), "position");
    assert_eq!(first("metrics/w1_to_density.csv"), "t,value");
    assert_eq!(first("metrics/w1_to_dirac_1.csv"), "t,value");
    assert_eq!(first("reference_density.csv"), "x,density,cdf");
    assert_eq!(first("histograms/histogram_t_0.500000.csv"), "bin_lo,bin_hi,count,density");

    let two = tmp.path().join("two");
    run_lib(TRIANGLE, &two);
    let first = |p: &str| fs::read_to_string(two.join(p)).unwrap().lines().next().unwrap().to_string();
    assert_eq!(first("snapshots/t_1.000000.csv"), "x,y");
    assert_eq!(first("diagnostics.csv"), "t,mean_one_minus_x_minus_y");
    assert_eq!(first("histograms/histogram_2d_t_1.000000.csv"), "bin_x,bin_y,count");
    assert_eq!(first("metrics/mean_distance_to_diagonal.csv"), "t,value");
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    assert_eq!(code(&kimlab(&["classify", "--c0", "0.5", "--c1", "2"], d)), 0);
    // inadmissible Kimura end
    assert_eq!(code(&kimlab(&["classify", "--a", "1", "--b=-1", "--m0", "1", "--m1", "1"], d)), 2);
    // tangent quadratic end: no integrable density
    assert_eq!(code(&kimlab(&["invariant", "--c0", "0.5", "--c1", "0.5"], d)), 3);
    assert_eq!(code(&kimlab(&["--config", "missing.toml", "run"], d)), 4);
    let bad = write_config(d, "bad.toml", &CASE_ONE.replace("n_particles = 3000", "n_particles = 0"));
    let o = kimlab(&["--config", bad.to_str().unwrap(), "run"], d);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_particles"));
    let typo = write_config(d, "typo.toml", &CASE_ONE.replace("dt =", "step ="));
    assert_eq!(code(&kimlab(&["--config", typo.to_str().unwrap(), "run"], d)), 2);
    let cfg = write_config(d, "one.toml", CASE_ONE);
    assert_eq!(code(&kimlab(&["--config", cfg.to_str().unwrap(), "simulate2d", "--dry-run"], d)), 2);
    assert_eq!(code(&kimlab(&["--threads", "0", "classify", "--c0", "1", "--c1", "1"], d)), 2);
    assert_eq!(code(&kimlab(&["rates", "--input", "nope.csv"], d)), 4);
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "one.toml", CASE_ONE);
    let out = tmp.path().join("out");
    let o = kimlab(&["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "run", "--dry-run"], tmp.path());
    assert_eq!(code(&o), 0);
    assert!(!out.exists());
    let plan: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(plan["n_steps"], 1024);
    assert!(plan["artifacts"].as_array().unwrap().len() > 10);
}

#[test]
fn failure_removes_partial_outputs() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("out");
    // A directory where a metric file should go makes that write fail after
    // the snapshots are already on disk.
    fs::create_dir_all(out.join("metrics/w1_to_density.csv")).unwrap();
    let cfg = ExperimentConfig::from_toml(CASE_ONE).unwrap();
    let err = run_experiment(&cfg, &RunOptions::new(&out)).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert!(files_under(&out).is_empty(), "{:?}", files_under(&out));
}

#[test]
fn rerun_is_byte_identical_and_cleans_stale_files() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ma = run_lib(CASE_ONE, &a);
    let mb = run_lib(CASE_ONE, &b);
    for (x, y) in ma.artifacts.iter().zip(&mb.artifacts) {
        assert_eq!(x.sha256, y.sha256, "{}", x.path);
    }
    // Rerun into `a` with fewer snapshots: the old extra files must go.
    let fewer = CASE_ONE.replace("snapshot_every = 0.125", "snapshot_every = 0.5");
    let m = run_lib(&fewer, &a);
    let mut on_disk = files_under(&a);
    on_disk.remove(MANIFEST_FILE);
    let declared: BTreeSet<String> = m.artifacts.iter().map(|x| x.path.clone()).collect();
    assert_eq!(declared, on_disk);
}

#[test]
fn manifest_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "one.toml", CASE_ONE);
    assert_eq!(code(&kimlab(&["--config", cfg.to_str().unwrap(), "--out", "r1", "run"], d)), 0);
    assert_eq!(code(&kimlab(&["--config", "r1/manifest.json", "--out", "r2", "run"], d)), 0);
    let report = compare_runs(&d.join("r1"), &d.join("r2")).unwrap();
    assert!(report.identical, "{report:?}");
    let (m1, _) = Manifest::load(&d.join("r1")).unwrap();
    let (m2, _) = Manifest::load(&d.join("r2/manifest.json")).unwrap();
    assert_eq!(m1.config_hash, m2.config_hash);
    assert!(m1.counters.steps_1d.unwrap().implicit_steps > 0);
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = write_config(d, "one.toml", CASE_ONE);
    let plan = |seed: Option<&str>| {
        let mut args = vec!["--config", cfg.to_str().unwrap()];
        if let Some(s) = seed {
            args.extend(["--seed", s]);
        }
        args.extend(["run", "--dry-run"]);
        let o = kimlab(&args, d);
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        v["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(plan(None), plan(Some("11")));
    assert_ne!(plan(None), plan(Some("12")));
}

#[test]
fn compare_reports_deltas() {
    let tmp = TempDir::new().unwrap();
    let base = tmp.path().join("base");
    run_lib(CASE_ONE, &base);

    let same = tmp.path().join("same");
    run_lib(CASE_ONE, &same);
    let r = compare_runs(&base, &same).unwrap();
    assert!(r.identical);
    assert!(r.series.iter().all(|s| s.columns.iter().all(|c| c.max_abs_diff == 0.0)));

    let halved = tmp.path().join("halved");
    run_lib(&CASE_ONE.replace("dt = 0.0009765625", "dt = 0.00048828125"), &halved);
    let r = compare_runs(&base, &halved).unwrap();
    assert!(!r.identical);
    assert_eq!(r.config_deltas.len(), 1);
    assert_eq!(r.config_deltas[0].path, "scheme.dt");
    let w1 = r.series.iter().find(|s| s.path == "metrics/w1_to_density.csv").unwrap();
    assert_eq!(w1.columns[0].max_abs_diff, 0.0, "same time grid");
    assert!(w1.columns[1].max_abs_diff > 0.0);

    // Another seed: differences at the Monte Carlo scale N^{-1/2}.
    let seeded = tmp.path().join("seeded");
    run_lib(&CASE_ONE.replace("seed = 11", "seed = 12"), &seeded);
    let r = compare_runs(&base, &seeded).unwrap();
    assert_eq!(r.config_deltas.len(), 1);
    assert_eq!(r.config_deltas[0].path, "seed");
    let w1 = r.series.iter().find(|s| s.path == "metrics/w1_to_density.csv").unwrap();
    let d = w1.columns[1].max_abs_diff;
    assert!(d > 0.0 && d < 5.0 / (3000f64).sqrt(), "{d}");
}

#[test]
fn compare_rejects_foreign_schema() {
    let tmp = TempDir::new().unwrap();
    let base = tmp.path().join("base");
    let m = run_lib(CASE_ONE, &base);
    let mut v: serde_json::Value = serde_json::to_value(&m).unwrap();
    v["schema_version"] = 99.into();
    let other = tmp.path().join("other.json");
    fs::write(&other, serde_json::to_vec(&v).unwrap()).unwrap();
    assert_eq!(compare_runs(&base, &other).unwrap_err().exit_code(), 2);
    fs::write(&other, "{}").unwrap();
    assert_eq!(compare_runs(&base, &other).unwrap_err().exit_code(), 2);
}

#[test]
fn simulate_subcommands() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let one = write_config(d, "one.toml", CASE_ONE);
    let two = write_config(d, "two.toml", TRIANGLE);
    assert_eq!(code(&kimlab(&["--config", one.to_str().unwrap(), "--out", "s1", "simulate1d"], d)), 0);
    let (m, _) = Manifest::load(&d.join("s1")).unwrap();
    assert!(m.artifacts.iter().all(|a| a.path.starts_with("snapshots/")));
    assert_eq!(m.stage, Stage::SimulateOnly);
    assert_eq!(code(&kimlab(&["--config", two.to_str().unwrap(), "--out", "s2", "simulate2d"], d)), 0);
    let files = files_under(&d.join("s2"));
    assert!(files.contains("diagnostics.csv"));
    assert!(files.contains("histograms/histogram_2d_t_1.000000.csv"));
    assert!(files.contains("snapshots/t_0.250000.csv"));
}

#[test]
fn snapshot_cap_subsamples_files_only() {
    let tmp = TempDir::new().unwrap();
    let full = run_lib(CASE_ONE, &tmp.path().join("full"));
    let capped_cfg = CASE_ONE.replace("n_particles = 3000", "n_particles = 3000\nsnapshot_cap = 500");
    let capped = run_lib(&capped_cfg, &tmp.path().join("capped"));
    let snap = capped.artifacts.iter().find(|a| a.path == "snapshots/t_1.000000.csv").unwrap();
    assert_eq!(snap.rows, 500);
    // metrics use the full ensemble
    let w = |m: &Manifest| m.artifacts.iter().find(|a| a.path == "metrics/w1_to_density.csv").unwrap().sha256.clone();
    assert_eq!(w(&full), w(&capped));
}

#[test]
fn rates_subcommand_fits_exponential() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let mut s = String::from("t,value\n");
    for k in 0..=40 {
        let t = k as f64 * 0.1;
        s.push_str(&format!("{t},{}\n", 2.0 * (-1.5 * t).exp()));
    }
    fs::write(d.join("series.csv"), s).unwrap();
    let o = kimlab(&["rates", "--input", "series.csv", "--out", "fit"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["rate"].as_f64().unwrap() + 1.5).abs() < 1e-12);
    assert_eq!(v["window"][0].as_f64().unwrap(), 1.0);
    assert!(d.join("fit/rate_fit.json").exists());
    let o = kimlab(&["rates", "--input", "series.csv", "--window", "3.5,3.6"], d);
    assert_eq!(code(&o), 3, "too few points");
    fs::write(d.join("bad.csv"), "time,v\n0,1\n").unwrap();
    assert_eq!(code(&kimlab(&["rates", "--input", "bad.csv"], d)), 2);
}

#[test]
fn lyapunov_and_invariant_subcommands() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let o = kimlab(&["lyapunov", "--a", "1", "--b", "0", "--m0", "2", "--m1", "1", "--beta", "1", "--search"], d);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!((v["certificate"]["lambda0_bound"].as_f64().unwrap() + 0.25).abs() < 1e-6);
    assert!((v["alpha"].as_f64().unwrap() - 0.5).abs() < 1e-4);

    let o = kimlab(&["lyapunov", "--c0", "0.5", "--c1", "0.5", "--csv", "--out", "ly"], d);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["candidate"], "global");
    assert_eq!(v["certificate"]["outcome"], "certified");
    assert!(fs::read_to_string(d.join("ly/lf_over_f.csv")).unwrap().starts_with("x,lf_over_f\n"));

    let o = kimlab(&["lyapunov", "--gamma", "1,2,1"], d);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["certificate"]["rate_window"], serde_json::json!([1.0, 3.0]));
    // neutral quadratic end: no recipe
    assert_eq!(code(&kimlab(&["lyapunov", "--a", "1", "--b", "1", "--m0", "2", "--m1", "1"], d)), 2);

    let o = kimlab(&["invariant", "--c0", "0.5", "--c1", "2", "--grid", "10", "--out", "inv"], d);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(d.join("inv/density.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x,density,cdf"));
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((v[1] - 0.5 / v[0].sqrt()).abs() < 1e-8 * v[1]);
        assert!((v[2] - v[0].sqrt()).abs() < 1e-8);
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(d.join("inv/invariant.json")).unwrap()).unwrap();
    assert_eq!(summary["left_exponent"], -0.5);
}
