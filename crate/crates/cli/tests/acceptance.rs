//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so the lines always
//! print.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use kimlab::io::read_numeric_csv;
use kimlab::{run_experiment, ExperimentConfig, RunOptions, RunReport};
use kimlab_core::invariant::{edge_invariant_2d, restricted_diagonal_operator, stationary_density};
use kimlab_core::lyapunov::{lyapunov_check_2d, search_exponent, LyapunovCandidate1D, DEFAULT_GRID};
use kimlab_core::metrics::{noise_floor, ot_bruteforce_oracle, wasserstein_p_sample_sample};
use kimlab_core::operator::{
    invariant_measure_set, Degeneracy, EndpointKind, MeasureKind, OperatorSpec1D, TriangleSpec,
};
use kimlab_core::rng::ParticleStream;
use kimlab_core::sde1d::step_kimura_implicit;
use kimlab_core::Poly;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant, detail: String) -> Outcome {
    let took = started.elapsed();
    check(took <= limit, format!("{detail}; {:.2}s of {}s", took.as_secs_f64(), limit.as_secs()))
}

fn run_config(text: &str, out: &Path) -> kimlab::Manifest {
    let cfg = ExperimentConfig::from_toml(text).expect("config parses");
    match run_experiment(&cfg, &RunOptions::new(out)).expect("run succeeds") {
        RunReport::Completed(m) => m,
        RunReport::Planned(_) => unreachable!(),
    }
}

fn series(out: &Path, name: &str) -> Vec<(f64, f64)> {
    let (_, rows) = read_numeric_csv(&out.join(format!("metrics/{name}.csv"))).expect("series");
    rows.into_iter().map(|r| (r[0], r[1])).collect()
}

/// Mean W¹ between two independent `n`-samples drawn through `quantile`.
fn quantile_noise_floor<Q: Fn(f64) -> f64>(n: usize, repeats: usize, seed: u64, quantile: Q) -> f64 {
    noise_floor(repeats, |r| {
        (0..n as u64)
            .map(|i| quantile(ParticleStream::auxiliary(seed, 100 + r as u64, i).uniform()))
            .collect()
    })
    .expect("noise floor")
}

fn c1_density_closed_form() -> Outcome {
    let t0 = Instant::now();
    let p = stationary_density(&OperatorSpec1D::kimura_quadratic(0.5, 2.0)).map_err(|e| e.to_string())?;
    let worst = (0..100)
        .map(|k| {
            let x = (k as f64 + 0.5) / 100.0;
            let exact = 0.5 / x.sqrt();
            (p.density(x) - exact).abs() / exact
        })
        .fold(0.0, f64::max);
    let ok = worst < 1e-8;
    within(Duration::from_secs(1), t0, format!("max relative error {worst:.2e} (< 1e-8)"))
        .and_then(|d| check(ok, d))
}

fn linear_b(b0: f64, b1: f64) -> Poly {
    Poly::new(vec![b0, b1 - b0])
}

fn spec(a: Poly, b: Poly, m0: Degeneracy, m1: Degeneracy) -> OperatorSpec1D {
    OperatorSpec1D::new(a, b, m0, m1).expect("admissible corpus operator")
}

fn c2_stationarity_residuals() -> Outcome {
    use Degeneracy::{Kimura as K, Quadratic as Q};
    let t0 = Instant::now();
    let corpus = [
        spec(Poly::constant(1.0), linear_b(0.5, -2.0), K, K),
        spec(Poly::new(vec![1.0, 0.5]), Poly::new(vec![1.5, -2.0, -1.0]), K, K),
        spec(Poly::constant(1.0), linear_b(0.5, -2.0), K, Q),
        spec(Poly::new(vec![2.0, -1.0]), linear_b(2.5, -1.5), Q, K),
        spec(Poly::constant(1.0), linear_b(1.5, -2.5), Q, Q),
        spec(Poly::new(vec![1.0, 1.0, 1.0]), Poly::new(vec![1.2, 0.3, -6.5]), Q, Q),
    ];
    let tests = [
        Poly::x(),
        Poly::new(vec![0.0, 0.0, 1.0]),
        Poly::new(vec![0.0, 1.0, -1.0]),
        Poly::new(vec![0.0, 0.0, 0.0, 1.0]),
        Poly::new(vec![0.2, -1.0, 0.0, 0.0, 1.0]),
    ];
    let mut worst: f64 = 0.0;
    for s in &corpus {
        for k in [kimlab_core::End::Left, kimlab_core::End::Right] {
            if !s.classify(k).kind.is_transverse() {
                return Err(format!("corpus operator {s:?} is not transverse at {k:?}"));
            }
        }
        let p = stationary_density(s).map_err(|e| e.to_string())?;
        for f in &tests {
            worst = worst.max(p.stationarity_residual(f).map_err(|e| e.to_string())?.abs());
        }
    }
    let ok = worst < 1e-6;
    within(
        Duration::from_secs(10),
        t0,
        format!("6 operators x 5 test functions, max |∫Lf dμ| = {worst:.2e} (< 1e-6)"),
    )
    .and_then(|d| check(ok, d))
}

/// One operator per endpoint kind pair, `a = 1`, linear `b`.
fn table_operator(left: EndpointKind, right: EndpointKind) -> OperatorSpec1D {
    use EndpointKind::*;
    // inward b at each end
    let (m0, r0) = match left {
        KimuraTransverse => (Degeneracy::Kimura, 1.0),
        KimuraTangent => (Degeneracy::Kimura, 0.0),
        QuadraticTransverse => (Degeneracy::Quadratic, 2.0),
        QuadraticTangent => (Degeneracy::Quadratic, 0.5),
        QuadraticNeutral => (Degeneracy::Quadratic, 1.0),
        Inadmissible => unreachable!(),
    };
    let (m1, r1) = match right {
        KimuraTransverse => (Degeneracy::Kimura, 1.0),
        KimuraTangent => (Degeneracy::Kimura, 0.0),
        QuadraticTransverse => (Degeneracy::Quadratic, 2.0),
        QuadraticTangent => (Degeneracy::Quadratic, 0.5),
        QuadraticNeutral => (Degeneracy::Quadratic, 1.0),
        Inadmissible => unreachable!(),
    };
    spec(Poly::constant(1.0), linear_b(r0, -r1), m0, m1)
}

fn c3_table_rule() -> Outcome {
    use EndpointKind::*;
    use MeasureKind::{AbsolutelyContinuous as Mu, DiracLeft as D0, DiracRight as D1};
    let kinds = [KimuraTransverse, KimuraTangent, QuadraticTransverse, QuadraticTangent];
    // Reference table, rows = left end, columns = right end.
    let tabulated: [[&[MeasureKind]; 4]; 4] = [
        [&[Mu], &[D1], &[Mu, D1], &[D1]],
        [&[D0], &[D0, D1], &[D0], &[D0, D1]],
        [&[Mu, D0], &[D0, D1], &[Mu, D0, D1], &[D0, D1]],
        [&[D0], &[D0, D1], &[D1], &[D0, D1]],
    ];
    // Cells where the tabulated entry disagrees with the sticky-endpoint rule.
    // (Q Tan, Q Trans) lists δ₁ although both quadratic ends are sticky;
    // its mirror (Q Trans, Q Tan) lists δ₀, δ₁. (K Tan, Q Trans) lists δ₀
    // although the quadratic right end is sticky; its mirror (Q Trans, K Tan)
    // lists δ₀, δ₁. Both are asserted against the rule.
    let discrepant = [(3, 2), (1, 2)];
    let mut agree = 0;
    let mut noted = Vec::new();
    for (i, &l) in kinds.iter().enumerate() {
        for (j, &r) in kinds.iter().enumerate() {
            let s = table_operator(l, r);
            if (s.classify(kimlab_core::End::Left).kind, s.classify(kimlab_core::End::Right).kind) != (l, r) {
                return Err(format!("constructed operator for ({l:?}, {r:?}) classifies differently"));
            }
            let mut got: Vec<MeasureKind> = invariant_measure_set(&s)
                .map_err(|e| e.to_string())?
                .iter()
                .map(|m| m.kind())
                .collect();
            got.sort_by_key(|k| *k as u8);
            let mut rule = Vec::new();
            if l.is_transverse() && r.is_transverse() {
                rule.push(Mu);
            }
            if l.is_sticky() {
                rule.push(D0);
            }
            if r.is_sticky() {
                rule.push(D1);
            }
            rule.sort_by_key(|k| *k as u8);
            if got != rule {
                return Err(format!("({l:?}, {r:?}): got {got:?}, rule says {rule:?}"));
            }
            let mut table = tabulated[i][j].to_vec();
            table.sort_by_key(|k| *k as u8);
            match (table == rule, discrepant.contains(&(i, j))) {
                (true, false) => agree += 1,
                (false, true) => noted.push(format!("({l:?},{r:?})")),
                (true, true) => return Err(format!("({l:?}, {r:?}) was expected to differ from the table")),
                (false, false) => return Err(format!("({l:?}, {r:?}): table {table:?} vs rule {rule:?}")),
            }
        }
    }
    // The table footnote folds neutral into tangent: same measure sets.
    for &other in &kinds {
        for (l, r) in [(QuadraticNeutral, other), (other, QuadraticNeutral)] {
            let t = |k| if k == QuadraticNeutral { QuadraticTangent } else { k };
            let a: Vec<_> = invariant_measure_set(&table_operator(l, r)).map_err(|e| e.to_string())?.iter().map(|m| m.kind()).collect();
            let b: Vec<_> = invariant_measure_set(&table_operator(t(l), t(r))).map_err(|e| e.to_string())?.iter().map(|m| m.kind()).collect();
            if a != b {
                return Err(format!("neutral ({l:?}, {r:?}) differs from tangent"));
            }
        }
    }
    Ok(format!(
        "16/16 cells follow the rule; {agree} match the reference table, table errors at {}",
        noted.join(" and ")
    ))
}

const N: usize = 100_000;

fn c4_case_one_convergence(dir: &Path) -> Outcome {
    let t0 = Instant::now();
    let cfg = format!(
        r#"
seed = 20240401
n_particles = {N}
write_snapshots = false
[model]
kind = "mixed"
c0 = 0.5
c1 = 2.0
[scheme]
dt = 0.0009765625
t_final = 2.0
snapshot_every = 0.125
[initial]
law = "dirac"
position = 0.5
[[metrics]]
kind = "w1_to_density"
"#
    );
    let out = dir.join("case1");
    run_config(&cfg, &out);
    let w1 = series(&out, "w1_to_density").last().expect("series").1;
    let floor = quantile_noise_floor(N, 10, 99, |u| u * u);
    let ratio = w1 / floor;
    let ok = ratio <= 2.0;
    within(
        Duration::from_secs(120),
        t0,
        format!("W1(T=2) = {w1:.5}, noise floor = {floor:.5}, ratio {ratio:.2} (need <= 2)"),
    )
    .and_then(|d| check(ok, d))
}

fn c5_case_two_decay(dir: &Path) -> Outcome {
    let cfg = format!(
        r#"
seed = 7
n_particles = {N}
write_snapshots = false
rate_window = [0.5, 2.0]
[model]
kind = "mixed"
c0 = 0.5
c1 = 0.5
[scheme]
dt = 0.0009765625
t_final = 2.0
snapshot_every = 0.0625
[initial]
law = "dirac"
position = 0.5
[[metrics]]
kind = "w1_to_dirac"
target = 1.0
"#
    );
    let out = dir.join("case2");
    let m = run_config(&cfg, &out);
    let rep = m.rate_fits[0].report.clone().ok_or("no rate fit")?;
    check(
        rep.rate < 0.0 && rep.r_squared >= 0.95,
        format!(
            "rate {:.4} over [0.5, 2] from {} points, r2 {:.4} (need rate < 0, r2 >= 0.95)",
            rep.rate, rep.points_used, rep.r_squared
        ),
    )
}

fn c6_positivity() -> Outcome {
    let dt = 2f64.powi(-14);
    let mut s = ParticleStream::new(6, 0);
    let (mut failures, mut nonpositive, mut min_out) = (0u64, 0u64, f64::INFINITY);
    for _ in 0..1_000_000 {
        let x = 0.01 * s.uniform();
        match step_kimura_implicit(x, dt, 0.5, 2.0, s.normal()) {
            Ok(y) if y > 0.0 => min_out = min_out.min(y),
            Ok(_) => nonpositive += 1,
            Err(_) => failures += 1,
        }
    }
    check(
        failures == 0 && nonpositive == 0,
        format!("10^6 steps: {failures} failures, {nonpositive} nonpositive, min output {min_out:.3e}"),
    )
}

fn c7_lyapunov_identity() -> Outcome {
    let mut s = ParticleStream::new(7, 0);
    let mut worst: f64 = 0.0;
    let mut triples = Vec::new();
    for _ in 0..5 {
        let g: Vec<f64> = (0..3).map(|_| 0.1 + 4.9 * s.uniform()).collect();
        let tri = TriangleSpec::new(g[0], g[1], g[2]).map_err(|e| e.to_string())?;
        let c = lyapunov_check_2d(tri, 100).map_err(|e| e.to_string())?;
        worst = worst.max(c.max_abs_residual / (g[1] + g[2]));
        triples.push(format!("({:.2},{:.2},{:.2})", g[0], g[1], g[2]));
    }
    check(
        worst <= 16.0 * f64::EPSILON,
        format!("5 triples {}, 5151 points each, max residual/(γ13+γ23) = {worst:.2e}", triples.join(" ")),
    )
}

fn triangle_run(dir: &Path) -> (kimlab::Manifest, std::path::PathBuf, Duration) {
    let t0 = Instant::now();
    let cfg = format!(
        r#"
seed = 8
n_particles = {N}
write_snapshots = false
rate_window = [1.0, 4.0]
[model]
kind = "triangle"
gamma12 = 1.0
gamma13 = 2.0
gamma23 = 1.0
[scheme]
dt = 0.001953125
t_final = 4.0
snapshot_every = 0.5
[initial]
law = "point"
x = 0.1
y = 0.1
[[metrics]]
kind = "mean_distance_to_diagonal"
[[metrics]]
kind = "w1_to_density"
"#
    );
    let out = dir.join("triangle");
    let m = run_config(&cfg, &out);
    (m, out, t0.elapsed())
}

fn c8_triangle_rate(m: &kimlab::Manifest, took: Duration) -> Outcome {
    let fit = m
        .rate_fits
        .iter()
        .find(|f| f.metric == "mean_distance_to_diagonal")
        .and_then(|f| f.report.clone())
        .ok_or("no rate fit")?;
    let mag = -fit.rate;
    let ok = (0.8..=3.3).contains(&mag) && took <= Duration::from_secs(180);
    check(
        ok,
        format!(
            "|rate| {mag:.4} over [1, 4] (need [0.8, 3.3]), r2 {:.5}; {:.2}s of 180s",
            fit.r_squared,
            took.as_secs_f64()
        ),
    )
}

fn c9_triangle_marginal(out: &Path) -> Outcome {
    let (t, w1) = *series(out, "w1_to_density").last().expect("series");
    let edge = edge_invariant_2d(TriangleSpec::new(1.0, 2.0, 1.0).expect("rates"));
    let floor = quantile_noise_floor(N, 10, 98, |u| edge.quantile(u));
    let ratio = w1 / floor;
    check(
        ratio <= 2.0 && (t - 4.0).abs() < 1e-12,
        format!("W1(T=4) = {w1:.5}, noise floor = {floor:.5}, ratio {ratio:.2} (need <= 2)"),
    )
}

fn c10_ot_oracle() -> Outcome {
    let mut s = ParticleStream::new(10, 0);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = 1 + k % 8;
        let p = if k % 2 == 0 { 1.0 } else { 2.0 };
        let a: Vec<f64> = (0..n).map(|_| s.uniform() * 4.0 - 2.0).collect();
        let b: Vec<f64> = (0..n).map(|_| s.uniform() * 4.0 - 2.0).collect();
        let fast = wasserstein_p_sample_sample(&a, &b, p).map_err(|e| e.to_string())?;
        let slow = ot_bruteforce_oracle(&a, &b, p).map_err(|e| e.to_string())?;
        worst = worst.max((fast - slow).abs());
    }
    check(worst <= 1e-12, format!("200 instances, n <= 8, p in {{1,2}}, max difference {worst:.2e}"))
}

fn c11_lambda0_benchmark() -> Outcome {
    let t0 = Instant::now();
    let s = spec(Poly::constant(1.0), Poly::zero(), Degeneracy::Quadratic, Degeneracy::Kimura);
    let (c, cert) = search_exponent(&s, |c| LyapunovCandidate1D::power(c, 1.0), (0.0, 1.0), DEFAULT_GRID)
        .map_err(|e| e.to_string())?;
    let ok = (cert.lambda0_bound + 0.25).abs() <= 1e-6 && (c - 0.5).abs() <= 1e-4;
    within(
        Duration::from_secs(1),
        t0,
        format!("min over c of sup Lf/f = {:.9} at c = {c:.6}", cert.lambda0_bound),
    )
    .and_then(|d| check(ok, d))
}

fn c12_cross_module() -> Outcome {
    let tri = TriangleSpec::new(1.0, 2.0, 1.0).map_err(|e| e.to_string())?;
    let p = stationary_density(&restricted_diagonal_operator(tri)).map_err(|e| e.to_string())?;
    let mu = edge_invariant_2d(tri);
    let worst = (0..100)
        .map(|k| {
            let x = (k as f64 + 0.5) / 100.0;
            (p.density(x) - mu.density(x)).abs()
        })
        .fold(0.0, f64::max);
    check(worst <= 1e-8, format!("100 points, max |difference| = {worst:.2e} (<= 1e-8)"))
}

fn c13_determinism(dir: &Path) -> Outcome {
    let one = r#"
seed = 13
n_particles = 20000
write_snapshots = false
[model]
kind = "mixed"
c0 = 0.5
c1 = 2.0
[scheme]
dt = 0.001953125
t_final = 1.0
snapshot_every = 0.125
[[metrics]]
kind = "w1_to_density"
[[metrics]]
kind = "w1_to_dirac"
target = 1.0
"#;
    let two = r#"
seed = 13
n_particles = 20000
write_snapshots = false
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
"#;
    let mut compared = 0;
    for (name, text) in [("one", one), ("two", two)] {
        let cfg = dir.join(format!("{name}.toml"));
        std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
        for threads in ["1", "4", "8"] {
            let out = dir.join(format!("det_{name}_{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_kimlab"))
                .args(["--config", cfg.to_str().unwrap(), "--threads", threads, "--out", out.to_str().unwrap(), "run"])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(String::from_utf8_lossy(&status.stderr).into_owned());
            }
            let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(out.join("metrics"))
                .map_err(|e| e.to_string())?
                .flatten()
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
                .collect();
            if let Ok(d) = std::fs::read(out.join("diagnostics.csv")) {
                files.push(("diagnostics.csv".into(), d));
            }
            files.sort();
            match &reference {
                None => reference = Some(files),
                Some(r) => {
                    if r != &files {
                        return Err(format!("{name}: metric CSVs differ between 1 and {threads} threads"));
                    }
                    compared += files.len();
                }
            }
        }
    }
    Ok(format!("1D and 2D runs at 1, 4, 8 threads: {compared} CSV comparisons byte-identical"))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path();
    let mut triangle: Option<(kimlab::Manifest, std::path::PathBuf, Duration)> = None;
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let criteria: Vec<(usize, &str)> = vec![
        (1, "invariant density closed form"),
        (2, "stationarity residuals"),
        (3, "invariant-measure table rule"),
        (4, "Case I convergence to the stationary law"),
        (5, "Case II tangent decay"),
        (6, "implicit Kimura step positivity"),
        (7, "2D Lyapunov identity"),
        (8, "2D decay rate"),
        (9, "2D marginal convergence"),
        (10, "OT oracle equivalence"),
        (11, "lambda0 benchmark"),
        (12, "restricted operator vs edge density"),
        (13, "determinism across thread counts"),
    ];
    for (id, title) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(|| match id {
            1 => c1_density_closed_form(),
            2 => c2_stationarity_residuals(),
            3 => c3_table_rule(),
            4 => c4_case_one_convergence(dir),
            5 => c5_case_two_decay(dir),
            6 => c6_positivity(),
            7 => c7_lyapunov_identity(),
            8 | 9 => {
                if triangle.is_none() {
                    triangle = Some(triangle_run(dir));
                }
                let (m, out, took) = triangle.as_ref().expect("run above");
                if id == 8 {
                    c8_triangle_rate(m, *took)
                } else {
                    c9_triangle_marginal(out)
                }
            }
            10 => c10_ot_oracle(),
            11 => c11_lambda0_benchmark(),
            12 => c12_cross_module(),
            13 => c13_determinism(dir),
            _ => unreachable!(),
        }))
        .unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag}  {title}: {detail}");
        results.push((id, title, outcome));
    }
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria pass{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
