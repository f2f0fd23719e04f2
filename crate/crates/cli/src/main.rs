use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kimlab::config::{ExperimentConfig, ModelConfig};
use kimlab::error::{CliError, Result};
use kimlab::io::{csv_bytes, read_numeric_csv, to_json_bytes, write_file};
use kimlab::runner::{classify, run_experiment, Manifest, RunOptions, RunReport, Stage};
use kimlab::compare_runs;
use kimlab_core::invariant::stationary_density;
use kimlab_core::lyapunov::{
    assemble_global_candidate, certify_lambda0, lyapunov_check_2d, search_exponent,
    Lambda0Certificate, LyapunovCandidate1D, DEFAULT_GRID,
};
use kimlab_core::metrics::fit_exponential_rate;
use kimlab_core::operator::{Degeneracy, OperatorSpec1D, TriangleSpec};
use kimlab_core::Poly;
use serde::Serialize;

const DEFAULT_OUT: &str = "kimlab-out";

#[derive(Parser, Debug)]
#[command(name = "kimlab", version, about = "Degenerate diffusions with Kimura and quadratic boundaries")]
struct Cli {
    /// TOML experiment config, or a run manifest to reproduce.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Endpoint classes and the invariant measures they allow.
    Classify(ModelArgs),
    /// Stationary density on a grid: density.csv and invariant.json.
    Invariant {
        #[command(flatten)]
        model: ModelArgs,
        /// Number of grid midpoints.
        #[arg(long, default_value_t = 100)]
        grid: usize,
    },
    /// 1D ensemble: snapshot CSVs and a manifest.
    Simulate1d(RunArgs),
    /// 2D ensemble: snapshots, diagnostics, a 2D histogram and a manifest.
    Simulate2d(RunArgs),
    /// Exponential rate fit of a (t, value) CSV.
    Rates {
        #[arg(long)]
        input: PathBuf,
        /// Fit window t_min,t_max (default [T/4, T]).
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        window: Option<Vec<f64>>,
        #[arg(long, default_value = "value")]
        column: String,
    },
    /// Lyapunov certificate: a glued global candidate by default.
    Lyapunov {
        #[command(flatten)]
        model: ModelArgs,
        /// Certify x^alpha (1-x)^beta instead.
        #[arg(long, requires = "beta")]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        /// Golden-section search over alpha in (0, 1) with beta fixed.
        #[arg(long, requires = "beta", conflicts_with = "alpha")]
        search: bool,
        /// Chebyshev grid size (1D) or lattice size (2D).
        #[arg(long)]
        grid: Option<usize>,
        /// Also write lf_over_f.csv.
        #[arg(long)]
        csv: bool,
    },
    /// Full pipeline: simulate, snapshot, metric series, rate fits, manifest.
    Run(RunArgs),
    /// Config and metric-series differences between two runs.
    Compare { a: PathBuf, b: PathBuf },
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Validate and print the plan without simulating.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug, Default)]
struct ModelArgs {
    /// Mixed model c0 (with --c1).
    #[arg(long, requires = "c1")]
    c0: Option<f64>,
    #[arg(long, requires = "c0")]
    c1: Option<f64>,
    /// Coefficients of a(x), lowest degree first.
    #[arg(long, value_delimiter = ',', requires_all = ["b", "m0", "m1"])]
    a: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    b: Option<Vec<f64>>,
    #[arg(long)]
    m0: Option<u8>,
    #[arg(long)]
    m1: Option<u8>,
    /// Triangle rates gamma12,gamma13,gamma23.
    #[arg(long, value_delimiter = ',')]
    gamma: Option<Vec<f64>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::validation("threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::validation("threads", e))?;
    }
    let ctx = Context {
        config: cli.config,
        seed: cli.seed,
        threads: cli.threads,
        out: cli.out,
    };
    match cli.command {
        Command::Classify(m) => cmd_classify(&ctx, &m),
        Command::Invariant { model, grid } => cmd_invariant(&ctx, &model, grid),
        Command::Simulate1d(r) => cmd_run(&ctx, &r, Stage::SimulateOnly, Some(false)),
        Command::Simulate2d(r) => cmd_run(&ctx, &r, Stage::SimulateOnly, Some(true)),
        Command::Rates { input, window, column } => cmd_rates(&ctx, &input, window, &column),
        Command::Lyapunov {
            model,
            alpha,
            beta,
            search,
            grid,
            csv,
        } => cmd_lyapunov(&ctx, &model, alpha, beta, search, grid, csv),
        Command::Run(r) => cmd_run(&ctx, &r, Stage::Full, None),
        Command::Compare { a, b } => {
            let report = compare_runs(&a, &b)?;
            emit(&ctx, "compare.json", &report)
        }
    }
}

struct Context {
    config: Option<PathBuf>,
    seed: Option<u64>,
    threads: Option<usize>,
    out: Option<PathBuf>,
}

/// Prints `value` as JSON and, with `--out`, also writes it there.
fn emit<T: Serialize>(ctx: &Context, file: &str, value: &T) -> Result<()> {
    let bytes = to_json_bytes(value)?;
    if let Some(dir) = &ctx.out {
        write_file(&dir.join(file), &bytes)?;
    }
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn load_experiment(path: &Path) -> Result<ExperimentConfig> {
    if path.extension().is_some_and(|e| e == "json") || path.is_dir() {
        return Ok(Manifest::load(path)?.0.config);
    }
    ExperimentConfig::from_toml(&kimlab::io::read_file(path)?)
}

fn model_from_config(path: &Path) -> Result<ModelConfig> {
    if path.extension().is_some_and(|e| e == "json") || path.is_dir() {
        return Ok(Manifest::load(path)?.0.config.model);
    }
    let text = kimlab::io::read_file(path)?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| CliError::validation("config", e.message()))?;
    let model = table
        .get("model")
        .cloned()
        .ok_or_else(|| CliError::validation("model", "missing [model] table"))?;
    model.try_into().map_err(|e: toml::de::Error| CliError::validation("model", e.message()))
}

fn degeneracy(field: &str, m: Option<u8>) -> Result<Degeneracy> {
    let m = m.ok_or_else(|| CliError::validation(field, "required with --a"))?;
    Degeneracy::try_from(m).map_err(|e| CliError::validation(field, e))
}

fn resolve_model(ctx: &Context, m: &ModelArgs) -> Result<ModelConfig> {
    let given = [m.c0.is_some(), m.a.is_some(), m.gamma.is_some()];
    if given.iter().filter(|&&g| g).count() > 1 {
        return Err(CliError::validation("model", "give one of --c0/--c1, --a/--b/--m0/--m1, --gamma"));
    }
    if let (Some(c0), Some(c1)) = (m.c0, m.c1) {
        return Ok(ModelConfig::Mixed { c0, c1 });
    }
    if let Some(a) = &m.a {
        let b = m.b.clone().ok_or_else(|| CliError::validation("b", "required with --a"))?;
        let spec = OperatorSpec1D::new(
            Poly::new(a.clone()),
            Poly::new(b),
            degeneracy("m0", m.m0)?,
            degeneracy("m1", m.m1)?,
        )?;
        return Ok(ModelConfig::Operator1D(spec));
    }
    if let Some(g) = &m.gamma {
        if g.len() != 3 {
            return Err(CliError::validation("gamma", format!("need three rates, got {}", g.len())));
        }
        return Ok(ModelConfig::Triangle(TriangleSpec::new(g[0], g[1], g[2])?));
    }
    match &ctx.config {
        Some(p) => model_from_config(p),
        None => Err(CliError::validation(
            "model",
            "give --config or model flags (--c0/--c1, --a/--b/--m0/--m1, --gamma)",
        )),
    }
}

fn require_1d(model: &ModelConfig) -> Result<OperatorSpec1D> {
    model
        .operator()
        .ok_or_else(|| CliError::validation("model", "this subcommand needs a 1D model"))
}

fn cmd_classify(ctx: &Context, m: &ModelArgs) -> Result<()> {
    let spec = require_1d(&resolve_model(ctx, m)?)?;
    let c = classify(&spec);
    emit(ctx, "classification.json", &c)?;
    if c.invariant_measures.is_none() {
        return Err(CliError::validation("model", "an endpoint is inadmissible"));
    }
    Ok(())
}

#[derive(Serialize)]
struct InvariantSummary {
    classification: kimlab::runner::Classification,
    left_exponent: f64,
    right_exponent: f64,
    z: f64,
    grid_size: usize,
    density_csv: String,
}

fn cmd_invariant(ctx: &Context, m: &ModelArgs, grid: usize) -> Result<()> {
    if grid == 0 {
        return Err(CliError::validation("grid", "must be at least 1"));
    }
    let spec = require_1d(&resolve_model(ctx, m)?)?;
    let profile = stationary_density(&spec)?;
    let table = profile.cdf_table(kimlab::config::DEFAULT_CDF_GRID)?;
    let out = ctx.out.clone().unwrap_or_else(|| DEFAULT_OUT.into());
    let rows = (0..grid).map(|k| {
        let x = (k as f64 + 0.5) / grid as f64;
        (x, profile.density(x), table.cdf(x))
    });
    let (bytes, _) = csv_bytes(&["x", "density", "cdf"], rows)?;
    write_file(&out.join("density.csv"), &bytes)?;
    let summary = InvariantSummary {
        classification: classify(&spec),
        left_exponent: profile.left_exponent,
        right_exponent: profile.right_exponent,
        z: profile.z,
        grid_size: grid,
        density_csv: "density.csv".into(),
    };
    let bytes = to_json_bytes(&summary)?;
    write_file(&out.join("invariant.json"), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(())
}

fn cmd_run(ctx: &Context, r: &RunArgs, stage: Stage, want_2d: Option<bool>) -> Result<()> {
    let path = ctx
        .config
        .as_ref()
        .ok_or_else(|| CliError::validation("config", "--config is required"))?;
    let mut cfg = load_experiment(path)?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if let Some(w) = want_2d {
        if cfg.model.is_2d() != w {
            let need = if w { "simulate2d needs a triangle model" } else { "simulate1d needs a 1D model" };
            return Err(CliError::validation("model.kind", need));
        }
    }
    let out = ctx
        .out
        .clone()
        .or_else(|| cfg.outputs.clone())
        .unwrap_or_else(|| DEFAULT_OUT.into());
    let opts = RunOptions {
        out,
        threads: ctx.threads,
        dry_run: r.dry_run,
        stage,
    };
    match run_experiment(&cfg, &opts)? {
        RunReport::Planned(plan) => {
            print!("{}", String::from_utf8_lossy(&to_json_bytes(&plan)?));
        }
        RunReport::Completed(m) => {
            println!(
                "wrote {} artifacts and {} to {} (config {}, {:.2}s)",
                m.artifacts.len(),
                kimlab::runner::MANIFEST_FILE,
                opts.out.display(),
                &m.config_hash[..12],
                m.wall_time_seconds
            );
            for f in &m.rate_fits {
                match (&f.report, &f.error) {
                    (Some(rep), _) => println!("  {}: rate {:.6} (r2 {:.4})", f.metric, rep.rate, rep.r_squared),
                    (None, Some(e)) => println!("  {}: no fit ({e})", f.metric),
                    _ => {}
                }
            }
        }
    }
    Ok(())
}

fn cmd_rates(ctx: &Context, input: &Path, window: Option<Vec<f64>>, column: &str) -> Result<()> {
    let (header, rows) = read_numeric_csv(input)?;
    let field = input.display().to_string();
    let t_col = header
        .iter()
        .position(|h| h == "t")
        .ok_or_else(|| CliError::validation(field.clone(), "missing column t"))?;
    let v_col = header
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::validation(field.clone(), format!("missing column {column}")))?;
    let series: Vec<(f64, f64)> = rows.iter().map(|r| (r[t_col], r[v_col])).collect();
    let window = match window {
        Some(w) if w.len() == 2 => (w[0], w[1]),
        Some(w) => return Err(CliError::validation("window", format!("need t_min,t_max, got {} values", w.len()))),
        None => {
            let t_max = series.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            (t_max / 4.0, t_max)
        }
    };
    if !(window.0 < window.1) {
        return Err(CliError::validation("window", format!("need t_min < t_max, got {window:?}")));
    }
    let rep = fit_exponential_rate(&series, window)?;
    emit(ctx, "rate_fit.json", &rep)
}

#[derive(Serialize)]
#[serde(tag = "candidate", rename_all = "snake_case")]
enum LyapunovOutput {
    Power {
        alpha: f64,
        beta: f64,
        certificate: Lambda0Certificate,
    },
    Global {
        topology: kimlab_core::lyapunov::Topology,
        reflected: bool,
        left: LyapunovCandidate1D,
        right: LyapunovCandidate1D,
        right_offset: f64,
        x1: f64,
        x2: f64,
        kappa: f64,
        certificate: Lambda0Certificate,
    },
    Triangle {
        function: &'static str,
        certificate: kimlab_core::lyapunov::Triangle2DCertificate,
    },
}

fn cmd_lyapunov(
    ctx: &Context,
    m: &ModelArgs,
    alpha: Option<f64>,
    beta: Option<f64>,
    search: bool,
    grid: Option<usize>,
    csv: bool,
) -> Result<()> {
    let model = resolve_model(ctx, m)?;
    if let Some(tri) = model.triangle() {
        let cert = lyapunov_check_2d(tri, grid.unwrap_or(100))?;
        return emit(
            ctx,
            "lyapunov.json",
            &LyapunovOutput::Triangle {
                function: "1 - x - y",
                certificate: cert,
            },
        );
    }
    let spec = require_1d(&model)?;
    let grid = grid.unwrap_or(DEFAULT_GRID);
    let out = match (alpha, beta, search) {
        (_, Some(beta), true) => {
            let (alpha, certificate) =
                search_exponent(&spec, |c| LyapunovCandidate1D::power(c, beta), (0.0, 1.0), grid)?;
            LyapunovOutput::Power { alpha, beta, certificate }
        }
        (Some(alpha), Some(beta), false) => {
            let certificate = certify_lambda0(&spec, &LyapunovCandidate1D::power(alpha, beta), grid)?;
            LyapunovOutput::Power { alpha, beta, certificate }
        }
        _ => {
            let g = assemble_global_candidate(&spec)?;
            LyapunovOutput::Global {
                topology: g.topology,
                reflected: g.reflected,
                left: g.left.clone(),
                right: g.right.clone(),
                right_offset: g.right_offset,
                x1: g.patch.x1,
                x2: g.patch.x2,
                kappa: g.patch.kappa,
                certificate: g.certify(grid)?,
            }
        }
    };
    if csv {
        let cert = match &out {
            LyapunovOutput::Power { certificate, .. } | LyapunovOutput::Global { certificate, .. } => certificate,
            LyapunovOutput::Triangle { .. } => unreachable!(),
        };
        let dir = ctx.out.clone().unwrap_or_else(|| DEFAULT_OUT.into());
        let rows = cert.grid.iter().copied().zip(cert.values.iter().copied());
        let (bytes, _) = csv_bytes(&["x", "lf_over_f"], rows)?;
        write_file(&dir.join("lf_over_f.csv"), &bytes)?;
    }
    emit(ctx, "lyapunov.json", &out)
}
