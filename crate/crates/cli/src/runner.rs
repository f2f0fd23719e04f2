//! `run_experiment`: simulate, snapshot, measure, fit, and record it all in
//! a manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use kimlab_core::invariant::{edge_invariant_2d, CdfTable, DensityProfile};
use kimlab_core::metrics::{
    fit_exponential_rate, histogram, histogram_2d, sorted_copy, wasserstein_p_to_dirac,
    wasserstein_p_vs_density, Histogram, RateFitReport,
};
use kimlab_core::operator::{
    classify_endpoint, invariant_measure_kinds, End, EndpointKind, MeasureKind, OperatorSpec1D,
    TriangleSpec,
};
use kimlab_core::rng::ParticleStream;
use kimlab_core::sde1d::{simulate_ensemble_1d, InitialLaw, SchemeConfig1D, StepCounters};
use kimlab_core::sde2d::{simulate_ensemble_2d, BoundaryCounters2D, SchemeConfig2D, TriangleState};
use serde::{Deserialize, Serialize};

use crate::config::{
    ExperimentConfig, InitialConfig, MetricRequest, ResolvedConfig, ResolvedModel, ResolvedScheme,
};
use crate::error::{CliError, Result};
use crate::io::{time_tag, Artifact, ArtifactKind, ArtifactSet};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HIST2D_BINS: usize = 50;
const REFERENCE_GRID: usize = 512;
const SUBSAMPLE_LANE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Simulation, snapshots, metric series and rate fits.
    Full,
    /// Simulation and snapshots (plus 2D diagnostics and a 2D histogram).
    SimulateOnly,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out: PathBuf,
    /// `None` uses rayon's default.
    pub threads: Option<usize>,
    pub dry_run: bool,
    pub stage: Stage,
}

impl RunOptions {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        RunOptions {
            out: out.into(),
            threads: None,
            dry_run: false,
            stage: Stage::Full,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointReport {
    pub end: End,
    pub degeneracy: u8,
    pub a: f64,
    pub b: f64,
    pub kind: EndpointKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Classification {
    pub left: EndpointReport,
    pub right: EndpointReport,
    /// `None` when an endpoint is inadmissible.
    pub invariant_measures: Option<Vec<MeasureKind>>,
}

pub fn classify(spec: &OperatorSpec1D) -> Classification {
    let report = |end| EndpointReport {
        end,
        degeneracy: spec.degeneracy(end).into(),
        a: spec.a_at(end),
        b: spec.b_at(end),
        kind: classify_endpoint(spec, end).kind,
    };
    let (left, right) = (report(End::Left), report(End::Right));
    let invariant_measures = invariant_measure_kinds(left.kind, right.kind).ok();
    Classification {
        left,
        right,
        invariant_measures,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps_1d: Option<StepCounters>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_2d: Option<BoundaryCounters2D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFitEntry {
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RateFitReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool: String,
    pub stage: Stage,
    pub config_hash: String,
    /// The configuration as given (with `--seed` applied); enough to rerun.
    pub config: ExperimentConfig,
    /// The same with every default filled in; this is what is hashed.
    pub resolved_config: serde_json::Value,
    pub threads: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classification: Option<Classification>,
    pub counters: Counters,
    pub rate_fits: Vec<RateFitEntry>,
    pub artifacts: Vec<Artifact>,
    pub wall_time_seconds: f64,
}

impl Manifest {
    /// Reads a manifest file, or `manifest.json` inside a run directory.
    pub fn load(path: &Path) -> Result<(Manifest, PathBuf)> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = crate::io::read_file(&file)?;
        let m: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("manifest {}", file.display()), e))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(CliError::validation(
                "manifest.schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", m.schema_version),
            ));
        }
        let dir = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, dir))
    }
}

/// What a run would do, without doing it.
#[derive(Debug, Clone, Serialize)]
pub struct Plan {
    pub config_hash: String,
    pub stage: Stage,
    pub model: String,
    pub n_particles: usize,
    pub n_steps: u64,
    pub snapshot_times: Vec<f64>,
    pub rate_window: (f64, f64),
    pub out: PathBuf,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone)]
pub enum RunReport {
    Planned(Plan),
    Completed(Manifest),
}

pub fn snapshot_path(t: f64) -> String {
    format!("snapshots/t_{}.csv", time_tag(t))
}

pub fn metric_path(name: &str) -> String {
    format!("metrics/{name}.csv")
}

pub fn rate_path(name: &str) -> String {
    format!("rates/{name}.json")
}

pub fn histogram_path(name: &str, t: f64) -> String {
    format!("histograms/{name}_t_{}.csv", time_tag(t))
}

pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const REFERENCE_FILE: &str = "reference_density.csv";

fn histogram_times(at: &Option<Vec<f64>>, t_final: f64) -> Vec<f64> {
    at.clone().unwrap_or_else(|| vec![t_final])
}

/// Artifact paths in the order a run writes them. Rate fits that fail are
/// absent from the real run.
pub fn planned_artifacts(r: &ResolvedConfig, stage: Stage) -> Vec<String> {
    let times = r.scheme.snapshot_times();
    let t_final = r.scheme.t_final();
    let is_2d = matches!(r.model, ResolvedModel::Triangle(_));
    let mut out = Vec::new();
    if r.write_snapshots {
        out.extend(times.iter().map(|&t| snapshot_path(t)));
    }
    if is_2d {
        out.push(DIAGNOSTICS_FILE.to_string());
    }
    if stage == Stage::SimulateOnly {
        if is_2d {
            let (name, ts) = hist2d_request(r);
            out.extend(ts.iter().map(|&t| histogram_path(&name, t)));
        }
        return out;
    }
    if !is_2d && r.metrics.contains(&MetricRequest::W1ToDensity) {
        out.push(REFERENCE_FILE.to_string());
    }
    for m in &r.metrics {
        let name = m.name();
        match m {
            MetricRequest::Histogram { at, .. } | MetricRequest::Histogram2d { at, .. } => {
                out.extend(histogram_times(at, t_final).iter().map(|&t| histogram_path(&name, t)));
            }
            _ => {
                out.push(metric_path(&name));
                out.push(rate_path(&name));
            }
        }
    }
    out
}

fn hist2d_request(r: &ResolvedConfig) -> (String, Vec<f64>) {
    for m in &r.metrics {
        if let MetricRequest::Histogram2d { at, .. } = m {
            return (m.name(), histogram_times(at, r.scheme.t_final()));
        }
    }
    ("histogram_2d".into(), vec![r.scheme.t_final()])
}

fn hist2d_bins(r: &ResolvedConfig) -> usize {
    r.metrics
        .iter()
        .find_map(|m| match m {
            MetricRequest::Histogram2d { bins, .. } => Some(*bins),
            _ => None,
        })
        .unwrap_or(DEFAULT_HIST2D_BINS)
}

pub fn plan(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Plan> {
    let r = cfg.resolve()?;
    Ok(make_plan(&r, opts))
}

fn make_plan(r: &ResolvedConfig, opts: &RunOptions) -> Plan {
    let (model, n_steps) = match (&r.model, &r.scheme) {
        (ResolvedModel::Operator1D(_), ResolvedScheme::OneD(c)) => ("1d".to_string(), c.n_steps()),
        (_, ResolvedScheme::TwoD(c)) => ("triangle".to_string(), c.n_steps()),
        (_, ResolvedScheme::OneD(c)) => ("1d".to_string(), c.n_steps()),
    };
    Plan {
        config_hash: r.hash(),
        stage: opts.stage,
        model,
        n_particles: r.n_particles,
        n_steps,
        snapshot_times: r.scheme.snapshot_times().to_vec(),
        rate_window: r.rate_window,
        out: opts.out.clone(),
        artifacts: planned_artifacts(r, opts.stage),
    }
}

/// Runs the experiment into `opts.out`. On any failure the files written so
/// far are removed.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let resolved = cfg.resolve()?;
    if opts.dry_run {
        return Ok(RunReport::Planned(make_plan(&resolved, opts)));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::validation("threads", e))?;
    let started = Instant::now();
    let mut set = ArtifactSet::open(&opts.out)?;
    let result = pool.install(|| execute(&resolved, opts.stage, &mut set));
    let result = result.and_then(|(counters, rate_fits)| {
        let mut config = cfg.clone();
        config.outputs = None;
        let manifest = Manifest {
            schema_version: SCHEMA_VERSION,
            tool: format!("kimlab {}", env!("CARGO_PKG_VERSION")),
            stage: opts.stage,
            config_hash: resolved.hash(),
            config,
            resolved_config: serde_json::to_value(&resolved).expect("config serializes"),
            threads: pool.current_num_threads(),
            classification: resolved.operator().map(classify),
            counters,
            rate_fits,
            artifacts: set.entries().to_vec(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
        };
        let bytes = crate::io::to_json_bytes(&manifest)?;
        crate::io::write_file(&set.root().join(MANIFEST_FILE), &bytes)?;
        Ok(manifest)
    });
    match result {
        Ok(m) => Ok(RunReport::Completed(m)),
        Err(e) => {
            let _ = std::fs::remove_file(set.root().join(MANIFEST_FILE));
            set.rollback();
            Err(e)
        }
    }
}

fn execute(r: &ResolvedConfig, stage: Stage, set: &mut ArtifactSet) -> Result<(Counters, Vec<RateFitEntry>)> {
    match (&r.model, &r.scheme) {
        (ResolvedModel::Operator1D(op), ResolvedScheme::OneD(cfg)) => execute_1d(r, op, cfg, stage, set),
        (ResolvedModel::Triangle(tri), ResolvedScheme::TwoD(cfg)) => execute_2d(r, *tri, cfg, stage, set),
        _ => unreachable!("resolve pairs models with schemes"),
    }
}

/// Indices kept when a snapshot of `n` rows is capped at `cap`: reservoir
/// sampling on a dedicated stream, returned in increasing order.
pub fn reservoir_indices(n: usize, cap: usize, seed: u64, snapshot: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut keep: Vec<usize> = (0..cap).collect();
    let mut s = ParticleStream::auxiliary(seed, SUBSAMPLE_LANE, snapshot);
    for i in cap..n {
        let j = (s.uniform() * (i + 1) as f64) as usize;
        if j < cap {
            keep[j] = i;
        }
    }
    keep.sort_unstable();
    keep
}

fn snapshot_rows(r: &ResolvedConfig, k: usize, n: usize) -> Vec<usize> {
    match r.snapshot_cap {
        Some(cap) => reservoir_indices(n, cap, r.seed, k as u64),
        None => (0..n).collect(),
    }
}

fn same_time(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(1.0)
}

fn write_series(
    set: &mut ArtifactSet,
    name: &str,
    series: &[(f64, f64)],
    window: (f64, f64),
    fits: &mut Vec<RateFitEntry>,
) -> Result<()> {
    set.csv(&metric_path(name), ArtifactKind::MetricSeries, &["t", "value"], series.iter().copied())?
        .metric = Some(name.to_string());
    match fit_exponential_rate(series, window) {
        Ok(rep) => {
            set.json(&rate_path(name), ArtifactKind::RateFit, &rep)?.metric = Some(name.to_string());
            fits.push(RateFitEntry {
                metric: name.to_string(),
                report: Some(rep),
                error: None,
            });
        }
        Err(e) => fits.push(RateFitEntry {
            metric: name.to_string(),
            report: None,
            error: Some(e.to_string()),
        }),
    }
    Ok(())
}

fn write_histogram(set: &mut ArtifactSet, name: &str, t: f64, h: &Histogram) -> Result<()> {
    let dens = h.densities();
    let rows = (0..h.counts.len()).map(|i| (h.edges[i], h.edges[i + 1], h.counts[i], dens[i]));
    let a = set.csv(
        &histogram_path(name, t),
        ArtifactKind::Histogram,
        &["bin_lo", "bin_hi", "count", "density"],
        rows,
    )?;
    a.time = Some(t);
    a.bin_width = Some(h.bin_width());
    a.metric = Some(name.to_string());
    Ok(())
}

fn write_histogram_2d(set: &mut ArtifactSet, name: &str, t: f64, bins: usize, xs: &[f64], ys: &[f64]) -> Result<()> {
    let cells = histogram_2d(xs, ys, bins, (0.0, 1.0))?;
    let a = set.csv(
        &histogram_path(name, t),
        ArtifactKind::Histogram2d,
        &["bin_x", "bin_y", "count"],
        cells,
    )?;
    a.time = Some(t);
    a.bin_width = Some(1.0 / bins as f64);
    a.metric = Some(name.to_string());
    Ok(())
}

fn execute_1d(
    r: &ResolvedConfig,
    op: &OperatorSpec1D,
    cfg: &SchemeConfig1D,
    stage: Stage,
    set: &mut ArtifactSet,
) -> Result<(Counters, Vec<RateFitEntry>)> {
    let needs_density = stage == Stage::Full && r.metrics.contains(&MetricRequest::W1ToDensity)
        || r.initial == InitialConfig::Stationary;
    let density: Option<(DensityProfile, Arc<CdfTable>)> = if needs_density {
        r.density()?.map(|(p, t)| (p, Arc::new(t)))
    } else {
        None
    };
    let init = match &r.initial {
        InitialConfig::Dirac { position } => InitialLaw::Dirac(*position),
        InitialConfig::Uniform => InitialLaw::Quantile(Arc::new(|u| u)),
        InitialConfig::Stationary => {
            let table = density.as_ref().expect("validated").1.clone();
            InitialLaw::Quantile(Arc::new(move |u| table.quantile(u)))
        }
        InitialConfig::Point { .. } => unreachable!("validated"),
    };
    let sim = simulate_ensemble_1d(op, cfg, r.n_particles, r.seed, &init)?;

    if r.write_snapshots {
        for (k, snap) in sim.snapshots.iter().enumerate() {
            let rows = snapshot_rows(r, k, snap.positions.len());
            let a = set.csv(
                &snapshot_path(cfg.snapshot_times[k]),
                ArtifactKind::Snapshot,
                &["position"],
                rows.iter().map(|&i| (snap.positions[i],)),
            )?;
            a.time = Some(snap.time);
        }
    }
    let counters = Counters {
        steps_1d: Some(sim.counters),
        boundary_2d: None,
    };
    let mut fits = Vec::new();
    if stage == Stage::SimulateOnly {
        return Ok((counters, fits));
    }

    if let Some((profile, table)) = &density {
        if r.metrics.contains(&MetricRequest::W1ToDensity) {
            let rows = (0..REFERENCE_GRID).map(|k| {
                let x = (k as f64 + 0.5) / REFERENCE_GRID as f64;
                (x, profile.density(x), table.cdf(x))
            });
            set.csv(REFERENCE_FILE, ArtifactKind::ReferenceDensity, &["x", "density", "cdf"], rows)?;
        }
    }
    let sorted: Vec<Vec<f64>> = sim.snapshots.iter().map(|s| sorted_copy(&s.positions)).collect();
    for m in &r.metrics {
        let name = m.name();
        match m {
            MetricRequest::W1ToDensity => {
                let table = &density.as_ref().expect("validated").1;
                let series = sim
                    .snapshots
                    .iter()
                    .zip(&sorted)
                    .map(|(s, xs)| Ok((s.time, wasserstein_p_vs_density(xs, |u| table.quantile(u), 1.0)?)))
                    .collect::<Result<Vec<_>>>()?;
                write_series(set, &name, &series, r.rate_window, &mut fits)?;
            }
            MetricRequest::W1ToDirac { target } => {
                let series = sim
                    .snapshots
                    .iter()
                    .map(|s| Ok((s.time, wasserstein_p_to_dirac(&s.positions, *target, 1.0)?)))
                    .collect::<Result<Vec<_>>>()?;
                write_series(set, &name, &series, r.rate_window, &mut fits)?;
            }
            MetricRequest::Histogram { bins, range, at } => {
                for t in histogram_times(at, cfg.t_final) {
                    let s = sim
                        .snapshots
                        .iter()
                        .find(|s| same_time(s.time, t))
                        .expect("validated");
                    let h = histogram(&s.positions, *bins, range.unwrap_or((0.0, 1.0)))?;
                    write_histogram(set, &name, t, &h)?;
                }
            }
            MetricRequest::MeanDistanceToDiagonal | MetricRequest::Histogram2d { .. } => {
                unreachable!("validated")
            }
        }
    }
    Ok((counters, fits))
}

fn execute_2d(
    r: &ResolvedConfig,
    tri: TriangleSpec,
    cfg: &SchemeConfig2D,
    stage: Stage,
    set: &mut ArtifactSet,
) -> Result<(Counters, Vec<RateFitEntry>)> {
    let InitialConfig::Point { x, y } = r.initial else { unreachable!("validated") };
    let sim = simulate_ensemble_2d(tri, cfg, r.n_particles, r.seed, TriangleState::new(x, y))?;
    if r.write_snapshots {
        for (k, snap) in sim.snapshots.iter().enumerate() {
            let rows = snapshot_rows(r, k, snap.x.len());
            let a = set.csv(
                &snapshot_path(cfg.snapshot_times[k]),
                ArtifactKind::Snapshot,
                &["x", "y"],
                rows.iter().map(|&i| (snap.x[i], snap.y[i])),
            )?;
            a.time = Some(snap.time);
        }
    }
    set.csv(
        DIAGNOSTICS_FILE,
        ArtifactKind::Diagnostics,
        &["t", "mean_one_minus_x_minus_y"],
        sim.mean_distance.iter().copied(),
    )?;
    let counters = Counters {
        steps_1d: None,
        boundary_2d: Some(sim.counters),
    };
    let mut fits = Vec::new();
    let find = |t: f64| sim.snapshots.iter().find(|s| same_time(s.time, t)).expect("validated");
    if stage == Stage::SimulateOnly {
        let (name, ts) = hist2d_request(r);
        for t in ts {
            let s = find(t);
            write_histogram_2d(set, &name, t, hist2d_bins(r), &s.x, &s.y)?;
        }
        return Ok((counters, fits));
    }
    for m in &r.metrics {
        let name = m.name();
        match m {
            MetricRequest::W1ToDensity => {
                let edge = edge_invariant_2d(tri);
                let series = sim
                    .snapshots
                    .iter()
                    .map(|s| Ok((s.time, wasserstein_p_vs_density(&sorted_copy(&s.x), |u| edge.quantile(u), 1.0)?)))
                    .collect::<Result<Vec<_>>>()?;
                write_series(set, &name, &series, r.rate_window, &mut fits)?;
            }
            MetricRequest::MeanDistanceToDiagonal => {
                write_series(set, &name, &sim.mean_distance, r.rate_window, &mut fits)?;
            }
            MetricRequest::Histogram { bins, range, at } => {
                for t in histogram_times(at, cfg.t_final) {
                    let s = find(t);
                    let h = histogram(&s.x, *bins, range.unwrap_or((0.0, 1.0)))?;
                    write_histogram(set, &name, t, &h)?;
                }
            }
            MetricRequest::Histogram2d { bins, at } => {
                for t in histogram_times(at, cfg.t_final) {
                    let s = find(t);
                    write_histogram_2d(set, &name, t, *bins, &s.x, &s.y)?;
                }
            }
            MetricRequest::W1ToDirac { .. } => unreachable!("validated"),
        }
    }
    Ok((counters, fits))
}
