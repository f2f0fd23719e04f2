//! Experiment configuration (TOML) and its canonical hash.
//!
//! ```toml
//! seed = 7
//! n_particles = 100000
//! rate_window = [0.5, 2.0]
//!
//! [model]
//! kind = "mixed"
//! c0 = 0.5
//! c1 = 2.0
//!
//! [scheme]
//! dt = 0.0009765625
//! t_final = 2.0
//! snapshot_every = 0.125
//!
//! [initial]
//! law = "dirac"
//! position = 0.5
//!
//! [[metrics]]
//! kind = "w1_to_density"
//! ```

use std::path::PathBuf;

use kimlab_core::invariant::{stationary_density, CdfTable, DensityProfile};
use kimlab_core::operator::{classify_endpoint, End, OperatorSpec1D, TriangleSpec};
use kimlab_core::sde1d::{KimuraScheme, MixedModel, SchemeConfig1D};
use kimlab_core::sde2d::{SchemeConfig2D, TriangleState};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::io::sha256_hex;

pub const DEFAULT_SNAPSHOTS: usize = 64;
pub const DEFAULT_KIMURA_THRESHOLD: f64 = 0.01;
pub const DEFAULT_QUADRATIC_THRESHOLD: f64 = 0.99;
pub const DEFAULT_CDF_GRID: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    /// `x(1-x)² ∂² + (c0(1-x) - c1 x)(1-x) ∂`: Kimura at 0, quadratic at 1.
    Mixed { c0: f64, c1: f64 },
    /// General `(a, b, m0, m1)` data.
    #[serde(rename = "operator_1d")]
    Operator1D(OperatorSpec1D),
    Triangle(TriangleSpec),
}

impl ModelConfig {
    pub fn operator(&self) -> Option<OperatorSpec1D> {
        match self {
            ModelConfig::Mixed { c0, c1 } => Some(MixedModel::new(*c0, *c1).to_operator()),
            ModelConfig::Operator1D(s) => Some(s.clone()),
            ModelConfig::Triangle(_) => None,
        }
    }

    pub fn triangle(&self) -> Option<TriangleSpec> {
        match self {
            ModelConfig::Triangle(t) => Some(*t),
            _ => None,
        }
    }

    pub fn is_2d(&self) -> bool {
        matches!(self, ModelConfig::Triangle(_))
    }

    fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mixed { c0, c1 } => {
                for (name, v) in [("model.c0", c0), ("model.c1", c1)] {
                    if !v.is_finite() {
                        return Err(CliError::validation(name, format!("must be finite, got {v}")));
                    }
                }
                if *c0 < 0.0 {
                    return Err(CliError::validation(
                        "model.c0",
                        format!("must be >= 0 for an admissible Kimura end, got {c0}"),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub dt: f64,
    pub t_final: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_every: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_times: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kimura_scheme: Option<KimuraScheme>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kimura_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic_threshold: Option<f64>,
}

impl SchemeSection {
    pub fn resolved_times(&self) -> Result<Vec<f64>> {
        let bad = |f: &str, m: String| Err(CliError::validation(f, m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("scheme.dt", format!("must be positive, got {}", self.dt));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return bad("scheme.t_final", format!("must be positive, got {}", self.t_final));
        }
        match (&self.snapshot_times, self.snapshot_every) {
            (Some(_), Some(_)) => bad(
                "scheme.snapshot_every",
                "give either snapshot_every or snapshot_times, not both".into(),
            ),
            (Some(ts), None) => Ok(ts.clone()),
            (None, every) => {
                let every = every.unwrap_or(self.t_final / DEFAULT_SNAPSHOTS as f64);
                if !(every > 0.0 && every.is_finite()) {
                    return bad("scheme.snapshot_every", format!("must be positive, got {every}"));
                }
                Ok(SchemeConfig1D::with_uniform_snapshots(self.dt, self.t_final, every).snapshot_times)
            }
        }
    }

    pub fn to_1d(&self) -> Result<SchemeConfig1D> {
        let mut cfg = SchemeConfig1D::new(self.dt, self.t_final, self.resolved_times()?);
        cfg.kimura_scheme = self.kimura_scheme.unwrap_or_default();
        cfg.kimura_threshold = self.kimura_threshold.unwrap_or(DEFAULT_KIMURA_THRESHOLD);
        cfg.quadratic_threshold = self.quadratic_threshold.unwrap_or(DEFAULT_QUADRATIC_THRESHOLD);
        cfg.validate().map_err(|e| CliError::validation("scheme", e))?;
        Ok(cfg)
    }

    pub fn to_2d(&self) -> Result<SchemeConfig2D> {
        for (f, v) in [
            ("scheme.kimura_scheme", self.kimura_scheme.is_some()),
            ("scheme.kimura_threshold", self.kimura_threshold.is_some()),
            ("scheme.quadratic_threshold", self.quadratic_threshold.is_some()),
        ] {
            if v {
                return Err(CliError::validation(f, "only applies to 1D models"));
            }
        }
        let cfg = SchemeConfig2D {
            dt: self.dt,
            t_final: self.t_final,
            snapshot_times: self.resolved_times()?,
        };
        cfg.validate().map_err(|e| CliError::validation("scheme", e))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum InitialConfig {
    Dirac { position: f64 },
    Uniform,
    /// Draws from the stationary density (1D, both ends transverse).
    Stationary,
    Point { x: f64, y: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRequest {
    /// 1D: W¹ to the stationary density. 2D: W¹ of the x-marginal to the
    /// invariant density of the edge `y = 0`.
    W1ToDensity,
    /// 1D: W¹ to a point mass.
    W1ToDirac { target: f64 },
    /// 2D: `E(1 - X - Y)` at every step.
    MeanDistanceToDiagonal,
    /// 1D positions, or the 2D x-marginal, at the listed times.
    Histogram {
        bins: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        range: Option<(f64, f64)>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Vec<f64>>,
    },
    /// 2D counts on `[0,1]²` at the listed times.
    #[serde(rename = "histogram_2d")]
    Histogram2d {
        bins: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Vec<f64>>,
    },
}

impl MetricRequest {
    /// File stem for the artifacts of this request.
    pub fn name(&self) -> String {
        match self {
            MetricRequest::W1ToDensity => "w1_to_density".into(),
            MetricRequest::W1ToDirac { target } => format!("w1_to_dirac_{target}"),
            MetricRequest::MeanDistanceToDiagonal => "mean_distance_to_diagonal".into(),
            MetricRequest::Histogram { .. } => "histogram".into(),
            MetricRequest::Histogram2d { .. } => "histogram_2d".into(),
        }
    }

    pub fn is_series(&self) -> bool {
        matches!(
            self,
            MetricRequest::W1ToDensity
                | MetricRequest::W1ToDirac { .. }
                | MetricRequest::MeanDistanceToDiagonal
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub n_particles: usize,
    /// Overridden by `--out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_window: Option<(f64, f64)>,
    #[serde(default = "yes")]
    pub write_snapshots: bool,
    /// Reservoir-subsample snapshot files to at most this many rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_cap: Option<usize>,
    pub model: ModelConfig,
    pub scheme: SchemeSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<InitialConfig>,
    #[serde(default)]
    pub metrics: Vec<MetricRequest>,
}

fn yes() -> bool {
    true
}

/// The scheme after defaults are filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ResolvedScheme {
    OneD(SchemeConfig1D),
    TwoD(SchemeConfig2D),
}

impl ResolvedScheme {
    pub fn t_final(&self) -> f64 {
        match self {
            ResolvedScheme::OneD(c) => c.t_final,
            ResolvedScheme::TwoD(c) => c.t_final,
        }
    }

    pub fn snapshot_times(&self) -> &[f64] {
        match self {
            ResolvedScheme::OneD(c) => &c.snapshot_times,
            ResolvedScheme::TwoD(c) => &c.snapshot_times,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolvedModel {
    #[serde(rename = "operator_1d")]
    Operator1D(OperatorSpec1D),
    Triangle(TriangleSpec),
}

/// Everything that changes the numbers a run produces, with defaults
/// resolved. Its hash is the config hash.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolvedConfig {
    pub seed: u64,
    pub n_particles: usize,
    pub model: ResolvedModel,
    pub scheme: ResolvedScheme,
    pub initial: InitialConfig,
    pub metrics: Vec<MetricRequest>,
    pub rate_window: (f64, f64),
    pub write_snapshots: bool,
    pub snapshot_cap: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::validation("config", e.message()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CliError::validation("config", e))
    }

    pub fn resolve(&self) -> Result<ResolvedConfig> {
        if self.n_particles == 0 {
            return Err(CliError::validation("n_particles", "must be at least 1"));
        }
        self.model.validate()?;
        let (model, scheme) = match &self.model {
            ModelConfig::Triangle(t) => (ResolvedModel::Triangle(*t), ResolvedScheme::TwoD(self.scheme.to_2d()?)),
            m => {
                let op = m.operator().expect("1D model");
                MixedModel::from_operator(&op).map_err(|e| CliError::validation("model", e))?;
                (ResolvedModel::Operator1D(op), ResolvedScheme::OneD(self.scheme.to_1d()?))
            }
        };
        let is_2d = self.model.is_2d();
        let t_final = scheme.t_final();
        let times = scheme.snapshot_times().to_vec();

        let initial = match (&self.initial, is_2d) {
            (Some(i), _) => i.clone(),
            (None, false) => InitialConfig::Dirac { position: 0.5 },
            (None, true) => InitialConfig::Point { x: 0.25, y: 0.25 },
        };
        match (&initial, is_2d) {
            (InitialConfig::Dirac { position }, false) => {
                if !(0.0..=1.0).contains(position) {
                    return Err(CliError::validation(
                        "initial.position",
                        format!("must lie in [0, 1], got {position}"),
                    ));
                }
            }
            (InitialConfig::Uniform, false) => {}
            (InitialConfig::Stationary, false) => {
                self.require_density("initial.law")?;
            }
            (InitialConfig::Point { x, y }, true) => {
                if !TriangleState::new(*x, *y).in_triangle() {
                    return Err(CliError::validation(
                        "initial",
                        format!("({x}, {y}) is outside the triangle"),
                    ));
                }
            }
            (other, _) => {
                return Err(CliError::validation(
                    "initial.law",
                    format!("{other:?} is not available for a {} model", if is_2d { "2D" } else { "1D" }),
                ))
            }
        }

        let mut names = std::collections::HashSet::new();
        for (i, m) in self.metrics.iter().enumerate() {
            let field = format!("metrics[{i}]");
            if !names.insert(m.name()) {
                return Err(CliError::validation(field, format!("duplicate metric {}", m.name())));
            }
            let wrong_dim = |d: &str| Err(CliError::validation(format!("{field}.kind"), format!("only for {d} models")));
            match m {
                MetricRequest::W1ToDensity if !is_2d => self.require_density(&format!("{field}.kind"))?,
                MetricRequest::W1ToDensity => {}
                MetricRequest::W1ToDirac { target } => {
                    if is_2d {
                        return wrong_dim("1D");
                    }
                    if !(0.0..=1.0).contains(target) {
                        return Err(CliError::validation(
                            format!("{field}.target"),
                            format!("must lie in [0, 1], got {target}"),
                        ));
                    }
                }
                MetricRequest::MeanDistanceToDiagonal if !is_2d => return wrong_dim("2D"),
                MetricRequest::MeanDistanceToDiagonal => {}
                MetricRequest::Histogram { bins, range, at } => {
                    check_bins(&field, *bins)?;
                    if let Some((lo, hi)) = range {
                        if !(lo < hi) {
                            return Err(CliError::validation(format!("{field}.range"), format!("need lo < hi, got [{lo}, {hi}]")));
                        }
                    }
                    check_times(&field, at.as_deref(), &times)?;
                }
                MetricRequest::Histogram2d { bins, at } => {
                    if !is_2d {
                        return wrong_dim("2D");
                    }
                    check_bins(&field, *bins)?;
                    check_times(&field, at.as_deref(), &times)?;
                }
            }
        }

        let rate_window = self.rate_window.unwrap_or((t_final / 4.0, t_final));
        if !(rate_window.0 < rate_window.1) || !rate_window.0.is_finite() || !rate_window.1.is_finite() {
            return Err(CliError::validation(
                "rate_window",
                format!("need t_min < t_max, got {rate_window:?}"),
            ));
        }
        if self.snapshot_cap == Some(0) {
            return Err(CliError::validation("snapshot_cap", "must be at least 1"));
        }
        Ok(ResolvedConfig {
            seed: self.seed,
            n_particles: self.n_particles,
            model,
            scheme,
            initial,
            metrics: self.metrics.clone(),
            rate_window,
            write_snapshots: self.write_snapshots,
            snapshot_cap: self.snapshot_cap,
        })
    }

    fn require_density(&self, field: &str) -> Result<()> {
        let op = self.model.operator().expect("1D model");
        for end in [End::Left, End::Right] {
            if !classify_endpoint(&op, end).kind.is_transverse() {
                return Err(CliError::validation(
                    field,
                    format!("the {end:?} endpoint is not transverse, so there is no stationary density"),
                ));
            }
        }
        Ok(())
    }
}

fn check_bins(field: &str, bins: usize) -> Result<()> {
    if bins == 0 {
        return Err(CliError::validation(format!("{field}.bins"), "must be at least 1"));
    }
    Ok(())
}

fn check_times(field: &str, at: Option<&[f64]>, times: &[f64]) -> Result<()> {
    for t in at.unwrap_or(&[]) {
        if !times.iter().any(|s| (s - t).abs() <= 1e-12 * t.abs().max(1.0)) {
            return Err(CliError::validation(
                format!("{field}.at"),
                format!("time {t} is not a snapshot time"),
            ));
        }
    }
    Ok(())
}

impl ResolvedConfig {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn operator(&self) -> Option<&OperatorSpec1D> {
        match &self.model {
            ResolvedModel::Operator1D(s) => Some(s),
            ResolvedModel::Triangle(_) => None,
        }
    }

    /// Stationary density and its quantile table, for 1D models that have one.
    pub fn density(&self) -> Result<Option<(DensityProfile, CdfTable)>> {
        let Some(op) = self.operator() else { return Ok(None) };
        let both = [End::Left, End::Right]
            .iter()
            .all(|&e| classify_endpoint(op, e).kind.is_transverse());
        if !both {
            return Ok(None);
        }
        let profile = stationary_density(op)?;
        let table = profile.cdf_table(DEFAULT_CDF_GRID)?;
        Ok(Some((profile, table)))
    }
}
