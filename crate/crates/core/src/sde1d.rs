//! Regime-switching particle scheme for
//! `dX = (c0 (1-X)² - c1 X (1-X)) dt + sqrt(2 X (1-X)²) dW` on `[0, 1]`.
//!
//! Three regimes, chosen from the current position:
//!
//! * `[0, kimura_threshold)`: implicit step in the diffusion coefficient,
//!   solved in closed form for `sqrt(X_{n+1})`; keeps particles positive.
//! * `[kimura_threshold, quadratic_threshold]`: plain Euler–Maruyama.
//! * `(quadratic_threshold, 1)`: Euler–Maruyama on `Y = -ln(1 - X)`.
//!
//! `x = 1` is absorbing. Noise arguments are standard normal draws; the
//! `sqrt(dt)` scaling is applied inside the step functions.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operator::{Degeneracy, OperatorSpec1D};
use crate::poly::Poly;
use crate::rng::ParticleStream;

/// Particles per work unit. Fixed so that reductions do not depend on the
/// number of worker threads.
pub const CHUNK: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StepError {
    #[error("implicit Kimura step needs x + drift*dt >= 0, got {value:e} at x = {x:e}")]
    NegativeDiscriminantGuard { x: f64, value: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("particle {particle} at t = {time}: {source}")]
    Step {
        particle: u64,
        time: f64,
        #[source]
        source: StepError,
    },
    #[error("invalid scheme configuration: {0}")]
    Config(String),
    #[error("operator is not in the mixed Kimura/quadratic family: {0}")]
    NotMixedFamily(String),
}

/// The two-parameter family with a Kimura end at 0 and a quadratic end at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedModel {
    pub c0: f64,
    pub c1: f64,
}

impl MixedModel {
    pub fn new(c0: f64, c1: f64) -> Self {
        MixedModel { c0, c1 }
    }

    /// Recovers `(c0, c1)` from `a = 1`, `b = c0 - (c0 + c1) x`, `m = (1, 2)`.
    pub fn from_operator(spec: &OperatorSpec1D) -> Result<Self, SimError> {
        if spec.a().coeffs() != [1.0] {
            return Err(SimError::NotMixedFamily("a must be the constant 1".into()));
        }
        if spec.m0() != Degeneracy::Kimura || spec.m1() != Degeneracy::Quadratic {
            return Err(SimError::NotMixedFamily("need m0 = 1 and m1 = 2".into()));
        }
        if spec.b().degree() > 1 {
            return Err(SimError::NotMixedFamily("b must be affine".into()));
        }
        let b = spec.b().coeffs();
        let c0 = b.first().copied().unwrap_or(0.0);
        let slope = b.get(1).copied().unwrap_or(0.0);
        Ok(MixedModel { c0, c1: -(slope + c0) })
    }

    pub fn to_operator(&self) -> OperatorSpec1D {
        OperatorSpec1D::new(
            Poly::constant(1.0),
            Poly::new(vec![self.c0, -(self.c0 + self.c1)]),
            Degeneracy::Kimura,
            Degeneracy::Quadratic,
        )
        .expect("a = 1")
    }

    pub fn drift(&self, x: f64) -> f64 {
        drift(x, self.c0, self.c1)
    }
}

#[inline]
fn drift(x: f64, c0: f64, c1: f64) -> f64 {
    let omx = 1.0 - x;
    c0 * omx * omx - c1 * x * omx
}

/// Explicit Euler–Maruyama step.
#[inline]
pub fn step_interior(x: f64, dt: f64, c0: f64, c1: f64, z: f64) -> f64 {
    let omx = 1.0 - x;
    x + drift(x, c0, c1) * dt + (2.0 * x).sqrt() * omx * dt.sqrt() * z
}

/// Implicit-in-diffusion step near the Kimura end. Solves
/// `s² - sqrt(2dt)(1-x) z s - (x + drift dt) = 0` for its positive root and
/// returns `s²`.
#[inline]
pub fn step_kimura_implicit(x: f64, dt: f64, c0: f64, c1: f64, z: f64) -> Result<f64, StepError> {
    let q = x + drift(x, c0, c1) * dt;
    if q < 0.0 {
        return Err(StepError::NegativeDiscriminantGuard { x, value: q });
    }
    let k = (2.0 * dt).sqrt() * (1.0 - x) * z;
    let s = 0.5 * (k + (k * k + 4.0 * q).sqrt());
    Ok(s * s)
}

/// Drift-implicit step on `y = sqrt(x)`, for which
/// `dy = ((c0 - 1/2)(1-x)² / (2y) - c1 y (1-x)/2) dt + (1-x)/sqrt(2) dW`.
/// The singular term is taken at the new point, the rest at the old one,
/// with `1 - x` frozen over the step. Needs `c0 >= 1/2`; at `c0 = 1/2` the
/// step reflects at 0.
///
/// Unlike [`step_kimura_implicit`], this step has no `O(1)` drift bias: the
/// implicit diffusion there acts like an extra drift `(1-x)²`.
#[inline]
pub fn step_kimura_root(x: f64, dt: f64, c0: f64, c1: f64, z: f64) -> f64 {
    let omx = 1.0 - x;
    let y = x.max(0.0).sqrt();
    let m = y * (1.0 - 0.5 * c1 * omx * dt) + omx * (0.5 * dt).sqrt() * z;
    let alpha = 0.5 * (c0 - 0.5) * omx * omx;
    let root = if alpha > 0.0 {
        0.5 * (m + (m * m + 4.0 * alpha * dt).sqrt())
    } else {
        m.abs()
    };
    root * root
}

/// Euler–Maruyama step in `y = -ln(1 - x)`, with Itô drift
/// `c0 (1-x) - c1 x + x` and diffusion `sqrt(2x)`.
#[inline]
pub fn step_quadratic_log(x: f64, dt: f64, c0: f64, c1: f64, z: f64) -> f64 {
    if x >= 1.0 {
        return 1.0;
    }
    let y = -(-x).ln_1p();
    let y_next = y + (c0 * (1.0 - x) - c1 * x + x) * dt + (2.0 * x).sqrt() * dt.sqrt() * z;
    -(-y_next).exp_m1()
}

/// Which step to use below `kimura_threshold`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KimuraScheme {
    /// Diffusion evaluated at the new point; see [`step_kimura_implicit`].
    #[default]
    Implicit,
    /// Drift-implicit step on `sqrt(X)`; see [`step_kimura_root`].
    Root,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SchemeConfig1D {
    pub dt: f64,
    #[serde(default)]
    pub kimura_scheme: KimuraScheme,
    #[serde(default = "default_kimura_threshold")]
    pub kimura_threshold: f64,
    #[serde(default = "default_quadratic_threshold")]
    pub quadratic_threshold: f64,
    pub t_final: f64,
    pub snapshot_times: Vec<f64>,
}

fn default_kimura_threshold() -> f64 {
    0.01
}

fn default_quadratic_threshold() -> f64 {
    0.99
}

impl SchemeConfig1D {
    pub fn new(dt: f64, t_final: f64, snapshot_times: Vec<f64>) -> Self {
        SchemeConfig1D {
            dt,
            kimura_scheme: KimuraScheme::Implicit,
            kimura_threshold: default_kimura_threshold(),
            quadratic_threshold: default_quadratic_threshold(),
            t_final,
            snapshot_times,
        }
    }

    /// Snapshots every `every` time units from 0 through `t_final`.
    pub fn with_uniform_snapshots(dt: f64, t_final: f64, every: f64) -> Self {
        let n = (t_final / every).round() as usize;
        let times = (0..=n).map(|k| k as f64 * every).collect();
        SchemeConfig1D::new(dt, t_final, times)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(0.0 < self.kimura_threshold
            && self.kimura_threshold < self.quadratic_threshold
            && self.quadratic_threshold < 1.0)
        {
            return Err(SimError::Config(format!(
                "need 0 < kimura_threshold < quadratic_threshold < 1, got {} and {}",
                self.kimura_threshold, self.quadratic_threshold
            )));
        }
        validate_times(self.t_final, &self.snapshot_times)
    }

    pub fn n_steps(&self) -> u64 {
        (self.t_final / self.dt).round() as u64
    }

    pub fn regime(&self, x: f64) -> Regime {
        if x >= 1.0 {
            Regime::Absorbed
        } else if x < self.kimura_threshold {
            Regime::KimuraImplicit
        } else if x > self.quadratic_threshold {
            Regime::QuadraticLog
        } else {
            Regime::Interior
        }
    }
}

pub(crate) fn validate_times(t_final: f64, times: &[f64]) -> Result<(), SimError> {
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return Err(SimError::Config(format!("t_final must be >= 0, got {t_final}")));
    }
    if times.windows(2).any(|w| w[0] > w[1]) {
        return Err(SimError::Config("snapshot_times must be sorted".into()));
    }
    // Both the horizon and the snapshots are rounded to the step grid the
    // same way, so `t <= t_final` keeps every snapshot reachable.
    if let Some(bad) = times
        .iter()
        .find(|&&t| !(t >= 0.0 && t <= t_final * (1.0 + 1e-12)))
    {
        return Err(SimError::Config(format!(
            "snapshot time {bad} outside [0, {t_final}]"
        )));
    }
    Ok(())
}

/// Step indices at which snapshots are taken.
pub(crate) fn snapshot_steps(dt: f64, times: &[f64]) -> Vec<u64> {
    times.iter().map(|t| (t / dt).round() as u64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    KimuraImplicit,
    Interior,
    QuadraticLog,
    Absorbed,
}

/// Counts of boundary events over a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCounters {
    pub implicit_steps: u64,
    pub interior_steps: u64,
    pub log_steps: u64,
    pub clamped_below_zero: u64,
    pub clamped_above_one: u64,
    pub absorbed_particles: u64,
}

impl StepCounters {
    fn merge(&mut self, o: &StepCounters) {
        self.implicit_steps += o.implicit_steps;
        self.interior_steps += o.interior_steps;
        self.log_steps += o.log_steps;
        self.clamped_below_zero += o.clamped_below_zero;
        self.clamped_above_one += o.clamped_above_one;
        self.absorbed_particles += o.absorbed_particles;
    }
}

/// One step with regime dispatch. Results outside `[0, 1]` are clamped to
/// the nearest threshold; only the log step may land exactly on 1.
pub fn advance(
    x: f64,
    model: MixedModel,
    cfg: &SchemeConfig1D,
    z: f64,
    counters: &mut StepCounters,
) -> Result<f64, StepError> {
    let (c0, c1, dt) = (model.c0, model.c1, cfg.dt);
    let (next, may_hit_one) = match cfg.regime(x) {
        Regime::Absorbed => return Ok(1.0),
        Regime::KimuraImplicit => {
            counters.implicit_steps += 1;
            let next = match cfg.kimura_scheme {
                KimuraScheme::Implicit => step_kimura_implicit(x, dt, c0, c1, z)?,
                KimuraScheme::Root => step_kimura_root(x, dt, c0, c1, z),
            };
            (next, false)
        }
        Regime::Interior => {
            counters.interior_steps += 1;
            (step_interior(x, dt, c0, c1, z), false)
        }
        Regime::QuadraticLog => {
            counters.log_steps += 1;
            (step_quadratic_log(x, dt, c0, c1, z), true)
        }
    };
    Ok(if next < 0.0 {
        counters.clamped_below_zero += 1;
        cfg.kimura_threshold
    } else if next > 1.0 || (next == 1.0 && !may_hit_one) {
        counters.clamped_above_one += 1;
        cfg.quadratic_threshold
    } else {
        next
    })
}

/// Initial law of the particles.
#[derive(Clone)]
pub enum InitialLaw {
    Dirac(f64),
    /// Draw `u ~ U(0,1)` per particle and map it through a quantile function.
    Quantile(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for InitialLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitialLaw::Dirac(x) => write!(f, "Dirac({x})"),
            InitialLaw::Quantile(_) => write!(f, "Quantile(..)"),
        }
    }
}

/// Auxiliary stream lane for initial-condition draws.
pub(crate) const INIT_LANE: u64 = 1;

impl InitialLaw {
    fn draw(&self, seed: u64, particle: u64) -> f64 {
        match self {
            InitialLaw::Dirac(x) => *x,
            InitialLaw::Quantile(q) => {
                let mut s = ParticleStream::auxiliary(seed, INIT_LANE, particle);
                q(s.uniform())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    Gaussian,
    /// All draws are zero: the scheme integrates the drift ODE.
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParticleEnsemble {
    pub positions: Vec<f64>,
    pub time: f64,
    pub seed: u64,
    pub particle_index_offset: u64,
}

#[derive(Debug, Clone)]
pub struct Simulation1D {
    pub snapshots: Vec<ParticleEnsemble>,
    pub counters: StepCounters,
}

pub fn simulate_ensemble_1d(
    spec: &OperatorSpec1D,
    cfg: &SchemeConfig1D,
    n: usize,
    seed: u64,
    init: &InitialLaw,
) -> Result<Simulation1D, SimError> {
    simulate_ensemble_1d_with(spec, cfg, n, seed, 0, init, NoiseMode::Gaussian)
}

/// Full-control variant: `offset` shifts the global particle indices (and so
/// the streams), `noise` can switch the Brownian input off.
pub fn simulate_ensemble_1d_with(
    spec: &OperatorSpec1D,
    cfg: &SchemeConfig1D,
    n: usize,
    seed: u64,
    offset: u64,
    init: &InitialLaw,
    noise: NoiseMode,
) -> Result<Simulation1D, SimError> {
    cfg.validate()?;
    let model = MixedModel::from_operator(spec)?;
    if cfg.kimura_scheme == KimuraScheme::Root && model.c0 < 0.5 {
        return Err(SimError::Config(format!(
            "the root Kimura step needs c0 >= 1/2, got {}",
            model.c0
        )));
    }
    let n_steps = cfg.n_steps();
    let snaps = snapshot_steps(cfg.dt, &cfg.snapshot_times);

    let chunks: Vec<(Vec<Vec<f64>>, StepCounters)> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut out = vec![Vec::with_capacity(hi - lo); snaps.len()];
            let mut counters = StepCounters::default();
            for p in lo..hi {
                let gid = offset + p as u64;
                let mut x = init.draw(seed, gid);
                if !(0.0..=1.0).contains(&x) {
                    return Err(SimError::Config(format!(
                        "initial position {x} outside [0, 1]"
                    )));
                }
                let mut stream = ParticleStream::new(seed, gid);
                let mut next_snap = 0;
                for step in 0..=n_steps {
                    while next_snap < snaps.len() && snaps[next_snap] == step {
                        out[next_snap].push(x);
                        next_snap += 1;
                    }
                    if step == n_steps || next_snap == snaps.len() {
                        break;
                    }
                    if x >= 1.0 {
                        counters.absorbed_particles += 1;
                        for o in out.iter_mut().skip(next_snap) {
                            o.push(1.0);
                        }
                        break;
                    }
                    let z = match noise {
                        NoiseMode::Gaussian => stream.normal(),
                        NoiseMode::Zero => 0.0,
                    };
                    x = advance(x, model, cfg, z, &mut counters).map_err(|source| SimError::Step {
                        particle: gid,
                        time: step as f64 * cfg.dt,
                        source,
                    })?;
                }
            }
            Ok((out, counters))
        })
        .collect::<Result<_, SimError>>()?;

    let mut counters = StepCounters::default();
    let mut snapshots: Vec<ParticleEnsemble> = snaps
        .iter()
        .map(|&s| ParticleEnsemble {
            positions: Vec::with_capacity(n),
            time: s as f64 * cfg.dt,
            seed,
            particle_index_offset: offset,
        })
        .collect();
    for (cols, c) in chunks {
        counters.merge(&c);
        for (snap, col) in snapshots.iter_mut().zip(cols) {
            snap.positions.extend(col);
        }
    }
    Ok(Simulation1D {
        snapshots,
        counters,
    })
}
