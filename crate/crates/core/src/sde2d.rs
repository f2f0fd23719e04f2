//! Euler scheme for the three-type model on the triangle
//! `T = {x >= 0, y >= 0, x + y <= 1}`.
//!
//! Vector fields `φ1 = (x-1, y)`, `φ2 = (x, y-1)`, `φ3 = (1, -1)`;
//!
//! ```text
//! dX = (γ12 (y-x) φ3 + γ23 (y-1) φ2 + γ13 (x-1) φ1) dt
//!      + sqrt(2γ13 x) φ1 dW1 + sqrt(2γ23 y) φ2 dW2 + sqrt(2γ12 x y) φ3 dW3
//! ```
//!
//! After each raw update, negative coordinates are cut to 0, and then an
//! overshoot of the diagonal is pulled back by the factor
//! `(x_prev + y_prev) / (x + y)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::operator::TriangleSpec;
use crate::rng::ParticleStream;
use crate::sde1d::{snapshot_steps, validate_times, NoiseMode, SimError, CHUNK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangleState {
    pub x: f64,
    pub y: f64,
}

impl TriangleState {
    pub fn new(x: f64, y: f64) -> Self {
        TriangleState { x, y }
    }

    pub fn in_triangle(&self) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.y <= 1.0
    }

    /// `V = 1 - x - y`, the scaled distance to the diagonal.
    pub fn distance_to_diagonal(&self) -> f64 {
        1.0 - self.x - self.y
    }
}

fn fields(s: TriangleState) -> [[f64; 2]; 3] {
    [[s.x - 1.0, s.y], [s.x, s.y - 1.0], [1.0, -1.0]]
}

pub fn drift_2d(s: TriangleState, tri: TriangleSpec) -> [f64; 2] {
    let [p1, p2, p3] = fields(s);
    let w1 = tri.gamma13() * (s.x - 1.0);
    let w2 = tri.gamma23() * (s.y - 1.0);
    let w3 = tri.gamma12() * (s.y - s.x);
    [
        w1 * p1[0] + w2 * p2[0] + w3 * p3[0],
        w1 * p1[1] + w2 * p2[1] + w3 * p3[1],
    ]
}

/// Scalar noise amplitudes multiplying `φ1, φ2, φ3`.
pub fn noise_amplitudes(s: TriangleState, tri: TriangleSpec) -> [f64; 3] {
    [
        (2.0 * tri.gamma13() * s.x.max(0.0)).sqrt(),
        (2.0 * tri.gamma23() * s.y.max(0.0)).sqrt(),
        (2.0 * tri.gamma12() * (s.x * s.y).max(0.0)).sqrt(),
    ]
}

/// Noise columns `amplitude_i * φ_i`.
pub fn noise_columns(s: TriangleState, tri: TriangleSpec) -> [[f64; 2]; 3] {
    let amp = noise_amplitudes(s, tri);
    let phi = fields(s);
    [0, 1, 2].map(|i| [amp[i] * phi[i][0], amp[i] * phi[i][1]])
}

/// Generator applied to a function given by its gradient and Hessian at `s`.
pub fn apply_generator_2d(
    s: TriangleState,
    tri: TriangleSpec,
    grad: [f64; 2],
    hess: [[f64; 2]; 2],
) -> f64 {
    let d = drift_2d(s, tri);
    let mut second = 0.0;
    for c in noise_columns(s, tri) {
        second += c[0] * c[0] * hess[0][0] + 2.0 * c[0] * c[1] * hess[0][1] + c[1] * c[1] * hess[1][1];
    }
    d[0] * grad[0] + d[1] * grad[1] + 0.5 * second
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounters2D {
    pub cutoff_x: u64,
    pub cutoff_y: u64,
    pub diagonal_rescales: u64,
}

impl BoundaryCounters2D {
    fn merge(&mut self, o: &BoundaryCounters2D) {
        self.cutoff_x += o.cutoff_x;
        self.cutoff_y += o.cutoff_y;
        self.diagonal_rescales += o.diagonal_rescales;
    }
}

/// Boundary handling on a raw update, given the pre-step state.
pub fn project_to_triangle(
    prev: TriangleState,
    raw: TriangleState,
    counters: &mut BoundaryCounters2D,
) -> TriangleState {
    let mut x = raw.x;
    let mut y = raw.y;
    if x < 0.0 {
        x = 0.0;
        counters.cutoff_x += 1;
    }
    if y < 0.0 {
        y = 0.0;
        counters.cutoff_y += 1;
    }
    let sum = x + y;
    if sum > 1.0 {
        let k = (prev.x + prev.y) / sum;
        x *= k;
        y *= k;
        counters.diagonal_rescales += 1;
        // guard against a last-ulp excursion
        if x + y > 1.0 {
            y = 1.0 - x;
        }
    }
    TriangleState { x, y }
}

/// One Euler step; `z` are three standard normal draws.
pub fn step_euler_2d(
    s: TriangleState,
    tri: TriangleSpec,
    dt: f64,
    z: [f64; 3],
    counters: &mut BoundaryCounters2D,
) -> TriangleState {
    let d = drift_2d(s, tri);
    let cols = noise_columns(s, tri);
    let sq = dt.sqrt();
    let mut x = s.x + d[0] * dt;
    let mut y = s.y + d[1] * dt;
    for (c, zi) in cols.iter().zip(z) {
        x += c[0] * sq * zi;
        y += c[1] * sq * zi;
    }
    project_to_triangle(s, TriangleState { x, y }, counters)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SchemeConfig2D {
    pub dt: f64,
    pub t_final: f64,
    pub snapshot_times: Vec<f64>,
}

impl SchemeConfig2D {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        validate_times(self.t_final, &self.snapshot_times)
    }

    pub fn n_steps(&self) -> u64 {
        (self.t_final / self.dt).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Snapshot2D {
    pub time: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Simulation2D {
    pub snapshots: Vec<Snapshot2D>,
    /// `(t, E(1 - X - Y))` at every step, including `t = 0`.
    pub mean_distance: Vec<(f64, f64)>,
    pub counters: BoundaryCounters2D,
}

struct Chunk2D {
    snaps: Vec<(Vec<f64>, Vec<f64>)>,
    v_sums: Vec<f64>,
    counters: BoundaryCounters2D,
}

pub fn simulate_ensemble_2d(
    tri: TriangleSpec,
    cfg: &SchemeConfig2D,
    n: usize,
    seed: u64,
    s0: TriangleState,
) -> Result<Simulation2D, SimError> {
    simulate_ensemble_2d_with(tri, cfg, n, seed, s0, NoiseMode::Gaussian)
}

pub fn simulate_ensemble_2d_with(
    tri: TriangleSpec,
    cfg: &SchemeConfig2D,
    n: usize,
    seed: u64,
    s0: TriangleState,
    noise: NoiseMode,
) -> Result<Simulation2D, SimError> {
    cfg.validate()?;
    if !s0.in_triangle() {
        return Err(SimError::Config(format!(
            "initial state ({}, {}) outside the triangle",
            s0.x, s0.y
        )));
    }
    if n == 0 {
        return Err(SimError::Config("need at least one particle".into()));
    }
    let n_steps = cfg.n_steps();
    let snaps = snapshot_steps(cfg.dt, &cfg.snapshot_times);

    let chunks: Vec<Chunk2D> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut out = Chunk2D {
                snaps: vec![(Vec::with_capacity(hi - lo), Vec::with_capacity(hi - lo)); snaps.len()],
                v_sums: vec![0.0; n_steps as usize + 1],
                counters: BoundaryCounters2D::default(),
            };
            for p in lo..hi {
                let mut stream = ParticleStream::new(seed, p as u64);
                let mut s = s0;
                let mut next_snap = 0;
                for step in 0..=n_steps {
                    out.v_sums[step as usize] += s.distance_to_diagonal();
                    while next_snap < snaps.len() && snaps[next_snap] == step {
                        out.snaps[next_snap].0.push(s.x);
                        out.snaps[next_snap].1.push(s.y);
                        next_snap += 1;
                    }
                    if step == n_steps {
                        break;
                    }
                    let z = match noise {
                        NoiseMode::Gaussian => [stream.normal(), stream.normal(), stream.normal()],
                        NoiseMode::Zero => [0.0; 3],
                    };
                    s = step_euler_2d(s, tri, cfg.dt, z, &mut out.counters);
                }
            }
            out
        })
        .collect();

    let mut counters = BoundaryCounters2D::default();
    let mut snapshots: Vec<Snapshot2D> = snaps
        .iter()
        .map(|&k| Snapshot2D {
            time: k as f64 * cfg.dt,
            x: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
        })
        .collect();
    for ch in &chunks {
        counters.merge(&ch.counters);
    }
    let mean_distance = (0..=n_steps as usize)
        .map(|k| {
            let parts: Vec<f64> = chunks.iter().map(|c| c.v_sums[k]).collect();
            (k as f64 * cfg.dt, pairwise_sum(&parts) / n as f64)
        })
        .collect();
    for ch in chunks {
        for (snap, (xs, ys)) in snapshots.iter_mut().zip(ch.snaps) {
            snap.x.extend(xs);
            snap.y.extend(ys);
        }
    }
    Ok(Simulation2D {
        snapshots,
        mean_distance,
        counters,
    })
}

pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}
