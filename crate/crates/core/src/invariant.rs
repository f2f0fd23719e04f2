//! Scale functions, stationary (speed) densities, CDF/quantile tables and the
//! closed-form density on the diagonal edge of the triangle model.
//!
//! Everything is expressed in the original `x` coordinate. Writing
//! `b̃/ã = b / (a x (1-x))` and splitting off the endpoint poles,
//!
//! ```text
//! Φ(x) = ∫_{1/2}^x b̃/ã = r0 ln(2x) - r1 ln(2(1-x)) + G(x)
//! ```
//!
//! with `r0 = b(0)/a(0)`, `r1 = b(1)/a(1)` and `G` the integral of a function
//! that is smooth on the closed interval. The speed density is then
//! `m = e^Φ / ã = x^e0 (1-x)^e1 H(x)` with `e0 = r0 - m0`, `e1 = -r1 - m1`
//! and `H` smooth and positive.

use serde::Serialize;
use thiserror::Error;

use crate::operator::{Degeneracy, End, OperatorSpec1D, TriangleSpec};
use crate::poly::Poly;
use crate::quadrature::{integrate, QuadOptions, QuadratureError};

pub const DEFAULT_QUAD_TOL: f64 = 1e-10;
pub const DEFAULT_CDF_GRID: usize = 4096;
pub const MIN_CDF_GRID: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InvariantError {
    #[error("density is not integrable at the {end:?} endpoint (exponent {exponent} <= -1)")]
    NonIntegrable { end: End, exponent: f64 },
    #[error("scale function diverges toward the {end:?} endpoint (integrand exponent {exponent} <= -1)")]
    ScaleDivergent { end: End, exponent: f64 },
    #[error("point {0} must lie in the open interval (0, 1)")]
    OutsideInterior(f64),
    #[error("CDF grid needs at least {MIN_CDF_GRID} points, got {0}")]
    GridTooSmall(usize),
    #[error("quadrature failed: {0}")]
    Quadrature(#[from] QuadratureError),
}

/// The pole-free decomposition of `Φ = ∫_{1/2}^x b/(a ξ(1-ξ)) dξ`.
#[derive(Debug, Clone)]
struct LogDrift {
    r0: f64,
    r1: f64,
    /// `(b - a ℓ) / (x(1-x))` where `ℓ` interpolates `r0, r1` linearly.
    remainder: Poly,
    a: Poly,
    /// Exact antiderivative of `remainder / a` when `a` is constant.
    exact: Option<Poly>,
}

impl LogDrift {
    fn new(spec: &OperatorSpec1D) -> Self {
        let a = spec.a().clone();
        let r0 = spec.b_at(End::Left) / spec.a_at(End::Left);
        let r1 = spec.b_at(End::Right) / spec.a_at(End::Right);
        let linear = Poly::new(vec![r0, r1 - r0]);
        let numer = spec.b() - &(&a * &linear);
        // numer vanishes at 0 and 1; the discarded remainders are rounding.
        let (over_x, _) = numer.div_linear(0.0);
        let (over_x_xm1, _) = over_x.div_linear(1.0);
        let remainder = -&over_x_xm1;
        let exact = (a.degree() == 0).then(|| remainder.scale(1.0 / a.at_zero()).antiderivative());
        LogDrift {
            r0,
            r1,
            remainder,
            a,
            exact,
        }
    }

    /// `G(x) = ∫_{1/2}^x remainder / a`.
    fn smooth_part(&self, x: f64) -> f64 {
        if let Some(anti) = &self.exact {
            return anti.eval(x) - anti.eval(0.5);
        }
        if self.remainder.is_zero() {
            return 0.0;
        }
        let opts = QuadOptions {
            abs_tol: 1e-15,
            rel_tol: 1e-13,
            max_intervals: 200,
        };
        integrate(|t| self.remainder.eval(t) / self.a.eval(t), 0.5, x, opts)
            .map(|r| r.value)
            .expect("integrand is smooth on [0,1]")
    }

    fn phi(&self, x: f64) -> f64 {
        self.r0 * (2.0 * x).ln() - self.r1 * (2.0 * (1.0 - x)).ln() + self.smooth_part(x)
    }
}

/// Integrates `x^e0 (1-x)^e1 h(x)` over `[lo, hi] ⊂ [0, 1]`, substituting
/// `x = t^{1/(1+e)}` at an endpoint with exponent `e ∈ (-1, 0)`. The segment
/// must not touch both endpoints.
fn integrate_power_weighted<H: Fn(f64) -> f64>(
    e0: f64,
    e1: f64,
    h: H,
    lo: f64,
    hi: f64,
    opts: QuadOptions,
) -> Result<f64, QuadratureError> {
    debug_assert!(!(lo == 0.0 && hi == 1.0));
    if lo == 0.0 && e0 < 0.0 {
        let p = 1.0 / (1.0 + e0);
        let t_hi = hi.powf(1.0 + e0);
        return integrate(
            |t| {
                let x = t.powf(p);
                p * (1.0 - x).powf(e1) * h(x)
            },
            0.0,
            t_hi,
            opts,
        )
        .map(|r| r.value);
    }
    if hi == 1.0 && e1 < 0.0 {
        let q = 1.0 / (1.0 + e1);
        let t_hi = (1.0 - lo).powf(1.0 + e1);
        return integrate(
            |t| {
                let x = 1.0 - t.powf(q);
                q * x.powf(e0) * h(x)
            },
            0.0,
            t_hi,
            opts,
        )
        .map(|r| r.value);
    }
    integrate(|x| x.powf(e0) * (1.0 - x).powf(e1) * h(x), lo, hi, opts).map(|r| r.value)
}

fn integrate_unit_interval<H: Fn(f64) -> f64>(
    e0: f64,
    e1: f64,
    h: H,
    opts: QuadOptions,
) -> Result<f64, QuadratureError> {
    Ok(integrate_power_weighted(e0, e1, &h, 0.0, 0.5, opts)?
        + integrate_power_weighted(e0, e1, &h, 0.5, 1.0, opts)?)
}

/// Scale function `S(x) = ∫_{x_ref}^x exp(-Φ(η)) dη`, so that `ã S'' + b̃ S' = 0`.
pub fn scale_function(spec: &OperatorSpec1D, x: f64, x_ref: f64) -> Result<f64, InvariantError> {
    for p in [x, x_ref] {
        if !(p > 0.0 && p < 1.0) {
            return Err(InvariantError::OutsideInterior(p));
        }
    }
    let drift = LogDrift::new(spec);
    let r = integrate(
        |eta| (-drift.phi(eta)).exp(),
        x_ref,
        x,
        QuadOptions::rel(DEFAULT_QUAD_TOL),
    )?;
    Ok(r.value)
}

/// `Φ(x) = ∫_{1/2}^x b̃/ã`, the log of the integrating factor of `L`.
pub fn log_integrating_factor(spec: &OperatorSpec1D, x: f64) -> f64 {
    LogDrift::new(spec).phi(x)
}

/// Derivative of the scale function, `exp(-Φ(x))`.
pub fn scale_density(spec: &OperatorSpec1D, x: f64) -> f64 {
    (-LogDrift::new(spec).phi(x)).exp()
}

/// Scale function normalised to `S₀(0) = 0`, `S₀(1) = 1`. Exists exactly
/// when `exp(-Φ)` is integrable at both ends, i.e. `b(0)/a(0) < 1` and
/// `b(1)/a(1) > -1`; with two tangent endpoints `S₀(x)` is the probability
/// of absorption at 1 started from `x`.
#[derive(Debug, Clone)]
pub struct NormalizedScale {
    drift: LogDrift,
    total: f64,
}

impl NormalizedScale {
    pub fn new(spec: &OperatorSpec1D) -> Result<Self, InvariantError> {
        let drift = LogDrift::new(spec);
        // exp(-Φ) ~ x^{-r0} at 0 and (1-x)^{r1} at 1.
        let (f0, f1) = (-drift.r0, drift.r1);
        if f0 <= -1.0 {
            return Err(InvariantError::ScaleDivergent {
                end: End::Left,
                exponent: f0,
            });
        }
        if f1 <= -1.0 {
            return Err(InvariantError::ScaleDivergent {
                end: End::Right,
                exponent: f1,
            });
        }
        let total = integrate_unit_interval(
            f0,
            f1,
            |x| Self::smooth(&drift, x),
            QuadOptions::rel(DEFAULT_QUAD_TOL),
        )?;
        Ok(NormalizedScale { drift, total })
    }

    fn smooth(drift: &LogDrift, x: f64) -> f64 {
        2f64.powf(drift.r1 - drift.r0) * (-drift.smooth_part(x)).exp()
    }

    pub fn eval(&self, x: f64) -> Result<f64, InvariantError> {
        if x <= 0.0 {
            return Ok(0.0);
        }
        if x >= 1.0 {
            return Ok(1.0);
        }
        let (f0, f1) = (-self.drift.r0, self.drift.r1);
        let opts = QuadOptions::rel(DEFAULT_QUAD_TOL);
        let h = |t| Self::smooth(&self.drift, t);
        let partial = if x <= 0.5 {
            integrate_power_weighted(f0, f1, h, 0.0, x, opts)?
        } else {
            self.total - integrate_power_weighted(f0, f1, h, x, 1.0, opts)?
        };
        Ok((partial / self.total).clamp(0.0, 1.0))
    }
}

/// Normalised stationary density of a 1D operator with two transverse ends.
#[derive(Debug, Clone, Serialize)]
pub struct DensityProfile {
    #[serde(skip)]
    spec: OperatorSpec1D,
    #[serde(skip)]
    drift: LogDrift,
    pub left_exponent: f64,
    pub right_exponent: f64,
    pub z: f64,
    pub quadrature_tol: f64,
}

/// Analytic endpoint exponents `(e0, e1)` of the speed density.
pub fn endpoint_exponents(spec: &OperatorSpec1D) -> (f64, f64) {
    let r0 = spec.b_at(End::Left) / spec.a_at(End::Left);
    let r1 = spec.b_at(End::Right) / spec.a_at(End::Right);
    (
        r0 - f64::from(spec.m0().order()),
        -r1 - f64::from(spec.m1().order()),
    )
}

/// Stationary density `e^Φ / ã / Z` with `Z` from singularity-aware quadrature.
pub fn stationary_density(spec: &OperatorSpec1D) -> Result<DensityProfile, InvariantError> {
    stationary_density_with_tol(spec, DEFAULT_QUAD_TOL)
}

pub fn stationary_density_with_tol(
    spec: &OperatorSpec1D,
    quadrature_tol: f64,
) -> Result<DensityProfile, InvariantError> {
    let (e0, e1) = endpoint_exponents(spec);
    if e0 <= -1.0 {
        return Err(InvariantError::NonIntegrable {
            end: End::Left,
            exponent: e0,
        });
    }
    if e1 <= -1.0 {
        return Err(InvariantError::NonIntegrable {
            end: End::Right,
            exponent: e1,
        });
    }
    let mut profile = DensityProfile {
        spec: spec.clone(),
        drift: LogDrift::new(spec),
        left_exponent: e0,
        right_exponent: e1,
        z: 1.0,
        quadrature_tol,
    };
    profile.z = integrate_unit_interval(
        e0,
        e1,
        |x| profile.smooth_factor(x),
        QuadOptions::rel(quadrature_tol),
    )?;
    Ok(profile)
}

impl DensityProfile {
    pub fn spec(&self) -> &OperatorSpec1D {
        &self.spec
    }

    /// `H(x)` in `m(x) = x^e0 (1-x)^e1 H(x)`.
    fn smooth_factor(&self, x: f64) -> f64 {
        let d = &self.drift;
        2f64.powf(d.r0 - d.r1) * d.smooth_part(x).exp() / self.spec.a().eval(x)
    }

    /// Unnormalised speed density `e^Φ / ã`.
    pub fn unnormalized(&self, x: f64) -> f64 {
        x.powf(self.left_exponent) * (1.0 - x).powf(self.right_exponent) * self.smooth_factor(x)
    }

    /// Probability density (integrates to one).
    pub fn density(&self, x: f64) -> f64 {
        self.unnormalized(x) / self.z
    }

    /// `∫ g dμ` for a function `g` bounded on `[0, 1]`.
    pub fn expectation<G: Fn(f64) -> f64>(&self, g: G) -> Result<f64, InvariantError> {
        let v = integrate_unit_interval(
            self.left_exponent,
            self.right_exponent,
            |x| g(x) * self.smooth_factor(x),
            QuadOptions {
                abs_tol: 1e-15,
                rel_tol: self.quadrature_tol,
                max_intervals: 2000,
            },
        )?;
        Ok(v / self.z)
    }

    /// `∫ (ã f'' + b̃ f') dμ` for a polynomial test function `f`.
    pub fn stationarity_residual(&self, f: &Poly) -> Result<f64, InvariantError> {
        let lf = apply_generator(&self.spec, f);
        self.expectation(|x| lf.eval(x))
    }

    pub fn cdf_table(&self, grid_size: usize) -> Result<CdfTable, InvariantError> {
        CdfTable::build(self, grid_size)
    }
}

/// `L f = ã f'' + b̃ f'` as a polynomial.
pub fn apply_generator(spec: &OperatorSpec1D, f: &Poly) -> Poly {
    let (at, bt) = spec.coefficients_full();
    let d1 = f.derivative();
    &(&at * &d1.derivative()) + &(&bt * &d1)
}

/// `∫_0^1 L f · ρ dx` for an arbitrary candidate density `ρ`, used to show
/// that the residual distinguishes wrong densities.
pub fn residual_against_density<R: Fn(f64) -> f64>(
    spec: &OperatorSpec1D,
    density: R,
    f: &Poly,
) -> Result<f64, InvariantError> {
    let lf = apply_generator(spec, f);
    Ok(integrate(
        |x| lf.eval(x) * density(x),
        0.0,
        1.0,
        QuadOptions::rel(DEFAULT_QUAD_TOL),
    )?
    .value)
}

/// Monotone CDF/quantile pair tabulated on a cosine-spaced grid.
///
/// Interior panels use cubic Hermite interpolation with the exact density as
/// slope, limited to keep each panel monotone. A panel touching an endpoint
/// where the density blows up uses the local power law instead.
#[derive(Debug, Clone)]
pub struct CdfTable {
    xs: Vec<f64>,
    fs: Vec<f64>,
    slopes: Vec<f64>,
    left_power: Option<f64>,
    right_power: Option<f64>,
}

impl CdfTable {
    pub fn build(profile: &DensityProfile, grid_size: usize) -> Result<Self, InvariantError> {
        if grid_size < MIN_CDF_GRID {
            return Err(InvariantError::GridTooSmall(grid_size));
        }
        let n = grid_size - 1;
        let xs: Vec<f64> = (0..=n)
            .map(|i| {
                if i == 0 {
                    0.0
                } else if i == n {
                    1.0
                } else {
                    0.5 * (1.0 - (std::f64::consts::PI * i as f64 / n as f64).cos())
                }
            })
            .collect();
        let (e0, e1) = (profile.left_exponent, profile.right_exponent);
        let opts = QuadOptions {
            abs_tol: 1e-17,
            rel_tol: profile.quadrature_tol,
            max_intervals: 500,
        };
        let mut fs = Vec::with_capacity(xs.len());
        fs.push(0.0);
        let mut acc = 0.0;
        for w in xs.windows(2) {
            acc += integrate_power_weighted(e0, e1, |x| profile.smooth_factor(x), w[0], w[1], opts)?;
            fs.push(acc);
        }
        let total = acc;
        for f in fs.iter_mut() {
            *f /= total;
        }
        *fs.last_mut().expect("non-empty") = 1.0;
        let slopes = xs
            .iter()
            .map(|&x| {
                let d = profile.unnormalized(x) / total;
                if d.is_finite() {
                    d
                } else {
                    0.0
                }
            })
            .collect();
        Ok(CdfTable {
            xs,
            fs,
            slopes,
            left_power: (e0 < 0.0).then_some(1.0 + e0),
            right_power: (e1 < 0.0).then_some(1.0 + e1),
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.xs
    }

    pub fn grid_cdf(&self) -> &[f64] {
        &self.fs
    }

    fn last_panel(&self) -> usize {
        self.xs.len() - 2
    }

    /// Limited Hermite slopes for panel `i`.
    fn panel_slopes(&self, i: usize) -> (f64, f64, f64) {
        let h = self.xs[i + 1] - self.xs[i];
        let delta = (self.fs[i + 1] - self.fs[i]) / h;
        if delta <= 0.0 {
            return (h, 0.0, 0.0);
        }
        let (mut d0, mut d1) = (self.slopes[i], self.slopes[i + 1]);
        let (alpha, beta) = (d0 / delta, d1 / delta);
        let norm = alpha * alpha + beta * beta;
        if norm > 9.0 {
            let tau = 3.0 / norm.sqrt();
            d0 = tau * alpha * delta;
            d1 = tau * beta * delta;
        }
        (h, d0, d1)
    }

    fn hermite(&self, i: usize, x: f64) -> f64 {
        let (h, d0, d1) = self.panel_slopes(i);
        let t = (x - self.xs[i]) / h;
        let (t2, t3) = (t * t, t * t * t);
        let (f0, f1) = (self.fs[i], self.fs[i + 1]);
        (2.0 * t3 - 3.0 * t2 + 1.0) * f0
            + (t3 - 2.0 * t2 + t) * h * d0
            + (-2.0 * t3 + 3.0 * t2) * f1
            + (t3 - t2) * h * d1
    }

    fn panel_of_x(&self, x: f64) -> usize {
        let k = self.xs.partition_point(|&g| g <= x);
        k.saturating_sub(1).min(self.last_panel())
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        if x >= 1.0 {
            return 1.0;
        }
        let i = self.panel_of_x(x);
        if i == 0 {
            if let Some(p) = self.left_power {
                return self.fs[1] * (x / self.xs[1]).powf(p);
            }
        }
        if i == self.last_panel() {
            if let Some(p) = self.right_power {
                let x_lo = self.xs[i];
                return 1.0 - (1.0 - self.fs[i]) * ((1.0 - x) / (1.0 - x_lo)).powf(p);
            }
        }
        self.hermite(i, x).clamp(self.fs[i], self.fs[i + 1])
    }

    /// Generalised inverse `inf{x : F(x) >= u}`.
    pub fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        let k = self.fs.partition_point(|&f| f < u);
        let i = k.saturating_sub(1).min(self.last_panel());
        if i == 0 {
            if let Some(p) = self.left_power {
                return self.xs[1] * (u / self.fs[1]).powf(1.0 / p);
            }
        }
        if i == self.last_panel() {
            if let Some(p) = self.right_power {
                let x_lo = self.xs[i];
                return 1.0 - (1.0 - x_lo) * ((1.0 - u) / (1.0 - self.fs[i])).powf(1.0 / p);
            }
        }
        let (mut lo, mut hi) = (self.xs[i], self.xs[i + 1]);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.hermite(i, mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Density of the invariant measure carried by the diagonal edge `x + y = 1`,
/// parametrised by `x ∈ [0, 1]`:
/// `μ(x) = (γ12+γ13)(γ12+γ23) / (γ12 + γ13(1-x) + γ23 x)²`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeDensity {
    tri: TriangleSpec,
}

pub fn edge_invariant_2d(tri: TriangleSpec) -> EdgeDensity {
    EdgeDensity { tri }
}

impl EdgeDensity {
    fn denom_root(&self, x: f64) -> f64 {
        let t = &self.tri;
        t.gamma12() + t.gamma13() * (1.0 - x) + t.gamma23() * x
    }

    pub fn density(&self, x: f64) -> f64 {
        let t = &self.tri;
        let d = self.denom_root(x);
        (t.gamma12() + t.gamma13()) * (t.gamma12() + t.gamma23()) / (d * d)
    }

    /// Closed form `F(x) = (γ12+γ23) x / (γ12 + γ13(1-x) + γ23 x)`.
    pub fn cdf(&self, x: f64) -> f64 {
        let x = x.clamp(0.0, 1.0);
        (self.tri.gamma12() + self.tri.gamma23()) * x / self.denom_root(x)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let t = &self.tri;
        let a = t.gamma12() + t.gamma13();
        let c = t.gamma12() + t.gamma23();
        (u * a / (c - u * (c - a))).clamp(0.0, 1.0)
    }
}

/// The 1D generator obtained by restricting the triangle generator to the
/// diagonal `y = 1 - x`:
/// `ã = x(1-x)(γ12 + γ23 x + γ13(1-x))`,
/// `b̃ = γ12(1-2x) - γ23 x² + γ13(1-x)²`.
pub fn restricted_diagonal_operator(tri: TriangleSpec) -> OperatorSpec1D {
    let (g12, g13, g23) = (tri.gamma12(), tri.gamma13(), tri.gamma23());
    let a = Poly::new(vec![g12 + g13, g23 - g13]);
    let b = Poly::new(vec![g12 + g13, -2.0 * (g12 + g13), g13 - g23]);
    OperatorSpec1D::new(a, b, Degeneracy::Kimura, Degeneracy::Kimura)
        .expect("a is a convex combination of positive rates")
}
