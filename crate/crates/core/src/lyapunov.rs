//! Lyapunov candidates `u > 0` with `L u <= λ u`, `λ < 0`, for the 1D
//! operators, and the linear Lyapunov function of the triangle model.
//!
//! For `f = A x^α (1-x)^β P(x)` put `q = P'/P`, `r = P''/P - q²` and
//!
//! ```text
//! N1 = α(1-x) - βx + x(1-x) q                       = x(1-x) f'/f
//! N2 = -α(1-x)² - βx² + x²(1-x)² r + N1²            = x²(1-x)² f''/f
//! ```
//!
//! so that `Lf/f = x^(m0-2) (1-x)^(m1-2) (a N2 + b N1)`. The bracket is a
//! smooth function on `[0, 1]`; its endpoint values give the limits of
//! `Lf/f` in closed form.

use serde::Serialize;
use thiserror::Error;

use crate::invariant::{log_integrating_factor, InvariantError, NormalizedScale};
use crate::operator::{
    classify_endpoint, Degeneracy, End, EndpointKind, ModelError, OperatorSpec1D, TriangleSpec,
};
use crate::poly::Poly;
use crate::quadrature::{gk15, integrate, QuadOptions};
use crate::sde2d::{apply_generator_2d, TriangleState};

pub const DEFAULT_GRID: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LyapunovError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
    #[error("no boundary recipe at a {kind:?} endpoint ({end:?})")]
    NoRecipe { end: End, kind: EndpointKind },
    #[error("candidate is not positive at x = {0}")]
    NotPositive(f64),
    #[error("interior patch infeasible: {0}")]
    InfeasiblePatch(String),
    #[error("no Lyapunov construction for this endpoint pair: {0}")]
    NotApplicable(String),
    #[error("LV = -((1-x)γ13 + (1-y)γ23) V fails at ({x}, {y}): residual {residual:e}")]
    IdentityViolation { x: f64, y: f64, residual: f64 },
    #[error("grid needs at least 8 points, got {0}")]
    GridTooSmall(usize),
}

/// `f = amplitude · x^alpha (1-x)^beta · factor(x)` with `factor > 0` on `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovCandidate1D {
    pub alpha: f64,
    pub beta: f64,
    pub factor: Poly,
    pub amplitude: f64,
}

impl LyapunovCandidate1D {
    pub fn power(alpha: f64, beta: f64) -> Self {
        LyapunovCandidate1D {
            alpha,
            beta,
            factor: Poly::constant(1.0),
            amplitude: 1.0,
        }
    }

    pub fn with_factor(mut self, factor: Poly) -> Self {
        self.factor = factor;
        self
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * x.powf(self.alpha) * (1.0 - x).powf(self.beta) * self.factor.eval(x)
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let (n1, _) = self.numerators(x);
        self.value(x) * n1 / (x * (1.0 - x))
    }

    /// The candidate in the coordinate `1 - x`.
    pub fn reflected(&self) -> Self {
        LyapunovCandidate1D {
            alpha: self.beta,
            beta: self.alpha,
            factor: self.factor.reflect(),
            amplitude: self.amplitude,
        }
    }

    fn numerators(&self, x: f64) -> (f64, f64) {
        let p = self.factor.eval(x);
        let d1 = self.factor.derivative();
        let q = d1.eval(x) / p;
        let r = d1.derivative().eval(x) / p - q * q;
        let omx = 1.0 - x;
        let n1 = self.alpha * omx - self.beta * x + x * omx * q;
        let n2 = -self.alpha * omx * omx - self.beta * x * x + x * x * omx * omx * r + n1 * n1;
        (n1, n2)
    }

    fn check_positive(&self, grid: &[f64]) -> Result<(), LyapunovError> {
        if !(self.amplitude > 0.0) {
            return Err(LyapunovError::NotPositive(f64::NAN));
        }
        for &x in [0.0, 1.0].iter().chain(grid) {
            if !(self.factor.eval(x) > 0.0) {
                return Err(LyapunovError::NotPositive(x));
            }
        }
        Ok(())
    }
}

/// `(ã f'' + b̃ f') / f` at an interior point, from the closed form above.
pub fn apply_l_over_f(spec: &OperatorSpec1D, cand: &LyapunovCandidate1D, x: f64) -> f64 {
    let (n1, n2) = cand.numerators(x);
    let e = spec.a().eval(x) * n2 + spec.b().eval(x) * n1;
    let k0 = spec.m0().order() as i32 - 2;
    let k1 = spec.m1().order() as i32 - 2;
    e * x.powi(k0) * (1.0 - x).powi(k1)
}

/// A limit of `Lf/f` at an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointLimit {
    Finite(f64),
    MinusInfinity,
    PlusInfinity,
}

impl EndpointLimit {
    pub fn as_f64(self) -> f64 {
        match self {
            EndpointLimit::Finite(v) => v,
            EndpointLimit::MinusInfinity => f64::NEG_INFINITY,
            EndpointLimit::PlusInfinity => f64::INFINITY,
        }
    }
}

fn left_limit(spec: &OperatorSpec1D, cand: &LyapunovCandidate1D) -> EndpointLimit {
    let (a0, b0) = (spec.a_at(End::Left), spec.b_at(End::Left));
    let alpha = cand.alpha;
    let n1 = alpha;
    let n2 = alpha * alpha - alpha;
    let e0 = a0 * n2 + b0 * n1;
    if spec.m0() == Degeneracy::Quadratic {
        return EndpointLimit::Finite(e0);
    }
    // Kimura: Lf/f ~ e0 / x.
    let scale = (a0.abs() + b0.abs()) * (1.0 + alpha * alpha);
    if e0.abs() > 1e-12 * scale {
        return if e0 > 0.0 {
            EndpointLimit::PlusInfinity
        } else {
            EndpointLimit::MinusInfinity
        };
    }
    let q0 = cand.factor.derivative().at_zero() / cand.factor.at_zero();
    let dn1 = -alpha - cand.beta + q0;
    let dn2 = 2.0 * alpha + 2.0 * n1 * dn1;
    let da = spec.a().derivative().at_zero();
    let db = spec.b().derivative().at_zero();
    EndpointLimit::Finite(da * n2 + a0 * dn2 + db * n1 + b0 * dn1)
}

/// Limit of `Lf/f` as `x` tends to the given endpoint.
pub fn endpoint_limit(spec: &OperatorSpec1D, cand: &LyapunovCandidate1D, end: End) -> EndpointLimit {
    match end {
        End::Left => left_limit(spec, cand),
        End::Right => left_limit(&spec.reflected(), &cand.reflected()),
    }
}

/// `n` Chebyshev–Gauss abscissae mapped to `(0, 1)`, ascending.
pub fn chebyshev_grid(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 0.5 * (1.0 - (std::f64::consts::PI * (k as f64 + 0.5) / n as f64).cos()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateOutcome {
    /// `lambda0_bound < 0`: exponential decay at rate `|lambda0_bound|`.
    Certified,
    /// The supremum is not negative; the candidate proves nothing.
    PositiveSupremum,
}

#[derive(Debug, Clone, Serialize)]
pub struct Lambda0Certificate {
    pub lambda0_bound: f64,
    pub outcome: CertificateOutcome,
    pub grid_supremum: f64,
    pub worst_point: f64,
    pub endpoint_limits: (EndpointLimit, EndpointLimit),
    pub grid_size: usize,
    #[serde(skip)]
    pub grid: Vec<f64>,
    #[serde(skip)]
    pub values: Vec<f64>,
}

impl Lambda0Certificate {
    fn from_values(grid: Vec<f64>, values: Vec<f64>, limits: (EndpointLimit, EndpointLimit)) -> Self {
        let (mut sup, mut worst) = (f64::NEG_INFINITY, f64::NAN);
        for (&x, &v) in grid.iter().zip(&values) {
            if v > sup || v.is_nan() {
                sup = if v.is_nan() { f64::INFINITY } else { v };
                worst = x;
            }
        }
        let bound = sup.max(limits.0.as_f64()).max(limits.1.as_f64());
        let worst_point = if limits.0.as_f64() >= bound && limits.0.as_f64() > sup {
            0.0
        } else if limits.1.as_f64() >= bound && limits.1.as_f64() > sup {
            1.0
        } else {
            worst
        };
        Lambda0Certificate {
            lambda0_bound: bound,
            outcome: if bound < 0.0 {
                CertificateOutcome::Certified
            } else {
                CertificateOutcome::PositiveSupremum
            },
            grid_supremum: sup,
            worst_point,
            endpoint_limits: limits,
            grid_size: grid.len(),
            grid,
            values,
        }
    }
}

/// Grid supremum of `Lf/f` combined with the analytic endpoint limits.
pub fn certify_lambda0(
    spec: &OperatorSpec1D,
    cand: &LyapunovCandidate1D,
    grid_size: usize,
) -> Result<Lambda0Certificate, LyapunovError> {
    if grid_size < 8 {
        return Err(LyapunovError::GridTooSmall(grid_size));
    }
    let grid = chebyshev_grid(grid_size);
    cand.check_positive(&grid)?;
    let values = grid.iter().map(|&x| apply_l_over_f(spec, cand, x)).collect();
    let limits = (
        endpoint_limit(spec, cand, End::Left),
        endpoint_limit(spec, cand, End::Right),
    );
    Ok(Lambda0Certificate::from_values(grid, values, limits))
}

/// Golden-section minimisation of a unimodal `g` on `[lo, hi]`.
pub fn golden_section<G: FnMut(f64) -> f64>(mut g: G, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut gc, mut gd) = (g(c), g(d));
    while (b - a).abs() > tol {
        if gc < gd {
            b = d;
            d = c;
            gd = gc;
            c = b - inv_phi * (b - a);
            gc = g(c);
        } else {
            a = c;
            c = d;
            gc = gd;
            d = a + inv_phi * (b - a);
            gd = g(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, g(x))
}

/// Best certified bound over a one-parameter family `make(c)`, `c ∈ (lo, hi)`.
pub fn search_exponent<M: Fn(f64) -> LyapunovCandidate1D>(
    spec: &OperatorSpec1D,
    make: M,
    range: (f64, f64),
    grid_size: usize,
) -> Result<(f64, Lambda0Certificate), LyapunovError> {
    let grid = chebyshev_grid(grid_size.max(8));
    let bound = |c: f64| {
        let cand = make(c);
        let sup = grid
            .iter()
            .map(|&x| apply_l_over_f(spec, &cand, x))
            .fold(f64::NEG_INFINITY, f64::max);
        sup.max(endpoint_limit(spec, &cand, End::Left).as_f64())
            .max(endpoint_limit(spec, &cand, End::Right).as_f64())
    };
    let (c, _) = golden_section(bound, range.0, range.1, 1e-9);
    let cert = certify_lambda0(spec, &make(c), grid_size)?;
    Ok((c, cert))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryRecipe {
    pub end: End,
    pub kind: EndpointKind,
    /// Power of the distance to `end` in the local candidate.
    pub exponent: f64,
}

const TANGENT_CLIP: f64 = 1e-3;

/// Local exponent `c` for a candidate `dist^c` near `end`.
///
/// Quadratic: `c = (1 - r)/2` with `r` the inward `b/a` at the end, which
/// minimises `c (c - 1 + r)`, the local value of `Lf/f`; tangent exponents
/// are clipped into `(0, 1)`. Kimura tangent: `1/2`. Kimura transverse: `0`.
pub fn construct_boundary_candidate(
    spec: &OperatorSpec1D,
    end: End,
) -> Result<BoundaryRecipe, LyapunovError> {
    let kind = classify_endpoint(spec, end).kind;
    let inward = match end {
        End::Left => spec.b_at(end),
        End::Right => -spec.b_at(end),
    };
    let r = inward / spec.a_at(end);
    let exponent = match kind {
        EndpointKind::Inadmissible => return Err(ModelError::Inadmissible(end).into()),
        EndpointKind::QuadraticNeutral => return Err(LyapunovError::NoRecipe { end, kind }),
        EndpointKind::QuadraticTangent => ((1.0 - r) / 2.0).clamp(TANGENT_CLIP, 1.0 - TANGENT_CLIP),
        EndpointKind::QuadraticTransverse => (1.0 - r) / 2.0,
        EndpointKind::KimuraTangent => 0.5,
        EndpointKind::KimuraTransverse => 0.0,
    };
    Ok(BoundaryRecipe {
        end,
        kind,
        exponent,
    })
}

/// Interior piece on `[x1, x2]` solving `(e^B u')' = -f` with `B = Φ - Φ(x1)`,
/// `f = exp(lerp(ln f1, ln f2) + κ s(1-s))` and `κ` fixed by
/// `∫ f = u'(x1) - e^{B(x2)} u'(x2)`. Then `L u = -ã e^{-B} f < 0`.
#[derive(Debug, Clone)]
pub struct InteriorPatch {
    spec: OperatorSpec1D,
    pub x1: f64,
    pub x2: f64,
    pub u1: f64,
    pub du1: f64,
    pub f1: f64,
    pub f2: f64,
    pub kappa: f64,
    pub mass: f64,
    phi1: f64,
    nodes: Vec<f64>,
    f_cum: Vec<f64>,
    u_cum: Vec<f64>,
}

const PATCH_PANELS: usize = 256;

impl InteriorPatch {
    fn bump(&self, x: f64) -> f64 {
        bump(self.f1, self.f2, self.kappa, self.x1, self.x2, x)
    }

    fn panel(&self, x: f64) -> usize {
        let h = (self.x2 - self.x1) / PATCH_PANELS as f64;
        (((x - self.x1) / h).floor().max(0.0) as usize).min(PATCH_PANELS - 1)
    }

    fn weight(&self, x: f64) -> f64 {
        (self.phi1 - log_integrating_factor(&self.spec, x)).exp()
    }

    /// `F(x) = ∫_{x1}^x f`.
    pub fn flux(&self, x: f64) -> f64 {
        let k = self.panel(x);
        let f = |t| self.bump(t);
        self.f_cum[k] + gk15(&f, self.nodes[k], x).map(|r| r.0).unwrap_or(f64::NAN)
    }

    pub fn du(&self, x: f64) -> f64 {
        self.weight(x) * (self.du1 - self.flux(x))
    }

    pub fn u(&self, x: f64) -> f64 {
        let k = self.panel(x);
        let du = |t| self.du(t);
        self.u_cum[k] + gk15(&du, self.nodes[k], x).map(|r| r.0).unwrap_or(f64::NAN)
    }

    /// `L u` from the construction.
    pub fn l_u(&self, x: f64) -> f64 {
        let (at, _) = self.spec.coefficients_full();
        -at.eval(x) * self.weight(x) * self.bump(x)
    }

    /// `L u` with `u''` from a central difference of the tabulated `u'`.
    pub fn l_u_numeric(&self, x: f64) -> f64 {
        let h = 1e-5 * (self.x2 - self.x1);
        let d2 = (self.du(x + h) - self.du(x - h)) / (2.0 * h);
        let (at, bt) = self.spec.coefficients_full();
        at.eval(x) * d2 + bt.eval(x) * self.du(x)
    }
}

fn bump(f1: f64, f2: f64, kappa: f64, x1: f64, x2: f64, x: f64) -> f64 {
    let s = (x - x1) / (x2 - x1);
    ((1.0 - s) * f1.ln() + s * f2.ln() + kappa * s * (1.0 - s)).exp()
}

/// Builds the interior patch from the left junction data `(u1, u'(x1))`, the
/// right slope `u'(x2)` and, optionally, the bump values at the two ends
/// (defaulting to the constant `∫f / (x2 - x1)`).
pub fn construct_interior_patch(
    spec: &OperatorSpec1D,
    (x1, x2): (f64, f64),
    u1: f64,
    du1: f64,
    du2: f64,
    ends: Option<(f64, f64)>,
) -> Result<InteriorPatch, LyapunovError> {
    if !(0.0 < x1 && x1 < x2 && x2 < 1.0) {
        return Err(LyapunovError::InfeasiblePatch(format!(
            "need 0 < x1 < x2 < 1, got [{x1}, {x2}]"
        )));
    }
    if !(u1 > 0.0) {
        return Err(LyapunovError::InfeasiblePatch(format!("u(x1) = {u1} is not positive")));
    }
    let phi1 = log_integrating_factor(spec, x1);
    let e2 = (log_integrating_factor(spec, x2) - phi1).exp();
    let mass = du1 - e2 * du2;
    if !(mass > 0.0) {
        return Err(LyapunovError::InfeasiblePatch(format!(
            "flux ordering violated: u'(x1) - e^B(x2) u'(x2) = {mass:e}"
        )));
    }
    let (f1, f2) = ends.unwrap_or((mass / (x2 - x1), mass / (x2 - x1)));
    if !(f1 > 0.0 && f2 > 0.0) {
        return Err(LyapunovError::InfeasiblePatch(format!(
            "bump end values must be positive, got {f1}, {f2}"
        )));
    }
    let opts = QuadOptions::rel(1e-12);
    let total = |kappa: f64| {
        integrate(|x| bump(f1, f2, kappa, x1, x2, x), x1, x2, opts)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    let (mut lo, mut hi) = (-1.0, 1.0);
    while total(lo) > mass {
        lo *= 2.0;
        if lo < -1e4 {
            return Err(LyapunovError::InfeasiblePatch("bump mass cannot be made small enough".into()));
        }
    }
    while total(hi) < mass {
        hi *= 2.0;
        if hi > 600.0 {
            return Err(LyapunovError::InfeasiblePatch("bump mass cannot be made large enough".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if total(mid) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + hi.abs()) {
            break;
        }
    }
    let mut patch = InteriorPatch {
        spec: spec.clone(),
        x1,
        x2,
        u1,
        du1,
        f1,
        f2,
        kappa: 0.5 * (lo + hi),
        mass,
        phi1,
        nodes: (0..=PATCH_PANELS)
            .map(|k| x1 + (x2 - x1) * k as f64 / PATCH_PANELS as f64)
            .collect(),
        f_cum: vec![0.0; PATCH_PANELS + 1],
        u_cum: vec![u1; PATCH_PANELS + 1],
    };
    for k in 0..PATCH_PANELS {
        let (a, b) = (patch.nodes[k], patch.nodes[k + 1]);
        let f = |t| patch.bump(t);
        patch.f_cum[k + 1] = patch.f_cum[k] + gk15(&f, a, b).map_err(InvariantError::from)?.0;
    }
    for k in 0..PATCH_PANELS {
        let (a, b) = (patch.nodes[k], patch.nodes[k + 1]);
        let du = |t| patch.du(t);
        patch.u_cum[k + 1] = patch.u_cum[k] + gk15(&du, a, b).map_err(InvariantError::from)?.0;
    }
    if !(patch.u_cum[PATCH_PANELS] > 0.0) {
        return Err(LyapunovError::InfeasiblePatch(format!(
            "u(x2) = {} is not positive",
            patch.u_cum[PATCH_PANELS]
        )));
    }
    Ok(patch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    /// One tangent endpoint, one transverse.
    OneTangent,
    TwoTangent,
}

/// A `C²` Lyapunov function on `[0, 1]` glued from two boundary pieces and
/// an interior patch. When `reflected` is set the construction lives in the
/// coordinate `1 - x` (tangent end moved to the left).
#[derive(Debug, Clone)]
pub struct GlobalLyapunov {
    spec: OperatorSpec1D,
    pub topology: Topology,
    pub reflected: bool,
    pub left: LyapunovCandidate1D,
    pub right: LyapunovCandidate1D,
    pub right_offset: f64,
    pub patch: InteriorPatch,
}

impl GlobalLyapunov {
    fn local(&self, x: f64) -> f64 {
        if self.reflected {
            1.0 - x
        } else {
            x
        }
    }

    pub fn value(&self, x: f64) -> f64 {
        let t = self.local(x);
        if t <= self.patch.x1 {
            self.left.value(t)
        } else if t < self.patch.x2 {
            self.patch.u(t)
        } else {
            self.right_offset + self.right.value(t)
        }
    }

    /// `L u / u` at an interior point.
    pub fn l_over_u(&self, x: f64) -> f64 {
        let t = self.local(x);
        if t <= self.patch.x1 {
            apply_l_over_f(&self.spec, &self.left, t)
        } else if t < self.patch.x2 {
            self.patch.l_u(t) / self.patch.u(t)
        } else {
            let g = self.right.value(t);
            apply_l_over_f(&self.spec, &self.right, t) * g / (self.right_offset + g)
        }
    }

    fn limits(&self) -> (EndpointLimit, EndpointLimit) {
        let left = endpoint_limit(&self.spec, &self.left, End::Left);
        let mut right = endpoint_limit(&self.spec, &self.right, End::Right);
        if self.right_offset > 0.0 && self.right.beta == 0.0 {
            if let EndpointLimit::Finite(v) = right {
                let g1 = self.right.amplitude * self.right.factor.at_one();
                right = EndpointLimit::Finite(v * g1 / (self.right_offset + g1));
            }
        }
        if self.reflected {
            (right, left)
        } else {
            (left, right)
        }
    }

    pub fn certify(&self, grid_size: usize) -> Result<Lambda0Certificate, LyapunovError> {
        if grid_size < 8 {
            return Err(LyapunovError::GridTooSmall(grid_size));
        }
        let grid = chebyshev_grid(grid_size);
        let values = grid.iter().map(|&x| self.l_over_u(x)).collect();
        Ok(Lambda0Certificate::from_values(grid, values, self.limits()))
    }
}

/// Largest `x1 <= 0.3` with `Lf/f < 0` on `(0, x1]` for the left piece.
fn left_reach(spec: &OperatorSpec1D, cand: &LyapunovCandidate1D) -> Option<f64> {
    let mut x1 = 0.3;
    while x1 > 1e-4 {
        let ok = (1..=200).all(|k| apply_l_over_f(spec, cand, x1 * k as f64 / 200.0) < 0.0);
        if ok {
            return Some(x1);
        }
        x1 *= 0.5;
    }
    None
}

fn right_reach(spec: &OperatorSpec1D, cand: &LyapunovCandidate1D) -> Option<f64> {
    left_reach(&spec.reflected(), &cand.reflected()).map(|x| 1.0 - x)
}

/// Glues boundary recipes and an interior patch into a global candidate.
/// Supported: one tangent and one transverse endpoint, or two tangent ones.
pub fn assemble_global_candidate(spec: &OperatorSpec1D) -> Result<GlobalLyapunov, LyapunovError> {
    let kl = classify_endpoint(spec, End::Left).kind;
    let kr = classify_endpoint(spec, End::Right).kind;
    for (end, kind) in [(End::Left, kl), (End::Right, kr)] {
        if kind == EndpointKind::Inadmissible {
            return Err(ModelError::Inadmissible(end).into());
        }
        if kind == EndpointKind::QuadraticNeutral {
            return Err(LyapunovError::NoRecipe { end, kind });
        }
    }
    match (kl.is_tangent(), kr.is_tangent()) {
        (true, true) => assemble_two_tangent(spec),
        (true, false) => assemble_one_tangent(spec, false),
        (false, true) => assemble_one_tangent(&spec.reflected(), true),
        (false, false) => Err(LyapunovError::NotApplicable(
            "both endpoints transverse: no decay to a point mass".into(),
        )),
    }
}

fn junction_bump(spec: &OperatorSpec1D, cand: &LyapunovCandidate1D, x: f64, phi1: f64) -> f64 {
    let (at, _) = spec.coefficients_full();
    let lu = apply_l_over_f(spec, cand, x) * cand.value(x);
    -(log_integrating_factor(spec, x) - phi1).exp() * lu / at.eval(x)
}

fn assemble_two_tangent(spec: &OperatorSpec1D) -> Result<GlobalLyapunov, LyapunovError> {
    let cl = construct_boundary_candidate(spec, End::Left)?.exponent;
    let cr = construct_boundary_candidate(spec, End::Right)?.exponent;
    let left = LyapunovCandidate1D::power(cl, 0.0);
    let right_unit = LyapunovCandidate1D::power(0.0, cr);
    let x1 = left_reach(spec, &left)
        .ok_or_else(|| LyapunovError::InfeasiblePatch("left recipe is never negative".into()))?;
    let x2 = right_reach(spec, &right_unit)
        .ok_or_else(|| LyapunovError::InfeasiblePatch("right recipe is never negative".into()))?;
    let phi1 = log_integrating_factor(spec, x1);
    let (u1, du1) = (left.value(x1), left.derivative(x1));
    let f1 = junction_bump(spec, &left, x1, phi1);
    let build = |amp: f64| {
        let right = right_unit.clone().with_amplitude(amp);
        let f2 = junction_bump(spec, &right, x2, phi1);
        construct_interior_patch(spec, (x1, x2), u1, du1, right.derivative(x2), Some((f1, f2)))
            .map(|p| (p.u(x2) - right.value(x2), p, right))
    };
    // Match u(x2) by bisection in log-amplitude. Large amplitudes make the
    // patch infeasible, so grow the bracket one step at a time.
    let mismatch = |la: f64| build(la.exp()).map(|r| r.0).ok();
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let m0 = mismatch(0.0).ok_or_else(|| LyapunovError::InfeasiblePatch("unit amplitude infeasible".into()))?;
    if m0 > 0.0 {
        loop {
            hi += 0.5;
            match mismatch(hi) {
                Some(m) if m <= 0.0 => break,
                Some(_) if hi < 40.0 => lo = hi,
                _ => return Err(LyapunovError::InfeasiblePatch("cannot match values at x2".into())),
            }
        }
    } else {
        loop {
            lo -= 0.5;
            match mismatch(lo) {
                Some(m) if m > 0.0 => break,
                Some(_) if lo > -40.0 => hi = lo,
                _ => return Err(LyapunovError::InfeasiblePatch("cannot match values at x2".into())),
            }
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        match mismatch(mid) {
            Some(m) if m > 0.0 => lo = mid,
            Some(_) => hi = mid,
            None => return Err(LyapunovError::InfeasiblePatch("patch lost feasibility".into())),
        }
    }
    let (_, patch, right) = build((0.5 * (lo + hi)).exp())?;
    Ok(GlobalLyapunov {
        spec: spec.clone(),
        topology: Topology::TwoTangent,
        reflected: false,
        left,
        right,
        right_offset: 0.0,
        patch,
    })
}

/// Tangent end on the left (after reflection if needed).
fn assemble_one_tangent(spec: &OperatorSpec1D, reflected: bool) -> Result<GlobalLyapunov, LyapunovError> {
    let cl = construct_boundary_candidate(spec, End::Left)?.exponent;
    let right_recipe = construct_boundary_candidate(spec, End::Right)?;
    let left = LyapunovCandidate1D::power(cl, 0.0);
    // Transverse right end: Kimura takes x^c with c > 0, quadratic (1-x)^c
    // with c < 0; both increase toward 1.
    let right_unit = match right_recipe.kind {
        EndpointKind::KimuraTransverse => LyapunovCandidate1D::power(1.0, 0.0),
        _ => LyapunovCandidate1D::power(0.0, right_recipe.exponent),
    };
    let x1 = left_reach(spec, &left)
        .ok_or_else(|| LyapunovError::InfeasiblePatch("left recipe is never negative".into()))?;
    let x2 = right_reach(spec, &right_unit)
        .ok_or_else(|| LyapunovError::InfeasiblePatch("right recipe is never negative".into()))?;
    let phi1 = log_integrating_factor(spec, x1);
    let e2 = (log_integrating_factor(spec, x2) - phi1).exp();
    let (u1, du1) = (left.value(x1), left.derivative(x1));
    let (g2, dg2) = (right_unit.value(x2), right_unit.derivative(x2));
    if !(dg2 > 0.0) {
        return Err(LyapunovError::InfeasiblePatch("right piece is not increasing".into()));
    }
    // Shrink the right amplitude until the flux ordering holds and the
    // offset needed for continuity is nonnegative.
    let amp = (0.5 * du1 / (e2 * dg2)).min(0.5 * u1 / g2);
    let right = right_unit.with_amplitude(amp);
    let f1 = junction_bump(spec, &left, x1, phi1);
    let f2 = junction_bump(spec, &right, x2, phi1);
    let patch = construct_interior_patch(spec, (x1, x2), u1, du1, right.derivative(x2), Some((f1, f2)))?;
    let offset = patch.u(x2) - right.value(x2);
    if offset < 0.0 {
        return Err(LyapunovError::InfeasiblePatch(format!("negative offset {offset:e}")));
    }
    Ok(GlobalLyapunov {
        spec: spec.clone(),
        topology: Topology::OneTangent,
        reflected,
        left,
        right,
        right_offset: offset,
        patch,
    })
}

/// Limit law from `x0` when both ends are tangent:
/// `(1 - S₀(x0)) δ₀ + S₀(x0) δ₁`, returned as the two weights.
pub fn two_tangent_limit(spec: &OperatorSpec1D, x0: f64) -> Result<(f64, f64), LyapunovError> {
    let kl = classify_endpoint(spec, End::Left).kind;
    let kr = classify_endpoint(spec, End::Right).kind;
    if !(kl.is_tangent() && kr.is_tangent()) {
        return Err(LyapunovError::NotApplicable(format!(
            "need two tangent endpoints, got {kl:?} and {kr:?}"
        )));
    }
    let s = NormalizedScale::new(spec)?.eval(x0)?;
    Ok((1.0 - s, s))
}

#[derive(Debug, Clone, Serialize)]
pub struct Triangle2DCertificate {
    pub points: usize,
    pub max_abs_residual: f64,
    /// Largest `LV/V` over grid points off the diagonal.
    pub sup_ratio: f64,
    /// `[min(γ13, γ23), γ13 + γ23]`.
    pub rate_window: (f64, f64),
}

/// Checks `L V = -((1-x)γ13 + (1-y)γ23) V` for `V = 1 - x - y` on the lattice
/// `(i/n, j/n)`, `i + j <= n`, with `L` applied through the drift and noise
/// coefficients of the simulator.
pub fn lyapunov_check_2d(tri: TriangleSpec, n: usize) -> Result<Triangle2DCertificate, LyapunovError> {
    if n < 1 {
        return Err(LyapunovError::GridTooSmall(n));
    }
    let (g13, g23) = (tri.gamma13(), tri.gamma23());
    let mut max_res: f64 = 0.0;
    let mut sup_ratio = f64::NEG_INFINITY;
    let mut points = 0;
    for i in 0..=n {
        for j in 0..=(n - i) {
            let s = TriangleState::new(i as f64 / n as f64, j as f64 / n as f64);
            let v = s.distance_to_diagonal();
            let lv = apply_generator_2d(s, tri, [-1.0, -1.0], [[0.0; 2]; 2]);
            let coef = (1.0 - s.x) * g13 + (1.0 - s.y) * g23;
            let res = (lv + coef * v).abs();
            let scale = (g13 + g23 + tri.gamma12()) * 4.0 * f64::EPSILON;
            if res > scale.max(f64::MIN_POSITIVE) * 8.0 {
                return Err(LyapunovError::IdentityViolation {
                    x: s.x,
                    y: s.y,
                    residual: res,
                });
            }
            max_res = max_res.max(res);
            if i + j < n {
                sup_ratio = sup_ratio.max(lv / v);
            }
            points += 1;
        }
    }
    Ok(Triangle2DCertificate {
        points,
        max_abs_residual: max_res,
        sup_ratio,
        rate_window: (g13.min(g23), g13 + g23),
    })
}
