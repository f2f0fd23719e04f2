//! One-dimensional operator family on `[0, 1]`, endpoint classification and
//! enumeration of invariant measures, plus the three-rate triangle model.
//!
//! The 1D generator is
//!
//! ```text
//! L = a(x) x^m0 (1-x)^m1 d²/dx² + b(x) x^(m0-1) (1-x)^(m1-1) d/dx
//! ```
//!
//! with polynomial `a > 0` and `b`, and degeneracy orders `m0, m1 ∈ {1, 2}`
//! (1 = Kimura, 2 = quadratic).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::invariant::{self, DensityProfile, InvariantError};
use crate::poly::Poly;

/// Number of interior grid points on which positivity of `a` is checked.
const POSITIVITY_GRID: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("degeneracy order must be 1 (Kimura) or 2 (quadratic), got {0}")]
    BadDegeneracy(u8),
    #[error("diffusion factor a(x) must be positive on [0,1], found a({x}) = {value}")]
    NonPositiveDiffusion { x: f64, value: f64 },
    #[error("rate constant {name} must be positive and finite, got {value}")]
    BadRate { name: &'static str, value: f64 },
    #[error("{0:?} endpoint is inadmissible (drift points out of the domain)")]
    Inadmissible(End),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    Left,
    Right,
}

/// Order of vanishing of the diffusion coefficient at an endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Degeneracy {
    Kimura = 1,
    Quadratic = 2,
}

impl Degeneracy {
    pub fn order(self) -> u32 {
        self as u32
    }
}

impl TryFrom<u8> for Degeneracy {
    type Error = ModelError;
    fn try_from(m: u8) -> Result<Self, Self::Error> {
        match m {
            1 => Ok(Degeneracy::Kimura),
            2 => Ok(Degeneracy::Quadratic),
            other => Err(ModelError::BadDegeneracy(other)),
        }
    }
}

impl From<Degeneracy> for u8 {
    fn from(d: Degeneracy) -> u8 {
        d as u8
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawOperatorSpec {
    a: Vec<f64>,
    b: Vec<f64>,
    m0: Degeneracy,
    m1: Degeneracy,
}

/// Coefficient data `(a, b, m0, m1)` of a 1D generator. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOperatorSpec", into = "RawOperatorSpec")]
pub struct OperatorSpec1D {
    a: Poly,
    b: Poly,
    m0: Degeneracy,
    m1: Degeneracy,
}

impl TryFrom<RawOperatorSpec> for OperatorSpec1D {
    type Error = ModelError;
    fn try_from(raw: RawOperatorSpec) -> Result<Self, Self::Error> {
        OperatorSpec1D::new(Poly::new(raw.a), Poly::new(raw.b), raw.m0, raw.m1)
    }
}

impl From<OperatorSpec1D> for RawOperatorSpec {
    fn from(s: OperatorSpec1D) -> Self {
        RawOperatorSpec {
            a: s.a.into(),
            b: s.b.into(),
            m0: s.m0,
            m1: s.m1,
        }
    }
}

impl OperatorSpec1D {
    pub fn new(a: Poly, b: Poly, m0: Degeneracy, m1: Degeneracy) -> Result<Self, ModelError> {
        let check = |x: f64| {
            let value = a.eval(x);
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ModelError::NonPositiveDiffusion { x, value })
            }
        };
        check(0.0)?;
        check(1.0)?;
        for i in 1..POSITIVITY_GRID {
            check(i as f64 / POSITIVITY_GRID as f64)?;
        }
        if b.coeffs().iter().any(|c| !c.is_finite()) {
            return Err(ModelError::NonPositiveDiffusion {
                x: f64::NAN,
                value: f64::NAN,
            });
        }
        Ok(OperatorSpec1D { a, b, m0, m1 })
    }

    /// The mixed Kimura/quadratic family
    /// `L = x(1-x)² d² + (c0 (1-x)² - c1 x (1-x)) d`, i.e. `a = 1`,
    /// `b(x) = c0 (1 - x) - c1 x`, `m0 = 1`, `m1 = 2`.
    pub fn kimura_quadratic(c0: f64, c1: f64) -> Self {
        OperatorSpec1D::new(
            Poly::constant(1.0),
            Poly::new(vec![c0, -(c0 + c1)]),
            Degeneracy::Kimura,
            Degeneracy::Quadratic,
        )
        .expect("a = 1 is positive")
    }

    pub fn a(&self) -> &Poly {
        &self.a
    }

    pub fn b(&self) -> &Poly {
        &self.b
    }

    pub fn m0(&self) -> Degeneracy {
        self.m0
    }

    pub fn m1(&self) -> Degeneracy {
        self.m1
    }

    pub fn degeneracy(&self, end: End) -> Degeneracy {
        match end {
            End::Left => self.m0,
            End::Right => self.m1,
        }
    }

    /// `a` at an endpoint, evaluated without Horner rounding at 0.
    pub fn a_at(&self, end: End) -> f64 {
        endpoint_value(&self.a, end)
    }

    pub fn b_at(&self, end: End) -> f64 {
        endpoint_value(&self.b, end)
    }

    /// Full coefficients `(ã, b̃)` with `ã = a x^m0 (1-x)^m1` and
    /// `b̃ = b x^(m0-1) (1-x)^(m1-1)`.
    pub fn coefficients_full(&self) -> (Poly, Poly) {
        let (m0, m1) = (self.m0.order(), self.m1.order());
        let x = Poly::x();
        let omx = Poly::one_minus_x();
        let a_full = &(&self.a * &x.pow(m0)) * &omx.pow(m1);
        let b_full = &(&self.b * &x.pow(m0 - 1)) * &omx.pow(m1 - 1);
        (a_full, b_full)
    }

    pub fn classify(&self, end: End) -> EndpointClass {
        classify_endpoint(self, end)
    }

    /// The same operator in the coordinate `1 - x`: `a(1-x)`, `-b(1-x)`,
    /// with the degeneracy orders swapped.
    pub fn reflected(&self) -> Self {
        OperatorSpec1D {
            a: self.a.reflect(),
            b: -&self.b.reflect(),
            m0: self.m1,
            m1: self.m0,
        }
    }

    /// Returns the spec with `a` and `b` both multiplied by `k > 0`.
    pub fn scaled(&self, k: f64) -> Self {
        OperatorSpec1D {
            a: self.a.scale(k),
            b: self.b.scale(k),
            m0: self.m0,
            m1: self.m1,
        }
    }
}

/// Endpoint value with compensated summation at `x = 1`.
fn endpoint_value(p: &Poly, end: End) -> f64 {
    match end {
        End::Left => p.at_zero(),
        End::Right => neumaier_sum(p.coeffs()),
    }
}

fn neumaier_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EndpointKind {
    KimuraTangent,
    KimuraTransverse,
    QuadraticTangent,
    QuadraticTransverse,
    QuadraticNeutral,
    Inadmissible,
}

impl EndpointKind {
    pub fn is_transverse(self) -> bool {
        matches!(
            self,
            EndpointKind::KimuraTransverse | EndpointKind::QuadraticTransverse
        )
    }

    /// Endpoints whose Dirac mass is invariant: every quadratic endpoint and
    /// the Kimura tangent one.
    pub fn is_sticky(self) -> bool {
        matches!(
            self,
            EndpointKind::KimuraTangent
                | EndpointKind::QuadraticTangent
                | EndpointKind::QuadraticTransverse
                | EndpointKind::QuadraticNeutral
        )
    }

    pub fn is_tangent(self) -> bool {
        matches!(
            self,
            EndpointKind::KimuraTangent | EndpointKind::QuadraticTangent
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EndpointClass {
    pub kind: EndpointKind,
    pub end: End,
}

/// Classify one endpoint from `(m, a(end), b(end))`.
///
/// Kimura: tangent iff `b = 0` exactly, transverse iff `b` points inward.
/// Quadratic: compares `b/a` against `1` at the left end and `-1` at the
/// right end; the comparison is done as `b` against `±a` so that equality is
/// exact.
pub fn classify_endpoint(spec: &OperatorSpec1D, end: End) -> EndpointClass {
    let a = spec.a_at(end);
    let b = spec.b_at(end);
    // Orient so that "inward" is the positive direction.
    let inward = match end {
        End::Left => b,
        End::Right => -b,
    };
    let kind = match spec.degeneracy(end) {
        Degeneracy::Kimura => {
            if inward == 0.0 {
                EndpointKind::KimuraTangent
            } else if inward > 0.0 {
                EndpointKind::KimuraTransverse
            } else {
                EndpointKind::Inadmissible
            }
        }
        Degeneracy::Quadratic => {
            if inward < a {
                EndpointKind::QuadraticTangent
            } else if inward > a {
                EndpointKind::QuadraticTransverse
            } else {
                EndpointKind::QuadraticNeutral
            }
        }
    };
    EndpointClass { kind, end }
}

/// Tag of a single invariant probability measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MeasureKind {
    DiracLeft,
    DiracRight,
    AbsolutelyContinuous,
}

#[derive(Debug, Clone)]
pub enum InvariantMeasureSpec {
    DiracLeft,
    DiracRight,
    AbsolutelyContinuous(Box<DensityProfile>),
}

impl InvariantMeasureSpec {
    pub fn kind(&self) -> MeasureKind {
        match self {
            InvariantMeasureSpec::DiracLeft => MeasureKind::DiracLeft,
            InvariantMeasureSpec::DiracRight => MeasureKind::DiracRight,
            InvariantMeasureSpec::AbsolutelyContinuous(_) => MeasureKind::AbsolutelyContinuous,
        }
    }

    pub fn density(&self) -> Option<&DensityProfile> {
        match self {
            InvariantMeasureSpec::AbsolutelyContinuous(p) => Some(p),
            _ => None,
        }
    }
}

/// The counting rule behind the table of invariant measures: a Dirac at every
/// sticky endpoint, plus one measure on the open interval when both
/// endpoints are transverse. Neutral quadratic endpoints count as sticky and
/// never admit the interior measure.
pub fn invariant_measure_kinds(
    left: EndpointKind,
    right: EndpointKind,
) -> Result<Vec<MeasureKind>, ModelError> {
    if left == EndpointKind::Inadmissible {
        return Err(ModelError::Inadmissible(End::Left));
    }
    if right == EndpointKind::Inadmissible {
        return Err(ModelError::Inadmissible(End::Right));
    }
    let mut out = Vec::with_capacity(3);
    if left.is_transverse() && right.is_transverse() {
        out.push(MeasureKind::AbsolutelyContinuous);
    }
    if left.is_sticky() {
        out.push(MeasureKind::DiracLeft);
    }
    if right.is_sticky() {
        out.push(MeasureKind::DiracRight);
    }
    Ok(out)
}

/// All extremal invariant measures of `spec`, with the interior density
/// materialised when it exists.
pub fn invariant_measure_set(spec: &OperatorSpec1D) -> Result<Vec<InvariantMeasureSpec>, ModelError> {
    let left = classify_endpoint(spec, End::Left).kind;
    let right = classify_endpoint(spec, End::Right).kind;
    invariant_measure_kinds(left, right)?
        .into_iter()
        .map(|k| {
            Ok(match k {
                MeasureKind::DiracLeft => InvariantMeasureSpec::DiracLeft,
                MeasureKind::DiracRight => InvariantMeasureSpec::DiracRight,
                MeasureKind::AbsolutelyContinuous => InvariantMeasureSpec::AbsolutelyContinuous(
                    Box::new(invariant::stationary_density(spec)?),
                ),
            })
        })
        .collect()
}

/// Rate constants of the triangle generator on `{x ≥ 0, y ≥ 0, x + y ≤ 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTriangle", into = "RawTriangle")]
pub struct TriangleSpec {
    gamma12: f64,
    gamma13: f64,
    gamma23: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RawTriangle {
    gamma12: f64,
    gamma13: f64,
    gamma23: f64,
}

impl TryFrom<RawTriangle> for TriangleSpec {
    type Error = ModelError;
    fn try_from(r: RawTriangle) -> Result<Self, ModelError> {
        TriangleSpec::new(r.gamma12, r.gamma13, r.gamma23)
    }
}

impl From<TriangleSpec> for RawTriangle {
    fn from(t: TriangleSpec) -> Self {
        RawTriangle {
            gamma12: t.gamma12,
            gamma13: t.gamma13,
            gamma23: t.gamma23,
        }
    }
}

impl TriangleSpec {
    pub fn new(gamma12: f64, gamma13: f64, gamma23: f64) -> Result<Self, ModelError> {
        for (name, value) in [
            ("gamma12", gamma12),
            ("gamma13", gamma13),
            ("gamma23", gamma23),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ModelError::BadRate { name, value });
            }
        }
        Ok(TriangleSpec {
            gamma12,
            gamma13,
            gamma23,
        })
    }

    pub fn gamma12(&self) -> f64 {
        self.gamma12
    }

    pub fn gamma13(&self) -> f64 {
        self.gamma13
    }

    pub fn gamma23(&self) -> f64 {
        self.gamma23
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reflection_swaps_endpoint_classes() {
        let s = OperatorSpec1D::kimura_quadratic(0.5, 0.5);
        let r = s.reflected();
        assert_eq!(r.classify(End::Left).kind, s.classify(End::Right).kind);
        assert_eq!(r.classify(End::Right).kind, s.classify(End::Left).kind);
        let (a, b) = s.coefficients_full();
        let (ra, rb) = r.coefficients_full();
        for x in [0.1, 0.5, 0.8] {
            assert!((ra.eval(x) - a.eval(1.0 - x)).abs() < 1e-14);
            assert!((rb.eval(x) + b.eval(1.0 - x)).abs() < 1e-14);
        }
    }

    fn spec(a: &[f64], b: &[f64], m0: u8, m1: u8) -> OperatorSpec1D {
        OperatorSpec1D::new(
            Poly::new(a.to_vec()),
            Poly::new(b.to_vec()),
            m0.try_into().unwrap(),
            m1.try_into().unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn mixed_model_classes() {
        let s = OperatorSpec1D::kimura_quadratic(0.5, 2.0);
        assert_eq!(s.classify(End::Left).kind, EndpointKind::KimuraTransverse);
        assert_eq!(s.classify(End::Right).kind, EndpointKind::QuadraticTransverse);
        let s = OperatorSpec1D::kimura_quadratic(0.5, 0.5);
        assert_eq!(s.classify(End::Right).kind, EndpointKind::QuadraticTangent);
        let s = OperatorSpec1D::kimura_quadratic(0.0, 0.5);
        assert_eq!(s.classify(End::Left).kind, EndpointKind::KimuraTangent);
        let s = OperatorSpec1D::kimura_quadratic(0.5, 1.0);
        assert_eq!(s.classify(End::Right).kind, EndpointKind::QuadraticNeutral);
    }

    #[test]
    fn kimura_tangent_and_inadmissible() {
        let s = spec(&[1.0], &[0.0, 1.0], 1, 1);
        assert_eq!(s.classify(End::Left).kind, EndpointKind::KimuraTangent);
        let s = spec(&[1.0], &[-1.0], 1, 1);
        assert_eq!(s.classify(End::Left).kind, EndpointKind::Inadmissible);
        assert_eq!(s.classify(End::Right).kind, EndpointKind::KimuraTransverse);
        assert!(matches!(
            invariant_measure_set(&s),
            Err(ModelError::Inadmissible(End::Left))
        ));
    }

    #[test]
    fn quadratic_ratios() {
        // left: b(0)/a(0) against 1
        assert_eq!(
            spec(&[2.0], &[1.0], 2, 1).classify(End::Left).kind,
            EndpointKind::QuadraticTangent
        );
        assert_eq!(
            spec(&[2.0], &[2.0, -4.0], 2, 1).classify(End::Left).kind,
            EndpointKind::QuadraticNeutral
        );
        assert_eq!(
            spec(&[2.0], &[3.0, -4.0], 2, 1).classify(End::Left).kind,
            EndpointKind::QuadraticTransverse
        );
        // right: b(1)/a(1) against -1
        assert_eq!(
            spec(&[1.0], &[0.0, -0.5], 1, 2).classify(End::Right).kind,
            EndpointKind::QuadraticTangent
        );
        assert_eq!(
            spec(&[1.0], &[0.0, -1.0], 1, 2).classify(End::Right).kind,
            EndpointKind::QuadraticNeutral
        );
        assert_eq!(
            spec(&[1.0], &[0.0, -3.0], 1, 2).classify(End::Right).kind,
            EndpointKind::QuadraticTransverse
        );
    }

    #[test]
    fn measure_sets_for_named_cells() {
        use EndpointKind::*;
        use MeasureKind::*;
        assert_eq!(
            invariant_measure_kinds(KimuraTransverse, KimuraTransverse).unwrap(),
            vec![AbsolutelyContinuous]
        );
        assert_eq!(
            invariant_measure_kinds(KimuraTangent, KimuraTangent).unwrap(),
            vec![DiracLeft, DiracRight]
        );
        assert_eq!(
            invariant_measure_kinds(QuadraticTransverse, QuadraticTransverse).unwrap(),
            vec![AbsolutelyContinuous, DiracLeft, DiracRight]
        );
        assert_eq!(
            invariant_measure_kinds(QuadraticNeutral, KimuraTransverse).unwrap(),
            vec![DiracLeft]
        );
        assert_eq!(
            invariant_measure_kinds(QuadraticNeutral, QuadraticTransverse).unwrap(),
            vec![DiracLeft, DiracRight]
        );
    }

    #[test]
    fn interior_measure_is_materialised() {
        let set = invariant_measure_set(&OperatorSpec1D::kimura_quadratic(0.5, 2.0)).unwrap();
        let kinds: Vec<_> = set.iter().map(|m| m.kind()).collect();
        assert_eq!(
            kinds,
            vec![MeasureKind::AbsolutelyContinuous, MeasureKind::DiracRight]
        );
        assert!(set[0].density().is_some());
    }

    #[test]
    fn full_coefficients() {
        let s = OperatorSpec1D::kimura_quadratic(0.5, 2.0);
        let (at, bt) = s.coefficients_full();
        assert_eq!(at.coeffs(), &[0.0, 1.0, -2.0, 1.0]);
        // (0.5 - 2.5x)(1 - x) = 0.5 - 3x + 2.5x²
        assert_eq!(bt.coeffs(), &[0.5, -3.0, 2.5]);

        let s = spec(&[1.0], &[], 1, 1);
        let (at, bt) = s.coefficients_full();
        assert_eq!(at.coeffs(), &[0.0, 1.0, -1.0]);
        assert!(bt.is_zero());
    }

    #[test]
    fn full_coefficients_against_pointwise_products() {
        // a = 1 + x, b = 1, m0 = 2, m1 = 1: ã = (1+x) x² (1-x), b̃ = x
        let s = spec(&[1.0, 1.0], &[1.0], 2, 1);
        let (at, bt) = s.coefficients_full();
        assert_eq!(at.degree(), 1 + 2 + 1);
        for i in 0..=20 {
            let x = i as f64 / 20.0;
            let want_a = (1.0 + x) * x * x * (1.0 - x);
            assert!((at.eval(x) - want_a).abs() < 1e-15);
            assert!((bt.eval(x) - x).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_nonpositive_a_and_bad_orders() {
        let err = OperatorSpec1D::new(
            Poly::new(vec![1.0, -2.0]),
            Poly::zero(),
            Degeneracy::Kimura,
            Degeneracy::Kimura,
        );
        assert!(matches!(err, Err(ModelError::NonPositiveDiffusion { .. })));
        assert!(Degeneracy::try_from(3).is_err());
        assert!(TriangleSpec::new(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn config_round_trip() {
        let s = OperatorSpec1D::kimura_quadratic(0.5, 2.0);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"{"a":[1.0],"b":[0.5,-2.5],"m0":1,"m1":2}"#);
        let back: OperatorSpec1D = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
        let bad = r#"{"a":[1.0],"b":[0.5],"m0":3,"m1":2}"#;
        assert!(serde_json::from_str::<OperatorSpec1D>(bad).is_err());
        let tri: TriangleSpec =
            serde_json::from_str(r#"{"gamma12":1,"gamma13":2,"gamma23":1}"#).unwrap();
        assert_eq!(tri.gamma13(), 2.0);
        assert!(serde_json::from_str::<TriangleSpec>(r#"{"gamma12":-1,"gamma13":2,"gamma23":1}"#).is_err());
    }

    proptest! {
        #[test]
        fn classification_is_scale_free(
            a0 in 0.2f64..3.0,
            b in proptest::collection::vec(-4.0f64..4.0, 1..4),
            m0 in 1u8..=2, m1 in 1u8..=2,
            k in 0.01f64..100.0,
        ) {
            let s = spec(&[a0], &b, m0, m1);
            let t = s.scaled(k);
            for end in [End::Left, End::Right] {
                prop_assert_eq!(s.classify(end), t.classify(end));
            }
        }

        #[test]
        fn set_size_matches_rule(
            b in proptest::collection::vec(-4.0f64..4.0, 1..4),
            m0 in 1u8..=2, m1 in 1u8..=2,
        ) {
            let s = spec(&[1.0], &b, m0, m1);
            let (l, r) = (s.classify(End::Left).kind, s.classify(End::Right).kind);
            match invariant_measure_kinds(l, r) {
                Ok(kinds) => {
                    let expected = usize::from(l.is_transverse() && r.is_transverse())
                        + usize::from(l.is_sticky())
                        + usize::from(r.is_sticky());
                    prop_assert_eq!(kinds.len(), expected);
                    prop_assert!(!kinds.is_empty());
                }
                Err(_) => prop_assert!(l == EndpointKind::Inadmissible || r == EndpointKind::Inadmissible),
            }
        }
    }
}
