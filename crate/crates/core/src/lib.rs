//! Simulation and verification toolkit for degenerate diffusions with mixed
//! Kimura/quadratic boundary behaviour on `[0, 1]` and on the triangle.

pub mod invariant;
pub mod lyapunov;
pub mod metrics;
pub mod operator;
pub mod poly;
pub mod quadrature;
pub mod rng;
pub mod sde1d;
pub mod sde2d;

pub use operator::{End, EndpointClass, EndpointKind, OperatorSpec1D, TriangleSpec};
pub use poly::Poly;
