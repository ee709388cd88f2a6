//! Numerical laboratory for critical-mass blow-up of the inhomogeneous
//! nonlinear Schrödinger equation
//!
//! ```text
//! i u_t + Δu + g(x)|u|^{4/N} u - W(x) u = 0,   x ∈ ℝ^N,  N ∈ {1, 2},
//! ```
//!
//! discretized on periodic boxes with Fourier spectral differentiation.

pub mod error;
pub mod evolve;
pub mod exact;
pub mod field;
pub mod functionals;
pub mod grid;
pub mod groundstate;
pub mod harness;
pub mod linops;
pub mod modulation;
pub mod potentials;
pub mod radial;
pub mod spectral;
pub mod suite;

pub use error::{Error, Result};
pub use field::ComplexField;
pub use functionals::NormReport;
pub use grid::GridSpec;
pub use potentials::{InhomogeneitySpec, ModelSpec, PotentialSpec, PotentialTerm, SampledModel, WClass};
