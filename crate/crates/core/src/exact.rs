//! Closed-form critical-mass blow-up solutions and the pseudo-conformal transform.
//!
//! * free: `S(t,x) = |t|^{-N/2} Q(x/t) e^{-i/t} e^{i|x|²/(4t)}`
//! * Stark: `S` shifted by `t²E` with extra phase `tE·x - (t³/3)|E|²`; it solves
//!   the equation with `W(x) = -E·x` (the opposite sign leaves an O(1) residual)
//! * repulsive harmonic `W = -ω²|x|²`: the `sinh`/`cosh` lens transform of `S`.
//!   For `t < 0` the prefactor `2ω/sinh(2ωt)` is negative and its modulus is used.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::functionals::nonlinearity_f;
use crate::grid::{radius, GridSpec};
use crate::groundstate::GroundStateBundle;
use crate::potentials::{PotentialSpec, PotentialTerm, WClass};
use crate::spectral::spectral;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ExplicitSolution {
    CnlsS,
    Stark { e: [f64; 2] },
    RepulsiveHarmonic { omega: f64 },
}

impl ExplicitSolution {
    pub fn validate(&self, t: f64) -> Result<()> {
        let ok = match self {
            ExplicitSolution::CnlsS => t < 0.0,
            ExplicitSolution::Stark { e } => t != 0.0 && e.iter().all(|v| v.is_finite()),
            ExplicitSolution::RepulsiveHarmonic { omega } => {
                t != 0.0 && omega.is_finite() && *omega != 0.0 && (2.0 * omega * t).sinh() != 0.0
            }
        };
        if ok && t.is_finite() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!("{self:?} at t = {t}")))
        }
    }

    /// Width of the profile at time `t`.
    pub fn width(&self, t: f64) -> f64 {
        match self {
            ExplicitSolution::RepulsiveHarmonic { omega } => ((2.0 * omega * t).sinh() / (2.0 * omega)).abs(),
            _ => t.abs(),
        }
    }

    /// The potential the solution solves the equation with (unwindowed).
    pub fn potential(&self) -> PotentialSpec {
        match self {
            ExplicitSolution::CnlsS => PotentialSpec::zero(),
            ExplicitSolution::Stark { e } => {
                PotentialSpec::single(PotentialTerm::linear(WClass::W21, [-e[0], -e[1]]))
            }
            ExplicitSolution::RepulsiveHarmonic { omega } => {
                PotentialSpec::single(PotentialTerm::harmonic(WClass::W21, -omega * omega))
            }
        }
    }

    pub fn eval(&self, bundle: &GroundStateBundle, t: f64, grid: &GridSpec) -> Result<ComplexField> {
        self.validate(t)?;
        let width = self.width(t);
        if width < 4.0 * grid.spacing() {
            return Err(Error::Unresolvable {
                width,
                min: 4.0 * grid.spacing(),
            });
        }
        let dim = grid.dim();
        let n = dim as f64;
        let values = (0..grid.len())
            .map(|i| {
                let x = grid.point(i);
                self.value(bundle, t, x, dim, n)
            })
            .collect();
        ComplexField::new(*grid, values)
    }

    fn value(&self, bundle: &GroundStateBundle, t: f64, x: [f64; 2], dim: usize, n: f64) -> Complex64 {
        match *self {
            ExplicitSolution::CnlsS => {
                let r = radius(&x, dim);
                let r2 = r * r;
                let q = bundle.eval(r / t.abs());
                Complex64::from_polar(t.abs().powf(-0.5 * n) * q, -1.0 / t + r2 / (4.0 * t))
            }
            ExplicitSolution::Stark { e } => {
                let y = [x[0] - t * t * e[0], x[1] - t * t * e[1]];
                let ry = radius(&y, dim);
                let ex = e[0] * x[0] + if dim == 2 { e[1] * x[1] } else { 0.0 };
                let e2 = e[0] * e[0] + if dim == 2 { e[1] * e[1] } else { 0.0 };
                let q = bundle.eval(ry / t.abs());
                let phase = ry * ry / (4.0 * t) - 1.0 / t + t * ex - t.powi(3) / 3.0 * e2;
                Complex64::from_polar(t.abs().powf(-0.5 * n) * q, phase)
            }
            ExplicitSolution::RepulsiveHarmonic { omega } => {
                let s = (2.0 * omega * t).sinh();
                let c = (2.0 * omega * t).cosh();
                let scale = 2.0 * omega / s;
                let r = radius(&x, dim);
                let r2 = r * r;
                let q = bundle.eval(scale.abs() * r);
                let phase = omega * r2 / (2.0 * s * c) - 2.0 * omega * c / s + 0.5 * omega * r2 * (2.0 * omega * t).tanh();
                Complex64::from_polar(scale.abs().powf(0.5 * n) * q, phase)
            }
        }
    }
}

/// `i∂ₜS + ΔS + |S|^{4/N}S - WS` with a fourth-order time difference and the
/// spectral Laplacian. The `L²` norm is taken over `|x| ≤ radius` when given.
pub fn discrete_residual(
    solution: &ExplicitSolution,
    bundle: &GroundStateBundle,
    t: f64,
    grid: &GridSpec,
    radius_limit: Option<f64>,
) -> Result<f64> {
    discrete_residual_with(solution, bundle, t, grid, radius_limit, &solution.potential())
}

/// As [`discrete_residual`] with an explicit potential, e.g. to compare signs.
pub fn discrete_residual_with(
    solution: &ExplicitSolution,
    bundle: &GroundStateBundle,
    t: f64,
    grid: &GridSpec,
    radius_limit: Option<f64>,
    w: &PotentialSpec,
) -> Result<f64> {
    let dim = grid.dim();
    let dt = 1e-3 * solution.width(t).min(1.0);
    let at = |s: f64| solution.eval(bundle, s, grid);
    let (m2, m1, p1, p2) = (at(t - 2.0 * dt)?, at(t - dt)?, at(t + dt)?, at(t + 2.0 * dt)?);
    let u = at(t)?;
    let lap = spectral(grid).laplacian(&u);
    let mut sum = 0.0;
    for i in 0..grid.len() {
        let x = grid.point(i);
        if let Some(rl) = radius_limit {
            if radius(&x, dim) > rl {
                continue;
            }
        }
        let ut = (-p2.values()[i] + 8.0 * p1.values()[i] - 8.0 * m1.values()[i] + m2.values()[i]) / (12.0 * dt);
        let z = u.values()[i];
        let wx = w.eval(x, dim)?;
        let r = Complex64::new(0.0, 1.0) * ut + lap.values()[i] + nonlinearity_f(z, dim) - wx * z;
        sum += r.norm_sqr();
    }
    Ok((sum * grid.cell_volume()).sqrt())
}

/// `|t|^{-N/2} v(±x/t) e^{i|x|²/(4t)}` where `v` is the field at time `-1/t`.
pub fn pseudo_conformal(v: &ComplexField, t: f64, plus: bool) -> Result<ComplexField> {
    if !(t != 0.0 && t.is_finite()) {
        return Err(Error::InvalidSpec(format!("pseudo-conformal time {t}")));
    }
    let grid = *v.grid();
    let dim = grid.dim();
    // The chirp must stay below the Nyquist wavenumber inside the box.
    let kmax = radius(&[grid.half_width(), grid.half_width()], dim) / (2.0 * t.abs());
    if kmax > grid.nyquist() {
        return Err(Error::Unresolvable {
            width: 2.0 * t.abs(),
            min: radius(&[grid.half_width(), grid.half_width()], dim) / grid.nyquist(),
        });
    }
    let s = if plus { 1.0 / t } else { -1.0 / t };
    let stretched = spectral(&grid).resample(v, &grid, [s, s], [0.0, 0.0]);
    let amp = t.abs().powf(-0.5 * dim as f64);
    Ok(stretched.map_with_points(|x, z| {
        let r = radius(&x, dim);
        z * amp * Complex64::from_polar(1.0, r * r / (4.0 * t))
    }))
}
