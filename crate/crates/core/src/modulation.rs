//! Geometric decomposition around the ground state and the quantities built on it.
//!
//! A field is written as
//! `u(x) = λ^{-N/2} (Q + ε)(y) e^{-i(b/4)|y|² + iγ}` with `y = (x + w)/λ`.
//! Given `u` on an `x`-grid, `Φ(y) = λ^{N/2} u(λy - w) e^{i((b/4)|y|² - γ)}` and
//! `ε = Φ - Q`. The four orthogonality conditions are
//!
//! * `C₁ = ∫ Im ε · ΛQ`
//! * `C₂ = ∫ Re ε · |y|²Q`
//! * `C₃ = ∫ Im ε · ρ`
//! * `C₄ⱼ = ∫ Re ε · yⱼQ`
//!
//! All `y`-integrals are evaluated at the nodes `yⱼ = (xⱼ + w)/λ` of the
//! `x`-grid with weight `h^N/λ^N`, so `u` is never interpolated. The Newton
//! Jacobian comes from
//! `∂_γΦ = -iΦ`, `∂_bΦ = i(|y|²/4)Φ`, `∂_λΦ = λ⁻¹(ΛΦ - i(b/2)|y|²Φ)` and
//! `∂_{wⱼ}Φ = -λ⁻¹(∂ⱼΦ - i(b/2)yⱼΦ)`, with `Λ` and `∂ⱼ` moved onto the test
//! functions by parts.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::functionals::{critical_power, energy, potential_density_remainder};
use crate::grid::{radius, GridSpec};
use crate::groundstate::GroundStateBundle;
use crate::linops::RhoProfile;
use crate::potentials::{PotentialSpec, SampledModel};
use crate::spectral::spectral;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationParams {
    pub lambda: f64,
    pub b: f64,
    pub gamma: f64,
    /// Second entry unused in one dimension.
    pub w: [f64; 2],
}

impl ModulationParams {
    pub fn new(lambda: f64, b: f64, gamma: f64, w: [f64; 2]) -> Self {
        Self { lambda, b, gamma, w }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, [0.0, 0.0])
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.lambda, self.b, self.gamma, self.w[0], self.w[1]]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.lambda > 0.0) {
            return Err(Error::InvalidSpec(format!("modulation parameters {self:?}")));
        }
        Ok(())
    }

    pub fn w_norm(&self, dim: usize) -> f64 {
        radius(&self.w, dim)
    }

    fn y_of(&self, x: [f64; 2]) -> [f64; 2] {
        [(x[0] + self.w[0]) / self.lambda, (x[1] + self.w[1]) / self.lambda]
    }

    fn to_vec(self, dim: usize) -> Vec<f64> {
        let mut v = vec![self.lambda, self.b, self.gamma];
        v.extend_from_slice(&self.w[..dim]);
        v
    }

    fn from_vec(v: &[f64]) -> Self {
        let mut w = [0.0; 2];
        w[..v.len() - 3].copy_from_slice(&v[3..]);
        Self::new(v[0], v[1], v[2], w)
    }

    /// Largest difference to `other`, with `γ` compared modulo `2π`.
    pub fn distance(&self, other: &Self) -> f64 {
        let dg = (self.gamma - other.gamma + PI).rem_euclid(2.0 * PI) - PI;
        [
            self.lambda - other.lambda,
            self.b - other.b,
            dg,
            self.w[0] - other.w[0],
            self.w[1] - other.w[1],
        ]
        .iter()
        .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Builds `λ^{-N/2}(Q + ε)((x+w)/λ) e^{-i(b/4)|x+w|²/λ² + iγ}` on `grid`.
///
/// `eps`, when given, lives on its own `y`-grid and is read by spectral
/// interpolation.
pub fn recompose(
    bundle: &GroundStateBundle,
    params: &ModulationParams,
    grid: &GridSpec,
    eps: Option<&ComplexField>,
) -> Result<ComplexField> {
    params.validate()?;
    let h = grid.spacing();
    if params.lambda < 4.0 * h {
        return Err(Error::Unresolvable {
            width: params.lambda,
            min: 4.0 * h,
        });
    }
    let dim = grid.dim();
    let lam = params.lambda;
    let pulled = match eps {
        Some(e) => Some(spectral(e.grid()).resample(
            e,
            grid,
            [1.0 / lam, 1.0 / lam],
            [params.w[0] / lam, params.w[1] / lam],
        )),
        None => None,
    };
    let amp = lam.powf(-0.5 * dim as f64);
    let values = (0..grid.len())
        .map(|i| {
            let y = params.y_of(grid.point(i));
            let r = radius(&y, dim);
            let mut z = Complex64::new(bundle.eval(r), 0.0);
            if let Some(p) = &pulled {
                z += p.values()[i];
            }
            z * amp * Complex64::from_polar(1.0, -0.25 * params.b * r * r + params.gamma)
        })
        .collect();
    ComplexField::new(*grid, values)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecomposeOptions {
    /// Target for the largest orthogonality residual.
    pub tol: f64,
    /// Residual accepted when the iteration stalls at rounding level.
    pub accept: f64,
    pub max_iter: usize,
    /// Smallness threshold on `‖ε‖_{H¹}`.
    pub delta: f64,
    /// Below `λ/h` of this size the Jacobian is taken by forward differences.
    pub fd_below: f64,
}

impl Default for DecomposeOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            accept: 1e-9,
            max_iter: 25,
            delta: 0.1,
            fd_below: 12.0,
        }
    }
}

/// Test function `φ`, `Λφ` and `∇φ` at `y` for each condition, plus whether
/// the condition pairs with the real part.
struct TestFunctions<'a> {
    bundle: &'a GroundStateBundle,
    rho: &'a RhoProfile,
    dim: usize,
}

struct TestValue {
    phi: f64,
    lambda_phi: f64,
    grad: [f64; 2],
}

impl<'a> TestFunctions<'a> {
    fn count(&self) -> usize {
        3 + self.dim
    }

    fn real_part(k: usize) -> bool {
        k == 1 || k >= 3
    }

    fn eval(&self, y: [f64; 2]) -> Vec<TestValue> {
        let n = self.dim as f64;
        let r = radius(&y, self.dim);
        let (q, dq) = self.bundle.eval_with_derivative(r);
        let q_power = critical_power(Complex64::new(q, 0.0), self.dim) * q;
        let d2q = if r == 0.0 {
            (q - q_power) / n
        } else {
            -(n - 1.0) / r * dq + q - q_power
        };
        let unit = |f: f64| -> [f64; 2] {
            if r == 0.0 {
                [0.0, 0.0]
            } else {
                [f * y[0] / r, f * y[1] / r]
            }
        };
        let radial = |phi: f64, dphi: f64| TestValue {
            phi,
            lambda_phi: 0.5 * n * phi + r * dphi,
            grad: unit(dphi),
        };
        let lq = 0.5 * n * q + r * dq;
        let dlq = (0.5 * n + 1.0) * dq + r * d2q;
        let (rho, drho) = self.rho.profile.eval_with_derivative(r);
        let mut out = vec![
            radial(lq, dlq),
            radial(r * r * q, 2.0 * r * q + r * r * dq),
            radial(rho, drho),
        ];
        for j in 0..self.dim {
            let dir = unit(dq);
            let mut grad = [y[j] * dir[0], y[j] * dir[1]];
            grad[j] += q;
            out.push(TestValue {
                phi: y[j] * q,
                lambda_phi: y[j] * ((0.5 * n + 1.0) * q + r * dq),
                grad,
            });
        }
        out
    }
}

fn part(z: Complex64, real: bool) -> f64 {
    if real {
        z.re
    } else {
        z.im
    }
}

struct Workspace<'a> {
    tf: TestFunctions<'a>,
    u: &'a ComplexField,
    grid: GridSpec,
    dim: usize,
}

impl<'a> Workspace<'a> {
    fn phi(&self, p: &ModulationParams, i: usize) -> ([f64; 2], Complex64) {
        let y = p.y_of(self.grid.point(i));
        let r2 = y[0] * y[0] + y[1] * y[1];
        let amp = p.lambda.powf(0.5 * self.dim as f64);
        let z = self.u.values()[i] * amp * Complex64::from_polar(1.0, 0.25 * p.b * r2 - p.gamma);
        (y, z)
    }

    fn weight(&self, p: &ModulationParams) -> f64 {
        self.grid.cell_volume() / p.lambda.powi(self.dim as i32)
    }

    fn conditions(&self, p: &ModulationParams) -> Vec<f64> {
        let k = self.tf.count();
        let mut c = vec![0.0; k];
        for i in 0..self.grid.len() {
            let (y, z) = self.phi(p, i);
            if z == Complex64::new(0.0, 0.0) && radius(&y, self.dim) > 40.0 {
                continue;
            }
            let q = self.tf.bundle.eval(radius(&y, self.dim));
            let e = z - q;
            for (kk, t) in self.tf.eval(y).iter().enumerate() {
                c[kk] += part(e, TestFunctions::real_part(kk)) * t.phi;
            }
        }
        let dv = self.weight(p);
        c.iter().map(|v| v * dv).collect()
    }

    fn jacobian(&self, p: &ModulationParams) -> DMatrix<f64> {
        let k = self.tf.count();
        let mut jac = DMatrix::zeros(k, k);
        let lam = p.lambda;
        let i_unit = Complex64::new(0.0, 1.0);
        for i in 0..self.grid.len() {
            let (y, z) = self.phi(p, i);
            if z == Complex64::new(0.0, 0.0) {
                continue;
            }
            let r2 = y[0] * y[0] + y[1] * y[1];
            let iz = i_unit * z;
            for (kk, t) in self.tf.eval(y).iter().enumerate() {
                let re = TestFunctions::real_part(kk);
                let pz = part(z, re);
                let piz = part(iz, re);
                jac[(kk, 0)] += (-pz * t.lambda_phi - 0.5 * p.b * piz * r2 * t.phi) / lam;
                jac[(kk, 1)] += piz * 0.25 * r2 * t.phi;
                jac[(kk, 2)] -= piz * t.phi;
                for j in 0..self.dim {
                    jac[(kk, 3 + j)] -= (-pz * t.grad[j] - 0.5 * p.b * piz * y[j] * t.phi) / lam;
                }
            }
        }
        jac * self.weight(p)
    }

    fn jacobian_fd(&self, p: &ModulationParams) -> DMatrix<f64> {
        let k = self.tf.count();
        let base = self.conditions(p);
        let x = p.to_vec(self.dim);
        let mut jac = DMatrix::zeros(k, k);
        for col in 0..k {
            let step = 1e-7 * x[col].abs().max(if col == 0 { p.lambda } else { 1.0 });
            let mut xp = x.clone();
            xp[col] += step;
            let c = self.conditions(&ModulationParams::from_vec(&xp));
            for row in 0..k {
                jac[(row, col)] = (c[row] - base[row]) / step;
            }
        }
        jac
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `ε` sampled at the rescaled nodes `yⱼ = (xⱼ + w)/λ` of an `x`-grid.
#[derive(Clone, Debug)]
pub struct EpsilonField {
    grid: GridSpec,
    params: ModulationParams,
    values: Vec<Complex64>,
    gradient: Vec<Vec<Complex64>>,
    /// `C₁, C₂, C₃, C₄ⱼ` at the returned parameters.
    pub orthogonality: Vec<f64>,
    pub iterations: usize,
    pub delta_exceeded: bool,
}

impl EpsilonField {
    /// Wraps samples of `ε` taken at the nodes `(xⱼ + w)/λ` of `field`'s grid.
    pub fn from_field(field: &ComplexField, params: ModulationParams) -> Result<Self> {
        params.validate()?;
        let grid = *field.grid();
        let gradient = spectral(&grid)
            .gradient(field)
            .into_iter()
            .map(|g| g.values().iter().map(|z| z * params.lambda).collect())
            .collect();
        Ok(Self {
            grid,
            params,
            values: field.values().to_vec(),
            gradient,
            orthogonality: Vec::new(),
            iterations: 0,
            delta_exceeded: false,
        })
    }

    pub fn params(&self) -> &ModulationParams {
        &self.params
    }

    /// The `x`-grid whose nodes carry the samples.
    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn y_node(&self, i: usize) -> [f64; 2] {
        self.params.y_of(self.grid.point(i))
    }

    fn weight(&self) -> f64 {
        self.grid.cell_volume() / self.params.lambda.powi(self.grid.dim() as i32)
    }

    /// `∫ f(y, ε(y), ∇ε(y)) dy`.
    pub fn integrate(&self, mut f: impl FnMut(usize, [f64; 2], Complex64, [Complex64; 2]) -> f64) -> f64 {
        let dim = self.grid.dim();
        let mut s = 0.0;
        for i in 0..self.values.len() {
            let mut g = [Complex64::new(0.0, 0.0); 2];
            for (j, gj) in g.iter_mut().enumerate().take(dim) {
                *gj = self.gradient[j][i];
            }
            s += f(i, self.y_node(i), self.values[i], g);
        }
        s * self.weight()
    }

    pub fn l2_sq(&self) -> f64 {
        self.integrate(|_, _, e, _| e.norm_sqr())
    }

    pub fn gradient_sq(&self) -> f64 {
        self.integrate(|_, _, _, g| g[0].norm_sqr() + g[1].norm_sqr())
    }

    pub fn h1_sq(&self) -> f64 {
        self.l2_sq() + self.gradient_sq()
    }

    /// `‖yε‖₂²`.
    pub fn y_weighted_sq(&self) -> f64 {
        self.integrate(|_, y, e, _| (y[0] * y[0] + y[1] * y[1]) * e.norm_sqr())
    }

    /// `(ε, Q)₂`.
    pub fn inner_q(&self, bundle: &GroundStateBundle) -> f64 {
        let dim = self.grid.dim();
        self.integrate(|_, y, e, _| e.re * bundle.eval(radius(&y, dim)))
    }

    /// `(ε, Q)₂ + ½‖ε‖₂²`; vanishes at critical mass.
    pub fn mass_identity(&self, bundle: &GroundStateBundle) -> f64 {
        self.inner_q(bundle) + 0.5 * self.l2_sq()
    }

    /// `‖Q‖₂²` by the same quadrature as the other `y`-integrals.
    pub fn q_mass(&self, bundle: &GroundStateBundle) -> f64 {
        let dim = self.grid.dim();
        self.integrate(|_, y, _, _| bundle.eval(radius(&y, dim)).powi(2))
    }

    /// `(Im ε, ∂ⱼQ)₂` for each axis.
    pub fn momentum_pairing(&self, bundle: &GroundStateBundle) -> Vec<f64> {
        let dim = self.grid.dim();
        (0..dim)
            .map(|j| {
                self.integrate(|_, y, e, _| {
                    let r = radius(&y, dim);
                    if r == 0.0 {
                        0.0
                    } else {
                        e.im * bundle.eval_with_derivative(r).1 * y[j] / r
                    }
                })
            })
            .collect()
    }

    /// Rebuilds `u` on the `x`-grid.
    pub fn recompose(&self, bundle: &GroundStateBundle) -> ComplexField {
        let dim = self.grid.dim();
        let p = self.params;
        let amp = p.lambda.powf(-0.5 * dim as f64);
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let y = self.y_node(i);
                let r = radius(&y, dim);
                (e + bundle.eval(r)) * amp * Complex64::from_polar(1.0, -0.25 * p.b * r * r + p.gamma)
            })
            .collect();
        ComplexField::new(self.grid, values).expect("finite")
    }
}

/// Moment estimates of `(λ, b, γ, w)` for a field close to the orbit of `Q`.
pub fn moment_guess(bundle: &GroundStateBundle, u: &ComplexField) -> Result<ModulationParams> {
    let grid = *u.grid();
    let dim = grid.dim();
    let dv = grid.cell_volume();
    let mass: f64 = u.values().iter().map(|z| z.norm_sqr()).sum::<f64>() * dv;
    if !(mass > 0.0) {
        return Err(Error::InvalidSpec("zero field has no modulation parameters".into()));
    }
    let mut centre = [0.0; 2];
    for (i, z) in u.values().iter().enumerate() {
        let x = grid.point(i);
        centre[0] += x[0] * z.norm_sqr();
        centre[1] += x[1] * z.norm_sqr();
    }
    let w = [-centre[0] * dv / mass, -centre[1] * dv / mass];
    let grads = spectral(&grid).gradient(u);
    let mut spread = 0.0;
    let mut twist = 0.0;
    for (i, z) in u.values().iter().enumerate() {
        let x = grid.point(i);
        let s = [x[0] + w[0], x[1] + w[1]];
        spread += (s[0] * s[0] + s[1] * s[1]) * z.norm_sqr();
        for (j, g) in grads.iter().enumerate() {
            twist += (z.conj() * s[j] * g.values()[i]).im;
        }
    }
    // Scale the moments to the mass of Q so small mass defects do not bias them.
    let ratio = bundle.mass_sq() / mass;
    let lambda = (spread * dv * ratio / bundle.virial_sq()).sqrt();
    let b = -2.0 * twist * dv * ratio / bundle.virial_sq();
    let mut p = ModulationParams::new(lambda, b, 0.0, if dim == 1 { [w[0], 0.0] } else { w });
    let mut acc = Complex64::new(0.0, 0.0);
    let amp = lambda.powf(0.5 * dim as f64);
    for (i, z) in u.values().iter().enumerate() {
        let y = p.y_of(grid.point(i));
        let r = radius(&y, dim);
        acc += z * amp * Complex64::from_polar(bundle.eval(r), 0.25 * b * r * r);
    }
    p.gamma = acc.arg();
    Ok(p)
}

/// Newton solve of the orthogonality conditions, started at `guess` (or at
/// the moment estimate when `None`).
pub fn decompose(
    bundle: &GroundStateBundle,
    rho: &RhoProfile,
    u: &ComplexField,
    guess: Option<ModulationParams>,
    opts: &DecomposeOptions,
) -> Result<EpsilonField> {
    let grid = *u.grid();
    let dim = grid.dim();
    let ws = Workspace {
        tf: TestFunctions { bundle, rho, dim },
        u,
        grid,
        dim,
    };
    let mut p = match guess {
        Some(g) => g,
        None => moment_guess(bundle, u)?,
    };
    p.validate()?;
    if dim == 1 {
        p.w[1] = 0.0;
    }
    let mut c = ws.conditions(&p);
    let mut history = vec![max_abs(&c)];
    let mut iterations = 0;
    while max_abs(&c) > opts.tol && iterations < opts.max_iter {
        iterations += 1;
        let jac = if p.lambda / grid.spacing() < opts.fd_below {
            ws.jacobian_fd(&p)
        } else {
            ws.jacobian(&p)
        };
        let rhs = -DVector::from_vec(c.clone());
        let step = match jac.lu().solve(&rhs) {
            Some(s) => s,
            None => break,
        };
        let x = p.to_vec(dim);
        let norm0 = max_abs(&c);
        let mut t = 1.0;
        // Keep λ positive, then backtrack on the residual.
        while x[0] + t * step[0] <= 0.5 * x[0] {
            t *= 0.5;
        }
        let mut accepted = None;
        for _ in 0..30 {
            let xt: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            let pt = ModulationParams::from_vec(&xt);
            let ct = ws.conditions(&pt);
            if max_abs(&ct) < norm0 || t < 1e-6 {
                accepted = Some((pt, ct));
                break;
            }
            t *= 0.5;
        }
        let Some((pt, ct)) = accepted else { break };
        let stalled = max_abs(&ct) >= norm0;
        p = pt;
        c = ct;
        history.push(max_abs(&c));
        if stalled {
            break;
        }
    }
    let res = max_abs(&c);
    if !(res <= opts.accept) {
        return Err(Error::NoConvergence {
            what: "modulation decomposition",
            residuals: history,
        });
    }
    if res > opts.tol {
        log::debug!("decomposition stopped at residual {res:.3e}");
    }
    p.gamma = p.gamma.rem_euclid(2.0 * PI);
    let grads = spectral(&grid).gradient(u);
    let amp = p.lambda.powf(0.5 * dim as f64);
    let mut values = Vec::with_capacity(grid.len());
    let mut gradient = vec![Vec::with_capacity(grid.len()); dim];
    for i in 0..grid.len() {
        let (y, z) = ws.phi(&p, i);
        let r = radius(&y, dim);
        let (q, dq) = bundle.eval_with_derivative(r);
        values.push(z - q);
        let r2 = y[0] * y[0] + y[1] * y[1];
        let phase = Complex64::from_polar(1.0, 0.25 * p.b * r2 - p.gamma);
        for j in 0..dim {
            let radial = if r == 0.0 { 0.0 } else { dq * y[j] / r };
            let gj = grads[j].values()[i] * amp * p.lambda * phase
                + Complex64::new(0.0, 0.5 * p.b * y[j]) * z
                - radial;
            gradient[j].push(gj);
        }
    }
    let mut eps = EpsilonField {
        grid,
        params: p,
        values,
        gradient,
        orthogonality: c,
        iterations,
        delta_exceeded: false,
    };
    let h1 = eps.h1_sq().sqrt();
    if h1 > opts.delta {
        log::warn!("‖ε‖_H1 = {h1:.3e} exceeds δ = {}", opts.delta);
        eps.delta_exceeded = true;
    }
    Ok(eps)
}

/// `s(t) = s₁ + ∫_{t₁}^{t} λ(τ)^{-2} dτ` by the trapezoid rule on the samples.
pub fn rescaled_time(times: &[f64], lambdas: &[f64], t1: f64, s1: f64) -> Result<Vec<f64>> {
    if times.len() != lambdas.len() || times.is_empty() {
        return Err(Error::InvalidSpec("time and scale series differ in length".into()));
    }
    if lambdas.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidSpec("scale samples must be positive".into()));
    }
    let mut cumulative = vec![0.0; times.len()];
    for i in 1..times.len() {
        let dt = times[i] - times[i - 1];
        cumulative[i] = cumulative[i - 1] + 0.5 * dt * (lambdas[i].powi(-2) + lambdas[i - 1].powi(-2));
    }
    // Locate t₁ and interpolate the integrand linearly inside its interval.
    let k = times
        .windows(2)
        .position(|w| (w[0] <= t1 && t1 <= w[1]) || (w[1] <= t1 && t1 <= w[0]))
        .unwrap_or(if (t1 - times[0]).abs() < (t1 - times[times.len() - 1]).abs() {
            0
        } else {
            times.len().saturating_sub(2)
        });
    let at_t1 = if times.len() == 1 {
        0.0
    } else {
        let (ta, tb) = (times[k], times[k + 1]);
        let (fa, fb) = (lambdas[k].powi(-2), lambdas[k + 1].powi(-2));
        let theta = (t1 - ta) / (tb - ta);
        let f1 = fa + theta * (fb - fa);
        cumulative[k] + 0.5 * (t1 - ta) * (fa + f1)
    };
    Ok(cumulative.iter().map(|c| s1 + c - at_t1).collect())
}

/// `((1/λ)λ_s + b, b_s + b², 1 - γ_s, w_s)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModVector {
    pub scale: f64,
    pub curvature: f64,
    pub phase: f64,
    pub translation: [f64; 2],
}

impl ModVector {
    pub fn norm(&self) -> f64 {
        (self.scale.powi(2)
            + self.curvature.powi(2)
            + self.phase.powi(2)
            + self.translation[0].powi(2)
            + self.translation[1].powi(2))
        .sqrt()
    }
}

/// Three-point derivative on a possibly non-uniform grid.
fn derivative(s: &[f64], values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let three = |i: usize, j: usize, k: usize, at: usize| {
        let (a, b, c) = (s[i], s[j], s[k]);
        let x = s[at];
        values[i] * (2.0 * x - b - c) / ((a - b) * (a - c))
            + values[j] * (2.0 * x - a - c) / ((b - a) * (b - c))
            + values[k] * (2.0 * x - a - b) / ((c - a) * (c - b))
    };
    (0..n)
        .map(|i| {
            if i == 0 {
                three(0, 1, 2, 0)
            } else if i == n - 1 {
                three(n - 3, n - 2, n - 1, n - 1)
            } else {
                three(i - 1, i, i + 1, i)
            }
        })
        .collect()
}

/// `Mod(s)` by centred differences on a uniform `s`-grid (one-sided at the ends).
pub fn mod_vector(s: &[f64], params: &[ModulationParams]) -> Result<Vec<ModVector>> {
    let n = s.len();
    if n < 3 || params.len() != n {
        return Err(Error::InvalidSpec("need at least three matching samples".into()));
    }
    let ds = (s[n - 1] - s[0]) / (n - 1) as f64;
    if s.windows(2).any(|w| ((w[1] - w[0]) - ds).abs() > 1e-9 * ds.abs().max(1e-300)) {
        return Err(Error::InvalidSpec("s-samples must be uniformly spaced".into()));
    }
    mod_vector_nonuniform(s, params)
}

/// `Mod(s)` from second-order three-point differences on an increasing `s`-grid.
pub fn mod_vector_nonuniform(s: &[f64], params: &[ModulationParams]) -> Result<Vec<ModVector>> {
    let n = s.len();
    if n < 3 || params.len() != n {
        return Err(Error::InvalidSpec("need at least three matching samples".into()));
    }
    if s.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidSpec("s-samples must be strictly increasing".into()));
    }
    let lam: Vec<f64> = params.iter().map(|p| p.lambda).collect();
    let b: Vec<f64> = params.iter().map(|p| p.b).collect();
    let mut gamma: Vec<f64> = params.iter().map(|p| p.gamma).collect();
    for i in 1..n {
        let d = gamma[i] - gamma[i - 1];
        gamma[i] -= 2.0 * PI * (d / (2.0 * PI)).round();
    }
    let w0: Vec<f64> = params.iter().map(|p| p.w[0]).collect();
    let w1: Vec<f64> = params.iter().map(|p| p.w[1]).collect();
    let (dl, db, dg, dw0, dw1) = (
        derivative(s, &lam),
        derivative(s, &b),
        derivative(s, &gamma),
        derivative(s, &w0),
        derivative(s, &w1),
    );
    Ok((0..n)
        .map(|i| ModVector {
            scale: dl[i] / lam[i] + b[i],
            curvature: db[i] + b[i] * b[i],
            phase: 1.0 - dg[i],
            translation: [dw0[i], dw1[i]],
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct PsiReport {
    /// `Ψ(y) = λ²W(λy - w)Q(y)` on the `y`-grid.
    pub field: ComplexField,
    /// `‖e^{ε'|y|}Ψ‖_{H¹}`.
    pub weighted_h1: f64,
    /// Nodes dropped because `∇W` is infinite there.
    pub singular_nodes: usize,
}

/// Samples `Ψ` on `ygrid` and its weighted norm. The gradient is evaluated
/// pointwise from `∇W` and `Q'`, so non-smooth `W` is handled without
/// spectral differentiation; an integrable singularity of `∇W` at a node
/// drops that node.
pub fn psi_field(
    bundle: &GroundStateBundle,
    w: &PotentialSpec,
    params: &ModulationParams,
    ygrid: &GridSpec,
    eps_prime: f64,
) -> Result<PsiReport> {
    params.validate()?;
    let dim = ygrid.dim();
    let lam = params.lambda;
    let mut values = Vec::with_capacity(ygrid.len());
    let mut total = 0.0;
    let mut singular = 0;
    for i in 0..ygrid.len() {
        let y = ygrid.point(i);
        let x = [lam * y[0] - params.w[0], lam * y[1] - params.w[1]];
        let r = radius(&y, dim);
        let (q, dq) = bundle.eval_with_derivative(r);
        let wv = w.eval(x, dim)?;
        let psi = lam * lam * wv * q;
        values.push(Complex64::new(psi, 0.0));
        let weight = (eps_prime * r).exp();
        let gw = w.grad(x, dim)?;
        let mut grad_sq = 0.0;
        let mut finite = true;
        for j in 0..dim {
            let unit = if r == 0.0 { 0.0 } else { y[j] / r };
            let g = lam.powi(3) * gw[j] * q + lam * lam * wv * dq * unit + eps_prime * unit * psi;
            finite &= g.is_finite();
            grad_sq += g * g;
        }
        if !finite {
            singular += 1;
            grad_sq = 0.0;
        }
        total += weight * weight * (psi * psi + grad_sq);
    }
    Ok(PsiReport {
        field: ComplexField::new(*ygrid, values)?,
        weighted_h1: (total * ygrid.cell_volume()).sqrt(),
        singular_nodes: singular,
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnergyGap {
    /// `|8E(Q_{λ,b,w,γ}) - (b²/λ²)‖yQ‖₂²|`.
    pub gap: f64,
    /// `(λ^{2+κ} + |w|^{2+κ})/λ²`.
    pub bound: f64,
}

pub fn profile_energy_gap(
    bundle: &GroundStateBundle,
    model: &SampledModel,
    params: &ModulationParams,
    kappa: f64,
) -> Result<EnergyGap> {
    let u = recompose(bundle, params, model.grid(), None)?;
    let e = energy(&u, model);
    let lam = params.lambda;
    let gap = (8.0 * e - params.b * params.b / (lam * lam) * bundle.virial_sq()).abs();
    let wn = params.w_norm(model.grid().dim());
    Ok(EnergyGap {
        gap,
        bound: (lam.powf(2.0 + kappa) + wn.powf(2.0 + kappa)) / (lam * lam),
    })
}

/// `m`, `L` and the `ε₁ … ε₅` of the modified energy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyConstants {
    pub kappa: f64,
    pub mu: f64,
    pub m: f64,
    pub l_exp: f64,
    pub eps1: f64,
    /// Placeholder equal to `ε₃`; see [`EnergyConstants::eps2_is_placeholder`].
    pub eps2: f64,
    pub eps3: f64,
    pub eps4: f64,
    pub eps5: f64,
    /// `ε₂` has no defining formula; it is set to `ε₃`.
    pub eps2_is_placeholder: bool,
}

impl EnergyConstants {
    pub fn new(kappa: f64, mu: f64) -> Self {
        let m = 2.0 + kappa / 2.0;
        let eps3 = (mu / 24.0).min(kappa * kappa * mu / (24.0 * 64.0));
        Self {
            kappa,
            mu,
            m,
            l_exp: 1.0 + kappa / 2.0,
            eps1: kappa * m * mu / 32.0,
            eps2: eps3,
            eps3,
            eps4: (m * mu / 24.0).min(kappa * kappa * m * mu / (24.0 * 64.0)),
            eps5: kappa / 8.0,
            eps2_is_placeholder: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EnergyDiagnostics {
    pub h: f64,
    pub s: f64,
    /// `(μ/2)‖ε‖²_{H¹} + (ε₁/2)b²‖yε‖² - ε₃(‖ε‖²_{H¹} + b²‖yε‖²)`.
    pub comparator: f64,
    pub eps_h1_sq: f64,
    pub y_eps_sq: f64,
    pub constants: EnergyConstants,
}

/// `H(s, ε)` and `S = H/λ^m`. `model` must be sampled on the `x`-grid of
/// `eps`; `g(λy - w)` and `W(λy - w)` are then the samples at the nodes.
pub fn modified_energy(
    bundle: &GroundStateBundle,
    eps: &EpsilonField,
    model: &SampledModel,
    constants: EnergyConstants,
) -> Result<EnergyDiagnostics> {
    if model.grid() != eps.grid() {
        return Err(Error::GridMismatch("model and ε grids differ".into()));
    }
    let dim = eps.grid().dim();
    let p = eps.params;
    let g = model.g_values();
    let wv = model.w_values();
    let h1 = eps.h1_sq();
    let yeps = eps.y_weighted_sq();
    let nonlinear = eps.integrate(|i, y, e, _| {
        let q = Complex64::new(bundle.eval(radius(&y, dim)), 0.0);
        g[i] * potential_density_remainder(q, e, dim)
    });
    let potential = eps.integrate(|i, _, e, _| wv[i] * e.norm_sqr());
    let b2 = p.b * p.b;
    let h = 0.5 * h1 + 0.5 * constants.eps1 * b2 * yeps - nonlinear + 0.5 * p.lambda * p.lambda * potential;
    let comparator =
        0.5 * constants.mu * h1 + 0.5 * constants.eps1 * b2 * yeps - constants.eps3 * (h1 + b2 * yeps);
    Ok(EnergyDiagnostics {
        h,
        s: h / p.lambda.powf(constants.m),
        comparator,
        eps_h1_sq: h1,
        y_eps_sq: yeps,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::mass;
    use crate::groundstate::{solve_ground_state, RadialMesh};
    use crate::linops::{solve_rho, RhoMesh};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn setup(dim: usize) -> &'static (GroundStateBundle, RhoProfile) {
        static ONE: OnceLock<(GroundStateBundle, RhoProfile)> = OnceLock::new();
        static TWO: OnceLock<(GroundStateBundle, RhoProfile)> = OnceLock::new();
        let cell = if dim == 1 { &ONE } else { &TWO };
        cell.get_or_init(|| {
            let b = solve_ground_state(dim, RadialMesh::default()).unwrap();
            let r = solve_rho(&b, RhoMesh::default()).unwrap();
            (b, r)
        })
    }

    #[test]
    fn identity_parameters_give_q() {
        let (b, _) = setup(1);
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let u = recompose(b, &ModulationParams::identity(), &g, None).unwrap();
        assert!(u.sub(&b.sample(&g)).max_abs() < 1e-14);
    }

    #[test]
    fn recompose_preserves_mass() {
        let (b, _) = setup(1);
        let g = GridSpec::new(1, 1024, 20.0).unwrap();
        for p in [
            ModulationParams::new(0.7, 0.3, 1.1, [0.05, 0.0]),
            ModulationParams::new(1.4, -0.5, 4.0, [-0.2, 0.0]),
        ] {
            let u = recompose(b, &p, &g, None).unwrap();
            assert!((mass(&u) - b.mass_sq()).abs() < 1e-8);
        }
    }

    #[test]
    fn recompose_energy_is_chirp_term() {
        let (b, _) = setup(1);
        let g = GridSpec::new(1, 2048, 24.0).unwrap();
        let model = SampledModel::free(&g);
        for (lam, bb) in [(0.8, 0.3), (1.2, -0.4)] {
            let u = recompose(b, &ModulationParams::new(lam, bb, 0.0, [0.0, 0.0]), &g, None).unwrap();
            let expected = bb * bb / (lam * lam) * b.virial_sq() / 8.0;
            assert!((energy(&u, &model) - expected).abs() <= 1e-6 * expected);
        }
    }

    #[test]
    fn recompose_rejects_unresolved_scale() {
        let (b, _) = setup(1);
        let g = GridSpec::new(1, 256, 16.0).unwrap();
        let p = ModulationParams::new(0.2, 0.0, 0.0, [0.0, 0.0]);
        assert!(matches!(recompose(b, &p, &g, None), Err(Error::Unresolvable { .. })));
    }

    #[test]
    fn round_trip_from_identity_guess() {
        let (b, rho) = setup(1);
        let g = GridSpec::new(1, 1024, 20.0).unwrap();
        let truth = ModulationParams::new(0.7, 0.3, 1.1, [0.05, 0.0]);
        let u = recompose(b, &truth, &g, None).unwrap();
        let eps = decompose(b, rho, &u, Some(ModulationParams::identity()), &DecomposeOptions::default()).unwrap();
        assert!(eps.params().distance(&truth) <= 1e-8, "{:?}", eps.params());
        assert!(eps.h1_sq().sqrt() < 1e-8);
        assert!(max_abs(&eps.orthogonality) <= 1e-8);
        assert!(eps.recompose(b).sub(&u).max_abs() < 1e-10);
    }

    #[test]
    fn q_decomposes_to_identity() {
        let (b, rho) = setup(1);
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let eps = decompose(b, rho, &b.sample(&g), None, &DecomposeOptions::default()).unwrap();
        assert!(eps.params().distance(&ModulationParams::identity()) < 1e-10);
        assert!(eps.l2_sq() < 1e-20);
    }

    #[test]
    fn round_trip_random_two_dim() {
        let (b, rho) = setup(2);
        let g = GridSpec::new(2, 128, 12.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let truth = ModulationParams::new(
                rng.gen_range(0.6..1.3),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.0..2.0 * PI),
                [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)],
            );
            let u = recompose(b, &truth, &g, None).unwrap();
            let eps = decompose(b, rho, &u, None, &DecomposeOptions::default()).unwrap();
            assert!(eps.params().distance(&truth) <= 1e-8, "{truth:?} {:?}", eps.params());
        }
    }

    #[test]
    fn jacobian_matches_differences() {
        let (b, rho) = setup(2);
        let g = GridSpec::new(2, 128, 12.0).unwrap();
        let truth = ModulationParams::new(0.9, 0.2, 0.4, [0.1, -0.05]);
        let mut eps_field = ComplexField::from_fn(g, |x| {
            Complex64::new(0.01 * (-(x[0] * x[0] + x[1] * x[1])).exp(), 0.02 * x[0] * (-(x[0] * x[0] + x[1] * x[1])).exp())
        });
        eps_field = recompose(b, &truth, &g, Some(&eps_field)).unwrap();
        let ws = Workspace {
            tf: TestFunctions { bundle: b, rho, dim: 2 },
            u: &eps_field,
            grid: g,
            dim: 2,
        };
        let p = ModulationParams::new(0.95, 0.15, 0.3, [0.08, -0.02]);
        let a = ws.jacobian(&p);
        let f = ws.jacobian_fd(&p);
        assert!((&a - &f).amax() <= 1e-5 * f.amax(), "{a} {f}");
    }

    #[test]
    fn rescaled_time_closed_forms() {
        let t: Vec<f64> = (0..=1000).map(|i| -2.0 + i as f64 * 1e-3).collect();
        let s = rescaled_time(&t, &vec![0.5; t.len()], -2.0, 3.0).unwrap();
        for (ti, si) in t.iter().zip(&s) {
            assert!((si - (3.0 + (ti + 2.0) / 0.25)).abs() < 1e-10);
        }
        let n = 200_000;
        let t: Vec<f64> = (0..=n).map(|i| -1.0 + 0.9 * i as f64 / n as f64).collect();
        let lam: Vec<f64> = t.iter().map(|t| t.abs()).collect();
        let s = rescaled_time(&t, &lam, -1.0, 0.0).unwrap();
        for (ti, si) in t.iter().zip(&s) {
            assert!((si - (1.0 / ti.abs() - 1.0)).abs() < 1e-8);
        }
        assert!(s.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn mod_vector_of_constant_and_exact_laws() {
        let s: Vec<f64> = (0..50).map(|i| 10.0 + 0.01 * i as f64).collect();
        let p = ModulationParams::new(0.5, 0.2, 0.0, [0.0, 0.0]);
        let m = mod_vector(&s, &vec![p; s.len()]).unwrap();
        for v in &m {
            assert!((v.scale - 0.2).abs() < 1e-12 && (v.curvature - 0.04).abs() < 1e-12);
            assert!((v.phase - 1.0).abs() < 1e-12 && v.translation[0] == 0.0);
        }
        let c = 2.0;
        let laws: Vec<ModulationParams> = s
            .iter()
            .map(|&si| ModulationParams::new(c / si, 1.0 / si, si, [0.0, 0.0]))
            .collect();
        for v in mod_vector(&s, &laws).unwrap() {
            assert!(v.scale.abs() < 1e-6 && v.curvature.abs() < 1e-6 && v.phase.abs() < 1e-9);
        }
    }

    #[test]
    fn psi_vanishes_for_free_and_scales_for_harmonic() {
        let (b, _) = setup(1);
        let yg = GridSpec::new(1, 512, 16.0).unwrap();
        let p = ModulationParams::new(0.1, 0.0, 0.0, [0.0, 0.0]);
        let free = psi_field(b, &PotentialSpec::zero(), &p, &yg, 0.25).unwrap();
        assert_eq!(free.weighted_h1, 0.0);
        let w = PotentialSpec::single(crate::potentials::PotentialTerm::harmonic(crate::potentials::WClass::W1, 0.5));
        let a = psi_field(b, &w, &p, &yg, 0.25).unwrap();
        let half = psi_field(b, &w, &ModulationParams::new(0.05, 0.0, 0.0, [0.0, 0.0]), &yg, 0.25).unwrap();
        assert!((a.weighted_h1 / half.weighted_h1 - 16.0).abs() < 1e-9);
    }

    #[test]
    fn energy_gap_vanishes_without_potential() {
        let (b, _) = setup(1);
        let g = GridSpec::new(1, 2048, 24.0).unwrap();
        let model = SampledModel::free(&g);
        let gap = profile_energy_gap(b, &model, &ModulationParams::new(0.5, 0.3, 0.0, [0.0, 0.0]), 1.0).unwrap();
        assert!(gap.gap <= 1e-6, "{gap:?}");
    }

    #[test]
    fn constants_follow_definitions() {
        let c = EnergyConstants::new(0.5, 0.2);
        assert_eq!(c.m, 2.25);
        assert_eq!(c.l_exp, 1.25);
        assert!((c.eps1 - 0.5 * 2.25 * 0.2 / 32.0).abs() < 1e-15);
        assert!((c.eps3 - 0.25 * 0.2 / (24.0 * 64.0)).abs() < 1e-15);
        assert_eq!(c.eps2, c.eps3);
        assert!((c.eps5 - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn h_is_quadratic_near_zero() {
        let (b, rho) = setup(1);
        let g = GridSpec::new(1, 1024, 20.0).unwrap();
        let model = SampledModel::free(&g);
        let consts = EnergyConstants::new(1.0, 0.1);
        let lp = crate::linops::LinearizedOperator::new(crate::linops::Which::Plus, b, &g);
        let lm = crate::linops::LinearizedOperator::new(crate::linops::Which::Minus, b, &g);
        let quad = |e: &ComplexField| {
            0.5 * (lp.apply(&e.real_part()).inner(&e.real_part()) + lm.apply(&e.imag_part()).inner(&e.imag_part()))
        };
        let h_at = |e: &ComplexField, delta: f64| {
            let eps = EpsilonField::from_field(&e.scale(Complex64::new(delta, 0.0)), ModulationParams::identity()).unwrap();
            modified_energy(b, &eps, &model, consts).unwrap().h / (delta * delta)
        };
        // Purely imaginary directions have no cubic remainder.
        let dir = crate::linops::random_test_field(&g, 5);
        let imag = dir.imag_part().scale(Complex64::new(0.0, 1.0));
        assert!((h_at(&imag, 1e-3) - quad(&imag)).abs() <= 1e-4);
        // General directions converge at first order.
        let e1 = (h_at(&dir, 1e-3) - quad(&dir)).abs();
        let e2 = (h_at(&dir, 5e-4) - quad(&dir)).abs();
        assert!((e1 / e2 - 2.0).abs() < 0.05, "{e1} {e2}");
        let zero = EpsilonField::from_field(&ComplexField::zeros(g), ModulationParams::identity()).unwrap();
        assert_eq!(modified_energy(b, &zero, &model, consts).unwrap().h, 0.0);
        let near = decompose(b, rho, &b.sample(&g), None, &DecomposeOptions::default()).unwrap();
        let h = modified_energy(b, &near, &model, consts).unwrap().h;
        assert!(h.abs() < 1e-12, "{h}");
    }
}
