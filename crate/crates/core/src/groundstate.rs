//! The ground state `Q` of `-ΔQ + Q - Q^{1+4/N} = 0` and its constants.
//!
//! For N = 1 the closed form `Q(x) = 3^{1/4} sech^{1/2}(2x)` is used. For N = 2
//! the radial ODE `Q'' + Q'/r - Q + Q³ = 0`, `Q'(0) = 0` is integrated with
//! classical RK4 and `Q(0)` is bisected on the events "Q crosses zero" (too
//! large) and "Q' turns positive" (too small). The trajectory is trusted up to a
//! matching radius, past which the linear tail `c K_0(r)` takes over.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::evolve::{integrate, EvolutionConfig, Stepper};
use crate::field::ComplexField;
use crate::functionals::{critical_lp_norm, mass, norms};
use crate::grid::{radius, GridSpec};
use crate::potentials::SampledModel;
use crate::radial::{bessel_k_asymptotic, RadialProfile, Tail};
use crate::spectral::spectral;

/// Radial mesh: step `h_r` and extent `R_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialMesh {
    pub step: f64,
    pub extent: f64,
}

impl Default for RadialMesh {
    fn default() -> Self {
        Self {
            step: 1e-3,
            extent: 30.0,
        }
    }
}

/// Bisection bracket for `Q(0)` when N = 2.
pub const SHOOTING_BRACKET: (f64, f64) = (1.5, 3.0);
const MATCH_RADIUS_MAX: f64 = 12.0;

pub fn closed_form_q(x: f64) -> f64 {
    let s = 1.0 / (2.0 * x).cosh();
    3f64.powf(0.25) * s.sqrt()
}

pub fn closed_form_dq(x: f64) -> f64 {
    -closed_form_q(x) * (2.0 * x).tanh()
}

#[derive(Clone)]
pub struct GroundStateBundle {
    dim: usize,
    mesh: RadialMesh,
    profile: RadialProfile,
    q0: f64,
    mass_sq: f64,
    virial_sq: f64,
    gradient_sq: f64,
    gn_constant: f64,
    residual: f64,
    cache: Arc<Mutex<HashMap<(usize, u64), Arc<ComplexField>>>>,
}

impl std::fmt::Debug for GroundStateBundle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GroundStateBundle")
            .field("dim", &self.dim)
            .field("q0", &self.q0)
            .field("mass_sq", &self.mass_sq)
            .field("virial_sq", &self.virial_sq)
            .field("residual", &self.residual)
            .finish()
    }
}

#[derive(Clone, Copy, Debug)]
enum ShotEvent {
    CrossedZero,
    TurnedUp(f64),
    Reached,
}

type Trajectory = Vec<(f64, f64)>;

fn rhs(r: f64, q: f64, p: f64) -> (f64, f64) {
    (p, -p / r + q - q * q * q)
}

/// Integrates from the origin with step `h` until `r_stop` or an event.
fn shoot(q0: f64, h: f64, r_stop: f64) -> (ShotEvent, Trajectory) {
    let a2 = (q0 - q0 * q0 * q0) / 4.0;
    let a4 = a2 * (1.0 - 3.0 * q0 * q0) / 16.0;
    let mut traj = vec![(q0, 0.0), (q0 + a2 * h * h + a4 * h.powi(4), 2.0 * a2 * h + 4.0 * a4 * h.powi(3))];
    let n = (r_stop / h).round() as usize;
    for j in 1..n {
        let r = j as f64 * h;
        let (q, p) = traj[j];
        let k1 = rhs(r, q, p);
        let k2 = rhs(r + 0.5 * h, q + 0.5 * h * k1.0, p + 0.5 * h * k1.1);
        let k3 = rhs(r + 0.5 * h, q + 0.5 * h * k2.0, p + 0.5 * h * k2.1);
        let k4 = rhs(r + h, q + h * k3.0, p + h * k3.1);
        let qn = q + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        let pn = p + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        traj.push((qn, pn));
        if qn < 0.0 {
            return (ShotEvent::CrossedZero, traj);
        }
        if pn > 0.0 {
            return (ShotEvent::TurnedUp(r + h), traj);
        }
    }
    (ShotEvent::Reached, traj)
}

fn solve_two_dim(mesh: RadialMesh) -> Result<(f64, RadialProfile)> {
    let h = mesh.step;
    let r_stop = 40.0;
    let (mut lo, mut hi) = SHOOTING_BRACKET;
    let too_large = |e: ShotEvent| matches!(e, ShotEvent::CrossedZero);
    if too_large(shoot(lo, h, r_stop).0) || !too_large(shoot(hi, h, r_stop).0) {
        return Err(Error::Shooting { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if too_large(shoot(mid, h, r_stop).0) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let (event, traj) = shoot(lo, h, r_stop);
    let r_event = match event {
        ShotEvent::TurnedUp(r) => r,
        _ => r_stop,
    };
    let r_match = (r_event - 8.0).clamp(4.0, MATCH_RADIUS_MAX);
    let j_match = (r_match / h).round() as usize;
    let n = (mesh.extent / h).round() as usize;
    let r_m = j_match as f64 * h;
    let c = traj[j_match].0 / bessel_k_asymptotic(0.0, r_m);
    let mut values = Vec::with_capacity(n + 1);
    let mut derivs = Vec::with_capacity(n + 1);
    for j in 0..=n {
        if j <= j_match {
            values.push(traj[j].0);
            derivs.push(traj[j].1);
        } else {
            let r = j as f64 * h;
            values.push(c * bessel_k_asymptotic(0.0, r));
            derivs.push(-c * bessel_k_asymptotic(1.0, r));
        }
    }
    let r_max = n as f64 * h;
    let tail = Tail {
        amplitude: values[n] * r_max.sqrt() * r_max.exp(),
    };
    Ok((lo, RadialProfile::new(2, h, values, derivs, Some(tail))?))
}

/// Largest `|Q'' + (N-1)Q'/r - Q + Q^{1+4/N}|` on the mesh, with `Q''` from
/// fourth-order differences of the stored `Q'`.
fn ode_residual(p: &RadialProfile) -> f64 {
    let h = p.step();
    let v = p.values();
    let d = p.derivatives();
    let dim = p.dim();
    let mut worst: f64 = 0.0;
    for j in 2..v.len() - 2 {
        let r = j as f64 * h;
        let d2 = (d[j - 2] - 8.0 * d[j - 1] + 8.0 * d[j + 1] - d[j + 2]) / (12.0 * h);
        let q = v[j];
        let nl = if dim == 1 { q.powi(5) } else { q.powi(3) };
        let res = d2 + (dim as f64 - 1.0) * d[j] / r - q + nl;
        worst = worst.max(res.abs());
    }
    worst
}

pub fn solve_ground_state(dim: usize, mesh: RadialMesh) -> Result<GroundStateBundle> {
    if !(mesh.step > 0.0 && mesh.extent > 20.0 * mesh.step) {
        return Err(Error::InvalidGrid(format!("bad radial mesh {mesh:?}")));
    }
    let (q0, profile) = match dim {
        1 => {
            let n = (mesh.extent / mesh.step).round() as usize;
            let values = (0..=n).map(|j| closed_form_q(j as f64 * mesh.step)).collect();
            let derivs = (0..=n).map(|j| closed_form_dq(j as f64 * mesh.step)).collect();
            let r_max = n as f64 * mesh.step;
            let tail = Tail {
                amplitude: closed_form_q(r_max) * r_max.exp(),
            };
            (closed_form_q(0.0), RadialProfile::new(1, mesh.step, values, derivs, Some(tail))?)
        }
        2 => solve_two_dim(mesh)?,
        _ => return Err(Error::UnsupportedDimension(dim)),
    };
    let n = dim as f64;
    let mass_sq = profile.integrate(|_, q, _| q * q);
    let virial_sq = profile.integrate(|r, q, _| r * r * q * q);
    let gradient_sq = profile.integrate(|_, _, d| d * d);
    let residual = ode_residual(&profile);
    Ok(GroundStateBundle {
        dim,
        mesh,
        profile,
        q0,
        mass_sq,
        virial_sq,
        gradient_sq,
        gn_constant: (1.0 + 2.0 / n) / mass_sq.powf(2.0 / n),
        residual,
        cache: Arc::new(Mutex::new(HashMap::new())),
    })
}

impl GroundStateBundle {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mesh(&self) -> RadialMesh {
        self.mesh
    }

    pub fn profile(&self) -> &RadialProfile {
        &self.profile
    }

    /// `Q(0)`.
    pub fn peak(&self) -> f64 {
        self.q0
    }

    /// `‖Q‖_2^2`.
    pub fn mass_sq(&self) -> f64 {
        self.mass_sq
    }

    /// `‖yQ‖_2^2`.
    pub fn virial_sq(&self) -> f64 {
        self.virial_sq
    }

    /// `‖∇Q‖_2^2`.
    pub fn gradient_sq(&self) -> f64 {
        self.gradient_sq
    }

    /// Sharp constant `C` in `‖v‖_{2+4/N}^{2+4/N} ≤ C ‖∇v‖_2^2 ‖v‖_2^{4/N}`.
    pub fn gn_constant(&self) -> f64 {
        self.gn_constant
    }

    /// ODE residual on the radial mesh.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// `Q(r)` and `Q'(r)`.
    pub fn eval_with_derivative(&self, r: f64) -> (f64, f64) {
        if self.dim == 1 {
            (closed_form_q(r), closed_form_dq(r.abs()))
        } else {
            self.profile.eval_with_derivative(r)
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.eval_with_derivative(r).0
    }

    /// `ΛQ(r) = (N/2)Q + rQ'`.
    pub fn lambda_q(&self, r: f64) -> f64 {
        let (q, d) = self.eval_with_derivative(r);
        0.5 * self.dim as f64 * q + r.abs() * d
    }

    /// `Q` sampled on `grid` (cached per grid).
    pub fn sample(&self, grid: &GridSpec) -> Arc<ComplexField> {
        assert_eq!(grid.dim(), self.dim, "grid dimension differs from the bundle");
        let key = (grid.points(), grid.half_width().to_bits());
        let mut cache = self.cache.lock().unwrap();
        cache
            .entry(key)
            .or_insert_with(|| {
                Arc::new(ComplexField::from_real_fn(*grid, |x| {
                    self.eval(radius(&x, self.dim))
                }))
            })
            .clone()
    }

    /// Real samples `f(|x|, Q, Q')` on `grid`.
    pub fn sample_with(&self, grid: &GridSpec, f: impl Fn(f64, f64, f64) -> f64) -> ComplexField {
        ComplexField::from_real_fn(*grid, |x| {
            let r = radius(&x, self.dim);
            let (q, d) = self.eval_with_derivative(r);
            f(r, q, d)
        })
    }

    /// Metadata stored next to cached fields.
    pub fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "N": self.dim,
            "mass_sq": self.mass_sq,
            "virial_sq": self.virial_sq,
            "residual": self.residual,
            "peak": self.q0,
            "radial_step": self.mesh.step,
            "radial_extent": self.mesh.extent,
        })
    }

    /// Writes `Q` sampled on `grid` into `dir`; returns the file path.
    pub fn write_cache(&self, dir: &Path, grid: &GridSpec) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = cache_path(dir, "q", grid);
        self.sample(grid).write_snapshot(&path, Some(self.metadata()))?;
        Ok(path)
    }
}

/// File name used for cached fields: `<name>_N<dim>_M<points>_L<half-width>.nlsf`.
pub fn cache_path(dir: &Path, name: &str, grid: &GridSpec) -> PathBuf {
    dir.join(format!(
        "{name}_N{}_M{}_L{}.nlsf",
        grid.dim(),
        grid.points(),
        grid.half_width()
    ))
}

/// Loads a cached field if present and matching `grid`.
pub fn read_cached_field(dir: &Path, name: &str, grid: &GridSpec) -> Result<Option<ComplexField>> {
    let path = cache_path(dir, name, grid);
    if !path.exists() {
        return Ok(None);
    }
    let field = ComplexField::read_snapshot(&path)?;
    if field.grid() != grid {
        return Err(Error::GridMismatch(format!("cached {name} at {}", path.display())));
    }
    Ok(Some(field))
}

/// `J(v) = ‖v‖_{2+4/N}^{2+4/N} / [(1+2/N)(‖v‖_2/‖Q‖_2)^{4/N} ‖∇v‖_2^2]`.
pub fn gn_quotient(bundle: &GroundStateBundle, v: &ComplexField) -> f64 {
    let n = v.grid().dim() as f64;
    let lp = critical_lp_norm(v);
    let m = mass(v);
    let grad = spectral(v.grid()).gradient_norm_sq(v);
    lp / ((1.0 + 2.0 / n) * (m / bundle.mass_sq()).powf(2.0 / n) * grad)
}

pub fn gn_sharpness(bundle: &GroundStateBundle, trials: &[ComplexField]) -> Vec<f64> {
    trials.iter().map(|v| gn_quotient(bundle, v)).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubcriticalReport {
    pub mass_ratio: f64,
    pub initial_gradient: f64,
    pub sup_gradient: f64,
    pub triggered: bool,
}

impl SubcriticalReport {
    /// `sup ‖∇u‖ / ‖∇u_0‖` (1 for vanishing data).
    pub fn growth_ratio(&self) -> f64 {
        if self.initial_gradient == 0.0 {
            1.0
        } else {
            self.sup_gradient / self.initial_gradient
        }
    }
}

/// Integrates `u0` over `[0, window]` and reports the largest gradient norm.
pub fn subcritical_global_bound_check(
    bundle: &GroundStateBundle,
    u0: &ComplexField,
    model: &SampledModel,
    window: f64,
    dt: f64,
) -> Result<SubcriticalReport> {
    let initial = norms(u0);
    let mass_ratio = initial.l2 * initial.l2 / bundle.mass_sq();
    if initial.l2 == 0.0 {
        return Ok(SubcriticalReport {
            mass_ratio: 0.0,
            initial_gradient: 0.0,
            sup_gradient: 0.0,
            triggered: false,
        });
    }
    let config = EvolutionConfig {
        stepper: Stepper::StrangSplitting,
        dt,
        t_start: 0.0,
        t_end: window,
        cadence: ((window / dt / 50.0).round() as usize).max(1),
        max_gradient: Some(1e3 * initial.gradient_l2.max(1.0)),
        min_width: None,
        ..EvolutionConfig::default()
    };
    let (record, _) = integrate(u0, model, &config)?;
    let sup = record
        .samples
        .iter()
        .map(|s| s.norms.gradient_l2)
        .fold(0.0, f64::max);
    Ok(SubcriticalReport {
        mass_ratio,
        initial_gradient: initial.gradient_l2,
        sup_gradient: sup,
        triggered: record.trigger.is_some(),
    })
}

/// `Q e^{iθ}` sampled on `grid`.
pub fn rotated(bundle: &GroundStateBundle, grid: &GridSpec, theta: f64) -> ComplexField {
    bundle.sample(grid).scale(Complex64::from_polar(1.0, theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::functionals::critical_energy;
    use std::f64::consts::PI;

    #[test]
    fn closed_form_solves_ode() {
        for x in [0.0, 0.3, 1.0, 2.5, 6.0] {
            let h = 1e-4;
            let d2 = (closed_form_q(x + h) - 2.0 * closed_form_q(x) + closed_form_q(x - h)) / (h * h);
            let q = closed_form_q(x);
            assert!((d2 - q + q.powi(5)).abs() < 1e-6, "x = {x}");
        }
        assert!((closed_form_q(0.0) - 1.316074).abs() < 1e-6);
    }

    #[test]
    fn one_dim_constants() {
        let b = solve_ground_state(1, RadialMesh::default()).unwrap();
        assert!((b.mass_sq() - 3f64.sqrt() * PI / 2.0).abs() < 1e-10);
        // ∫ x² √3 sech(2x) dx = √3 π³ / 32.
        assert!((b.virial_sq() - 3f64.sqrt() * PI.powi(3) / 32.0).abs() < 1e-9);
        assert!(b.residual() < 1e-8, "{}", b.residual());
    }

    #[test]
    fn two_dim_profile() {
        let b = solve_ground_state(2, RadialMesh::default()).unwrap();
        assert!(b.residual() <= 1e-8, "residual {}", b.residual());
        assert!((b.peak() - 2.206).abs() < 1e-3, "peak {}", b.peak());
        let v = b.profile().values();
        assert!(v.windows(2).all(|w| w[1] < w[0]));
        assert!(v[v.len() - 1] < 1e-10 * v[0]);
    }

    #[test]
    fn pohozaev_and_gn_at_q() {
        let b = solve_ground_state(1, RadialMesh::default()).unwrap();
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let q = b.sample(&g);
        let e = critical_energy(&q);
        let h1_sq = norms(&q).h1.powi(2);
        assert!(e.abs() <= 1e-6 * h1_sq);
        assert!((gn_quotient(&b, &q) - 1.0).abs() < 1e-6);
        assert!((mass(&q) - b.mass_sq()).abs() < 1e-8);
    }

    #[test]
    fn gn_below_one_and_scale_invariant() {
        let b = solve_ground_state(1, RadialMesh::default()).unwrap();
        let g = GridSpec::new(1, 1024, 20.0).unwrap();
        let gauss = ComplexField::from_real_fn(g, |x| (-x[0] * x[0]).exp());
        assert!(gn_quotient(&b, &gauss) < 1.0);
        let q = b.sample(&g);
        let scaled = ComplexField::from_real_fn(g, |x| 1.7 * closed_form_q(1.3 * x[0]));
        assert!((gn_quotient(&b, &scaled) - gn_quotient(&b, &q)).abs() < 1e-10);
    }

    #[test]
    fn shooting_reports_bad_bracket() {
        let (e, _) = shoot(3.0, 1e-3, 40.0);
        assert!(matches!(e, ShotEvent::CrossedZero));
        let (e, _) = shoot(1.5, 1e-3, 40.0);
        assert!(matches!(e, ShotEvent::TurnedUp(_)));
    }
}
