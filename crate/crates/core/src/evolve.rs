//! Time integration with Strang splitting or an implicit midpoint
//! (Crank–Nicolson) scheme, conservation monitoring and blow-up triggers.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::functionals::{critical_power, energy, mass, norms, NormReport};
use crate::potentials::SampledModel;
use crate::spectral::{spectral, Spectral};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stepper {
    StrangSplitting,
    CrankNicolson,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EvolutionConfig {
    pub stepper: Stepper,
    pub dt: f64,
    pub t_start: f64,
    pub t_end: f64,
    /// Steps between recorded samples.
    pub cadence: usize,
    /// Trigger when `‖∇u‖_2` exceeds this.
    pub max_gradient: Option<f64>,
    /// Trigger when `‖u‖_2 / ‖∇u‖_2` falls below this.
    pub min_width: Option<f64>,
    /// Inner fixed-point tolerance of the implicit scheme.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Steps between snapshots written to `snapshot_dir`.
    pub snapshot_every: Option<usize>,
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            stepper: Stepper::StrangSplitting,
            dt: 1e-3,
            t_start: 0.0,
            t_end: 1.0,
            cadence: 10,
            max_gradient: None,
            min_width: None,
            inner_tol: 1e-10,
            inner_max_iter: 100,
            snapshot_every: None,
            snapshot_dir: None,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self, h: f64) -> Result<()> {
        if !(self.dt.is_finite() && self.dt != 0.0) {
            return Err(Error::Config(format!("dt must be finite and non-zero, got {}", self.dt)));
        }
        if !(self.t_start.is_finite() && self.t_end.is_finite()) {
            return Err(Error::Config("non-finite time window".into()));
        }
        let span = self.t_end - self.t_start;
        if span != 0.0 && span.signum() != self.dt.signum() {
            return Err(Error::Config("dt points away from t_end".into()));
        }
        if self.cadence == 0 {
            return Err(Error::Config("cadence must be at least 1".into()));
        }
        if self.stepper == Stepper::CrankNicolson && self.dt.abs() > 0.25 * h * h {
            return Err(Error::Config(format!(
                "crank-nicolson needs |dt| <= h^2/4 = {:e}",
                0.25 * h * h
            )));
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iter == 0 {
            return Err(Error::Config("bad inner iteration settings".into()));
        }
        Ok(())
    }
}

/// Precomputed factors for repeated steps of fixed size.
pub struct Propagator<'a> {
    model: &'a SampledModel,
    spectral: Arc<Spectral>,
    dim: usize,
    dt: f64,
    stepper: Stepper,
    /// `e^{-i dt |k|²}` for splitting, or the pair of CN factors.
    free: Vec<Complex64>,
    cn_denominator: Vec<Complex64>,
    inner_tol: f64,
    inner_max_iter: usize,
}

impl<'a> Propagator<'a> {
    pub fn new(model: &'a SampledModel, dt: f64, stepper: Stepper) -> Self {
        let sp = spectral(model.grid());
        let (free, cn_denominator) = match stepper {
            Stepper::StrangSplitting => (
                sp.k_squared()
                    .iter()
                    .map(|&k2| Complex64::from_polar(1.0, -dt * k2))
                    .collect(),
                Vec::new(),
            ),
            Stepper::CrankNicolson => {
                let num = sp
                    .k_squared()
                    .iter()
                    .map(|&k2| Complex64::new(1.0, -0.5 * dt * k2))
                    .collect();
                let den = sp
                    .k_squared()
                    .iter()
                    .map(|&k2| Complex64::new(1.0, 0.5 * dt * k2).inv())
                    .collect();
                (num, den)
            }
        };
        Self {
            model,
            dim: model.grid().dim(),
            spectral: sp,
            dt,
            stepper,
            free,
            cn_denominator,
            inner_tol: 1e-10,
            inner_max_iter: 100,
        }
    }

    pub fn with_inner(mut self, tol: f64, max_iter: usize) -> Self {
        self.inner_tol = tol;
        self.inner_max_iter = max_iter;
        self
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn nonlinear_phase(&self, values: &mut [Complex64], tau: f64) {
        let g = self.model.g_values();
        let w = self.model.w_values();
        for (i, z) in values.iter_mut().enumerate() {
            let theta = tau * (g[i] * critical_power(*z, self.dim) - w[i]);
            *z *= Complex64::from_polar(1.0, theta);
        }
    }

    /// `i (g|m|^{4/N} - W) m`.
    fn nonlinear_rhs(&self, m: &[Complex64]) -> Vec<Complex64> {
        let g = self.model.g_values();
        let w = self.model.w_values();
        m.iter()
            .enumerate()
            .map(|(i, z)| Complex64::new(0.0, g[i] * critical_power(*z, self.dim) - w[i]) * z)
            .collect()
    }

    fn strang(&self, values: &mut [Complex64]) {
        self.nonlinear_phase(values, 0.5 * self.dt);
        self.spectral.apply_factor(values, &self.free);
        self.nonlinear_phase(values, 0.5 * self.dt);
    }

    /// Implicit midpoint: `û₁(1 + i dt k²/2) = û₀(1 - i dt k²/2) + dt FFT(N(m))`,
    /// `m = (u₀ + u₁)/2`, solved by fixed-point iteration on `u₁`.
    fn crank_nicolson(&self, values: &mut [Complex64]) -> Result<()> {
        let u0 = values.to_vec();
        let mut hat0 = u0.clone();
        self.spectral.forward(&mut hat0);
        hat0.iter_mut().zip(&self.free).for_each(|(z, f)| *z *= f);
        let mut u1 = u0.clone();
        self.strang(&mut u1);
        let mut history = Vec::new();
        for _ in 0..self.inner_max_iter {
            let mid: Vec<Complex64> = u0.iter().zip(&u1).map(|(a, b)| 0.5 * (a + b)).collect();
            let mut rhs = self.nonlinear_rhs(&mid);
            self.spectral.forward(&mut rhs);
            let mut next: Vec<Complex64> = hat0
                .iter()
                .zip(&rhs)
                .zip(&self.cn_denominator)
                .map(|((a, b), d)| (a + self.dt * b) * d)
                .collect();
            self.spectral.inverse(&mut next);
            let diff = next
                .iter()
                .zip(&u1)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            u1 = next;
            history.push(diff);
            if !diff.is_finite() {
                break;
            }
            if diff <= self.inner_tol {
                values.copy_from_slice(&u1);
                return Ok(());
            }
        }
        Err(Error::NoConvergence {
            what: "implicit midpoint inner iteration",
            residuals: history,
        })
    }

    /// Advances `u` in place by one step; `t` is only used for error reports.
    pub fn advance(&self, u: &mut ComplexField, t: f64) -> Result<()> {
        let before = u.clone();
        let vals = u.values_mut();
        match self.stepper {
            Stepper::StrangSplitting => self.strang(vals),
            Stepper::CrankNicolson => {
                if let Err(e) = self.crank_nicolson(vals) {
                    return match e {
                        Error::NoConvergence { ref residuals, .. }
                            if residuals.last().map_or(true, |r| !r.is_finite()) =>
                        {
                            Err(Error::BlowupSuspected {
                                t,
                                last_finite: Box::new(before),
                            })
                        }
                        other => Err(other),
                    };
                }
            }
        }
        if !u.is_finite() {
            return Err(Error::BlowupSuspected {
                t,
                last_finite: Box::new(before),
            });
        }
        Ok(())
    }
}

/// One step of size `dt` (negative values integrate backward).
pub fn step(u: &ComplexField, model: &SampledModel, dt: f64, stepper: Stepper) -> Result<ComplexField> {
    check_grid(u, model)?;
    if !u.is_finite() {
        return Err(Error::NonFinite("input field".into()));
    }
    let mut v = u.clone();
    Propagator::new(model, dt, stepper).advance(&mut v, 0.0)?;
    Ok(v)
}

/// One implicit midpoint step.
pub fn crank_nicolson_step(
    u: &ComplexField,
    model: &SampledModel,
    dt: f64,
    inner_tol: f64,
) -> Result<ComplexField> {
    check_grid(u, model)?;
    let mut v = u.clone();
    Propagator::new(model, dt, Stepper::CrankNicolson)
        .with_inner(inner_tol, 100)
        .advance(&mut v, 0.0)?;
    Ok(v)
}

fn check_grid(u: &ComplexField, model: &SampledModel) -> Result<()> {
    if u.grid() != model.grid() {
        return Err(Error::GridMismatch("field and potential samples".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Trigger {
    /// `‖∇u‖_2` passed the configured threshold (blow-up alternative).
    GradientThreshold,
    /// Effective width fell below the floor.
    WidthFloor,
    /// The field became non-finite.
    NonFinite,
}

impl Trigger {
    pub fn as_str(&self) -> &'static str {
        match self {
            Trigger::GradientThreshold => "gradient-threshold",
            Trigger::WidthFloor => "width-floor",
            Trigger::NonFinite => "non-finite",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub mass: f64,
    pub energy: f64,
    pub norms: NormReport,
    pub trigger: Option<Trigger>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub samples: Vec<TrajectorySample>,
    pub trigger: Option<Trigger>,
    pub steps: usize,
}

impl TrajectoryRecord {
    pub fn sample(u: &ComplexField, model: &SampledModel, t: f64) -> TrajectorySample {
        TrajectorySample {
            t,
            mass: mass(u),
            energy: energy(u, model),
            norms: norms(u),
            trigger: None,
        }
    }

    /// Energy normalization: `max(|E_0|, ½‖∇u_0‖²)`, so that data with zero
    /// energy (the soliton) still gets a meaningful relative drift.
    pub fn energy_scale(&self) -> f64 {
        let s0 = &self.samples[0];
        s0.energy.abs().max(0.5 * s0.norms.gradient_l2.powi(2)).max(f64::MIN_POSITIVE)
    }

    /// Signed relative mass deviations from the first sample.
    pub fn mass_drifts(&self) -> Vec<f64> {
        let m0 = self.samples[0].mass;
        self.samples.iter().map(|s| (s.mass - m0) / m0).collect()
    }

    /// Signed energy deviations from the first sample, relative to [`Self::energy_scale`].
    pub fn energy_drifts(&self) -> Vec<f64> {
        let e0 = self.samples[0].energy;
        let scale = self.energy_scale();
        self.samples.iter().map(|s| (s.energy - e0) / scale).collect()
    }

    pub fn max_mass_drift(&self) -> f64 {
        self.mass_drifts().iter().map(|d| d.abs()).fold(0.0, f64::max)
    }

    pub fn max_energy_drift(&self) -> f64 {
        self.energy_drifts().iter().map(|d| d.abs()).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t", "mass", "energy", "l2", "h1", "grad_l2", "weighted_l2", "trigger"])?;
        for s in &self.samples {
            w.write_record([
                format!("{:.17e}", s.t),
                format!("{:.17e}", s.mass),
                format!("{:.17e}", s.energy),
                format!("{:.17e}", s.norms.l2),
                format!("{:.17e}", s.norms.h1),
                format!("{:.17e}", s.norms.gradient_l2),
                format!("{:.17e}", s.norms.weighted_l2),
                s.trigger.map(|t| t.as_str().to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_triggers(s: &TrajectorySample, config: &EvolutionConfig) -> Option<Trigger> {
    if let Some(g) = config.max_gradient {
        if s.norms.gradient_l2 > g {
            return Some(Trigger::GradientThreshold);
        }
    }
    if let Some(wmin) = config.min_width {
        if s.norms.gradient_l2 > 0.0 && s.norms.l2 / s.norms.gradient_l2 < wmin {
            return Some(Trigger::WidthFloor);
        }
    }
    None
}

/// Integrates from `t_start` to `t_end`; a trigger ends the run early and is recorded.
pub fn integrate(
    u0: &ComplexField,
    model: &SampledModel,
    config: &EvolutionConfig,
) -> Result<(TrajectoryRecord, ComplexField)> {
    check_grid(u0, model)?;
    config.validate(u0.grid().spacing())?;
    if !u0.is_finite() {
        return Err(Error::NonFinite("initial field".into()));
    }
    let span = config.t_end - config.t_start;
    let n_steps = (span / config.dt - 1e-9).ceil().max(0.0) as usize;
    let dt_last = span - (n_steps.saturating_sub(1)) as f64 * config.dt;
    let prop = Propagator::new(model, config.dt, config.stepper)
        .with_inner(config.inner_tol, config.inner_max_iter);
    let last_prop = if n_steps > 0 && (dt_last - config.dt).abs() > 1e-14 * config.dt.abs() {
        Some(Propagator::new(model, dt_last, config.stepper).with_inner(config.inner_tol, config.inner_max_iter))
    } else {
        None
    };

    let mut u = u0.clone();
    let mut rec = TrajectoryRecord::default();
    let mut first = TrajectoryRecord::sample(&u, model, config.t_start);
    first.trigger = check_triggers(&first, config);
    rec.trigger = first.trigger;
    rec.samples.push(first);
    if rec.trigger.is_some() {
        return Ok((rec, u));
    }
    let mut t = config.t_start;
    for k in 1..=n_steps {
        let p = match (&last_prop, k == n_steps) {
            (Some(lp), true) => lp,
            _ => &prop,
        };
        match p.advance(&mut u, t) {
            Ok(()) => {}
            Err(Error::BlowupSuspected { last_finite, .. }) => {
                let mut s = TrajectoryRecord::sample(&last_finite, model, t);
                s.trigger = Some(Trigger::NonFinite);
                rec.samples.push(s);
                rec.trigger = Some(Trigger::NonFinite);
                rec.steps = k - 1;
                return Ok((rec, *last_finite));
            }
            Err(e) => return Err(e),
        }
        t = if k == n_steps {
            config.t_end
        } else {
            config.t_start + k as f64 * config.dt
        };
        if let (Some(every), Some(dir)) = (config.snapshot_every, &config.snapshot_dir) {
            if k % every == 0 {
                std::fs::create_dir_all(dir)?;
                u.write_snapshot(
                    &dir.join(format!("u_{k:08}.nlsf")),
                    Some(serde_json::json!({ "t": t, "step": k })),
                )?;
            }
        }
        if k % config.cadence == 0 || k == n_steps {
            let mut s = TrajectoryRecord::sample(&u, model, t);
            s.trigger = check_triggers(&s, config);
            let fired = s.trigger;
            rec.samples.push(s);
            if fired.is_some() {
                rec.trigger = fired;
                rec.steps = k;
                return Ok((rec, u));
            }
        }
    }
    rec.steps = n_steps;
    Ok((rec, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::groundstate::{solve_ground_state, RadialMesh};

    /// `e^{-a x²}` evolved by `u_t = iΔu`.
    fn free_gaussian(a: f64, t: f64, x: f64) -> Complex64 {
        let d = Complex64::new(1.0, 4.0 * a * t);
        (-(a * x * x) / d).exp() / d.sqrt()
    }

    #[test]
    fn soliton_modulus_is_stationary() {
        let b = solve_ground_state(1, RadialMesh::default()).unwrap();
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let model = SampledModel::free(&g);
        let q = b.sample(&g);
        let v = step(&q, &model, 1e-3, Stepper::StrangSplitting).unwrap();
        let worst = q
            .values()
            .iter()
            .zip(v.values())
            .map(|(a, b)| (a.norm() - b.norm()).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn linear_gaussian_matches_closed_form() {
        let g = GridSpec::new(1, 512, 20.0).unwrap();
        let model = SampledModel::linear(&g);
        let a = 1.0;
        let u0 = ComplexField::from_fn(g, |x| free_gaussian(a, 0.0, x[0]));
        for stepper in [Stepper::StrangSplitting, Stepper::CrankNicolson] {
            let cfg = EvolutionConfig {
                stepper,
                dt: 1e-4,
                t_start: 0.0,
                t_end: 0.1,
                cadence: 100,
                ..EvolutionConfig::default()
            };
            let (_, u) = integrate(&u0, &model, &cfg).unwrap();
            let exact = ComplexField::from_fn(g, |x| free_gaussian(a, 0.1, x[0]));
            let err = u.sub(&exact).max_abs();
            let tol = if stepper == Stepper::StrangSplitting { 1e-10 } else { 1e-6 };
            assert!(err < tol, "{stepper:?}: {err}");
        }
    }

    #[test]
    fn second_order_in_dt() {
        let g = GridSpec::new(1, 256, 12.0).unwrap();
        let model = SampledModel::free(&g);
        let u0 = ComplexField::from_fn(g, |x| Complex64::new((-x[0] * x[0]).exp() * 1.2, 0.3 * x[0] * (-x[0] * x[0]).exp()));
        for stepper in [Stepper::StrangSplitting, Stepper::CrankNicolson] {
            let run = |dt: f64| {
                let cfg = EvolutionConfig {
                    stepper,
                    dt,
                    t_start: 0.0,
                    t_end: 0.02,
                    cadence: 1000,
                    ..EvolutionConfig::default()
                };
                integrate(&u0, &model, &cfg).unwrap().1
            };
            let reference = run(1.25e-5);
            let e1 = run(2e-4).sub(&reference).norm_l2();
            let e2 = run(1e-4).sub(&reference).norm_l2();
            let ratio = e1 / e2;
            assert!((3.5..4.5).contains(&ratio), "{stepper:?}: ratio {ratio}");
        }
    }

    #[test]
    fn time_reversal() {
        let g = GridSpec::new(1, 256, 12.0).unwrap();
        let model = SampledModel::free(&g);
        let u0 = ComplexField::from_fn(g, |x| Complex64::new(1.1 * (-x[0] * x[0]).exp(), 0.0));
        let u1 = step(&u0, &model, 1e-3, Stepper::StrangSplitting).unwrap();
        let back = step(&u1, &model, -1e-3, Stepper::StrangSplitting).unwrap();
        assert!(back.sub(&u0).max_abs() < 1e-9);
    }

    #[test]
    fn blow_up_trigger_is_recorded() {
        let g = GridSpec::new(1, 256, 8.0).unwrap();
        let model = SampledModel::free(&g);
        let u0 = ComplexField::from_real_fn(g, |x| 2.0 * (-x[0] * x[0]).exp());
        let cfg = EvolutionConfig {
            dt: 1e-4,
            t_start: 0.0,
            t_end: 1.0,
            cadence: 10,
            max_gradient: Some(20.0),
            ..EvolutionConfig::default()
        };
        let (rec, _) = integrate(&u0, &model, &cfg).unwrap();
        assert_eq!(rec.trigger, Some(Trigger::GradientThreshold));
        assert_eq!(rec.samples.last().unwrap().trigger, Some(Trigger::GradientThreshold));
    }

    #[test]
    fn config_rejections() {
        let base = EvolutionConfig::default();
        assert!(EvolutionConfig { dt: 0.0, ..base.clone() }.validate(0.1).is_err());
        assert!(EvolutionConfig { cadence: 0, ..base.clone() }.validate(0.1).is_err());
        assert!(EvolutionConfig { t_end: -1.0, ..base.clone() }.validate(0.1).is_err());
        assert!(EvolutionConfig { stepper: Stepper::CrankNicolson, dt: 1e-2, ..base.clone() }
            .validate(0.1)
            .is_err());
        assert!(base.validate(0.1).is_ok());
    }

    #[test]
    fn csv_header() {
        let g = GridSpec::new(1, 64, 8.0).unwrap();
        let model = SampledModel::free(&g);
        let u0 = ComplexField::from_real_fn(g, |x| (-x[0] * x[0]).exp());
        let cfg = EvolutionConfig { dt: 1e-3, t_end: 1e-2, cadence: 5, ..EvolutionConfig::default() };
        let (rec, _) = integrate(&u0, &model, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        rec.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,mass,energy,l2,h1,grad_l2,weighted_l2,trigger\n"));
        assert_eq!(text.lines().count(), 1 + rec.samples.len());
    }
}
