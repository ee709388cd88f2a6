//! Blow-up experiments: initial data, integration toward `t = 0⁻`, decomposition
//! along the trajectory, rate fits and reports.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evolve::{Propagator, Stepper, TrajectoryRecord, Trigger};
use crate::field::ComplexField;
use crate::functionals::energy;
use crate::grid::GridSpec;
use crate::groundstate::{solve_ground_state, GroundStateBundle, RadialMesh};
use crate::linops::{coercivity_mu, RhoProfile};
use crate::suite::load_or_solve_rho;
use crate::modulation::{
    decompose, modified_energy, mod_vector_nonuniform, psi_field, recompose, rescaled_time, DecomposeOptions,
    EnergyConstants, ModVector, ModulationParams,
};
use crate::potentials::{catalog, kappa, ModelSpec, SampledModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub points: usize,
    pub half_width: f64,
}

/// Either a bundled catalog entry or an explicit model.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Catalog { catalog: String },
    Spec(ModelSpec),
}

impl Default for ModelRef {
    fn default() -> Self {
        ModelRef::Spec(ModelSpec::free())
    }
}

impl ModelRef {
    pub fn resolve(&self, dim: usize) -> Result<ModelSpec> {
        match self {
            ModelRef::Spec(s) => Ok(s.clone()),
            ModelRef::Catalog { catalog: name } => catalog(dim)
                .into_iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s)
                .ok_or_else(|| Error::Config(format!("unknown catalog model `{name}`"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    /// Target energy `E₀ > 0`.
    pub e0: f64,
    /// Starting rescaled time.
    pub s1: f64,
    /// Lower bound for `s₁`.
    #[serde(default)]
    pub s0: f64,
    #[serde(default)]
    pub model: ModelRef,
    pub grid: GridConfig,
    #[serde(default = "default_stepper")]
    pub stepper: Stepper,
    /// Rescaled-time step at the floor scale: `dt = ds · λ_floor²`.
    #[serde(default = "default_ds")]
    pub ds: f64,
    /// `λ_floor = lambda_floor_factor · h`.
    #[serde(default = "default_floor")]
    pub lambda_floor_factor: f64,
    #[serde(default)]
    pub s_max: Option<f64>,
    /// Steps between decompositions.
    #[serde(default = "default_every")]
    pub decompose_every: usize,
    /// Unbounded potential terms are windowed at this fraction of `L`.
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_eps_prime")]
    pub eps_prime: f64,
    /// Decades of `λ` covered by the rate fit, counted from the smallest fitted scale.
    #[serde(default = "default_decades")]
    pub fit_decades: f64,
    /// Samples with `λ < fit_floor_factor · h` are left out of the rate fit.
    #[serde(default = "default_fit_floor")]
    pub fit_floor_factor: f64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_stepper() -> Stepper {
    Stepper::StrangSplitting
}
fn default_ds() -> f64 {
    0.01
}
fn default_floor() -> f64 {
    8.0
}
fn default_every() -> usize {
    20
}
fn default_window() -> f64 {
    0.8
}
fn default_delta() -> f64 {
    0.1
}
fn default_eps_prime() -> f64 {
    0.25
}
fn default_decades() -> f64 {
    1.0
}
fn default_fit_floor() -> f64 {
    16.0
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.dim, self.grid.points, self.grid.half_width).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn lambda_floor(&self) -> Result<f64> {
        Ok(self.lambda_floor_factor * self.grid()?.spacing())
    }

    pub fn dt(&self) -> Result<f64> {
        Ok(self.ds * self.lambda_floor()?.powi(2))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.dim) {
            return bad(format!("dimension must be 1 or 2, got {}", self.dim));
        }
        if !(self.e0 > 0.0 && self.e0.is_finite()) {
            return bad(format!("e0 must be positive, got {}", self.e0));
        }
        if !(self.s1 > 0.0 && self.s1 >= self.s0) {
            return bad(format!("need s1 > 0 and s1 >= s0, got s1 = {}, s0 = {}", self.s1, self.s0));
        }
        if !(self.ds > 0.0) || self.decompose_every == 0 || !(self.lambda_floor_factor > 0.0) {
            return bad("ds, decompose_every and lambda_floor_factor must be positive".into());
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return bad("window_fraction must lie in (0, 1]".into());
        }
        if !(self.fit_decades > 0.0) || !(self.fit_floor_factor > 0.0) {
            return bad("fit_decades and fit_floor_factor must be positive".into());
        }
        self.grid()?;
        self.model
            .resolve(self.dim)?
            .validate(self.dim)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

/// `(λ₁, t₁)` from `(E₀, s₁)` and `‖yQ‖₂²`.
pub fn initial_scale(virial_sq: f64, e0: f64, s1: f64) -> (f64, f64) {
    let c = virial_sq / (8.0 * e0);
    (c.sqrt() / s1, -c / s1)
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub u: ComplexField,
    pub params: ModulationParams,
    pub t1: f64,
    pub s1: f64,
    /// `E` of the prepared field.
    pub energy: f64,
}

/// Root of a continuous `f` on `[lo, hi]` with `f(lo) f(hi) ≤ 0` (Illinois variant of regula falsi).
pub fn find_root(mut f: impl FnMut(f64) -> Result<f64>, mut lo: f64, mut hi: f64, tol: f64) -> Result<f64> {
    let mut flo = f(lo)?;
    let mut fhi = f(hi)?;
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() {
        return Err(Error::Bracket(format!("no sign change on [{lo}, {hi}]")));
    }
    let mut side = 0;
    for _ in 0..200 {
        let x = (lo * fhi - hi * flo) / (fhi - flo);
        let fx = f(x)?;
        if fx == 0.0 || (hi - lo).abs() <= tol * x.abs().max(1.0) {
            return Ok(x);
        }
        if fx.signum() == fhi.signum() {
            hi = x;
            fhi = fx;
            if side == -1 {
                flo *= 0.5;
            }
            side = -1;
        } else {
            lo = x;
            flo = fx;
            if side == 1 {
                fhi *= 0.5;
            }
            side = 1;
        }
    }
    Ok(0.5 * (lo + hi))
}

pub fn prepare_initial(
    config: &ExperimentConfig,
    bundle: &GroundStateBundle,
    model: &SampledModel,
) -> Result<PreparedData> {
    config.validate()?;
    let grid = model.grid();
    let (lambda1, t1) = initial_scale(bundle.virial_sq(), config.e0, config.s1);
    let floor = config.lambda_floor()?;
    if lambda1 <= floor {
        return Err(Error::Config(format!(
            "λ₁ = {lambda1:.4} is below the floor {floor:.4}; lower s1 or refine the grid"
        )));
    }
    let energy_at = |b: f64| -> Result<f64> {
        let u = recompose(bundle, &ModulationParams::new(lambda1, b, 0.0, [0.0, 0.0]), grid, None)?;
        Ok(energy(&u, model) - config.e0)
    };
    let mut hi = (8.0 * config.e0 / bundle.virial_sq()).sqrt() * lambda1;
    let mut tries = 0;
    while energy_at(hi)? < 0.0 {
        hi *= 2.0;
        tries += 1;
        if tries > 40 {
            return Err(Error::Bracket(format!("energy stays below E0 = {} up to b = {hi:e}", config.e0)));
        }
    }
    let b1 = find_root(energy_at, 0.0, hi, 1e-15)?;
    let params = ModulationParams::new(lambda1, b1, 0.0, [0.0, 0.0]);
    let u = recompose(bundle, &params, grid, None)?;
    let e = energy(&u, model);
    Ok(PreparedData {
        u,
        params,
        t1,
        s1: config.s1,
        energy: e,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    LambdaFloor,
    SMax,
    BasinLost,
    DeltaExceeded,
    Trigger,
    /// `λ` turned around at the grid scale before the floor.
    Rebound,
    /// `t` passed `|t₁|` without reaching the floor.
    TimeLimit,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModulationSample {
    pub t: f64,
    pub s: f64,
    pub params: ModulationParams,
    pub eps_l2: f64,
    pub eps_h1: f64,
    pub y_eps_l2: f64,
    pub modulation: Option<ModVector>,
    pub h: f64,
    pub s_energy: f64,
    pub comparator: f64,
    pub psi_norm: f64,
    /// `(ε,Q)₂ + ½‖ε‖₂²`.
    pub mass_identity: f64,
    /// Largest orthogonality residual.
    pub orthogonality: f64,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual.
    pub rms: f64,
    pub samples: usize,
}

/// Least squares `y ≈ slope·x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - slope * a - intercept).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    LinearFit {
        slope,
        intercept,
        rms,
        samples: x.len(),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateFitReport {
    pub window: [f64; 2],
    pub samples: usize,
    /// `c` in `λ ≈ c (T* - t)`.
    pub lambda_slope: f64,
    /// `T*` from the same fit.
    pub t_star: f64,
    pub lambda_fit: LinearFit,
    /// `c` in `λ ≈ c |t|`.
    pub lambda_slope_origin: f64,
    /// Exponent of `λ` against `|t|` (log-log).
    pub lambda_exponent: f64,
    pub b_slope: f64,
    pub b_fit: LinearFit,
    pub b_over_lambda: f64,
    pub predicted_lambda_slope: f64,
    pub predicted_b_slope: f64,
    pub predicted_b_over_lambda: f64,
    pub lambda_slope_deviation: f64,
    pub b_slope_deviation: f64,
    pub b_over_lambda_deviation: f64,
    /// `max |w(t)|/|t|` over the window.
    pub w_over_t_max: f64,
    pub w_exponent: Option<f64>,
    pub eps_exponent: Option<f64>,
    pub predicted_eps_exponent: f64,
}

/// One trajectory row as read back from a modulation CSV.
#[derive(Clone, Copy, Debug)]
pub struct FitRow {
    pub t: f64,
    pub lambda: f64,
    pub b: f64,
    pub w: f64,
    pub eps_h1: f64,
}

fn loglog_exponent(t: &[f64], v: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = t
        .iter()
        .zip(v)
        .filter(|(t, v)| t.abs() > 0.0 && **v > 1e-300)
        .map(|(t, v)| (t.abs().ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    Some(linear_fit(&x, &y).slope)
}

impl RateFitReport {
    /// Fits the decade of samples above `lambda_min`, taken before the smallest `λ`
    /// of the run (a resolution-limited run can bounce at the grid scale).
    pub fn from_rows(
        rows: &[FitRow],
        virial_sq: f64,
        e0: f64,
        kappa: f64,
        decades: f64,
        lambda_min: f64,
    ) -> Result<Self> {
        let turn = rows
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.lambda.total_cmp(&b.1.lambda))
            .map(|(i, _)| i)
            .ok_or_else(|| Error::InvalidSpec("empty trajectory".into()))?;
        let end = rows[..=turn]
            .iter()
            .rposition(|r| r.lambda >= lambda_min)
            .ok_or_else(|| Error::InvalidSpec(format!("no sample with λ ≥ {lambda_min:.3e}")))?;
        let cap = rows[end].lambda * 10f64.powf(decades);
        let start = rows[..=end]
            .iter()
            .rposition(|r| r.lambda > cap)
            .map(|i| i + 1)
            .unwrap_or(0);
        let win = &rows[start..=end];
        if win.len() < 5 {
            return Err(Error::InvalidSpec(format!(
                "fit window holds {} samples, need at least 5",
                win.len()
            )));
        }
        let t: Vec<f64> = win.iter().map(|r| r.t).collect();
        let lam: Vec<f64> = win.iter().map(|r| r.lambda).collect();
        let b: Vec<f64> = win.iter().map(|r| r.b).collect();
        let lf = linear_fit(&t, &lam);
        let bf = linear_fit(&t, &b);
        let c = -lf.slope;
        let origin = lam.iter().zip(&t).map(|(l, t)| l * t.abs()).sum::<f64>() / t.iter().map(|t| t * t).sum::<f64>();
        let ratio = b.iter().zip(&lam).map(|(b, l)| b / l).sum::<f64>() / lam.len() as f64;
        let pl = (8.0 * e0 / virial_sq).sqrt();
        let pb = 8.0 * e0 / virial_sq;
        let w_over_t_max = win.iter().map(|r| r.w / r.t.abs()).fold(0.0, f64::max);
        let ws: Vec<f64> = win.iter().map(|r| r.w).collect();
        let es: Vec<f64> = win.iter().map(|r| r.eps_h1).collect();
        Ok(Self {
            window: [t[0], t[t.len() - 1]],
            samples: win.len(),
            lambda_slope: c,
            t_star: lf.intercept / c,
            lambda_fit: lf,
            lambda_slope_origin: origin,
            lambda_exponent: loglog_exponent(&t, &lam).unwrap_or(f64::NAN),
            b_slope: -bf.slope,
            b_fit: bf,
            b_over_lambda: ratio,
            predicted_lambda_slope: pl,
            predicted_b_slope: pb,
            predicted_b_over_lambda: pl,
            lambda_slope_deviation: (c - pl).abs() / pl,
            b_slope_deviation: (-bf.slope - pb).abs() / pb,
            b_over_lambda_deviation: (ratio - pl).abs() / pl,
            w_over_t_max,
            w_exponent: loglog_exponent(&t, &ws),
            eps_exponent: loglog_exponent(&t, &es),
            predicted_eps_exponent: 1.0 + kappa / 2.0 + kappa / 4.0,
        })
    }
}

/// Reads `t, lambda, b, w…, eps_h1` columns from a modulation CSV.
pub fn read_fit_rows(path: &Path) -> Result<Vec<FitRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("missing column `{name}` in {}", path.display())))
    };
    let (it, il, ib, ie) = (col("t")?, col("lambda")?, col("b")?, col("eps_h1")?);
    let w_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('w') && h[1..].chars().all(|c| c.is_ascii_digit()) && h.len() > 1)
        .map(|(i, _)| i)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("{e} in {}", path.display())))
        };
        let mut w2 = 0.0;
        for &c in &w_cols {
            w2 += num(c)?.powi(2);
        }
        rows.push(FitRow {
            t: num(it)?,
            lambda: num(il)?,
            b: num(ib)?,
            w: w2.sqrt(),
            eps_h1: num(ie)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub stop: StopReason,
    pub steps: usize,
    pub dt: f64,
    pub lambda_floor: f64,
    pub t1: f64,
    pub lambda1: f64,
    pub b1: f64,
    pub initial_energy: f64,
    pub kappa: f64,
    pub mu: f64,
    pub max_mass_drift: f64,
    pub max_energy_drift: f64,
    pub max_mass_identity: f64,
    pub max_orthogonality: f64,
    /// Samples where `H` fell below the coercivity comparator.
    pub comparator_violations: usize,
    /// Fraction of fit-window samples inside the bootstrap bound.
    pub bootstrap_fraction: Option<f64>,
    /// `max |C/s - |t|| / |t|^{1+κ}` with `C = ‖yQ‖²/(8E₀)`.
    pub s_grid_constant: f64,
    pub fit: Option<RateFitReport>,
    pub fit_error: Option<String>,
}

pub struct ExperimentResult {
    pub record: TrajectoryRecord,
    pub samples: Vec<ModulationSample>,
    pub summary: RunSummary,
    pub final_field: ComplexField,
}

/// Everything a run needs that does not depend on the configuration details.
pub struct Context {
    pub bundle: GroundStateBundle,
    pub rho: RhoProfile,
    pub mu: f64,
}

impl Context {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_cache(dim, None)
    }

    /// As [`Context::new`], reading or writing `ρ` in `cache`.
    pub fn with_cache(dim: usize, cache: Option<&Path>) -> Result<Self> {
        let bundle = solve_ground_state(dim, RadialMesh::default())?;
        let rho = load_or_solve_rho(&bundle, cache)?;
        let grid = if dim == 1 {
            GridSpec::new(1, 512, 16.0)?
        } else {
            GridSpec::new(2, 128, 12.0)?
        };
        let mu = coercivity_mu(&bundle, &rho, &grid)?.mu;
        Ok(Self { bundle, rho, mu })
    }
}

pub fn run_blowup_experiment(config: &ExperimentConfig, ctx: &Context) -> Result<ExperimentResult> {
    config.validate()?;
    let dim = config.dim;
    let grid = config.grid()?;
    let spec = config.model.resolve(dim)?;
    let model = SampledModel::new(&spec, &grid, Some(config.window_fraction * grid.half_width()))?;
    let kap = kappa(&spec.g, &spec.w, dim)?.kappa;
    let consts = EnergyConstants::new(kap, ctx.mu);
    let bundle = &ctx.bundle;
    let prepared = prepare_initial(config, bundle, &model)?;
    let floor = config.lambda_floor()?;
    let dt = config.dt()?;
    let prop = Propagator::new(&model, dt, config.stepper);
    let opts = DecomposeOptions {
        delta: config.delta,
        ..DecomposeOptions::default()
    };
    let ygrid = if dim == 1 {
        GridSpec::new(1, 512, 16.0)?
    } else {
        GridSpec::new(2, 128, 12.0)?
    };

    let mut u = prepared.u.clone();
    let mut t = prepared.t1;
    let mut params = prepared.params;
    let mut record = TrajectoryRecord::default();
    let mut samples: Vec<ModulationSample> = Vec::new();
    let mut times = vec![t];
    let mut lambdas = vec![params.lambda];
    record.samples.push(TrajectoryRecord::sample(&u, &model, t));

    let push_sample = |u: &ComplexField, t: f64, guess: ModulationParams, samples: &mut Vec<ModulationSample>| -> Result<(ModulationParams, bool)> {
        let eps = decompose(bundle, &ctx.rho, u, Some(guess), &opts)?;
        let diag = modified_energy(bundle, &eps, &model, consts)?;
        let p = *eps.params();
        let psi = psi_field(bundle, &spec.w, &p, &ygrid, config.eps_prime)
            .map(|r| r.weighted_h1)
            .unwrap_or(f64::NAN);
        samples.push(ModulationSample {
            t,
            s: f64::NAN,
            params: p,
            eps_l2: eps.l2_sq().sqrt(),
            eps_h1: diag.eps_h1_sq.sqrt(),
            y_eps_l2: diag.y_eps_sq.sqrt(),
            modulation: None,
            h: diag.h,
            s_energy: diag.s,
            comparator: diag.comparator,
            psi_norm: psi,
            mass_identity: eps.mass_identity(bundle),
            orthogonality: eps.orthogonality.iter().fold(0.0, |m, v| m.max(v.abs())),
        });
        Ok((p, eps.delta_exceeded))
    };

    let (p0, _) = push_sample(&u, t, params, &mut samples)?;
    params = p0;
    let mut steps = 0usize;
    let mut lambda_min = params.lambda;
    let stop = loop {
        let mut blown = false;
        for _ in 0..config.decompose_every {
            match prop.advance(&mut u, t) {
                Ok(()) => {}
                Err(Error::BlowupSuspected { last_finite, .. }) => {
                    u = *last_finite;
                    blown = true;
                    break;
                }
                Err(e) => return Err(e),
            }
            steps += 1;
            t = prepared.t1 + steps as f64 * dt;
        }
        let mut s = TrajectoryRecord::sample(&u, &model, t);
        if blown {
            s.trigger = Some(Trigger::NonFinite);
            record.samples.push(s);
            record.trigger = Some(Trigger::NonFinite);
            break StopReason::Trigger;
        }
        record.samples.push(s);
        match push_sample(&u, t, params, &mut samples) {
            Ok((p, exceeded)) => {
                params = p;
                times.push(t);
                lambdas.push(p.lambda);
                if exceeded {
                    break StopReason::DeltaExceeded;
                }
            }
            Err(Error::NoConvergence { .. }) | Err(Error::Unresolvable { .. }) | Err(Error::InvalidSpec(_)) => {
                log::warn!("decomposition failed at t = {t:.6e}");
                break StopReason::BasinLost;
            }
            Err(e) => return Err(e),
        }
        if params.lambda < floor {
            break StopReason::LambdaFloor;
        }
        lambda_min = lambda_min.min(params.lambda);
        if params.lambda > 1.5 * lambda_min {
            break StopReason::Rebound;
        }
        if t >= -prepared.t1 {
            break StopReason::TimeLimit;
        }
        if let Some(smax) = config.s_max {
            let s_now = rescaled_time(&times, &lambdas, prepared.t1, prepared.s1)?;
            if *s_now.last().unwrap() >= smax {
                break StopReason::SMax;
            }
        }
    };
    record.steps = steps;

    let svals = rescaled_time(&times, &lambdas, prepared.t1, prepared.s1)?;
    for (smp, s) in samples.iter_mut().zip(&svals) {
        smp.s = *s;
    }
    if samples.len() >= 3 {
        let ps: Vec<ModulationParams> = samples.iter().map(|s| s.params).collect();
        let mv = mod_vector_nonuniform(&svals[..samples.len()], &ps)?;
        for (smp, m) in samples.iter_mut().zip(mv) {
            smp.modulation = Some(m);
        }
    }

    let rows: Vec<FitRow> = samples
        .iter()
        .map(|s| FitRow {
            t: s.t,
            lambda: s.params.lambda,
            b: s.params.b,
            w: s.params.w_norm(dim),
            eps_h1: s.eps_h1,
        })
        .collect();
    let (fit, fit_error) = match RateFitReport::from_rows(
        &rows,
        bundle.virial_sq(),
        config.e0,
        kap,
        config.fit_decades,
        config.fit_floor_factor * grid.spacing(),
    ) {
        Ok(f) => (Some(f), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let l_exp = consts.l_exp;
    let bootstrap_fraction = fit.as_ref().map(|f| {
        let inside: Vec<&ModulationSample> = samples.iter().filter(|s| s.t >= f.window[0] && s.t <= f.window[1]).collect();
        let ok = inside
            .iter()
            .filter(|s| {
                s.eps_h1.powi(2) + (s.params.b * s.y_eps_l2).powi(2) < s.s.powf(-2.0 * l_exp)
            })
            .count();
        ok as f64 / inside.len().max(1) as f64
    });
    let c = bundle.virial_sq() / (8.0 * config.e0);
    let s_grid_constant = samples
        .iter()
        .filter(|s| s.t < 0.0)
        .map(|s| (c / s.s - s.t.abs()).abs() / s.t.abs().powf(1.0 + kap))
        .fold(0.0, f64::max);

    let summary = RunSummary {
        stop,
        steps,
        dt,
        lambda_floor: floor,
        t1: prepared.t1,
        lambda1: prepared.params.lambda,
        b1: prepared.params.b,
        initial_energy: prepared.energy,
        kappa: kap,
        mu: ctx.mu,
        max_mass_drift: record.max_mass_drift(),
        max_energy_drift: record.max_energy_drift(),
        max_mass_identity: samples.iter().map(|s| s.mass_identity.abs()).fold(0.0, f64::max),
        max_orthogonality: samples.iter().map(|s| s.orthogonality).fold(0.0, f64::max),
        comparator_violations: samples.iter().filter(|s| s.h < s.comparator).count(),
        bootstrap_fraction,
        s_grid_constant,
        fit,
        fit_error,
    };
    let result = ExperimentResult {
        record,
        samples,
        summary,
        final_field: u,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, dim, &result)?;
    }
    Ok(result)
}

pub fn write_modulation_csv(path: &Path, dim: usize, samples: &[ModulationSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["t", "s", "lambda", "b", "gamma"].iter().map(|s| s.to_string()).collect();
    for j in 0..dim {
        header.push(format!("w{}", j + 1));
    }
    for h in ["eps_l2", "eps_h1", "y_eps_l2", "mod1", "mod2", "mod3", "mod4", "H", "S", "psi_norm"] {
        header.push(h.to_string());
    }
    w.write_record(&header)?;
    let f = |v: f64| format!("{v:.17e}");
    for s in samples {
        let mut row = vec![f(s.t), f(s.s), f(s.params.lambda), f(s.params.b), f(s.params.gamma)];
        for j in 0..dim {
            row.push(f(s.params.w[j]));
        }
        row.extend([f(s.eps_l2), f(s.eps_h1), f(s.y_eps_l2)]);
        match s.modulation {
            Some(m) => {
                let wdot = (m.translation[0].powi(2) + m.translation[1].powi(2)).sqrt();
                row.extend([f(m.scale), f(m.curvature), f(m.phase), f(wdot)]);
            }
            None => row.extend(std::iter::repeat_n(String::new(), 4)),
        }
        row.extend([f(s.h), f(s.s_energy), f(s.psi_norm)]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_outputs(dir: &Path, dim: usize, result: &ExperimentResult) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    result.record.write_csv(&dir.join("trajectory.csv"))?;
    write_modulation_csv(&dir.join("modulation.csv"), dim, &result.samples)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result.summary)?)?;
    let series = |f: &dyn Fn(&ModulationSample) -> f64| -> Vec<(f64, f64)> {
        result.samples.iter().map(|s| (s.t.abs(), f(s))).collect()
    };
    let svg = loglog_svg(&[
        ("lambda", series(&|s| s.params.lambda)),
        ("b", series(&|s| s.params.b)),
        ("eps_h1", series(&|s| s.eps_h1)),
    ]);
    std::fs::write(dir.join("rates.svg"), svg)?;
    Ok(())
}

/// A minimal log-log line plot against `|t|`.
pub fn loglog_svg(series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let (w, h, pad) = (640.0, 420.0, 50.0);
    let pts: Vec<(f64, f64)> = series
        .iter()
        .flat_map(|(_, s)| s.iter().copied())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.log10(), y.log10()))
        .collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if pts.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (y0, y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
    let _ = writeln!(
        out,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}">log10 |t|</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}">[{x0:.2}, {x1:.2}]</text>"#, pad, h - 28.0);
    let colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    for (k, (name, s)) in series.iter().enumerate() {
        let mut d = String::new();
        for (x, y) in s.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite()) {
            let cmd = if d.is_empty() { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2} {:.2} ", sx(x.log10()), sy(y.log10()));
        }
        let c = colours[k % colours.len()];
        let _ = writeln!(out, r#"<path d="{d}" stroke="{c}" fill="none"/>"#);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" fill="{c}">{name}</text>"#,
            w - pad - 60.0,
            pad + 16.0 * k as f64
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_finder_on_quadratic() {
        let r = find_root(|x| Ok(x * x - 2.0), 0.0, 3.0, 1e-15).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-14);
        assert!(matches!(find_root(|x| Ok(x * x + 1.0), 0.0, 1.0, 1e-12), Err(Error::Bracket(_))));
    }

    #[test]
    fn linear_fit_recovers_line() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 3.0 - 2.0 * x).collect();
        let f = linear_fit(&x, &y);
        assert!((f.slope + 2.0).abs() < 1e-13 && (f.intercept - 3.0).abs() < 1e-13 && f.rms < 1e-13);
    }

    #[test]
    fn rate_fit_of_exact_law() {
        let c = 2.0;
        let rows: Vec<FitRow> = (0..200)
            .map(|i| {
                let t = -1.0 + i as f64 * 0.0049;
                FitRow {
                    t,
                    lambda: c * t.abs(),
                    b: c * c * t.abs(),
                    w: 0.0,
                    eps_h1: t.abs().powi(2),
                }
            })
            .collect();
        let virial = 8.0 / (c * c);
        let f = RateFitReport::from_rows(&rows, virial, 1.0, 1.0, 1.0, 0.0).unwrap();
        assert!(f.lambda_slope_deviation < 1e-12 && f.b_over_lambda_deviation < 1e-12);
        assert!(f.t_star.abs() < 1e-12 && (f.lambda_exponent - 1.0).abs() < 1e-12);
        assert!((f.eps_exponent.unwrap() - 2.0).abs() < 1e-10);
        assert!(f.window[1] - f.window[0] < 1.0);
    }

    #[test]
    fn config_rejects_bad_values() {
        let good = r#"{"dim":1,"e0":1.0,"s1":1.0,"grid":{"points":256,"half_width":16.0}}"#;
        assert!(ExperimentConfig::from_json(good).unwrap().validate().is_ok());
        let bad = r#"{"dim":1,"e0":-1.0,"s1":1.0,"grid":{"points":256,"half_width":16.0}}"#;
        assert!(ExperimentConfig::from_json(bad).unwrap().validate().unwrap_err().is_config());
        assert!(ExperimentConfig::from_json(r#"{"dim":1}"#).unwrap_err().is_config());
        let unknown = r#"{"dim":1,"e0":1.0,"s1":1.0,"grid":{"points":256,"half_width":16.0},"model":{"catalog":"nope"}}"#;
        assert!(ExperimentConfig::from_json(unknown).unwrap().validate().unwrap_err().is_config());
    }

    #[test]
    fn svg_has_series() {
        let s = loglog_svg(&[("lambda", vec![(1.0, 1.0), (0.1, 0.1)])]);
        assert!(s.starts_with("<svg") && s.contains("lambda") && s.trim_end().ends_with("</svg>"));
    }
}
