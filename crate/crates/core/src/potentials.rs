//! Inhomogeneities `g`, potentials `W`, the exponent `κ` and sampled audits of the
//! structural assumptions.
//!
//! Spec files are JSON:
//!
//! ```json
//! { "g": { "kind": "flat-bump", "r": 2.0, "params": { "amplitude": 1.0 } },
//!   "W": [ { "class": "W2-2", "kind": "sqrt-cutoff", "rprime": 0.5, "params": {} } ] }
//! ```
//!
//! `g` kinds: `constant-one`, `flat-bump` (`g = 1 - a|x|^{2+r} ψ(|x|)`), `custom-callable`.
//! `W` kinds: `harmonic` (`c|x|²`), `linear` (`E·x`), `abs-cutoff` (`a|x|χ`),
//! `sqrt-cutoff` (`a|x|^{1/2}χ`), `sqrt-exp` (`a|x|^{1/2}e^{c|x|}`), `custom-callable`.
//! `ψ` switches from 1 to 0 on `[0.5, 1]`, `χ` on `[2, 4]`. Callables can only be
//! attached from code.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::grid::{radius, GridSpec};

/// Point evaluation returning the value and the gradient.
pub type PointFn = dyn Fn([f64; 2]) -> (f64, [f64; 2]) + Send + Sync;

#[derive(Clone)]
pub struct Callable(pub Arc<PointFn>);

impl fmt::Debug for Callable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("<callable>")
    }
}

/// `|x|` above which `e^{C|x|}` terms are refused (overflow guard).
pub const EXP_ARGUMENT_LIMIT: f64 = 700.0;

/// Window edges relative to the window radius `R`: 1 below `0.75R`, 0 beyond `R`.
pub const WINDOW_INNER_FRACTION: f64 = 0.75;

fn bump(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        (0.0, 0.0)
    } else {
        let v = (-1.0 / t).exp();
        (v, v / (t * t))
    }
}

/// `C^∞` step from 0 (t ≤ 0) to 1 (t ≥ 1) and its derivative.
pub fn smooth_step(t: f64) -> (f64, f64) {
    if t <= 0.0 {
        return (0.0, 0.0);
    }
    if t >= 1.0 {
        return (1.0, 0.0);
    }
    let (a, da) = bump(t);
    let (b, db) = bump(1.0 - t);
    let s = a + b;
    (a / s, (da * b + a * db) / (s * s))
}

/// Smooth cutoff: 1 on `[0, inner]`, 0 on `[outer, ∞)`.
pub fn cutoff(r: f64, inner: f64, outer: f64) -> (f64, f64) {
    let (s, ds) = smooth_step((r - inner) / (outer - inner));
    (1.0 - s, -ds / (outer - inner))
}

/// The evolution window of radius `big_r`.
pub fn window(r: f64, big_r: f64) -> f64 {
    cutoff(r, WINDOW_INNER_FRACTION * big_r, big_r).0
}

fn param(params: &BTreeMap<String, f64>, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GKind {
    ConstantOne,
    FlatBump,
    CustomCallable,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InhomogeneitySpec {
    pub kind: GKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(skip)]
    pub callable: Option<Callable>,
}

impl InhomogeneitySpec {
    pub fn constant_one() -> Self {
        Self {
            kind: GKind::ConstantOne,
            r: None,
            params: BTreeMap::new(),
            callable: None,
        }
    }

    /// `g = 1 - a|x|^{2+r} ψ(|x|)`.
    pub fn flat_bump(r: f64, amplitude: f64) -> Self {
        Self {
            kind: GKind::FlatBump,
            r: Some(r),
            params: BTreeMap::from([("amplitude".to_string(), amplitude)]),
            callable: None,
        }
    }

    pub fn custom(r: Option<f64>, f: impl Fn([f64; 2]) -> (f64, [f64; 2]) + Send + Sync + 'static) -> Self {
        Self {
            kind: GKind::CustomCallable,
            r,
            params: BTreeMap::new(),
            callable: Some(Callable(Arc::new(f))),
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(r) = self.r {
            if !(r.is_finite() && r > 0.0) {
                return Err(Error::InvalidSpec(format!("g exponent r must be positive, got {r}")));
            }
        }
        match self.kind {
            GKind::ConstantOne => Ok(()),
            GKind::FlatBump => {
                if self.r.is_none() {
                    return Err(Error::InvalidSpec("flat-bump requires r".into()));
                }
                let a = param(&self.params, "amplitude", 1.0);
                if !(a > 0.0 && a <= 1.0) {
                    return Err(Error::InvalidSpec(format!(
                        "flat-bump amplitude must lie in (0, 1], got {a}"
                    )));
                }
                Ok(())
            }
            GKind::CustomCallable => match self.callable {
                Some(_) => Ok(()),
                None => Err(Error::InvalidSpec(
                    "custom-callable g needs a callable attached in code".into(),
                )),
            },
        }
    }

    /// `(g(x) - 1, ∇g(x))`, computed without cancellation for the closed forms.
    pub fn deviation(&self, x: [f64; 2], dim: usize) -> (f64, [f64; 2]) {
        match self.kind {
            GKind::ConstantOne => (0.0, [0.0, 0.0]),
            GKind::FlatBump => {
                let r = self.r.unwrap_or(2.0);
                let a = param(&self.params, "amplitude", 1.0);
                let rho = radius(&x, dim);
                if rho == 0.0 {
                    return (0.0, [0.0, 0.0]);
                }
                let (psi, dpsi) = cutoff(rho, 0.5, 1.0);
                let p = rho.powf(2.0 + r);
                let dv = -a * ((2.0 + r) * rho.powf(1.0 + r) * psi + p * dpsi);
                (-a * p * psi, [dv * x[0] / rho, dv * x[1] / rho])
            }
            GKind::CustomCallable => {
                let (g, grad) = (self.callable.as_ref().expect("validated").0)(x);
                (g - 1.0, grad)
            }
        }
    }

    pub fn eval(&self, x: [f64; 2], dim: usize) -> f64 {
        match self.kind {
            GKind::CustomCallable => (self.callable.as_ref().expect("validated").0)(x).0,
            _ => 1.0 + self.deviation(x, dim).0,
        }
    }

    pub fn grad(&self, x: [f64; 2], dim: usize) -> [f64; 2] {
        self.deviation(x, dim).1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WClass {
    W1,
    #[serde(rename = "W2-1")]
    W21,
    #[serde(rename = "W2-2")]
    W22,
}

impl fmt::Display for WClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WClass::W1 => "W1",
            WClass::W21 => "W2-1",
            WClass::W22 => "W2-2",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WKind {
    Harmonic,
    Linear,
    AbsCutoff,
    SqrtCutoff,
    SqrtExp,
    CustomCallable,
}

/// How fast a term grows at infinity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Growth {
    Bounded,
    Polynomial,
    Exponential(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PotentialTerm {
    pub class: WClass,
    pub kind: WKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rprime: Option<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(skip)]
    pub callable: Option<Callable>,
    /// Declared growth rate `C` of a custom callable in `|W| ≤ C|x|^{r'}e^{C|x|}`.
    #[serde(skip)]
    pub custom_growth: Option<Growth>,
}

impl PotentialTerm {
    fn new(class: WClass, kind: WKind, params: &[(&str, f64)]) -> Self {
        Self {
            class,
            kind,
            p1: None,
            p2: None,
            rprime: None,
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            callable: None,
            custom_growth: None,
        }
    }

    /// `c|x|²`.
    pub fn harmonic(class: WClass, c: f64) -> Self {
        Self::new(class, WKind::Harmonic, &[("c", c)])
    }

    /// `E·x`.
    pub fn linear(class: WClass, e: [f64; 2]) -> Self {
        Self::new(class, WKind::Linear, &[("e0", e[0]), ("e1", e[1])])
    }

    /// `a|x|χ(|x|)`.
    pub fn abs_cutoff(amplitude: f64) -> Self {
        Self::new(WClass::W21, WKind::AbsCutoff, &[("amplitude", amplitude)])
    }

    /// `a|x|^{1/2}χ(|x|)`.
    pub fn sqrt_cutoff(amplitude: f64) -> Self {
        let mut t = Self::new(WClass::W22, WKind::SqrtCutoff, &[("amplitude", amplitude)]);
        t.rprime = Some(0.5);
        t
    }

    /// `a|x|^{1/2}e^{c|x|}`.
    pub fn sqrt_exp(amplitude: f64, growth: f64) -> Self {
        let mut t = Self::new(
            WClass::W22,
            WKind::SqrtExp,
            &[("amplitude", amplitude), ("growth", growth)],
        );
        t.rprime = Some(0.5);
        t
    }

    pub fn custom(
        class: WClass,
        growth: Growth,
        f: impl Fn([f64; 2]) -> (f64, [f64; 2]) + Send + Sync + 'static,
    ) -> Self {
        let mut t = Self::new(class, WKind::CustomCallable, &[]);
        t.callable = Some(Callable(Arc::new(f)));
        t.custom_growth = Some(growth);
        t
    }

    pub fn with_exponents(mut self, p1: Option<f64>, p2: Option<f64>, rprime: Option<f64>) -> Self {
        self.p1 = p1;
        self.p2 = p2;
        self.rprime = rprime;
        self
    }

    pub fn growth(&self) -> Growth {
        match self.kind {
            WKind::Harmonic | WKind::Linear => Growth::Polynomial,
            WKind::AbsCutoff | WKind::SqrtCutoff => Growth::Bounded,
            WKind::SqrtExp => Growth::Exponential(param(&self.params, "growth", 1.0)),
            WKind::CustomCallable => self.custom_growth.unwrap_or(Growth::Bounded),
        }
    }

    /// Radius beyond which evaluation is refused.
    pub fn validity_radius(&self) -> f64 {
        match self.growth() {
            Growth::Exponential(c) if c > 0.0 => EXP_ARGUMENT_LIMIT / c,
            _ => f64::INFINITY,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        let n = dim as f64;
        if let Some(p1) = self.p1 {
            if !(p1 >= 2.0 && p1 > n / 2.0) {
                return Err(Error::InvalidSpec(format!("p1 = {p1} must satisfy p1 >= 2 and p1 > N/2")));
            }
        }
        if let Some(p2) = self.p2 {
            if !(p2 >= 2.0 && p2 > n) {
                return Err(Error::InvalidSpec(format!("p2 = {p2} must satisfy p2 >= 2 and p2 > N")));
            }
        }
        if let Some(rp) = self.rprime {
            if !(rp.is_finite() && rp > 0.0) {
                return Err(Error::InvalidSpec(format!("r' must be positive, got {rp}")));
            }
        }
        if self.class == WClass::W22 && self.rprime.is_none() {
            return Err(Error::InvalidSpec("a W2-2 term needs r'".into()));
        }
        if self.class == WClass::W1 && (self.p1.is_some() || self.p2.is_some()) {
            return Err(Error::InvalidSpec("W1 terms carry no p1/p2 exponents".into()));
        }
        if self.kind == WKind::CustomCallable && self.callable.is_none() {
            return Err(Error::InvalidSpec(
                "custom-callable W needs a callable attached in code".into(),
            ));
        }
        if let Growth::Exponential(c) = self.growth() {
            if !(c.is_finite() && c >= 0.0) {
                return Err(Error::InvalidSpec(format!("growth rate must be non-negative, got {c}")));
            }
        }
        Ok(())
    }

    /// Raw value and gradient, before normalization and windowing.
    pub fn eval_raw(&self, x: [f64; 2], dim: usize) -> (f64, [f64; 2]) {
        let r = radius(&x, dim);
        let radial = |v: f64, dv: f64| -> (f64, [f64; 2]) {
            if r == 0.0 {
                (v, [0.0, 0.0])
            } else {
                (v, [dv * x[0] / r, dv * x[1] / r])
            }
        };
        match self.kind {
            WKind::Harmonic => {
                let c = param(&self.params, "c", 0.5);
                (c * r * r, [2.0 * c * x[0], 2.0 * c * x[1]])
            }
            WKind::Linear => {
                let e = [param(&self.params, "e0", 0.0), param(&self.params, "e1", 0.0)];
                let e1 = if dim == 1 { 0.0 } else { e[1] };
                (e[0] * x[0] + e1 * x[1], [e[0], e1])
            }
            WKind::AbsCutoff => {
                let a = param(&self.params, "amplitude", 1.0);
                let (chi, dchi) = cutoff(r, 2.0, 4.0);
                radial(a * r * chi, a * (chi + r * dchi))
            }
            WKind::SqrtCutoff => {
                let a = param(&self.params, "amplitude", 1.0);
                let (chi, dchi) = cutoff(r, 2.0, 4.0);
                if r == 0.0 {
                    return (0.0, [0.0, 0.0]);
                }
                let s = r.sqrt();
                radial(a * s * chi, a * (0.5 / s * chi + s * dchi))
            }
            WKind::SqrtExp => {
                let a = param(&self.params, "amplitude", 1.0);
                let c = param(&self.params, "growth", 1.0);
                if r == 0.0 {
                    return (0.0, [0.0, 0.0]);
                }
                let s = r.sqrt();
                let e = (c * r).exp();
                radial(a * s * e, a * e * (0.5 / s + c * s))
            }
            WKind::CustomCallable => (self.callable.as_ref().expect("validated").0)(x),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PotentialSpec {
    pub terms: Vec<PotentialTerm>,
}

impl PotentialSpec {
    pub fn zero() -> Self {
        Self { terms: Vec::new() }
    }

    pub fn single(term: PotentialTerm) -> Self {
        Self { terms: vec![term] }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    fn offset(&self, dim: usize) -> f64 {
        self.terms.iter().map(|t| t.eval_raw([0.0, 0.0], dim).0).sum()
    }

    /// `W(x)` normalized to `W(0) = 0`.
    pub fn eval(&self, x: [f64; 2], dim: usize) -> Result<f64> {
        let mut v = 0.0;
        for t in &self.terms {
            let vr = t.validity_radius();
            let r = radius(&x, dim);
            if r > vr {
                return Err(Error::OutsideValidity { norm: r, radius: vr });
            }
            v += t.eval_raw(x, dim).0;
        }
        Ok(v - self.offset(dim))
    }

    pub fn grad(&self, x: [f64; 2], dim: usize) -> Result<[f64; 2]> {
        let mut g = [0.0, 0.0];
        for t in &self.terms {
            let vr = t.validity_radius();
            let r = radius(&x, dim);
            if r > vr {
                return Err(Error::OutsideValidity { norm: r, radius: vr });
            }
            let d = t.eval_raw(x, dim).1;
            g[0] += d[0];
            g[1] += d[1];
        }
        Ok(g)
    }

    /// `W` with unbounded terms multiplied by the window of radius `big_r`.
    pub fn eval_windowed(&self, x: [f64; 2], dim: usize, big_r: Option<f64>) -> Result<f64> {
        let r = radius(&x, dim);
        let mut v = 0.0;
        for t in &self.terms {
            let w = match (t.growth(), big_r) {
                (Growth::Bounded, _) | (_, None) => 1.0,
                (_, Some(br)) => window(r, br),
            };
            if w == 0.0 {
                continue;
            }
            if r > t.validity_radius() {
                return Err(Error::OutsideValidity {
                    norm: r,
                    radius: t.validity_radius(),
                });
            }
            v += w * t.eval_raw(x, dim).0;
        }
        Ok(v - self.offset(dim))
    }
}

/// The pair `(g, W)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub g: InhomogeneitySpec,
    #[serde(rename = "W", default)]
    pub w: PotentialSpec,
}

impl ModelSpec {
    pub fn new(g: InhomogeneitySpec, w: PotentialSpec) -> Self {
        Self { g, w }
    }

    /// `g ≡ 1`, `W ≡ 0`.
    pub fn free() -> Self {
        Self::new(InhomogeneitySpec::constant_one(), PotentialSpec::zero())
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(1..=2).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        self.g.validate()?;
        for t in &self.w.terms {
            t.validate(dim)?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidSpec(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn is_free(&self) -> bool {
        self.g.kind == GKind::ConstantOne && self.w.is_zero()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaParams {
    pub kappa: f64,
}

/// `κ = min{1, 2 - N/p1, 1 - N/p2, r, r'}` over the exponents that are present.
pub fn kappa(g: &InhomogeneitySpec, w: &PotentialSpec, dim: usize) -> Result<KappaParams> {
    let n = dim as f64;
    let mut k: f64 = 1.0;
    if let Some(r) = g.r {
        k = k.min(r);
    }
    for t in &w.terms {
        if let Some(p1) = t.p1 {
            k = k.min(2.0 - n / p1);
        }
        if let Some(p2) = t.p2 {
            k = k.min(1.0 - n / p2);
        }
        if let Some(rp) = t.rprime {
            k = k.min(rp);
        }
    }
    if !(k > 0.0) {
        return Err(Error::KappaOutOfRange(k));
    }
    Ok(KappaParams { kappa: k })
}

/// Bundled examples for dimension `dim`, keyed by a short name.
pub fn catalog(dim: usize) -> Vec<(&'static str, ModelSpec)> {
    let g1 = InhomogeneitySpec::constant_one;
    let sqrt = {
        let t = PotentialTerm::sqrt_cutoff(1.0);
        // In 1-D, |∇W| ~ |x|^{-1/2} is in no L^{p2}_loc with p2 >= 2; no p2 is declared.
        if dim == 2 {
            t.with_exponents(None, Some(3.0), Some(0.5))
        } else {
            t
        }
    };
    vec![
        ("free", ModelSpec::free()),
        (
            "flat-bump-r1",
            ModelSpec::new(InhomogeneitySpec::flat_bump(1.0, 1.0), PotentialSpec::zero()),
        ),
        (
            "flat-bump-r2",
            ModelSpec::new(InhomogeneitySpec::flat_bump(2.0, 1.0), PotentialSpec::zero()),
        ),
        (
            "harmonic",
            ModelSpec::new(g1(), PotentialSpec::single(PotentialTerm::harmonic(WClass::W1, 0.5))),
        ),
        (
            "abs-cutoff",
            ModelSpec::new(g1(), PotentialSpec::single(PotentialTerm::abs_cutoff(1.0))),
        ),
        ("sqrt-cutoff", ModelSpec::new(g1(), PotentialSpec::single(sqrt))),
        (
            "sqrt-exp",
            ModelSpec::new(g1(), PotentialSpec::single(PotentialTerm::sqrt_exp(1.0, 1.0))),
        ),
    ]
}

/// `g` and `W` sampled on a grid.
#[derive(Clone, Debug)]
pub struct SampledModel {
    grid: GridSpec,
    g: Vec<f64>,
    w: Vec<f64>,
    window_radius: Option<f64>,
    trivial_g: bool,
    trivial_w: bool,
}

impl SampledModel {
    /// Samples the model; unbounded terms are windowed at `window_radius` when given.
    pub fn new(spec: &ModelSpec, grid: &GridSpec, window_radius: Option<f64>) -> Result<Self> {
        spec.validate(grid.dim())?;
        let dim = grid.dim();
        let mut g = Vec::with_capacity(grid.len());
        let mut w = Vec::with_capacity(grid.len());
        for x in grid.points_iter() {
            g.push(spec.g.eval(x, dim));
            w.push(spec.w.eval_windowed(x, dim, window_radius)?);
        }
        if g.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled potential".into()));
        }
        Ok(Self {
            grid: *grid,
            g,
            w,
            window_radius,
            trivial_g: spec.g.kind == GKind::ConstantOne,
            trivial_w: spec.w.is_zero(),
        })
    }

    pub fn free(grid: &GridSpec) -> Self {
        Self {
            grid: *grid,
            g: vec![1.0; grid.len()],
            w: vec![0.0; grid.len()],
            window_radius: None,
            trivial_g: true,
            trivial_w: true,
        }
    }

    /// Pure linear flow (`g ≡ 0`, `W ≡ 0`).
    pub fn linear(grid: &GridSpec) -> Self {
        Self {
            grid: *grid,
            g: vec![0.0; grid.len()],
            w: vec![0.0; grid.len()],
            window_radius: None,
            trivial_g: false,
            trivial_w: true,
        }
    }

    /// Arbitrary samples.
    pub fn from_samples(grid: &GridSpec, g: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        if g.len() != grid.len() || w.len() != grid.len() {
            return Err(Error::GridMismatch("sample count".into()));
        }
        if g.iter().chain(&w).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sampled potential".into()));
        }
        let trivial_g = g.iter().all(|&v| v == 1.0);
        let trivial_w = w.iter().all(|&v| v == 0.0);
        Ok(Self {
            grid: *grid,
            g,
            w,
            window_radius: None,
            trivial_g,
            trivial_w,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn g_values(&self) -> &[f64] {
        &self.g
    }

    pub fn w_values(&self) -> &[f64] {
        &self.w
    }

    pub fn window_radius(&self) -> Option<f64> {
        self.window_radius
    }

    pub fn is_free(&self) -> bool {
        self.trivial_g && self.trivial_w
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GAudit {
    /// Smallest `C` with `|g - 1| ≤ C|x|^{2+r}` on the samples.
    pub value_constant: f64,
    /// Smallest `C` with `|∇g| ≤ C|x|^{1+r}` on the samples.
    pub gradient_constant: f64,
    pub value_exponent: Option<f64>,
    pub gradient_exponent: Option<f64>,
    pub violations: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TermAudit {
    pub index: usize,
    pub class: WClass,
    pub kind: WKind,
    /// Smallest constant in the class bound on the samples.
    pub constant: f64,
    pub details: BTreeMap<String, f64>,
    pub violations: Vec<String>,
    /// A class under which the term does pass, if the declared one fails.
    pub accepted_as: Option<WClass>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub g: GAudit,
    pub terms: Vec<TermAudit>,
    pub window_radius: Option<f64>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.g.violations.is_empty() && self.terms.iter().all(|t| t.violations.is_empty())
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.g.violations.clone();
        for t in &self.terms {
            v.extend(t.violations.iter().map(|m| format!("term {} ({}): {m}", t.index, t.class)));
        }
        v
    }
}

/// Sample directions: `±e_1` in 1-D, `angles` unit vectors in 2-D.
fn directions(dim: usize, angles: usize) -> Vec<[f64; 2]> {
    if dim == 1 {
        vec![[1.0, 0.0], [-1.0, 0.0]]
    } else {
        (0..angles)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * (k as f64 + 0.3) / angles as f64;
                [th.cos(), th.sin()]
            })
            .collect()
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

/// Least-squares slope of `ln y` against `ln x` over points with `y > 0`.
fn loglog_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let data: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(_, y)| *y > 1e-300)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if data.len() < 3 {
        return None;
    }
    let n = data.len() as f64;
    let mx = data.iter().map(|p| p.0).sum::<f64>() / n;
    let my = data.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = data.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = data.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

const EXPONENT_TOL: f64 = 1e-3;

/// Samples the assumptions on dyadic shells and local sweeps.
///
/// `sample_budget` bounds the number of shell samples (at least 8 shells are used).
pub fn audit_assumptions(
    g: &InhomogeneitySpec,
    w: &PotentialSpec,
    dim: usize,
    sample_budget: usize,
) -> AuditReport {
    let dirs = directions(dim, 8);
    let shells = (sample_budget / dirs.len()).clamp(8, 16);
    let radii: Vec<f64> = (0..shells).map(|k| 0.5f64.powi(k as i32)).collect();
    let shell_max = |f: &dyn Fn([f64; 2]) -> f64| -> Vec<(f64, f64)> {
        radii
            .iter()
            .map(|&r| {
                let m = dirs
                    .iter()
                    .map(|d| f([r * d[0], r * d[1]]).abs())
                    .fold(0.0, f64::max);
                (r, m)
            })
            .collect()
    };

    let mut ga = GAudit::default();
    if g.validate().is_err() {
        ga.violations.push("g fails validation".into());
    } else if g.kind != GKind::ConstantOne {
        let dev = shell_max(&|x| g.deviation(x, dim).0);
        let grad = shell_max(&|x| norm2(g.deviation(x, dim).1));
        let fine = |v: &[(f64, f64)]| -> Vec<(f64, f64)> { v[v.len() / 2..].to_vec() };
        ga.value_exponent = loglog_slope(&fine(&dev));
        ga.gradient_exponent = loglog_slope(&fine(&grad));
        match g.r {
            None => ga.violations.push("non-constant g without a declared r".into()),
            Some(r) => {
                ga.value_constant = dev.iter().map(|(x, y)| y / x.powf(2.0 + r)).fold(0.0, f64::max);
                ga.gradient_constant =
                    grad.iter().map(|(x, y)| y / x.powf(1.0 + r)).fold(0.0, f64::max);
                if let Some(e) = ga.value_exponent {
                    if e < 2.0 + r - EXPONENT_TOL {
                        ga.violations.push(format!(
                            "|g - 1| decays like |x|^{e:.3}, slower than |x|^{}",
                            2.0 + r
                        ));
                    }
                }
                if let Some(e) = ga.gradient_exponent {
                    if e < 1.0 + r - EXPONENT_TOL {
                        ga.violations.push(format!(
                            "|∇g| decays like |x|^{e:.3}, slower than |x|^{}",
                            1.0 + r
                        ));
                    }
                }
            }
        }
    }

    let terms = w
        .terms
        .iter()
        .enumerate()
        .map(|(i, t)| audit_term(i, t, dim, &dirs, &radii))
        .collect();
    AuditReport {
        g: ga,
        terms,
        window_radius: None,
    }
}

fn sweep_points(dim: usize, extent: f64) -> Vec<[f64; 2]> {
    let n = 81;
    let axis: Vec<f64> = (0..n)
        .map(|k| -extent + 2.0 * extent * k as f64 / (n - 1) as f64)
        .collect();
    if dim == 1 {
        axis.iter().map(|&x| [x, 0.0]).collect()
    } else {
        let coarse: Vec<f64> = axis.iter().step_by(4).copied().collect();
        let mut pts = Vec::new();
        for &a in &coarse {
            for &b in &coarse {
                pts.push([a, b]);
            }
        }
        pts
    }
}

/// Maximal second difference along the axes at step `h`.
fn second_difference(f: &dyn Fn([f64; 2]) -> f64, pts: &[[f64; 2]], dim: usize, h: f64) -> f64 {
    let mut m: f64 = 0.0;
    for p in pts {
        for a in 0..dim {
            let mut pp = *p;
            let mut pm = *p;
            pp[a] += h;
            pm[a] -= h;
            m = m.max(((f(pp) - 2.0 * f(*p) + f(pm)) / (h * h)).abs());
        }
    }
    m
}

/// Maximal difference quotient along the axes at step `h`.
fn lipschitz_ratio(f: &dyn Fn([f64; 2]) -> f64, pts: &[[f64; 2]], dim: usize, h: f64) -> f64 {
    let mut m: f64 = 0.0;
    for p in pts {
        for a in 0..dim {
            let mut pp = *p;
            pp[a] += h;
            m = m.max(((f(pp) - f(*p)) / h).abs());
        }
    }
    m
}

fn audit_term(
    index: usize,
    t: &PotentialTerm,
    dim: usize,
    dirs: &[[f64; 2]],
    radii: &[f64],
) -> TermAudit {
    let mut out = TermAudit {
        index,
        class: t.class,
        kind: t.kind,
        constant: 0.0,
        details: BTreeMap::new(),
        violations: Vec::new(),
        accepted_as: None,
    };
    if let Err(e) = t.validate(dim) {
        out.violations.push(e.to_string());
        return out;
    }
    let offset = t.eval_raw([0.0, 0.0], dim).0;
    let value = move |x: [f64; 2]| t.eval_raw(x, dim).0 - offset;
    let extent = 4.0f64.min(t.validity_radius());
    let pts = sweep_points(dim, extent);
    let steps = [1e-2, 1e-3, 1e-4];

    let lipschitz: Vec<f64> = steps.iter().map(|&h| lipschitz_ratio(&value, &pts, dim, h)).collect();
    let lipschitz_ok = lipschitz[2] <= 1.5 * lipschitz[0] + 1e-9;
    out.details.insert("lipschitz".into(), lipschitz[2]);

    match t.class {
        WClass::W1 => {
            let min_w = pts.iter().map(|&p| value(p)).fold(f64::INFINITY, f64::min);
            out.details.insert("min_value".into(), min_w);
            if min_w < 0.0 {
                out.violations.push(format!("W takes the negative value {min_w:.3e}"));
            }
            let d2: Vec<f64> = steps
                .iter()
                .map(|&h| second_difference(&value, &pts, dim, h))
                .collect();
            out.constant = d2[2];
            out.details.insert("second_difference".into(), d2[2]);
            if d2[2] > 2.0 * d2[0] + 1e-6 {
                out.violations.push(format!(
                    "second differences grow as h -> 0 ({:.3e} at h=1e-2, {:.3e} at h=1e-4)",
                    d2[0], d2[2]
                ));
                if lipschitz_ok {
                    out.accepted_as = Some(WClass::W21);
                }
            }
        }
        WClass::W21 => {
            out.constant = lipschitz[2];
            if !lipschitz_ok {
                out.violations.push(format!(
                    "not locally Lipschitz: difference quotients {:.3e} -> {:.3e}",
                    lipschitz[0], lipschitz[2]
                ));
            }
        }
        WClass::W22 => {
            let rp = t.rprime.unwrap_or(1.0);
            let c = match t.growth() {
                Growth::Exponential(c) => c,
                _ => 0.0,
            };
            let bound = |x: [f64; 2]| {
                let r = radius(&x, dim);
                r.powf(rp) * (c * r).exp()
            };
            let mut cst: f64 = 0.0;
            for p in &pts {
                let r = radius(p, dim);
                if r > 0.0 {
                    cst = cst.max(value(*p).abs() / bound(*p));
                }
            }
            for &r in radii {
                for d in dirs {
                    let p = [r * d[0], r * d[1]];
                    cst = cst.max(value(p).abs() / bound(p));
                }
            }
            out.constant = cst;
            let near: Vec<(f64, f64)> = radii[radii.len() / 2..]
                .iter()
                .map(|&r| {
                    let m = dirs
                        .iter()
                        .map(|d| value([r * d[0], r * d[1]]).abs())
                        .fold(0.0, f64::max);
                    (r, m)
                })
                .collect();
            if let Some(e) = loglog_slope(&near) {
                out.details.insert("value_exponent".into(), e);
                if e < rp - EXPONENT_TOL {
                    out.violations.push(format!("|W| ~ |x|^{e:.3} near 0, below r' = {rp}"));
                }
            }
        }
    }

    if t.class != WClass::W1 {
        // Local integrability of singular behaviour at the origin.
        let near_grad: Vec<(f64, f64)> = radii[radii.len() / 2..]
            .iter()
            .map(|&r| {
                let m = dirs
                    .iter()
                    .map(|d| norm2(t.eval_raw([r * d[0], r * d[1]], dim).1))
                    .fold(0.0, f64::max);
                (r, m)
            })
            .collect();
        if let Some(e) = loglog_slope(&near_grad) {
            out.details.insert("gradient_exponent".into(), e);
            if let Some(p2) = t.p2 {
                if e < 0.0 && -e * p2 >= dim as f64 - EXPONENT_TOL {
                    out.violations.push(format!(
                        "|∇W| ~ |x|^{e:.3} is not in L^{p2} near 0"
                    ));
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_examples() {
        let one = InhomogeneitySpec::constant_one();
        assert_eq!(one.eval([0.7, 0.0], 1), 1.0);
        let fb = InhomogeneitySpec::flat_bump(2.0, 1.0);
        assert_eq!(fb.eval([0.0, 0.0], 1), 1.0);
        // ψ = 1 on [0, 0.5].
        assert_eq!(fb.eval([0.5, 0.0], 1), 1.0 - 0.0625);
    }

    #[test]
    fn w_examples() {
        let h = PotentialSpec::single(PotentialTerm::harmonic(WClass::W1, 0.5));
        assert_eq!(h.eval([2.0, 0.0], 1).unwrap(), 2.0);
        assert_eq!(h.grad([2.0, 0.0], 1).unwrap()[0], 2.0);
        let e = PotentialSpec::single(PotentialTerm::sqrt_exp(1.0, 1.0));
        assert!((e.eval([1.0, 0.0], 1).unwrap() - std::f64::consts::E).abs() < 1e-15);
        assert!(matches!(
            e.eval([800.0, 0.0], 1),
            Err(Error::OutsideValidity { .. })
        ));
        assert_eq!(PotentialSpec::zero().eval([3.0, 1.0], 2).unwrap(), 0.0);
    }

    #[test]
    fn gradients_match_differences() {
        let specs = catalog(2);
        for (name, s) in &specs {
            for x in [[0.3, -0.2], [1.1, 0.9], [2.5, 0.4], [0.01, 3.1]] {
                let h = 1e-6;
                let gw = s.w.grad(x, 2).unwrap();
                let gg = s.g.grad(x, 2);
                for a in 0..2 {
                    let mut xp = x;
                    let mut xm = x;
                    xp[a] += h;
                    xm[a] -= h;
                    let dw = (s.w.eval(xp, 2).unwrap() - s.w.eval(xm, 2).unwrap()) / (2.0 * h);
                    let dg = (s.g.eval(xp, 2) - s.g.eval(xm, 2)) / (2.0 * h);
                    assert!((dw - gw[a]).abs() < 1e-5 * (1.0 + dw.abs()), "{name} W axis {a}");
                    assert!((dg - gg[a]).abs() < 1e-6, "{name} g axis {a}");
                }
            }
        }
    }

    #[test]
    fn kappa_examples() {
        let fb2 = InhomogeneitySpec::flat_bump(2.0, 1.0);
        assert_eq!(kappa(&fb2, &PotentialSpec::zero(), 1).unwrap().kappa, 1.0);
        let t = PotentialTerm::sqrt_cutoff(1.0).with_exponents(Some(2.0), Some(2.0), Some(0.5));
        let k = kappa(&fb2, &PotentialSpec::single(t), 1).unwrap().kappa;
        assert_eq!(k, 0.5);
        let fb1 = InhomogeneitySpec::flat_bump(1.0, 1.0);
        let t = PotentialTerm::sqrt_cutoff(1.0).with_exponents(Some(4.0), Some(4.0), Some(1.0));
        assert_eq!(kappa(&fb1, &PotentialSpec::single(t), 2).unwrap().kappa, 0.5);
        let bad = PotentialTerm::abs_cutoff(1.0).with_exponents(None, Some(1.0), None);
        assert!(matches!(
            kappa(&fb1, &PotentialSpec::single(bad), 1),
            Err(Error::KappaOutOfRange(_))
        ));
    }

    #[test]
    fn kappa_monotone_under_added_terms() {
        let g = InhomogeneitySpec::flat_bump(1.5, 0.5);
        let mut w = PotentialSpec::zero();
        let mut last = kappa(&g, &w, 2).unwrap().kappa;
        for t in [
            PotentialTerm::abs_cutoff(1.0).with_exponents(Some(3.0), Some(5.0), None),
            PotentialTerm::sqrt_cutoff(1.0).with_exponents(None, Some(3.0), Some(0.5)),
            PotentialTerm::harmonic(WClass::W1, 0.5),
        ] {
            w.terms.push(t);
            let k = kappa(&g, &w, 2).unwrap().kappa;
            assert!(k <= last);
            last = k;
        }
    }

    #[test]
    fn normalization_at_origin() {
        let t = PotentialTerm::custom(WClass::W21, Growth::Bounded, |x| (3.0 + x[0], [1.0, 0.0]));
        let w = PotentialSpec::single(t);
        assert_eq!(w.eval([0.0, 0.0], 1).unwrap(), 0.0);
        for dim in [1, 2] {
            for (_, s) in catalog(dim) {
                assert_eq!(s.w.eval([0.0, 0.0], dim).unwrap().abs(), 0.0);
            }
        }
    }

    #[test]
    fn catalog_audits_pass() {
        for dim in [1, 2] {
            for (name, s) in catalog(dim) {
                let rep = audit_assumptions(&s.g, &s.w, dim, 256);
                assert!(rep.passed(), "{name} (N={dim}): {:?}", rep.violations());
                assert!(rep.g.value_constant.is_finite());
                for t in &rep.terms {
                    assert!(t.constant.is_finite(), "{name}");
                }
            }
        }
    }

    #[test]
    fn audit_constants_for_trivial_g() {
        let rep = audit_assumptions(&InhomogeneitySpec::constant_one(), &PotentialSpec::zero(), 1, 64);
        assert_eq!(rep.g.value_constant, 0.0);
        assert_eq!(rep.g.gradient_constant, 0.0);
    }

    #[test]
    fn audit_flags_quadratic_g() {
        for r in [0.1, 1.0, 2.0] {
            let g = InhomogeneitySpec::custom(Some(r), |x| (1.0 - x[0] * x[0], [-2.0 * x[0], 0.0]));
            let rep = audit_assumptions(&g, &PotentialSpec::zero(), 1, 64);
            assert!(!rep.passed());
        }
    }

    #[test]
    fn audit_flags_abs_under_w1() {
        let t = PotentialTerm::custom(WClass::W1, Growth::Polynomial, |x| {
            (x[0].abs(), [x[0].signum(), 0.0])
        });
        let rep = audit_assumptions(&InhomogeneitySpec::constant_one(), &PotentialSpec::single(t), 1, 64);
        assert!(!rep.passed());
        assert_eq!(rep.terms[0].accepted_as, Some(WClass::W21));
    }

    #[test]
    fn audit_flags_sqrt_under_w21() {
        let mut t = PotentialTerm::sqrt_cutoff(1.0);
        t.class = WClass::W21;
        let rep = audit_assumptions(&InhomogeneitySpec::constant_one(), &PotentialSpec::single(t), 1, 64);
        assert!(!rep.passed());
    }

    #[test]
    fn json_round_trip() {
        let text = r#"{
            "g": {"kind": "flat-bump", "r": 2.0, "params": {"amplitude": 1.0}},
            "W": [{"class": "W2-2", "kind": "sqrt-cutoff", "rprime": 0.5, "params": {}}]
        }"#;
        let s = ModelSpec::from_json(text).unwrap();
        s.validate(1).unwrap();
        assert_eq!(s.w.terms[0].class, WClass::W22);
        let back = ModelSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back.g.r, Some(2.0));
        assert!(ModelSpec::from_json(r#"{"g": {"kind": "nope"}}"#).is_err());
        let missing = ModelSpec::from_json(r#"{"g": {"kind": "constant-one"}, "W": [{"class": "W2-2", "kind": "sqrt-cutoff"}]}"#).unwrap();
        assert!(missing.validate(1).is_err());
    }

    #[test]
    fn window_profile() {
        assert_eq!(window(0.0, 10.0), 1.0);
        assert_eq!(window(7.5, 10.0), 1.0);
        assert_eq!(window(10.0, 10.0), 0.0);
        let mid = window(8.75, 10.0);
        assert!(mid > 0.0 && mid < 1.0);
    }

    #[test]
    fn sampled_model_rejects_overflow_without_window() {
        let s = ModelSpec::new(
            InhomogeneitySpec::constant_one(),
            PotentialSpec::single(PotentialTerm::sqrt_exp(1.0, 2.0)),
        );
        let grid = GridSpec::new(1, 64, 400.0).unwrap();
        assert!(SampledModel::new(&s, &grid, None).is_err());
        let m = SampledModel::new(&s, &grid, Some(320.0)).unwrap();
        assert!(m.w_values().iter().all(|v| v.is_finite()));
    }
}
