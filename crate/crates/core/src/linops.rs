//! Linearized operators around `Q`, the profile `ρ` and the coercivity constant.
//!
//! * `L₊ = -Δ + 1 - (1 + 4/N) Q^{4/N}`, `L₋ = -Δ + 1 - Q^{4/N}`
//! * `Λ = N/2 + x·∇`
//! * `ρ`: radial solution of `L₊ρ = |y|² Q`
//!
//! `μ` is the smallest value of `(⟨L₊f, f⟩ + ⟨L₋g, g⟩) / ‖f + ig‖²_{H¹}` over
//! `f ⟂ Q, xQ, |x|²Q` and `g ⟂ ρ`. Writing `L± = B - V±` with `B = 1 - Δ`, each
//! sector reduces to the largest eigenvalue `θ` of `B⁻¹V` on the constrained
//! subspace (self-adjoint for `⟨·,·⟩_B`), and `μ = 1 - θ`. The constraint
//! projection is `B`-orthogonal against `B⁻¹c_k`, so its output satisfies the
//! `L²` constraints exactly. The eigenvalue comes from block subspace iteration
//! with Rayleigh–Ritz.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::grid::{radius, GridSpec};
use crate::groundstate::GroundStateBundle;
use crate::radial::RadialProfile;
use crate::spectral::spectral;

/// `Λu = (N/2)u + x·∇u`; meaningful for decaying `u` only.
pub fn apply_lambda(u: &ComplexField) -> ComplexField {
    let grid = *u.grid();
    let half_n = 0.5 * grid.dim() as f64;
    let grads = spectral(&grid).gradient(u);
    let mut out = u.scale(Complex64::new(half_n, 0.0));
    for (axis, d) in grads.iter().enumerate() {
        for (i, (o, z)) in out.values_mut().iter_mut().zip(d.values()).enumerate() {
            *o += grid.point(i)[axis] * z;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Which {
    Plus,
    Minus,
}

#[derive(Clone, Debug)]
pub struct LinearizedOperator {
    which: Which,
    grid: GridSpec,
    potential: Vec<f64>,
}

impl LinearizedOperator {
    pub fn new(which: Which, bundle: &GroundStateBundle, grid: &GridSpec) -> Self {
        let dim = grid.dim();
        let factor = match which {
            Which::Plus => 1.0 + 4.0 / dim as f64,
            Which::Minus => 1.0,
        };
        let q = bundle.sample(grid);
        let potential = q
            .values()
            .iter()
            .map(|z| factor * crate::functionals::critical_power(*z, dim))
            .collect();
        Self {
            which,
            grid: *grid,
            potential,
        }
    }

    pub fn which(&self) -> Which {
        self.which
    }

    /// `V` in `L = 1 - Δ - V`.
    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn apply(&self, u: &ComplexField) -> ComplexField {
        assert_eq!(u.grid(), &self.grid);
        let lap = spectral(&self.grid).laplacian(u);
        let values = u
            .values()
            .iter()
            .zip(lap.values())
            .zip(&self.potential)
            .map(|((z, l), v)| -l + z * (1.0 - v))
            .collect();
        ComplexField::new(self.grid, values).expect("finite input")
    }
}

pub fn apply_l(which: Which, bundle: &GroundStateBundle, u: &ComplexField) -> ComplexField {
    LinearizedOperator::new(which, bundle, u.grid()).apply(u)
}

/// Radial solve settings for `ρ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RhoMesh {
    pub step: f64,
    pub extent: f64,
    pub max_refinements: usize,
    pub tol: f64,
}

impl Default for RhoMesh {
    fn default() -> Self {
        Self {
            step: 2e-3,
            extent: 40.0,
            max_refinements: 8,
            tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RhoProfile {
    pub profile: RadialProfile,
    /// `‖L₊ρ - |y|²Q‖_2` of the discrete radial system.
    pub residual: f64,
    /// Residual after each refinement sweep.
    pub history: Vec<f64>,
}

impl RhoProfile {
    pub fn eval(&self, r: f64) -> f64 {
        self.profile.eval(r)
    }

    pub fn sample(&self, grid: &GridSpec) -> ComplexField {
        let dim = grid.dim();
        ComplexField::from_real_fn(*grid, |x| self.profile.eval(radius(&x, dim)))
    }

    /// Fits `|ρ(r)| ≤ C (1 + r)^{κ_α} Q(r)` on the mesh.
    pub fn envelope(&self, bundle: &GroundStateBundle) -> Envelope {
        let h = self.profile.step();
        let limit = bundle.mesh().extent.min(self.profile.extent() - 5.0);
        let pts: Vec<(f64, f64)> = self
            .profile
            .values()
            .iter()
            .enumerate()
            .map(|(j, &v)| (j as f64 * h, v))
            .filter(|(r, _)| *r <= limit)
            .map(|(r, v)| (r, v.abs() / bundle.eval(r)))
            .collect();
        let tail: Vec<(f64, f64)> = pts
            .iter()
            .filter(|(r, _)| *r >= 5.0)
            .map(|(r, q)| ((1.0 + r).ln(), q.ln()))
            .collect();
        let n = tail.len() as f64;
        let mx = tail.iter().map(|p| p.0).sum::<f64>() / n;
        let my = tail.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = tail.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = tail.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let kappa_alpha = (sxy / sxx).max(0.0);
        let constant = pts
            .iter()
            .map(|(r, q)| q / (1.0 + r).powf(kappa_alpha))
            .fold(0.0, f64::max);
        Envelope {
            constant,
            kappa_alpha,
            radius: limit,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Envelope {
    pub constant: f64,
    pub kappa_alpha: f64,
    /// Largest radius included in the fit.
    pub radius: f64,
}

/// Pentadiagonal matrix rows `[a_{j,j-2}, a_{j,j-1}, a_{j,j}, a_{j,j+1}, a_{j,j+2}]`.
struct Banded {
    rows: Vec<[f64; 5]>,
}

impl Banded {
    fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..n)
            .map(|j| {
                let mut s = 0.0;
                for (k, a) in self.rows[j].iter().enumerate() {
                    let c = j as isize + k as isize - 2;
                    if c >= 0 && (c as usize) < n {
                        s += a * x[c as usize];
                    }
                }
                s
            })
            .collect()
    }

    /// Gaussian elimination with partial pivoting inside the band.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        // Row j holds columns j-2 ..= j+4 (two extra for pivot fill-in).
        let w = 7;
        let mut a: Vec<[f64; 7]> = self
            .rows
            .iter()
            .map(|r| [r[0], r[1], r[2], r[3], r[4], 0.0, 0.0])
            .collect();
        let mut rhs = b.to_vec();
        let col = |row: usize, c: usize| -> usize { c + 2 - row };
        for k in 0..n {
            // Pivot among rows k..k+2.
            let mut p = k;
            let mut best = a[k][col(k, k)].abs();
            for r in (k + 1)..(k + 3).min(n) {
                let v = a[r][col(r, k)].abs();
                if v > best {
                    best = v;
                    p = r;
                }
            }
            if p != k {
                // Re-express both rows on absolute columns k..k+4 before swapping.
                let mut rk = [0.0; 7];
                let mut rp = [0.0; 7];
                for c in k.saturating_sub(2)..(k + 5).min(n) {
                    if c + 2 >= k && col(k, c) < w {
                        rk[c + 2 - k] = a[k][col(k, c)];
                    }
                    if c + 2 >= p && col(p, c) < w {
                        rp[c + 2 - k] = a[p][col(p, c)];
                    }
                }
                for c in k.saturating_sub(2)..(k + 5).min(n) {
                    if c + 2 >= k && col(k, c) < w {
                        a[k][col(k, c)] = rp[c + 2 - k];
                    }
                    if c + 2 >= p && col(p, c) < w {
                        a[p][col(p, c)] = rk[c + 2 - k];
                    }
                }
                rhs.swap(k, p);
            }
            let piv = a[k][col(k, k)];
            for r in (k + 1)..(k + 3).min(n) {
                let f = a[r][col(r, k)] / piv;
                if f == 0.0 {
                    continue;
                }
                for c in k..(k + 5).min(n) {
                    if col(r, c) < w {
                        a[r][col(r, c)] -= f * a[k][col(k, c)];
                    }
                }
                rhs[r] -= f * rhs[k];
            }
        }
        let mut x = vec![0.0; n];
        for k in (0..n).rev() {
            let mut s = rhs[k];
            for c in (k + 1)..(k + 5).min(n) {
                s -= a[k][col(k, c)] * x[c];
            }
            x[k] = s / a[k][col(k, k)];
        }
        x
    }
}

/// Fourth-order discretization of the radial `L₊` with even ghost values at
/// `r = 0` and `ρ = 0` beyond the last node.
fn radial_l_plus(bundle: &GroundStateBundle, step: f64, n: usize) -> Banded {
    let dim = bundle.dim();
    let nf = dim as f64;
    let factor = 1.0 + 4.0 / nf;
    let h2 = 12.0 * step * step;
    let h1 = 12.0 * step;
    let mut rows = vec![[0.0; 5]; n];
    for (j, row) in rows.iter_mut().enumerate() {
        let r = j as f64 * step;
        let q = bundle.eval(r);
        let v = factor * if dim == 1 { q.powi(4) } else { q * q };
        // Stencil on offsets -2..=2 before folding the ghosts.
        let mut st = [0.0f64; 5];
        if j == 0 {
            // Δρ(0) = N ρ''(0).
            let d2 = [-1.0, 16.0, -30.0, 16.0, -1.0];
            for k in 0..5 {
                st[k] = -nf * d2[k] / h2;
            }
        } else {
            let d2 = [-1.0, 16.0, -30.0, 16.0, -1.0];
            let d1 = [1.0, -8.0, 0.0, 8.0, -1.0];
            for k in 0..5 {
                st[k] = -d2[k] / h2 - (nf - 1.0) / r * d1[k] / h1;
            }
        }
        st[2] += 1.0 - v;
        for (k, s) in st.iter().enumerate() {
            let c = j as isize + k as isize - 2;
            let c = c.unsigned_abs();
            if c >= n {
                continue;
            }
            let slot = c as isize - j as isize + 2;
            row[slot as usize] += s;
        }
    }
    Banded { rows }
}

/// Solves `L₊ρ = |y|²Q` in the radial sector (no kernel there).
pub fn solve_rho(bundle: &GroundStateBundle, mesh: RhoMesh) -> Result<RhoProfile> {
    let n = (mesh.extent / mesh.step).round() as usize;
    let a = radial_l_plus(bundle, mesh.step, n);
    let b: Vec<f64> = (0..n)
        .map(|j| {
            let r = j as f64 * mesh.step;
            r * r * bundle.eval(r)
        })
        .collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = a.solve(&b);
    let mut history = Vec::new();
    let residual_of = |x: &[f64]| -> (Vec<f64>, f64) {
        let ax = a.mul(x);
        let r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        (r, norm)
    };
    let (mut r, mut rn) = residual_of(&x);
    history.push(rn);
    // Backward error `‖b - Ax‖ / (‖A‖_∞ ‖x‖ + ‖b‖)`; refinement stops once it stagnates.
    let a_norm = a
        .rows
        .iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let backward = |x: &[f64], rn: f64| rn / (a_norm * x.iter().map(|v| v * v).sum::<f64>().sqrt() + bnorm);
    let mut sweeps = 0;
    while backward(&x, rn) > mesh.tol && sweeps < mesh.max_refinements {
        let dx = a.solve(&r);
        let trial: Vec<f64> = x.iter().zip(&dx).map(|(x, d)| x + d).collect();
        let next = residual_of(&trial);
        history.push(next.1);
        sweeps += 1;
        if next.1 >= 0.5 * rn {
            if next.1 < rn {
                x = trial;
                r = next.0;
                rn = next.1;
            }
            break;
        }
        x = trial;
        r = next.0;
        rn = next.1;
    }
    if !(backward(&x, rn) <= mesh.tol) || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConvergence {
            what: "radial L+ rho solve",
            residuals: history,
        });
    }
    x.push(0.0);
    // Continuous-norm residual: radial quadrature of the discrete residual.
    let mut res_full = r.clone();
    res_full.push(0.0);
    let residual = crate::radial::radial_integral(bundle.dim(), mesh.step, res_full.len(), |j| {
        res_full[j] * res_full[j]
    })
    .sqrt();
    let profile = RadialProfile::from_values(bundle.dim(), mesh.step, x, None)?;
    Ok(RhoProfile {
        profile,
        residual,
        history,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub name: String,
    /// `L²` norm of the difference of the two sides.
    pub residual: f64,
}

/// The six operator identities, each as an `L²` residual over the box of `grid`.
///
/// The operators act on a copy of the grid enlarged `padding` times with the
/// same spacing, so polynomially weighted profiles such as `|x|²Q` and `ρ` are
/// not cut off by the periodic wrap at the edge of the measured box.
pub fn identity_residuals(
    bundle: &GroundStateBundle,
    grid: &GridSpec,
    rho: &RhoProfile,
    padding: usize,
) -> Result<Vec<IdentityCheck>> {
    let dim = grid.dim();
    let p = padding.max(1);
    let work = GridSpec::new(dim, grid.points() * p, grid.half_width() * p as f64)?;
    let offset = (grid.points() * (p - 1)) / 2;
    let inside: Vec<bool> = (0..work.len())
        .map(|i| {
            let (ix, iy) = (i % work.points(), i / work.points());
            let ok = |j: usize| j >= offset && j < offset + grid.points();
            ok(ix) && (dim == 1 || ok(iy))
        })
        .collect();
    let norm = |f: &ComplexField| -> f64 {
        let s: f64 = f
            .values()
            .iter()
            .zip(&inside)
            .filter(|(_, &k)| k)
            .map(|(z, _)| z.norm_sqr())
            .sum();
        (s * work.cell_volume()).sqrt()
    };
    let lp = LinearizedOperator::new(Which::Plus, bundle, &work);
    let lm = LinearizedOperator::new(Which::Minus, bundle, &work);
    let q = bundle.sample(&work);
    let lq = bundle.sample_with(&work, |r, q, d| 0.5 * dim as f64 * q + r * d);
    let y2q = bundle.sample_with(&work, |r, q, _| r * r * q);
    let check = |name: &str, lhs: ComplexField, rhs: ComplexField| IdentityCheck {
        name: name.to_string(),
        residual: norm(&lhs.sub(&rhs)),
    };
    let mut out = vec![
        check("L- Q = 0", lm.apply(&q), ComplexField::zeros(work)),
        check("L+ LambdaQ = -2Q", lp.apply(&lq), q.scale(Complex64::new(-2.0, 0.0))),
        check(
            "L- |x|^2 Q = -4 LambdaQ",
            lm.apply(&y2q),
            lq.scale(Complex64::new(-4.0, 0.0)),
        ),
        check("L+ rho = |x|^2 Q", lp.apply(&rho.sample(&work)), y2q.clone()),
    ];
    let mut xq_res = 0.0f64;
    let mut dq_res = 0.0f64;
    for axis in 0..dim {
        let xq = ComplexField::from_real_fn(work, |x| x[axis] * bundle.eval(radius(&x, dim)));
        let dq = ComplexField::from_real_fn(work, |x| {
            let r = radius(&x, dim);
            if r == 0.0 {
                0.0
            } else {
                bundle.eval_with_derivative(r).1 * x[axis] / r
            }
        });
        xq_res = xq_res.hypot(norm(&lm.apply(&xq).axpy(Complex64::new(2.0, 0.0), &dq)));
        dq_res = dq_res.hypot(norm(&lp.apply(&dq)));
    }
    out.push(IdentityCheck {
        name: "L- xQ = -2 grad Q".into(),
        residual: xq_res,
    });
    out.push(IdentityCheck {
        name: "L+ grad Q = 0".into(),
        residual: dq_res,
    });
    Ok(out)
}

/// The constrained quadratic-form problem on one grid.
pub struct CoercivityProblem {
    grid: GridSpec,
    v_plus: Vec<f64>,
    v_minus: Vec<f64>,
    real_constraints: Vec<ComplexField>,
    imag_constraints: Vec<ComplexField>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CoercivityReport {
    pub mu: f64,
    /// `1 - θ` in the real (`L₊`) sector.
    pub mu_real: f64,
    /// `1 - θ` in the imaginary (`L₋`) sector.
    pub mu_imag: f64,
    pub iterations: usize,
}

struct Constraint {
    /// `d_k = B⁻¹c_k`.
    d: Vec<ComplexField>,
    /// Inverse Gram matrix `⟨d_i, c_j⟩⁻¹`.
    gram_inv: DMatrix<f64>,
    c: Vec<ComplexField>,
}

impl Constraint {
    fn new(grid: &GridSpec, c: Vec<ComplexField>) -> Self {
        let sp = spectral(grid);
        let d: Vec<ComplexField> = c.iter().map(|ck| sp.inverse_helmholtz(ck)).collect();
        let k = c.len();
        let gram = DMatrix::from_fn(k, k, |i, j| d[i].inner(&c[j]));
        let gram_inv = gram.try_inverse().expect("independent constraints");
        Self { d, gram_inv, c }
    }

    /// `f - Σ d_i G⁻¹_{ij} ⟨c_j, f⟩`; the result is `L²`-orthogonal to every `c_k`.
    fn project(&self, f: &ComplexField) -> ComplexField {
        let k = self.c.len();
        let a: Vec<f64> = self.c.iter().map(|c| c.inner(f)).collect();
        let mut out = f.clone();
        for i in 0..k {
            let coef: f64 = (0..k).map(|j| self.gram_inv[(i, j)] * a[j]).sum();
            out = out.axpy(Complex64::new(-coef, 0.0), &self.d[i]);
        }
        out
    }
}

impl CoercivityProblem {
    pub fn new(bundle: &GroundStateBundle, rho: &RhoProfile, grid: &GridSpec) -> Self {
        let dim = grid.dim();
        let lp = LinearizedOperator::new(Which::Plus, bundle, grid);
        let lm = LinearizedOperator::new(Which::Minus, bundle, grid);
        let q = (*bundle.sample(grid)).clone();
        let mut real_constraints = vec![q];
        for axis in 0..dim {
            real_constraints.push(ComplexField::from_real_fn(*grid, |x| {
                x[axis] * bundle.eval(radius(&x, dim))
            }));
        }
        real_constraints.push(bundle.sample_with(grid, |r, q, _| r * r * q));
        Self {
            grid: *grid,
            v_plus: lp.potential().to_vec(),
            v_minus: lm.potential().to_vec(),
            real_constraints,
            imag_constraints: vec![rho.sample(grid)],
        }
    }

    /// Projects `u` onto the constrained set (real part ⟂ Q, xQ, |x|²Q; imaginary part ⟂ ρ).
    pub fn project(&self, u: &ComplexField) -> ComplexField {
        let re = Constraint::new(&self.grid, self.real_constraints.clone()).project(&u.real_part());
        let im = Constraint::new(&self.grid, self.imag_constraints.clone()).project(&u.imag_part());
        re.axpy(Complex64::new(0.0, 1.0), &im)
    }

    /// `(⟨L₊ Re u, Re u⟩ + ⟨L₋ Im u, Im u⟩) / ‖u‖²_{H¹}`.
    pub fn quotient(&self, u: &ComplexField) -> f64 {
        let sp = spectral(&self.grid);
        let h1 = u.inner(u) + sp.gradient_norm_sq(u);
        let dv = self.grid.cell_volume();
        let vterm: f64 = u
            .values()
            .iter()
            .enumerate()
            .map(|(i, z)| self.v_plus[i] * z.re * z.re + self.v_minus[i] * z.im * z.im)
            .sum::<f64>()
            * dv;
        (h1 - vterm) / h1
    }

    fn largest_theta(&self, v: &[f64], constraint: &Constraint, seed: u64) -> Result<(f64, usize)> {
        let sp = spectral(&self.grid);
        let grid = self.grid;
        let block = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = grid.half_width() / 4.0;
        let mut x: Vec<ComplexField> = (0..block)
            .map(|_| {
                let c: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let f = ComplexField::from_real_fn(grid, |p| {
                    let r2 = (p[0] * p[0] + p[1] * p[1]) / (scale * scale);
                    (c[0] + c[1] * p[0] + c[2] * p[1] + c[3] * p[0] * p[0] + c[4] * p[0] * p[1] + c[5] * p[1] * p[1])
                        * (-r2).exp()
                });
                constraint.project(&f)
            })
            .collect();
        let vmul = |f: &ComplexField| -> ComplexField {
            let vals = f.values().iter().zip(v).map(|(z, w)| z * w).collect();
            ComplexField::new(grid, vals).expect("finite")
        };
        let b_inner = |a: &ComplexField, b: &ComplexField| -> f64 {
            a.inner(&b.sub(&sp.laplacian(b)))
        };
        let mut last = f64::NAN;
        let mut history = Vec::new();
        for it in 0..400 {
            let y: Vec<ComplexField> = x
                .iter()
                .map(|f| constraint.project(&sp.inverse_helmholtz(&vmul(f))))
                .collect();
            let m = DMatrix::from_fn(block, block, |i, j| b_inner(&y[i], &y[j]));
            let vy: Vec<ComplexField> = y.iter().map(vmul).collect();
            let k = DMatrix::from_fn(block, block, |i, j| y[i].inner(&vy[j]));
            // Generalized problem K c = θ M c on the numerically independent part of span(Y).
            let me = SymmetricEigen::new(m.clone());
            let top = me.eigenvalues.max();
            let kept: Vec<usize> = (0..block).filter(|&i| me.eigenvalues[i] > 1e-10 * top).collect();
            let s = DMatrix::from_fn(block, kept.len(), |i, j| {
                me.eigenvectors[(i, kept[j])] / me.eigenvalues[kept[j]].sqrt()
            });
            let ks = s.transpose() * &k * &s;
            let ke = SymmetricEigen::new(0.5 * (&ks + ks.transpose()));
            let mut order: Vec<usize> = (0..kept.len()).collect();
            order.sort_by(|&a, &b| ke.eigenvalues[b].partial_cmp(&ke.eigenvalues[a]).unwrap());
            let theta = ke.eigenvalues[order[0]];
            let coeffs = &s * &ke.eigenvectors;
            x = order
                .iter()
                .map(|&col| {
                    let mut f = ComplexField::zeros(grid);
                    for (i, yi) in y.iter().enumerate() {
                        f = f.axpy(Complex64::new(coeffs[(i, col)], 0.0), yi);
                    }
                    constraint.project(&f)
                })
                .collect();
            while x.len() < block {
                x.push(constraint.project(&random_test_field(&grid, rng.gen())).real_part());
            }
            history.push(theta);
            if (theta - last).abs() <= 1e-11 * theta.abs().max(1.0) {
                return Ok((theta, it + 1));
            }
            last = theta;
        }
        Err(Error::NoConvergence {
            what: "coercivity subspace iteration",
            residuals: history,
        })
    }

    pub fn solve(&self) -> Result<CoercivityReport> {
        let re = Constraint::new(&self.grid, self.real_constraints.clone());
        let im = Constraint::new(&self.grid, self.imag_constraints.clone());
        let (tr, ir) = self.largest_theta(&self.v_plus, &re, 7)?;
        let (ti, ii) = self.largest_theta(&self.v_minus, &im, 11)?;
        let mu_real = 1.0 - tr;
        let mu_imag = 1.0 - ti;
        Ok(CoercivityReport {
            mu: mu_real.min(mu_imag),
            mu_real,
            mu_imag,
            iterations: ir + ii,
        })
    }
}

/// Estimates `μ` on `grid`. A non-positive value signals a coarse grid or a
/// projection problem and is returned as an error.
pub fn coercivity_mu(bundle: &GroundStateBundle, rho: &RhoProfile, grid: &GridSpec) -> Result<CoercivityReport> {
    let rep = CoercivityProblem::new(bundle, rho, grid).solve()?;
    if !(rep.mu > 0.0) {
        return Err(Error::NoConvergence {
            what: "coercivity (non-positive constrained quotient)",
            residuals: vec![rep.mu],
        });
    }
    Ok(rep)
}

/// Draws a random smooth test field (used by property tests and the suite).
pub fn random_test_field(grid: &GridSpec, seed: u64) -> ComplexField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let w = 0.5 + rng.gen_range(0.0..1.0);
    ComplexField::from_fn(*grid, |p| {
        let g = (-(p[0] * p[0] + p[1] * p[1]) * w).exp();
        Complex64::new(
            (a[0] + a[1] * p[0] + a[2] * p[1] + a[3] * p[0] * p[1]) * g,
            (a[4] + a[5] * p[0] + a[6] * p[1] * p[1] + a[7] * p[0] * p[0]) * g,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groundstate::{closed_form_q, solve_ground_state, RadialMesh};
    use std::sync::OnceLock;

    fn bundle1() -> &'static GroundStateBundle {
        static B: OnceLock<GroundStateBundle> = OnceLock::new();
        B.get_or_init(|| solve_ground_state(1, RadialMesh::default()).unwrap())
    }

    fn rho1() -> &'static RhoProfile {
        static R: OnceLock<RhoProfile> = OnceLock::new();
        R.get_or_init(|| solve_rho(bundle1(), RhoMesh::default()).unwrap())
    }

    #[test]
    fn lambda_q_at_origin() {
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let q = bundle1().sample(&g);
        let lq = apply_lambda(&q);
        let centre = g.points() / 2;
        assert!((lq.values()[centre].re - closed_form_q(0.0) / 2.0).abs() < 1e-10);
        assert!((lq.values()[centre].re - 0.658037).abs() < 1e-6);
    }

    #[test]
    fn lambda_is_dilation_generator() {
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let u = ComplexField::from_fn(g, |x| Complex64::new((-x[0] * x[0]).exp(), 0.5 * x[0] * (-x[0] * x[0]).exp()));
        let f = |a: f64| {
            ComplexField::from_fn(g, |x| {
                let y = a * x[0];
                Complex64::new((-y * y).exp(), 0.5 * y * (-y * y).exp()) * a.sqrt()
            })
        };
        let da = 1e-4;
        let fd = f(1.0 + da).sub(&f(1.0 - da)).scale(Complex64::new(0.5 / da, 0.0));
        assert!(fd.sub(&apply_lambda(&u)).max_abs() < 1e-6);
    }

    #[test]
    fn rho_solves_radial_equation() {
        let rho = rho1();
        assert!(rho.residual <= 1e-6, "{}", rho.residual);
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let field = rho.sample(&g);
        // Radial functions are even, so ⟨ρ, Q'⟩ vanishes.
        let dq = ComplexField::from_real_fn(g, |x| crate::groundstate::closed_form_dq(x[0]));
        assert!(field.inner(&dq).abs() < 1e-8);
    }

    #[test]
    fn identities_one_dim() {
        let g = GridSpec::new(1, 512, 16.0).unwrap();
        let checks = identity_residuals(bundle1(), &g, rho1(), 2).unwrap();
        for c in checks {
            assert!(c.residual <= 1e-6, "{}: {}", c.name, c.residual);
        }
    }

    #[test]
    fn operators_are_symmetric() {
        let g = GridSpec::new(1, 256, 12.0).unwrap();
        for which in [Which::Plus, Which::Minus] {
            let op = LinearizedOperator::new(which, bundle1(), &g);
            for s in 0..5 {
                let u = random_test_field(&g, s);
                let v = random_test_field(&g, 100 + s);
                let lhs = op.apply(&u).inner(&v);
                let rhs = u.inner(&op.apply(&v));
                assert!((lhs - rhs).abs() <= 1e-10 * u.norm_l2() * v.norm_l2());
            }
        }
    }

    #[test]
    fn envelope_exponent() {
        let env = rho1().envelope(bundle1());
        assert!(env.constant.is_finite());
        assert!(env.kappa_alpha > 2.0 && env.kappa_alpha < 4.0, "{}", env.kappa_alpha);
    }

    #[test]
    fn coercivity_positive_and_projection() {
        let g = GridSpec::new(1, 256, 16.0).unwrap();
        let p = CoercivityProblem::new(bundle1(), rho1(), &g);
        let rep = p.solve().unwrap();
        assert!(rep.mu > 0.0, "{rep:?}");
        let iq = bundle1().sample(&g).scale(Complex64::new(0.0, 1.0));
        let projected = p.project(&iq);
        assert!(p.quotient(&projected) >= rep.mu - 1e-9);
        let twice = p.project(&projected);
        assert!(twice.sub(&projected).max_abs() < 1e-10);
        assert!(projected.imag_part().inner(&rho1().sample(&g)).abs() < 1e-10);
        for s in 0..10 {
            let u = p.project(&random_test_field(&g, s));
            assert!(p.quotient(&u) >= rep.mu - 1e-9);
        }
    }

    #[test]
    fn identities_two_dim() {
        let b = solve_ground_state(2, RadialMesh::default()).unwrap();
        let rho = solve_rho(&b, RhoMesh::default()).unwrap();
        let g = GridSpec::new(2, 256, 12.0).unwrap();
        for c in identity_residuals(&b, &g, &rho, 2).unwrap() {
            assert!(c.residual <= 1e-6, "{}: {}", c.name, c.residual);
        }
    }

    #[test]
    fn coercivity_stable_under_halving() {
        let fine = coercivity_mu(bundle1(), rho1(), &GridSpec::new(1, 512, 16.0).unwrap()).unwrap();
        let coarse = coercivity_mu(bundle1(), rho1(), &GridSpec::new(1, 256, 16.0).unwrap()).unwrap();
        assert!((fine.mu - coarse.mu).abs() <= 0.1 * fine.mu, "{fine:?} {coarse:?}");
    }
}
