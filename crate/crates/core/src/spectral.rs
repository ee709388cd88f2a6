//! FFT-backed differentiation, Fourier multipliers and band-limited resampling.
//!
//! Plans are cached per grid and shared read-only across threads.

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::{Arc, Mutex, OnceLock};

use crate::field::ComplexField;
use crate::grid::GridSpec;

pub struct Spectral {
    grid: GridSpec,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Wavenumbers with the Nyquist mode zeroed (odd derivatives).
    k_odd: Vec<f64>,
    /// `|k|^2` over the full N-d spectrum, FFT order.
    k_squared: Vec<f64>,
}

type CacheKey = (usize, usize, u64);

fn cache() -> &'static Mutex<HashMap<CacheKey, Arc<Spectral>>> {
    static CACHE: OnceLock<Mutex<HashMap<CacheKey, Arc<Spectral>>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Shared spectral operators for `grid`.
pub fn spectral(grid: &GridSpec) -> Arc<Spectral> {
    let key = (grid.dim(), grid.points(), grid.half_width().to_bits());
    let mut map = cache().lock().unwrap();
    map.entry(key)
        .or_insert_with(|| Arc::new(Spectral::new(*grid)))
        .clone()
}

impl Spectral {
    fn new(grid: GridSpec) -> Self {
        let m = grid.points();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let k = grid.wavenumbers();
        let mut k_odd = k.clone();
        k_odd[m / 2] = 0.0;
        let k_squared = match grid.dim() {
            1 => k.iter().map(|k| k * k).collect(),
            _ => {
                let mut v = Vec::with_capacity(m * m);
                for ki in &k {
                    for kj in &k {
                        v.push(ki * ki + kj * kj);
                    }
                }
                v
            }
        };
        Self {
            grid,
            fwd,
            inv,
            k_odd,
            k_squared,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn k_squared(&self) -> &[f64] {
        &self.k_squared
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let m = self.grid.points();
        plan.process(data);
        if self.grid.dim() == 2 {
            transpose_square(data, m);
            plan.process(data);
            transpose_square(data, m);
        }
    }

    /// Unnormalized forward DFT, in place.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.fwd);
    }

    /// Normalized inverse DFT, in place.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inv);
        let s = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|z| *z *= s);
    }

    /// Applies the radial Fourier multiplier `m(|k|^2)`.
    pub fn apply_radial_multiplier(
        &self,
        data: &mut [Complex64],
        mut m: impl FnMut(f64) -> Complex64,
    ) {
        self.forward(data);
        data.iter_mut()
            .zip(&self.k_squared)
            .for_each(|(z, &k2)| *z *= m(k2));
        self.inverse(data);
    }

    /// Multiplies by a precomputed spectral factor (same ordering as `k_squared`).
    pub fn apply_factor(&self, data: &mut [Complex64], factor: &[Complex64]) {
        self.forward(data);
        data.iter_mut().zip(factor).for_each(|(z, f)| *z *= f);
        self.inverse(data);
    }

    fn axis_wavenumber(&self, index: usize, axis: usize) -> f64 {
        let m = self.grid.points();
        match (self.grid.dim(), axis) {
            (1, _) => self.k_odd[index],
            (_, 0) => self.k_odd[index / m],
            _ => self.k_odd[index % m],
        }
    }

    /// Spectral gradient, one field per axis.
    pub fn gradient(&self, u: &ComplexField) -> Vec<ComplexField> {
        let mut hat = u.values().to_vec();
        self.forward(&mut hat);
        (0..self.grid.dim())
            .map(|axis| {
                let mut d: Vec<Complex64> = hat
                    .iter()
                    .enumerate()
                    .map(|(i, z)| z * Complex64::new(0.0, self.axis_wavenumber(i, axis)))
                    .collect();
                self.inverse(&mut d);
                ComplexField::from_parts(self.grid, d)
            })
            .collect()
    }

    pub fn laplacian(&self, u: &ComplexField) -> ComplexField {
        let mut v = u.values().to_vec();
        self.apply_radial_multiplier(&mut v, |k2| Complex64::new(-k2, 0.0));
        ComplexField::from_parts(self.grid, v)
    }

    /// `‖∇u‖_2^2` through Parseval.
    pub fn gradient_norm_sq(&self, u: &ComplexField) -> f64 {
        let mut hat = u.values().to_vec();
        self.forward(&mut hat);
        let s: f64 = hat
            .iter()
            .zip(&self.k_squared)
            .map(|(z, k2)| k2 * z.norm_sqr())
            .sum();
        s * self.grid.cell_volume() / self.grid.len() as f64
    }

    /// `‖u‖_2^2` computed from the spectral coefficients.
    pub fn spectral_mass(&self, u: &ComplexField) -> f64 {
        let mut hat = u.values().to_vec();
        self.forward(&mut hat);
        let s: f64 = hat.iter().map(|z| z.norm_sqr()).sum();
        s * self.grid.cell_volume() / self.grid.len() as f64
    }

    /// `(1 - Δ)^{-1} u`.
    pub fn inverse_helmholtz(&self, u: &ComplexField) -> ComplexField {
        let mut v = u.values().to_vec();
        self.apply_radial_multiplier(&mut v, |k2| Complex64::new(1.0 / (1.0 + k2), 0.0));
        ComplexField::from_parts(self.grid, v)
    }

    /// Per-axis trigonometric interpolation matrix for source coordinates `xs`.
    fn interpolation_rows(&self, xs: &[f64]) -> Vec<Vec<Complex64>> {
        let m = self.grid.points();
        let l = self.grid.half_width();
        let k = self.grid.wavenumbers();
        let inv_m = 1.0 / m as f64;
        xs.iter()
            .map(|&x| {
                if !(x >= -l && x <= l) {
                    return vec![Complex64::new(0.0, 0.0); m];
                }
                let phase = x + l;
                (0..m)
                    .map(|j| {
                        if j == m / 2 {
                            Complex64::new((k[j] * phase).cos() * inv_m, 0.0)
                        } else {
                            Complex64::from_polar(inv_m, k[j] * phase)
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Band-limited resampling onto `target`: node `z` of the target reads the
    /// source at `x_a = scale_a * z_a + shift_a` on every axis. Points outside the
    /// closed source box `[-L, L]` read zero; `x = L` is the periodic image of `-L`.
    pub fn resample(
        &self,
        u: &ComplexField,
        target: &GridSpec,
        scale: [f64; 2],
        shift: [f64; 2],
    ) -> ComplexField {
        assert_eq!(u.grid(), &self.grid);
        assert_eq!(target.dim(), self.grid.dim());
        let m = self.grid.points();
        let mut hat = u.values().to_vec();
        self.forward(&mut hat);
        let z = target.axis();
        let n = target.points();
        let rows: Vec<Vec<Vec<Complex64>>> = (0..self.grid.dim())
            .map(|a| {
                let xs: Vec<f64> = z.iter().map(|z| scale[a] * z + shift[a]).collect();
                self.interpolation_rows(&xs)
            })
            .collect();
        let dot = |row: &[Complex64], it: &mut dyn Iterator<Item = Complex64>| -> Complex64 {
            row.iter().zip(it).map(|(a, b)| a * b).sum()
        };
        let values = match self.grid.dim() {
            1 => rows[0]
                .iter()
                .map(|r| dot(r, &mut hat.iter().copied()))
                .collect(),
            _ => {
                // Contract axis 1 first: tmp[i][q] = Σ_j hat[i][j] E1[q][j].
                let mut tmp = vec![Complex64::new(0.0, 0.0); m * n];
                for i in 0..m {
                    let line = &hat[i * m..(i + 1) * m];
                    for q in 0..n {
                        tmp[i * n + q] = dot(&rows[1][q], &mut line.iter().copied());
                    }
                }
                let mut out = vec![Complex64::new(0.0, 0.0); n * n];
                for p in 0..n {
                    for q in 0..n {
                        out[p * n + q] = dot(&rows[0][p], &mut (0..m).map(|i| tmp[i * n + q]));
                    }
                }
                out
            }
        };
        ComplexField::from_parts(*target, values)
    }
}

fn transpose_square(data: &mut [Complex64], m: usize) {
    for i in 0..m {
        for j in (i + 1)..m {
            data.swap(i * m + j, j * m + i);
        }
    }
}

/// Convenience: spectral gradient of `u`.
pub fn gradient(u: &ComplexField) -> Vec<ComplexField> {
    spectral(u.grid()).gradient(u)
}

/// Convenience: spectral Laplacian of `u`.
pub fn laplacian(u: &ComplexField) -> ComplexField {
    spectral(u.grid()).laplacian(u)
}

/// Wavenumber lattice spacing of `grid`.
pub fn fundamental_wavenumber(grid: &GridSpec) -> f64 {
    PI / grid.half_width()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn fourier_mode_derivative_is_exact() {
        let g = GridSpec::new(1, 64, 5.0).unwrap();
        let k0 = 3.0 * fundamental_wavenumber(&g);
        let u = ComplexField::from_fn(g, |x| Complex64::from_polar(1.0, k0 * x[0]));
        let du = gradient(&u);
        let expected = u.scale(c(0.0, k0));
        assert!(du[0].sub(&expected).max_abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = GridSpec::new(2, 16, 2.0).unwrap();
        let u = ComplexField::from_fn(g, |_| c(1.5, -0.5));
        for d in gradient(&u) {
            assert!(d.max_abs() < 1e-13);
        }
    }

    #[test]
    fn two_dim_mixed_mode() {
        let g = GridSpec::new(2, 32, 3.0).unwrap();
        let k = fundamental_wavenumber(&g);
        let u = ComplexField::from_fn(g, |x| Complex64::from_polar(1.0, 2.0 * k * x[0] - k * x[1]));
        let lap = laplacian(&u);
        let expected = u.scale(c(-5.0 * k * k, 0.0));
        assert!(lap.sub(&expected).max_abs() < 1e-10);
    }

    #[test]
    fn resample_identity_and_shift() {
        let g = GridSpec::new(1, 128, 10.0).unwrap();
        let f = |x: f64| (-(x * x)).exp() * (1.0 + 0.3 * x);
        let u = ComplexField::from_real_fn(g, |x| f(x[0]));
        let sp = spectral(&g);
        let same = sp.resample(&u, &g, [1.0, 1.0], [0.0, 0.0]);
        assert!(same.sub(&u).max_abs() < 1e-12);
        let shifted = sp.resample(&u, &g, [0.5, 1.0], [0.3, 0.0]);
        let exact = ComplexField::from_real_fn(g, |x| f(0.5 * x[0] + 0.3));
        assert!(shifted.sub(&exact).max_abs() < 1e-10);
    }

    #[test]
    fn resample_two_dim() {
        let g = GridSpec::new(2, 64, 8.0).unwrap();
        let f = |x: f64, y: f64| (-(x * x) - 0.5 * y * y).exp();
        let u = ComplexField::from_real_fn(g, |p| f(p[0], p[1]));
        let v = spectral(&g).resample(&u, &g, [0.8, -1.2], [0.1, 0.2]);
        let exact = ComplexField::from_real_fn(g, |p| f(0.8 * p[0] + 0.1, -1.2 * p[1] + 0.2));
        let err = v.sub(&exact).max_abs();
        assert!(err < 1e-8, "{err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn parseval_holds(seed in proptest::collection::vec(-1.0f64..1.0, 64)) {
            let g = GridSpec::new(1, 32, 4.0).unwrap();
            let vals: Vec<Complex64> = seed.chunks(2).map(|p| c(p[0], p[1])).collect();
            let u = ComplexField::new(g, vals).unwrap();
            let phys = u.inner(&u);
            let spec = spectral(&g).spectral_mass(&u);
            prop_assert!((phys - spec).abs() <= 1e-12 * phys.max(1e-300));
        }

        #[test]
        fn gradient_is_anti_hermitian(a in 0.3f64..2.0, x0 in -1.0f64..1.0, k in -2.0f64..2.0) {
            let g = GridSpec::new(1, 128, 12.0).unwrap();
            let u = ComplexField::from_fn(g, |x| {
                let r = x[0] - x0;
                Complex64::from_polar((-a * r * r).exp(), k * x[0])
            });
            let du = gradient(&u);
            prop_assert!(du[0].inner(&u).abs() < 1e-10);
        }
    }
}
