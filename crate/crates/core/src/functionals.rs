//! Nonlinearity, mass, energy and norms.
//!
//! `ℂ` is identified with `ℝ²` throughout, so for `F(z) = |z|^{p+2}/(p+2)`
//! with `p = 4/N`:
//!
//! * `dF(z)(e) = Re(f(z) conj(e)) = |z|^p Re(z conj(e))`
//! * `d²F(z)(e, e) = |z|^p |e|² + p |z|^{p-2} (Re(z conj(e)))²`

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::field::ComplexField;
use crate::potentials::SampledModel;
use crate::spectral::spectral;

/// `|z|^{4/N}` without calling `powf`.
#[inline]
pub fn critical_power(z: Complex64, dim: usize) -> f64 {
    let s = z.norm_sqr();
    if dim == 1 {
        s * s
    } else {
        s
    }
}

/// `f(z) = |z|^{4/N} z`.
#[inline]
pub fn nonlinearity_f(z: Complex64, dim: usize) -> Complex64 {
    z * critical_power(z, dim)
}

/// `F(z) = |z|^{2+4/N} / (2+4/N)`.
#[inline]
pub fn potential_density(z: Complex64, dim: usize) -> f64 {
    let p = 4.0 / dim as f64;
    critical_power(z, dim) * z.norm_sqr() / (2.0 + p)
}

/// `dF(z)(e)`.
#[inline]
pub fn potential_density_d1(z: Complex64, e: Complex64, dim: usize) -> f64 {
    critical_power(z, dim) * (z.re * e.re + z.im * e.im)
}

/// `d²F(z)(e, e)`.
#[inline]
pub fn potential_density_d2(z: Complex64, e: Complex64, dim: usize) -> f64 {
    let p = 4.0 / dim as f64;
    let pairing = z.re * e.re + z.im * e.im;
    let lower = if dim == 1 { z.norm_sqr() } else { 1.0 };
    critical_power(z, dim) * e.norm_sqr() + p * lower * pairing * pairing
}

/// `F(z + e) - F(z) - dF(z)(e)` without cancellation for small `e`.
pub fn potential_density_remainder(z: Complex64, e: Complex64, dim: usize) -> f64 {
    let big_a = z.norm_sqr();
    if big_a == 0.0 {
        return potential_density(e, dim);
    }
    let k = 1.0 + 2.0 / dim as f64;
    let x = (2.0 * (z.re * e.re + z.im * e.im) + e.norm_sqr()) / big_a;
    if !(x.abs() <= 1.0) {
        return potential_density(z + e, dim) - potential_density(z, dim) - potential_density_d1(z, e, dim);
    }
    // (1 + x)^k - 1 - kx
    let r2 = if x.abs() < 1e-3 {
        let mut coeff = k * (k - 1.0) / 2.0;
        let mut power = x * x;
        let mut sum = 0.0;
        for j in 2..12 {
            sum += coeff * power;
            coeff *= (k - j as f64) / (j as f64 + 1.0);
            power *= x;
        }
        sum
    } else {
        (1.0 + x).powf(k) - 1.0 - k * x
    };
    big_a.powf(k - 1.0) * (0.5 * e.norm_sqr() + big_a * r2 / (2.0 * k))
}

pub fn mass(u: &ComplexField) -> f64 {
    u.values().iter().map(|z| z.norm_sqr()).sum::<f64>() * u.grid().cell_volume()
}

/// Energy with sampled `g` and `W`.
pub fn energy(u: &ComplexField, model: &SampledModel) -> f64 {
    let grid = u.grid();
    let dim = grid.dim();
    let kinetic = 0.5 * spectral(grid).gradient_norm_sq(u);
    let dv = grid.cell_volume();
    let g = model.g_values();
    let w = model.w_values();
    let mut nonlinear = 0.0;
    let mut potential = 0.0;
    for (i, z) in u.values().iter().enumerate() {
        nonlinear += g[i] * potential_density(*z, dim);
        potential += w[i] * z.norm_sqr();
    }
    kinetic - nonlinear * dv + 0.5 * potential * dv
}

/// Energy with `g ≡ 1` and `W ≡ 0`.
pub fn critical_energy(u: &ComplexField) -> f64 {
    let grid = u.grid();
    let dim = grid.dim();
    let kinetic = 0.5 * spectral(grid).gradient_norm_sq(u);
    let nonlinear: f64 = u.values().iter().map(|z| potential_density(*z, dim)).sum();
    kinetic - nonlinear * grid.cell_volume()
}

/// `‖u‖_{2+4/N}^{2+4/N}`.
pub fn critical_lp_norm(u: &ComplexField) -> f64 {
    let dim = u.grid().dim();
    u.values()
        .iter()
        .map(|z| critical_power(*z, dim) * z.norm_sqr())
        .sum::<f64>()
        * u.grid().cell_volume()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub l2: f64,
    pub h1: f64,
    pub sigma1: f64,
    pub weighted_l2: f64,
    pub gradient_l2: f64,
}

pub fn norms(u: &ComplexField) -> NormReport {
    let grid = u.grid();
    let l2_sq = mass(u);
    let grad_sq = spectral(grid).gradient_norm_sq(u);
    let weighted_sq = weighted_l2_sq(u);
    let h1_sq = l2_sq + grad_sq;
    NormReport {
        l2: l2_sq.sqrt(),
        h1: h1_sq.sqrt(),
        sigma1: (h1_sq + weighted_sq).sqrt(),
        weighted_l2: weighted_sq.sqrt(),
        gradient_l2: grad_sq.sqrt(),
    }
}

/// `‖|x| u‖_2^2`.
pub fn weighted_l2_sq(u: &ComplexField) -> f64 {
    let grid = u.grid();
    u.values()
        .iter()
        .enumerate()
        .map(|(i, z)| {
            let x = grid.point(i);
            (x[0] * x[0] + x[1] * x[1]) * z.norm_sqr()
        })
        .sum::<f64>()
        * grid.cell_volume()
}

/// Momentum `Im ∫ u ∇conj(u)`, one entry per axis.
pub fn momentum(u: &ComplexField) -> Vec<f64> {
    let dv = u.grid().cell_volume();
    spectral(u.grid())
        .gradient(u)
        .iter()
        .map(|d| {
            u.values()
                .iter()
                .zip(d.values())
                .map(|(a, b)| (a * b.conj()).im)
                .sum::<f64>()
                * dv
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn nonlinearity_values() {
        assert_eq!(nonlinearity_f(c(2.0, 0.0), 2), c(8.0, 0.0));
        assert_eq!(nonlinearity_f(c(1.0, 0.0), 1), c(1.0, 0.0));
        assert_eq!(nonlinearity_f(c(0.0, 1.0), 2), c(0.0, 1.0));
        assert_eq!(nonlinearity_f(c(0.0, 0.0), 1), c(0.0, 0.0));
    }

    #[test]
    fn density_values() {
        assert!((potential_density(c(1.0, 0.0), 1) - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(potential_density(c(2.0, 0.0), 2), 4.0);
        assert_eq!(potential_density(c(0.0, 0.0), 1), 0.0);
    }

    #[test]
    fn zero_field_norms_vanish() {
        let g = GridSpec::new(2, 16, 3.0).unwrap();
        let n = norms(&ComplexField::zeros(g));
        assert_eq!(n, NormReport { l2: 0.0, h1: 0.0, sigma1: 0.0, weighted_l2: 0.0, gradient_l2: 0.0 });
    }

    #[test]
    fn plane_wave_h1() {
        let g = GridSpec::new(1, 64, 4.0).unwrap();
        let k0 = 5.0 * std::f64::consts::PI / 4.0;
        let u = ComplexField::from_fn(g, |x| Complex64::from_polar(0.7, k0 * x[0]));
        let n = norms(&u);
        assert!((n.h1 * n.h1 - (1.0 + k0 * k0) * n.l2 * n.l2).abs() < 1e-10);
        assert!((n.sigma1.powi(2) - n.h1.powi(2) - n.weighted_l2.powi(2)).abs() < 1e-10);
    }

    fn check_derivatives(z: Complex64, e: Complex64, dim: usize) {
        // Central differences of t -> F(z + t e).
        let t = 1e-4;
        let fp = potential_density(z + e * t, dim);
        let fm = potential_density(z - e * t, dim);
        let f0 = potential_density(z, dim);
        let d1 = (fp - fm) / (2.0 * t);
        let d2 = (fp - 2.0 * f0 + fm) / (t * t);
        let scale = 1.0 + z.norm().powi(6);
        assert!((d1 - potential_density_d1(z, e, dim)).abs() < 1e-6 * scale);
        assert!((d2 - potential_density_d2(z, e, dim)).abs() < 1e-4 * scale);
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(
            a in -1.5f64..1.5, b in -1.5f64..1.5, ea in -1.0f64..1.0, eb in -1.0f64..1.0
        ) {
            check_derivatives(c(a, b), c(ea, eb), 1);
            check_derivatives(c(a, b), c(ea, eb), 2);
        }

        #[test]
        fn mass_phase_invariant(gamma in -3.0f64..3.0) {
            let g = GridSpec::new(1, 32, 4.0).unwrap();
            let u = ComplexField::from_fn(g, |x| c((-x[0] * x[0]).exp(), 0.2 * x[0]));
            let v = u.scale(Complex64::from_polar(1.0, gamma));
            prop_assert!((mass(&u) - mass(&v)).abs() < 1e-13);
            prop_assert!((critical_energy(&u) - critical_energy(&v)).abs() < 1e-12);
        }
    }
    #[test]
    fn remainder_matches_direct_and_quadratic() {
        for dim in [1, 2] {
            let z = c(0.8, -0.3);
            let e = c(0.2, 0.15);
            let direct = potential_density(z + e, dim) - potential_density(z, dim) - potential_density_d1(z, e, dim);
            assert!((potential_density_remainder(z, e, dim) - direct).abs() < 1e-14);
            let tiny = c(3e-9, -2e-9);
            let quad = 0.5 * potential_density_d2(z, tiny, dim);
            assert!((potential_density_remainder(z, tiny, dim) - quad).abs() < 1e-8 * quad);
            assert_eq!(potential_density_remainder(c(0.0, 0.0), e, dim), potential_density(e, dim));
        }
    }
}
