//! Radial profiles on uniform meshes `r_j = j h_r`, `0 ≤ j ≤ n`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Exponential tail `a · r^{-(N-1)/2} e^{-r}` used beyond the mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tail {
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    dim: usize,
    step: f64,
    values: Vec<f64>,
    derivatives: Vec<f64>,
    tail: Option<Tail>,
}

impl RadialProfile {
    pub fn new(
        dim: usize,
        step: f64,
        values: Vec<f64>,
        derivatives: Vec<f64>,
        tail: Option<Tail>,
    ) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if values.len() < 8 || values.len() != derivatives.len() || !(step > 0.0) {
            return Err(Error::InvalidGrid("radial mesh too small or inconsistent".into()));
        }
        if values.iter().chain(&derivatives).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("radial profile".into()));
        }
        Ok(Self {
            dim,
            step,
            values,
            derivatives,
            tail,
        })
    }

    /// Builds the profile of an even function from its values, with
    /// fourth-order differences for the derivative.
    pub fn from_values(dim: usize, step: f64, values: Vec<f64>, tail: Option<Tail>) -> Result<Self> {
        let derivatives = even_derivative(&values, step);
        Self::new(dim, step, values, derivatives, tail)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn extent(&self) -> f64 {
        self.step * (self.values.len() - 1) as f64
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn derivatives(&self) -> &[f64] {
        &self.derivatives
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |j| j as f64 * self.step)
    }

    pub fn tail(&self) -> Option<Tail> {
        self.tail
    }

    fn tail_eval(&self, r: f64) -> (f64, f64) {
        match self.tail {
            None => (0.0, 0.0),
            Some(t) => {
                let a = -0.5 * (self.dim as f64 - 1.0);
                let v = t.amplitude * r.powf(a) * (-r).exp();
                (v, v * (a / r - 1.0))
            }
        }
    }

    /// Value and derivative at radius `r ≥ 0` (cubic Hermite inside the mesh).
    pub fn eval_with_derivative(&self, r: f64) -> (f64, f64) {
        let r = r.abs();
        let n = self.values.len() - 1;
        let pos = r / self.step;
        if pos >= n as f64 {
            return if pos == n as f64 {
                (self.values[n], self.derivatives[n])
            } else {
                self.tail_eval(r)
            };
        }
        let j = pos.floor() as usize;
        let t = pos - j as f64;
        let h = self.step;
        let (y0, y1) = (self.values[j], self.values[j + 1]);
        let (d0, d1) = (self.derivatives[j] * h, self.derivatives[j + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * d0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * d1;
        let dv = (6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * d0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * d1;
        (v, dv / h)
    }

    pub fn eval(&self, r: f64) -> f64 {
        self.eval_with_derivative(r).0
    }

    /// `∫_{ℝ^N} f(|y|) dy` for `f` given on the mesh, by composite Simpson.
    pub fn integrate(&self, f: impl Fn(f64, f64, f64) -> f64) -> f64 {
        radial_integral(self.dim, self.step, self.values.len(), |j| {
            let r = j as f64 * self.step;
            f(r, self.values[j], self.derivatives[j])
        })
    }

    /// Pointwise map keeping the mesh; the derivative is recomputed by differences.
    pub fn map(&self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = self
            .radii()
            .zip(&self.values)
            .map(|(r, &v)| f(r, v))
            .collect();
        Self::from_values(self.dim, self.step, values, None)
    }
}

/// Surface measure of the unit sphere `S^{N-1}`: 2 for N = 1, 2π for N = 2.
pub fn sphere_measure(dim: usize) -> f64 {
    if dim == 1 {
        2.0
    } else {
        2.0 * PI
    }
}

/// `|S^{N-1}| ∫_0^R f(r) r^{N-1} dr` with Simpson's rule on `n` mesh values.
pub fn radial_integral(dim: usize, step: f64, n: usize, f: impl Fn(usize) -> f64) -> f64 {
    let weight = |j: usize| -> f64 {
        if dim == 1 {
            1.0
        } else {
            j as f64 * step
        }
    };
    let last = if (n - 1) % 2 == 0 { n - 1 } else { n - 2 };
    let mut s = f(0) * weight(0) + f(last) * weight(last);
    for j in 1..last {
        let c = if j % 2 == 1 { 4.0 } else { 2.0 };
        s += c * f(j) * weight(j);
    }
    let mut total = s * step / 3.0;
    if last != n - 1 {
        total += 0.5 * step * (f(last) * weight(last) + f(n - 1) * weight(n - 1));
    }
    sphere_measure(dim) * total
}

/// Fourth-order derivative of an even function sampled at `r_j = j h`.
pub fn even_derivative(v: &[f64], h: f64) -> Vec<f64> {
    let n = v.len();
    let at = |j: isize| -> f64 {
        if j < 0 {
            v[(-j) as usize]
        } else {
            v[j as usize]
        }
    };
    (0..n)
        .map(|j| {
            let j = j as isize;
            if j == 0 {
                0.0
            } else if (j as usize) + 2 < n {
                (at(j - 2) - 8.0 * at(j - 1) + 8.0 * at(j + 1) - at(j + 2)) / (12.0 * h)
            } else {
                // One-sided fourth order at the far edge.
                let k = j as usize;
                (25.0 * v[k] - 48.0 * v[k - 1] + 36.0 * v[k - 2] - 16.0 * v[k - 3] + 3.0 * v[k - 4])
                    / (12.0 * h)
            }
        })
        .collect()
}

/// Large-argument expansion of the modified Bessel function `K_ν(z)`.
pub fn bessel_k_asymptotic(nu: f64, z: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..30 {
        let odd = (2 * k - 1) as f64;
        let next = term * (mu - odd * odd) / (k as f64 * 8.0 * z);
        if next.abs() > term.abs() {
            break;
        }
        term = next;
        sum += term;
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    (PI / (2.0 * z)).sqrt() * (-z).exp() * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_reproduces_cubics() {
        let h = 0.1;
        let f = |r: f64| 1.0 + r * r - 0.3 * r * r * r;
        let df = |r: f64| 2.0 * r - 0.9 * r * r;
        let n = 40;
        let vals = (0..n).map(|j| f(j as f64 * h)).collect();
        let ders = (0..n).map(|j| df(j as f64 * h)).collect();
        let p = RadialProfile::new(1, h, vals, ders, None).unwrap();
        for r in [0.0, 0.05, 0.77, 2.31, 3.9] {
            let (v, d) = p.eval_with_derivative(r);
            assert!((v - f(r)).abs() < 1e-12);
            assert!((d - df(r)).abs() < 1e-11);
        }
    }

    #[test]
    fn simpson_integrates_gaussians() {
        let h = 1e-3;
        let n = 12001;
        let i1 = radial_integral(1, h, n, |j| (-(j as f64 * h).powi(2)).exp());
        assert!((i1 - PI.sqrt()).abs() < 1e-12);
        let i2 = radial_integral(2, h, n, |j| (-(j as f64 * h).powi(2)).exp());
        assert!((i2 - PI).abs() < 1e-12);
    }

    #[test]
    fn bessel_matches_reference() {
        // K_0(10) = 1.778006231616765e-5, K_1(10) = 1.864877345382558e-5.
        assert!((bessel_k_asymptotic(0.0, 10.0) / 1.778006231616765e-5 - 1.0).abs() < 1e-8);
        assert!((bessel_k_asymptotic(1.0, 10.0) / 1.864877345382558e-5 - 1.0).abs() < 1e-8);
    }

    #[test]
    fn even_derivative_of_cosine() {
        let h = 1e-2;
        let v: Vec<f64> = (0..500).map(|j| (j as f64 * h).cos()).collect();
        let d = even_derivative(&v, h);
        for (j, dj) in d.iter().enumerate() {
            assert!((dj + (j as f64 * h).sin()).abs() < 1e-8);
        }
    }
}
