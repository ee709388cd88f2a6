//! Uniform periodic grids on `[-L, L)^N`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Smallest admissible number of points per axis.
pub const MIN_POINTS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    dim: usize,
    points: usize,
    half_width: f64,
}

impl GridSpec {
    pub fn new(dim: usize, points: usize, half_width: f64) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if points < MIN_POINTS || !points.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "points per axis must be a power of two >= {MIN_POINTS}, got {points}"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "half-width must be positive and finite, got {half_width}"
            )));
        }
        Ok(Self {
            dim,
            points,
            half_width,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.points as f64
    }

    /// Total node count `M^N`.
    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight `h^N` of the periodic trapezoid rule.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Axis coordinates `x_j = -L + j h`.
    pub fn axis(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.points)
            .map(|j| -self.half_width + j as f64 * h)
            .collect()
    }

    /// Angular wavenumbers in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let m = self.points as i64;
        let dk = PI / self.half_width;
        (0..m)
            .map(|j| {
                let j = if j < m / 2 { j } else { j - m };
                j as f64 * dk
            })
            .collect()
    }

    /// Largest resolvable wavenumber.
    pub fn nyquist(&self) -> f64 {
        PI / self.spacing()
    }

    /// Coordinates of node `index` (row-major, axis 0 slowest).
    pub fn point(&self, index: usize) -> [f64; 2] {
        let h = self.spacing();
        match self.dim {
            1 => [-self.half_width + index as f64 * h, 0.0],
            _ => {
                let i = index / self.points;
                let j = index % self.points;
                [
                    -self.half_width + i as f64 * h,
                    -self.half_width + j as f64 * h,
                ]
            }
        }
    }

    /// Iterator over all node coordinates, truncated to `dim` entries.
    pub fn points_iter(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Same grid with a different half-width (spacing scales accordingly).
    pub fn with_half_width(&self, half_width: f64) -> Result<Self> {
        Self::new(self.dim, self.points, half_width)
    }

    pub fn same_shape(&self, other: &GridSpec) -> bool {
        self.dim == other.dim && self.points == other.points
    }
}

/// Euclidean norm of the first `dim` coordinates.
pub fn radius(x: &[f64; 2], dim: usize) -> f64 {
    if dim == 1 {
        x[0].abs()
    } else {
        x[0].hypot(x[1])
    }
}
