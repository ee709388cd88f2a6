//! Complex fields sampled on a [`GridSpec`] and their binary snapshot format.
//!
//! Snapshot layout (all little-endian):
//!
//! | bytes  | content                      |
//! |--------|------------------------------|
//! | 0..4   | magic `NLSF`                 |
//! | 4..8   | format version (`u32`)       |
//! | 8..16  | dimension N (`u64`)          |
//! | 16..24 | points per axis M (`u64`)    |
//! | 24..32 | half-width L (`f64`)         |
//! | 32..   | `M^N` pairs `(re, im)` `f64` |
//!
//! A JSON sidecar (`<file>.json`) repeats the header and may carry extra metadata.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::GridSpec;

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"NLSF";
pub const SNAPSHOT_VERSION: u32 = 1;
pub const SNAPSHOT_HEADER_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    grid: GridSpec,
    values: Vec<Complex64>,
}

impl ComplexField {
    pub fn new(grid: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if values.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("field values".into()));
        }
        Ok(Self { grid, values })
    }

    /// Builds a field without the finiteness scan. Callers guarantee the length.
    pub(crate) fn from_parts(grid: GridSpec, values: Vec<Complex64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: GridSpec) -> Self {
        Self {
            grid,
            values: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_fn(grid: GridSpec, mut f: impl FnMut([f64; 2]) -> Complex64) -> Self {
        let values = grid.points_iter().map(&mut f).collect();
        Self { grid, values }
    }

    pub fn from_real_fn(grid: GridSpec, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        Self::from_fn(grid, |x| Complex64::new(f(x), 0.0))
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn map(&self, mut f: impl FnMut(Complex64) -> Complex64) -> Self {
        Self {
            grid: self.grid,
            values: self.values.iter().map(|&z| f(z)).collect(),
        }
    }

    /// Pointwise map that also sees the node coordinates.
    pub fn map_with_points(&self, mut f: impl FnMut([f64; 2], Complex64) -> Complex64) -> Self {
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(i, &z)| f(self.grid.point(i), z))
            .collect();
        Self {
            grid: self.grid,
            values,
        }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        self.map(|z| z * c)
    }

    pub fn real_part(&self) -> Self {
        self.map(|z| Complex64::new(z.re, 0.0))
    }

    pub fn imag_part(&self) -> Self {
        self.map(|z| Complex64::new(z.im, 0.0))
    }

    fn check_same(&self, other: &Self) {
        assert!(
            self.grid == other.grid,
            "field operation on mismatched grids"
        );
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_same(other);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_same(other);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: Complex64, other: &Self) -> Self {
        self.check_same(other);
        Self {
            grid: self.grid,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a + c * b)
                .collect(),
        }
    }

    /// Real inner product `(u, v)_2 = Re ∫ u conj(v) dx`.
    pub fn inner(&self, other: &Self) -> f64 {
        self.check_same(other);
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum();
        s * self.grid.cell_volume()
    }

    pub fn norm_l2(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Writes `path` and the JSON sidecar `path.json`.
    pub fn write_snapshot(&self, path: &Path, extra: Option<serde_json::Value>) -> Result<()> {
        let mut buf = Vec::with_capacity(SNAPSHOT_HEADER_LEN + 16 * self.values.len());
        buf.extend_from_slice(SNAPSHOT_MAGIC);
        buf.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.grid.dim() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.grid.points() as u64).to_le_bytes());
        buf.extend_from_slice(&self.grid.half_width().to_le_bytes());
        for z in &self.values {
            buf.extend_from_slice(&z.re.to_le_bytes());
            buf.extend_from_slice(&z.im.to_le_bytes());
        }
        fs::File::create(path)?.write_all(&buf)?;

        let meta = SnapshotMeta {
            magic: "NLSF".into(),
            version: SNAPSHOT_VERSION,
            dim: self.grid.dim(),
            points: self.grid.points(),
            half_width: self.grid.half_width(),
            extra,
        };
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn read_snapshot(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::decode_snapshot(&bytes)
    }

    pub fn decode_snapshot(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SNAPSHOT_HEADER_LEN {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[0..4] != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let word = |r: std::ops::Range<usize>| -> [u8; 8] { bytes[r].try_into().unwrap() };
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = u64::from_le_bytes(word(8..16)) as usize;
        let points = u64::from_le_bytes(word(16..24)) as usize;
        let half_width = f64::from_le_bytes(word(24..32));
        let grid = GridSpec::new(dim, points, half_width)?;
        let body = &bytes[SNAPSHOT_HEADER_LEN..];
        if body.len() != 16 * grid.len() {
            return Err(Error::Format(format!(
                "body holds {} bytes, expected {}",
                body.len(),
                16 * grid.len()
            )));
        }
        let values = body
            .chunks_exact(16)
            .map(|c| {
                Complex64::new(
                    f64::from_le_bytes(c[0..8].try_into().unwrap()),
                    f64::from_le_bytes(c[8..16].try_into().unwrap()),
                )
            })
            .collect();
        Self::new(grid, values)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub magic: String,
    pub version: u32,
    pub dim: usize,
    pub points: usize,
    pub half_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length_and_nan() {
        let g = GridSpec::new(1, 16, 1.0).unwrap();
        assert!(ComplexField::new(g, vec![Complex64::new(0.0, 0.0); 15]).is_err());
        let mut v = vec![Complex64::new(0.0, 0.0); 16];
        v[3].im = f64::NAN;
        assert!(matches!(
            ComplexField::new(g, v),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn snapshot_header_layout() {
        let g = GridSpec::new(2, 16, 3.0).unwrap();
        let u = ComplexField::from_fn(g, |x| Complex64::new(x[0], -x[1]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.nlsf");
        u.write_snapshot(&p, Some(serde_json::json!({"note": "test"})))
            .unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"NLSF");
        assert_eq!(bytes.len(), 32 + 16 * 256);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 3.0);
        let back = ComplexField::read_snapshot(&p).unwrap();
        assert_eq!(back, u);
        let meta: SnapshotMeta =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&p)).unwrap()).unwrap();
        assert_eq!(meta.points, 16);
    }

    #[test]
    fn decode_rejects_garbage() {
        assert!(ComplexField::decode_snapshot(b"NLSF").is_err());
        let mut bytes = vec![0u8; 32];
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(ComplexField::decode_snapshot(&bytes).is_err());
    }
}
