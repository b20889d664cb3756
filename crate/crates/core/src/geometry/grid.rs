use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Samples of a scalar field on a uniform lattice spanning `[-1, 1]^dim`.
///
/// Values are row-major in axis order: the last axis varies fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarGrid {
    pub resolution: Vec<usize>,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(resolution: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if resolution.len() != 2 && resolution.len() != 3 {
            return Err(Error::invalid("grid must be 2D or 3D"));
        }
        let count = resolution
            .iter()
            .try_fold(1usize, |acc, r| acc.checked_mul(*r))
            .ok_or_else(|| Error::invalid("grid resolution overflows"))?;
        if count != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "grid expects {count} values, got {}",
                values.len()
            )));
        }
        Ok(Self { resolution, values })
    }

    /// Evaluates `f` at every lattice node; `f` receives a batch of points
    /// (flat, row-major) and returns one value per point.
    pub fn from_batch_fn(
        dim: usize,
        res: usize,
        mut f: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Self> {
        let resolution = vec![res; dim];
        let grid = Self {
            values: Vec::new(),
            resolution,
        };
        let n = grid.node_count();
        let mut points = Vec::with_capacity(n * dim);
        for i in 0..n {
            points.extend(grid.node_position(i));
        }
        let values = f(&points)?;
        Self::new(grid.resolution, values)
    }

    pub fn from_fn(dim: usize, res: usize, f: impl Fn(&[f64]) -> f64) -> Self {
        Self::from_batch_fn(dim, res, |pts| Ok(pts.chunks_exact(dim).map(&f).collect()))
            .expect("point function yields one value per node")
    }

    pub fn dim(&self) -> usize {
        self.resolution.len()
    }

    pub fn node_count(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        2.0 / (self.resolution[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        -1.0 + i as f64 * self.spacing(axis)
    }

    pub fn index(&self, ijk: &[usize]) -> usize {
        ijk.iter()
            .zip(&self.resolution)
            .fold(0, |acc, (i, r)| acc * r + i)
    }

    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            out[a] = index % self.resolution[a];
            index /= self.resolution[a];
        }
        out
    }

    pub fn node_position(&self, index: usize) -> Vec<f64> {
        self.unravel(index)
            .iter()
            .enumerate()
            .map(|(a, i)| self.coord(a, *i))
            .collect()
    }

    /// Multilinear interpolation of the lattice values at `x`.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let r = self.resolution[a];
            let u = ((x[a] + 1.0) / self.spacing(a)).clamp(0.0, (r - 1) as f64);
            let i = (u.floor() as usize).min(r - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let mut acc = 0.0;
        for mask in 0..(1usize << d) {
            let mut w = 1.0;
            let mut ijk = base.clone();
            for a in 0..d {
                if mask >> a & 1 == 1 {
                    ijk[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * self.values[self.index(&ijk)];
            }
        }
        acc
    }
}
