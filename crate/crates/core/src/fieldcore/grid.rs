use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Regular lattice in world coordinates (mm).
///
/// Axis 0 is the slowest-varying axis in row-major storage. A point's
/// coordinates are listed in axis order, so for a 2D image `(row, col)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
    origin: Vec<f64>,
}

impl Grid {
    pub fn new(dims: Vec<usize>, spacing: Vec<f64>, origin: Vec<f64>) -> Result<Self> {
        ensure!(
            dims.len() == 2 || dims.len() == 3,
            InvalidGrid,
            "dimensionality must be 2 or 3, got {}",
            dims.len()
        );
        ensure!(
            spacing.len() == dims.len() && origin.len() == dims.len(),
            InvalidGrid,
            "dims, spacing and origin lengths differ ({}, {}, {})",
            dims.len(),
            spacing.len(),
            origin.len()
        );
        ensure!(
            dims.iter().all(|&d| d >= 2),
            InvalidGrid,
            "every axis needs at least 2 points, got {:?}",
            dims
        );
        ensure!(
            spacing.iter().all(|&s| s.is_finite() && s > 0.0),
            InvalidGrid,
            "spacing must be finite and positive, got {:?}",
            spacing
        );
        ensure!(
            origin.iter().all(|o| o.is_finite()),
            InvalidGrid,
            "origin must be finite, got {:?}",
            origin
        );
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Grid with the same spacing on every axis and origin at zero.
    pub fn uniform(dims: &[usize], spacing: f64) -> Result<Self> {
        Self::new(dims.to_vec(), vec![spacing; dims.len()], vec![0.0; dims.len()])
    }

    pub fn dim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// World extent `(dims - 1) * spacing` per axis.
    pub fn extent(&self) -> Vec<f64> {
        self.dims
            .iter()
            .zip(&self.spacing)
            .map(|(&d, &s)| (d - 1) as f64 * s)
            .collect()
    }

    /// World coordinate of the geometric center of the lattice.
    pub fn center(&self) -> Vec<f64> {
        self.origin
            .iter()
            .zip(self.extent())
            .map(|(o, e)| o + 0.5 * e)
            .collect()
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for k in (0..self.dim() - 1).rev() {
            strides[k] = strides[k + 1] * self.dims[k + 1];
        }
        strides
    }

    /// Multi-index of a flat row-major index.
    pub fn unravel(&self, mut flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for k in (0..self.dim()).rev() {
            idx[k] = flat % self.dims[k];
            flat /= self.dims[k];
        }
        idx
    }

    /// World coordinates of the point with flat index `flat`.
    pub fn point(&self, flat: usize, out: &mut [f64]) {
        let idx = self.unravel(flat);
        for k in 0..self.dim() {
            out[k] = self.origin[k] + idx[k] as f64 * self.spacing[k];
        }
    }

    /// All grid point coordinates in row-major order.
    pub fn points(&self) -> super::Points {
        let dim = self.dim();
        let mut coords = vec![0.0; self.len() * dim];
        for (i, chunk) in coords.chunks_exact_mut(dim).enumerate() {
            self.point(i, chunk);
        }
        super::Points::from_flat(dim, coords).expect("grid points are well formed")
    }

    /// Continuous index coordinate of a world position along `axis`.
    #[inline]
    pub fn to_index(&self, axis: usize, x: f64) -> f64 {
        (x - self.origin[axis]) / self.spacing[axis]
    }

    pub(crate) fn require_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_axes() {
        assert!(Grid::uniform(&[1, 4], 1.0).is_err());
        assert!(Grid::uniform(&[4], 1.0).is_err());
        assert!(Grid::new(vec![4, 4], vec![1.0, 0.0], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn extent_and_points() {
        let g = Grid::new(vec![3, 4], vec![2.0, 0.5], vec![1.0, -1.0]).unwrap();
        assert_eq!(g.extent(), vec![4.0, 1.5]);
        assert_eq!(g.len(), 12);
        let pts = g.points();
        assert_eq!(pts.row(0), &[1.0, -1.0]);
        assert_eq!(pts.row(5), &[3.0, -0.5]);
        assert_eq!(pts.row(11), &[5.0, 0.5]);
        assert_eq!(g.strides(), vec![4, 1]);
    }
}
