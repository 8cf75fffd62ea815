use serde::{Deserialize, Serialize};

use super::interp::Stencil;
use super::{Grid, Points};
use crate::error::{ensure, Error, Result};

/// Scalar image on a grid, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    grid: Grid,
    values: Vec<f64>,
}

impl Image {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        ensure!(
            values.len() == grid.len(),
            Shape,
            "image has {} values for a grid of {} points",
            values.len(),
            grid.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            NonFinite,
            "image contains non-finite intensities"
        );
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self {
            grid,
            values: vec![0.0; n],
        }
    }

    /// Image whose value at each grid point is `f(world coordinate)`.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let mut x = vec![0.0; grid.dim()];
        let values = (0..grid.len())
            .map(|i| {
                grid.point(i, &mut x);
                f(&x)
            })
            .collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Multilinear sample at world positions (border clamp).
    pub fn sample(&self, points: &Points) -> Result<Vec<f64>> {
        check_points(&self.grid, points)?;
        let mut out = vec![0.0; points.len()];
        for (p, o) in points.rows().zip(out.iter_mut()) {
            Stencil::from_world(&self.grid, p).gather(&self.values, 1, std::slice::from_mut(o));
        }
        Ok(out)
    }

    /// Intensity variance over the grid.
    pub fn variance(&self) -> f64 {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

/// `dim`-component vector field on a grid, point-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseField {
    grid: Grid,
    vectors: Vec<f64>,
}

impl DenseField {
    pub fn new(grid: Grid, vectors: Vec<f64>) -> Result<Self> {
        ensure!(
            vectors.len() == grid.len() * grid.dim(),
            Shape,
            "field has {} components for {} points of dim {}",
            vectors.len(),
            grid.len(),
            grid.dim()
        );
        ensure!(
            vectors.iter().all(|v| v.is_finite()),
            NonFinite,
            "field contains non-finite components"
        );
        Ok(Self { grid, vectors })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len() * grid.dim();
        Self {
            grid,
            vectors: vec![0.0; n],
        }
    }

    /// Field whose vector at each grid point is `f(x, out)`.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(&[f64], &mut [f64])) -> Result<Self> {
        let dim = grid.dim();
        let mut x = vec![0.0; dim];
        let mut vectors = vec![0.0; grid.len() * dim];
        for (i, v) in vectors.chunks_exact_mut(dim).enumerate() {
            grid.point(i, &mut x);
            f(&x, v);
        }
        Self::new(grid, vectors)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        let d = self.grid.dim();
        &self.vectors[i * d..(i + 1) * d]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.clone(),
            vectors: self.vectors.iter().map(|v| v * factor).collect(),
        }
    }

    /// Largest vector norm over the grid.
    pub fn max_norm(&self) -> f64 {
        self.vectors
            .chunks_exact(self.grid.dim())
            .map(|v| v.iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Multilinear sample at world positions (border clamp).
    pub fn sample(&self, points: &Points) -> Result<Points> {
        check_points(&self.grid, points)?;
        let d = self.grid.dim();
        let mut out = vec![0.0; points.len() * d];
        for (p, o) in points.rows().zip(out.chunks_exact_mut(d)) {
            Stencil::from_world(&self.grid, p).gather(&self.vectors, d, o);
        }
        Points::from_flat(d, out)
    }

    /// Sample at continuous index positions, one row per point.
    pub(crate) fn sample_index(&self, u: &[f64], out: &mut [f64]) {
        Stencil::from_index(&self.grid, u).gather(&self.vectors, self.grid.dim(), out);
    }
}

/// A spatial transformation stored as identity plus displacement.
///
/// Evaluating at `x` gives `x + displacement(x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformField {
    displacement: DenseField,
}

impl TransformField {
    pub fn from_displacement(displacement: DenseField) -> Self {
        Self { displacement }
    }

    pub fn displacement(&self) -> &DenseField {
        &self.displacement
    }

    pub fn into_displacement(self) -> DenseField {
        self.displacement
    }

    pub fn grid(&self) -> &Grid {
        self.displacement.grid()
    }

    /// Map world points: `p + displacement(p)`.
    pub fn apply(&self, points: &Points) -> Result<Points> {
        let d = self.displacement.sample(points)?;
        let coords = points
            .as_flat()
            .iter()
            .zip(d.as_flat())
            .map(|(p, u)| p + u)
            .collect();
        Points::from_flat(points.dim(), coords)
    }

    /// Map values at grid points, without interpolation.
    pub fn grid_values(&self) -> Points {
        let mut pts = self.grid().points();
        for (p, u) in pts.as_flat_mut().iter_mut().zip(self.displacement.vectors()) {
            *p += u;
        }
        pts
    }

    /// Fraction of grid points with a non-positive Jacobian determinant
    /// (central differences, one-sided at the border).
    pub fn folding_fraction(&self) -> f64 {
        let grid = self.grid();
        let dim = grid.dim();
        let dims = grid.dims();
        let strides = grid.strides();
        let disp = self.displacement.vectors();
        let mut folded = 0usize;
        for i in 0..grid.len() {
            let idx = grid.unravel(i);
            let mut jac = [[0.0f64; 3]; 3];
            for a in 0..dim {
                let (lo, hi) = (idx[a].saturating_sub(1), (idx[a] + 1).min(dims[a] - 1));
                let il = i - (idx[a] - lo) * strides[a];
                let ih = i + (hi - idx[a]) * strides[a];
                let h = (hi - lo) as f64 * grid.spacing()[a];
                for c in 0..dim {
                    jac[c][a] = (disp[ih * dim + c] - disp[il * dim + c]) / h;
                }
                jac[a][a] += 1.0;
            }
            let det = if dim == 2 {
                jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0]
            } else {
                jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                    - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                    + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0])
            };
            if det <= 0.0 {
                folded += 1;
            }
        }
        folded as f64 / grid.len() as f64
    }
}

fn check_points(grid: &Grid, points: &Points) -> Result<()> {
    if points.dim() != grid.dim() {
        return Err(Error::Shape(format!(
            "{}-D points sampled on a {}-D grid",
            points.dim(),
            grid.dim()
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("sample position is not finite".into()));
    }
    Ok(())
}
