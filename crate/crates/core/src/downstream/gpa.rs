//! Generalized Procrustes analysis of ordered landmark sets.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{ensure, Result};
use crate::fieldcore::Points;

const TOLERANCE: f64 = 1e-8;
const MAX_ITERATIONS: usize = 100;

/// Shapes after similarity alignment to a common mean.
#[derive(Clone, Debug)]
pub struct AlignedShapes {
    pub shapes: Vec<Points>,
    /// Centred at the origin with unit Frobenius norm, in a canonical
    /// principal-axis orientation.
    pub mean: Points,
    /// Change of the mean in the final iteration.
    pub residual: f64,
    pub iterations: usize,
}

fn matrix(p: &Points) -> DMatrix<f64> {
    DMatrix::from_row_slice(p.len(), p.dim(), p.as_flat())
}

fn points(m: &DMatrix<f64>) -> Points {
    let mut flat = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        flat.extend(m.row(r).iter());
    }
    Points::from_flat(m.ncols(), flat).expect("matrix rows")
}

fn centred(m: &DMatrix<f64>) -> DMatrix<f64> {
    let c = m.row_mean();
    let mut out = m.clone();
    for mut r in out.row_iter_mut() {
        r -= &c;
    }
    out
}

/// Centred copy scaled to unit norm; errors on a zero-spread shape.
fn normalized(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = centred(m);
    let n = c.norm();
    ensure!(n > 1e-12, InvalidInput, "degenerate shape: all landmarks coincide");
    Ok(c / n)
}

/// `s·X·R` minimizing `‖s·X·R − target‖` over rotations `R` and scales `s`,
/// with `X` the centred shape. `target` must be centred.
fn align_matrix(x: &DMatrix<f64>, target: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let x = centred(x);
    let xx = x.norm_squared();
    ensure!(xx > 1e-24, InvalidInput, "degenerate shape: all landmarks coincide");
    let svd = (x.transpose() * target).svd(true, true);
    let (u, vt) = (svd.u.expect("svd u"), svd.v_t.expect("svd v"));
    let mut d = DMatrix::<f64>::identity(x.ncols(), x.ncols());
    if (&u * &vt).determinant() < 0.0 {
        d[(x.ncols() - 1, x.ncols() - 1)] = -1.0;
    }
    let r = &u * &d * &vt;
    let s = svd.singular_values.dot(&d.diagonal()) / xx;
    Ok(x * r * s)
}

/// Similarity-align `shape` to a centred `target`.
pub fn align_to(shape: &Points, target: &Points) -> Result<Points> {
    ensure!(
        shape.len() == target.len() && shape.dim() == target.dim(),
        Shape,
        "cannot align {} landmarks to {}",
        shape.len(),
        target.len()
    );
    Ok(points(&align_matrix(&matrix(shape), &centred(&matrix(target)))?))
}

/// Rotate a centred shape onto its principal axes, largest variance first.
/// Axis signs make the third moment along each axis non-negative, except
/// the last one, which keeps the rotation proper.
fn canonical(m: &DMatrix<f64>) -> DMatrix<f64> {
    let dim = m.ncols();
    let eig = SymmetricEigen::new(m.transpose() * m);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut r = DMatrix::<f64>::zeros(dim, dim);
    for (k, &j) in order.iter().enumerate() {
        let axis = eig.eigenvectors.column(j);
        let proj = m * axis;
        let skew: f64 = proj.iter().map(|v| v * v * v).sum();
        let sign = if skew < 0.0 { -1.0 } else { 1.0 };
        r.set_column(k, &(axis * sign));
    }
    if r.determinant() < 0.0 {
        let last = -r.column(dim - 1);
        r.set_column(dim - 1, &last);
    }
    m * r
}

/// Iterative alignment of every shape to the running mean until the mean
/// moves by less than 1e-8.
pub fn gpa(shapes: &[Points]) -> Result<AlignedShapes> {
    ensure!(shapes.len() >= 2, InvalidInput, "GPA needs at least 2 shapes, got {}", shapes.len());
    let (n, dim) = (shapes[0].len(), shapes[0].dim());
    ensure!(
        shapes.iter().all(|s| s.len() == n && s.dim() == dim),
        Shape,
        "GPA needs shapes of equal size"
    );
    let xs: Vec<DMatrix<f64>> = shapes.iter().map(matrix).collect();
    for x in &xs {
        normalized(x)?;
    }
    let mut mean = normalized(&xs[0])?;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS && residual >= TOLERANCE {
        let mut sum = DMatrix::<f64>::zeros(n, dim);
        for x in &xs {
            sum += align_matrix(x, &mean)?;
        }
        let next = normalized(&sum)?;
        residual = (&next - &mean).norm();
        mean = next;
        iterations += 1;
    }
    if residual >= TOLERANCE {
        log::warn!("GPA stopped after {MAX_ITERATIONS} iterations with mean change {residual:.3e}");
    }
    let mean = canonical(&mean);
    let aligned = xs.iter().map(|x| align_matrix(x, &mean).map(|a| points(&a))).collect::<Result<_>>()?;
    Ok(AlignedShapes {
        shapes: aligned,
        mean: points(&mean),
        residual,
        iterations,
    })
}
