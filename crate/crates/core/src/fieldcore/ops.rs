use super::interp::Stencil;
use super::{DenseField, Grid, Image, Points, TransformField};
use crate::error::{ensure, Error, Result};

/// The identity transformation on `grid` (all-zero displacement).
pub fn identity_map(grid: &Grid) -> TransformField {
    TransformField::from_displacement(DenseField::zeros(grid.clone()))
}

/// Multilinear sample of a vector field at world positions.
pub fn sample_field(field: &DenseField, points: &Points) -> Result<Points> {
    field.sample(points)
}

/// Multilinear sample of an image at world positions.
pub fn sample_image(image: &Image, points: &Points) -> Result<Vec<f64>> {
    image.sample(points)
}

/// Resample `source` on the transform's grid: `out(x) = source(transform(x))`.
pub fn warp_image(source: &Image, transform: &TransformField) -> Result<Image> {
    let tgrid = transform.grid();
    let sgrid = source.grid();
    if tgrid.dim() != sgrid.dim() {
        return Err(Error::GridMismatch(format!(
            "warping a {}-D image with a {}-D transform",
            sgrid.dim(),
            tgrid.dim()
        )));
    }
    let dim = tgrid.dim();
    let disp = transform.displacement().vectors();
    let mut values = vec![0.0; tgrid.len()];
    let mut u = [0.0f64; 3];
    if tgrid == sgrid {
        // Index-space evaluation keeps the identity warp exact.
        for (i, v) in values.iter_mut().enumerate() {
            let idx = tgrid.unravel(i);
            for k in 0..dim {
                u[k] = idx[k] as f64 + disp[i * dim + k] / tgrid.spacing()[k];
            }
            Stencil::from_index(sgrid, &u[..dim]).gather(source.values(), 1, std::slice::from_mut(v));
        }
    } else {
        let mut x = [0.0f64; 3];
        for (i, v) in values.iter_mut().enumerate() {
            tgrid.point(i, &mut x[..dim]);
            for k in 0..dim {
                x[k] += disp[i * dim + k];
            }
            Stencil::from_world(sgrid, &x[..dim]).gather(source.values(), 1, std::slice::from_mut(v));
        }
    }
    Image::new(tgrid.clone(), values)
}

/// `result(x) = outer(inner(x))`; inner is exact at grid points, outer is
/// interpolated.
pub fn compose(outer: &TransformField, inner: &TransformField) -> Result<TransformField> {
    let grid = inner.grid();
    grid.require_same(outer.grid(), "compose")?;
    let dim = grid.dim();
    let inner_d = inner.displacement().vectors();
    let outer_d = outer.displacement();
    let mut vectors = vec![0.0; inner_d.len()];
    let mut u = [0.0f64; 3];
    let mut s = [0.0f64; 3];
    for i in 0..grid.len() {
        let idx = grid.unravel(i);
        for k in 0..dim {
            u[k] = idx[k] as f64 + inner_d[i * dim + k] / grid.spacing()[k];
        }
        outer_d.sample_index(&u[..dim], &mut s[..dim]);
        for k in 0..dim {
            vectors[i * dim + k] = inner_d[i * dim + k] + s[k];
        }
    }
    Ok(TransformField::from_displacement(DenseField::new(
        grid.clone(),
        vectors,
    )?))
}

/// Flow of a stationary velocity field by scaling and squaring.
///
/// Starts from `Id + v / 2^steps` and composes the map with itself
/// `steps` times.
pub fn exp_svf(velocity: &DenseField, steps: u32) -> Result<TransformField> {
    ensure!(steps >= 1, InvalidInput, "scaling and squaring needs at least one step");
    ensure!(steps <= 30, InvalidInput, "{steps} squaring steps is excessive");
    ensure!(
        velocity.vectors().iter().all(|v| v.is_finite()),
        NonFinite,
        "velocity field is not finite"
    );
    let mut phi = TransformField::from_displacement(velocity.scaled(1.0 / (1u64 << steps) as f64));
    for _ in 0..steps {
        phi = compose(&phi, &phi)?;
    }
    Ok(phi)
}

/// Mean squared intensity difference over the grid.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.grid().require_same(b.grid(), "mse")?;
    let n = a.values().len() as f64;
    Ok(a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// `MSE(phi, psi)` between two transforms on the same grid, in mm².
///
/// Diagnostic only: compares displacement vectors pointwise.
pub fn field_mse(a: &TransformField, b: &TransformField) -> Result<f64> {
    a.grid().require_same(b.grid(), "field_mse")?;
    let da = a.displacement().vectors();
    let db = b.displacement().vectors();
    Ok(da.iter().zip(db).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.grid().len() as f64)
}

/// Largest displacement norm over grid points at least `margin` nodes from
/// every border.
pub fn max_interior_displacement(t: &TransformField, margin: usize) -> f64 {
    let grid = t.grid();
    let dim = grid.dim();
    (0..grid.len())
        .filter(|&i| {
            let idx = grid.unravel(i);
            (0..dim).all(|k| idx[k] >= margin && idx[k] + margin < grid.dims()[k])
        })
        .map(|i| {
            t.displacement().vector(i).iter().map(|c| c * c).sum::<f64>().sqrt()
        })
        .fold(0.0, f64::max)
}
