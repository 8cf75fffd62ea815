//! Dense scalar and vector fields on regular grids.
//!
//! Everything downstream (losses, metrics, the synthetic cohort) is built
//! on four types: [`Grid`], [`Image`], [`DenseField`] and
//! [`TransformField`]. Sampling is multilinear with border clamping, and
//! transformations are stored as identity plus displacement.

mod field;
mod grid;
pub(crate) mod interp;
pub mod ltf;
mod ops;
mod points;

pub use field::{DenseField, Image, TransformField};
pub use grid::Grid;
pub use ops::{
    compose, exp_svf, field_mse, identity_map, max_interior_displacement, mse, sample_field,
    sample_image, warp_image,
};
pub use points::{distance, squared_distance, Points};

/// Default number of squaring steps for [`exp_svf`].
pub const DEFAULT_SVF_STEPS: u32 = 6;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &Grid, seed: u64) -> DenseField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.len() * grid.dim();
        DenseField::new(grid.clone(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Smooth field: a couple of Gaussian bumps, max norm scaled to `amp`.
    fn smooth_field(grid: &Grid, seed: u64, amp: f64) -> DenseField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = grid.dim();
        let center = grid.center();
        let extent = grid.extent();
        let bumps: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                let c = (0..dim)
                    .map(|k| center[k] + rng.random_range(-0.25..0.25) * extent[k])
                    .collect();
                let a = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                (c, a)
            })
            .collect();
        let width = extent.iter().cloned().fold(f64::MAX, f64::min) * 0.25;
        let f = DenseField::from_fn(grid.clone(), |x, v| {
            v.fill(0.0);
            for (c, a) in &bumps {
                let r2 = squared_distance(x, c);
                let w = (-r2 / (2.0 * width * width)).exp();
                for k in 0..dim {
                    v[k] += a[k] * w;
                }
            }
        })
        .unwrap();
        let m = f.max_norm();
        f.scaled(amp / m)
    }

    /// Textbook bilinear interpolation, written independently of `Stencil`.
    fn bilinear_oracle(grid: &Grid, values: &[f64], comps: usize, x: &[f64], j: usize) -> f64 {
        let (ny, nx) = (grid.dims()[0], grid.dims()[1]);
        let fy = ((x[0] - grid.origin()[0]) / grid.spacing()[0]).clamp(0.0, (ny - 1) as f64);
        let fx = ((x[1] - grid.origin()[1]) / grid.spacing()[1]).clamp(0.0, (nx - 1) as f64);
        let y0 = (fy.floor() as usize).min(ny - 2);
        let x0 = (fx.floor() as usize).min(nx - 2);
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let at = |y: usize, x: usize| values[(y * nx + x) * comps + j];
        at(y0, x0) * (1.0 - dy) * (1.0 - dx)
            + at(y0, x0 + 1) * (1.0 - dy) * dx
            + at(y0 + 1, x0) * dy * (1.0 - dx)
            + at(y0 + 1, x0 + 1) * dy * dx
    }

    #[test]
    fn identity_map_is_identity() {
        let g = Grid::uniform(&[8, 8], 1.0).unwrap();
        let id = identity_map(&g);
        assert!(id.displacement().vectors().iter().all(|&v| v == 0.0));
        assert_eq!(id.grid_values(), g.points());
        let pts = Points::from_rows(2, &[[0.3, 6.9], [3.0, 4.0]]).unwrap();
        assert_eq!(id.apply(&pts).unwrap(), pts);
    }

    #[test]
    fn identity_warp_is_exact() {
        let g = Grid::new(vec![9, 7], vec![0.7, 1.3], vec![0.3, -2.1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::new(g.clone(), (0..g.len()).map(|_| rng.random()).collect()).unwrap();
        assert_eq!(warp_image(&img, &identity_map(&g)).unwrap(), img);
    }

    #[test]
    fn identity_composition_is_exact() {
        let g = Grid::new(vec![6, 5], vec![0.7, 1.1], vec![0.2, 0.0]).unwrap();
        let phi = TransformField::from_displacement(random_field(&g, 3));
        let id = identity_map(&g);
        let a = compose(&id, &phi).unwrap();
        let b = compose(&phi, &id).unwrap();
        for (x, y) in a.displacement().vectors().iter().zip(phi.displacement().vectors()) {
            assert!((x - y).abs() <= 1e-12);
        }
        assert_eq!(b, phi);
    }

    #[test]
    fn sampling_is_exact_at_nodes() {
        let g = Grid::uniform(&[5, 5], 1.0).unwrap();
        let f = random_field(&g, 7);
        let p = Points::from_rows(2, &[[2.0, 3.0]]).unwrap();
        assert_eq!(f.sample(&p).unwrap().row(0), f.vector(2 * 5 + 3));
    }

    #[test]
    fn linear_midpoint() {
        let g = Grid::uniform(&[2, 2], 1.0).unwrap();
        let img = Image::new(g, vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        let p = Points::from_rows(2, &[[0.0, 0.5]]).unwrap();
        assert_eq!(img.sample(&p).unwrap(), vec![1.0]);
    }

    #[test]
    fn ramps_are_reproduced() {
        let g = Grid::new(vec![6, 5], vec![1.5, 0.5], vec![1.0, 2.0]).unwrap();
        let img = Image::from_fn(g, |x| 2.0 * x[0] - 3.0 * x[1] + 1.0).unwrap();
        let pts = Points::from_rows(2, &[[2.2, 2.3], [8.4, 3.9], [5.5, 2.01]]).unwrap();
        for (p, v) in pts.rows().zip(img.sample(&pts).unwrap()) {
            assert!((v - (2.0 * p[0] - 3.0 * p[1] + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_sampling_matches_textbook_formula() {
        let g = Grid::uniform(&[5, 5], 1.0).unwrap();
        let f = random_field(&g, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts: Vec<[f64; 2]> = (0..20)
            .map(|_| [rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)])
            .collect();
        let pts = Points::from_rows(2, &pts).unwrap();
        let s = f.sample(&pts).unwrap();
        for (i, p) in pts.rows().enumerate() {
            for j in 0..2 {
                let o = bilinear_oracle(&g, f.vectors(), 2, p, j);
                assert!((s.row(i)[j] - o).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn out_of_domain_is_clamped() {
        let g = Grid::uniform(&[3, 3], 1.0).unwrap();
        let img = Image::from_fn(g, |x| x[0] + 10.0 * x[1]).unwrap();
        let p = Points::from_rows(2, &[[-5.0, 1.0], [1.0, 9.0]]).unwrap();
        assert_eq!(img.sample(&p).unwrap(), vec![10.0, 21.0]);
    }

    #[test]
    fn nan_sample_is_error() {
        let g = Grid::uniform(&[3, 3], 1.0).unwrap();
        let img = Image::zeros(g);
        let p = Points::from_rows(2, &[[f64::NAN, 1.0]]).unwrap();
        assert!(img.sample(&p).is_err());
    }

    #[test]
    fn unit_shift_warp() {
        let g = Grid::uniform(&[6, 6], 2.0).unwrap();
        let img = Image::from_fn(g.clone(), |x| x[0] * x[0] + x[1]).unwrap();
        let shift = DenseField::from_fn(g.clone(), |_, v| {
            v[0] = 2.0;
            v[1] = 0.0;
        })
        .unwrap();
        let w = warp_image(&img, &TransformField::from_displacement(shift)).unwrap();
        for r in 0..5 {
            for c in 0..6 {
                assert_eq!(w.values()[r * 6 + c], img.values()[(r + 1) * 6 + c]);
            }
        }
    }

    #[test]
    fn warp_matches_per_pixel_oracle() {
        let g = Grid::new(vec![12, 10], vec![1.0, 0.8], vec![0.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let img = Image::new(g.clone(), (0..g.len()).map(|_| rng.random()).collect()).unwrap();
        let t = TransformField::from_displacement(smooth_field(&g, 22, 2.0));
        let w = warp_image(&img, &t).unwrap();
        let mut x = [0.0; 2];
        for i in 0..g.len() {
            g.point(i, &mut x);
            let d = t.displacement().vector(i);
            let q = [x[0] + d[0], x[1] + d[1]];
            let o = bilinear_oracle(&g, img.values(), 1, &q, 0);
            assert!((w.values()[i] - o).abs() <= 1e-12);
        }
    }

    #[test]
    fn compose_matches_loop_oracle() {
        let g = Grid::uniform(&[10, 10], 1.0).unwrap();
        let a = TransformField::from_displacement(smooth_field(&g, 30, 1.5));
        let b = TransformField::from_displacement(smooth_field(&g, 31, 1.5));
        let c = compose(&a, &b).unwrap();
        let mut x = [0.0; 2];
        for i in 0..g.len() {
            g.point(i, &mut x);
            let db = b.displacement().vector(i);
            let y = [x[0] + db[0], x[1] + db[1]];
            for j in 0..2 {
                let da = bilinear_oracle(&g, a.displacement().vectors(), 2, &y, j);
                assert!((c.displacement().vector(i)[j] - (db[j] + da)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn translations_add() {
        let g = Grid::uniform(&[10, 10], 1.0).unwrap();
        let tr = |a: f64, b: f64| {
            TransformField::from_displacement(
                DenseField::from_fn(g.clone(), |_, v| {
                    v[0] = a;
                    v[1] = b;
                })
                .unwrap(),
            )
        };
        let c = compose(&tr(1.25, -0.5), &tr(0.5, 2.0)).unwrap();
        for i in 0..g.len() {
            let idx = g.unravel(i);
            if (2..7).contains(&idx[0]) && (2..7).contains(&idx[1]) {
                let v = c.displacement().vector(i);
                assert!((v[0] - 1.75).abs() < 1e-12 && (v[1] - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_velocity_gives_identity() {
        let g = Grid::uniform(&[8, 8], 1.0).unwrap();
        let phi = exp_svf(&DenseField::zeros(g.clone()), DEFAULT_SVF_STEPS).unwrap();
        assert_eq!(phi, identity_map(&g));
    }

    #[test]
    fn constant_velocity_translates() {
        let g = Grid::uniform(&[32, 32], 1.0).unwrap();
        let c = [0.8, -0.6];
        let v = DenseField::from_fn(g.clone(), |_, out| out.copy_from_slice(&c)).unwrap();
        let phi = exp_svf(&v, 6).unwrap();
        for i in 0..g.len() {
            let idx = g.unravel(i);
            if (3..28).contains(&idx[0]) && (3..28).contains(&idx[1]) {
                let d = phi.displacement().vector(i);
                let err = ((d[0] - c[0]).powi(2) + (d[1] - c[1]).powi(2)).sqrt();
                assert!(err <= 1e-6 * 1.0, "err {err}");
            }
        }
    }

    #[test]
    fn exp_svf_rejects_bad_input() {
        let g = Grid::uniform(&[4, 4], 1.0).unwrap();
        assert!(exp_svf(&DenseField::zeros(g), 0).is_err());
    }

    #[test]
    fn mse_cases() {
        let g = Grid::uniform(&[4, 5], 1.0).unwrap();
        let a = Image::from_fn(g.clone(), |x| x[0] * x[1]).unwrap();
        let b = Image::from_fn(g.clone(), |x| x[0] * x[1] + 2.0).unwrap();
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!((mse(&a, &b).unwrap() - 4.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r1 = Image::new(g.clone(), (0..20).map(|_| rng.random()).collect()).unwrap();
        let r2 = Image::new(g.clone(), (0..20).map(|_| rng.random()).collect()).unwrap();
        let mut acc = 0.0;
        for i in 0..20 {
            acc += (r1.values()[i] - r2.values()[i]).powi(2);
        }
        assert!((mse(&r1, &r2).unwrap() - acc / 20.0).abs() <= 1e-12);
        let other = Image::zeros(Grid::uniform(&[5, 4], 1.0).unwrap());
        assert!(mse(&a, &other).is_err());
    }

    #[test]
    fn compose_requires_same_grid() {
        let a = identity_map(&Grid::uniform(&[4, 4], 1.0).unwrap());
        let b = identity_map(&Grid::uniform(&[4, 4], 2.0).unwrap());
        assert!(compose(&a, &b).is_err());
    }

    #[test]
    fn trilinear_is_exact_on_affine_volume() {
        let g = Grid::uniform(&[5, 6, 4], 1.0).unwrap();
        let img = Image::from_fn(g, |x| x[0] - 2.0 * x[1] + 0.5 * x[2]).unwrap();
        let p = Points::from_rows(3, &[[1.3, 2.7, 0.4], [3.9, 4.1, 2.2]]).unwrap();
        for (q, v) in p.rows().zip(img.sample(&p).unwrap()) {
            assert!((v - (q[0] - 2.0 * q[1] + 0.5 * q[2])).abs() < 1e-12);
        }
    }
}
