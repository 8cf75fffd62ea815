//! Every primitive's adjoint against central differences, forward values of
//! the heavier primitives against naive loops, and tape-level properties.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trilandmark::diffengine::{check_gradients, ConvGeom, Tape, Tensor, Var, DEFAULT_FD_EPS};
use trilandmark::fieldcore::Grid;
use trilandmark::Result;

const TOL: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Entries with magnitude in `[lo, hi)` and random sign, away from kinks at 0.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = random(rng, shape, lo, hi);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// `sum(out * r)` for a fixed random `r`, so that every output entry gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

fn worst<F>(f: F, point: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients(f, point, DEFAULT_FD_EPS).unwrap().max_relative_error
}

#[test]
fn scalar_examples() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::scalar(2.0));
    let b = t.leaf(Tensor::scalar(3.0));
    let s = t.add(a, b).unwrap();
    assert_eq!(t.item(s).unwrap(), 5.0);
    let g = t.backward(s).unwrap();
    assert_eq!((g.get(a).unwrap(), g.get(b).unwrap()), (&[1.0][..], &[1.0][..]));

    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(0.0));
    let e = t.exp(x);
    assert_eq!(t.item(e).unwrap(), 1.0);
    assert_eq!(t.backward(e).unwrap().get(x).unwrap(), &[1.0]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.mul(x, x).unwrap();
    assert_eq!(t.backward(y).unwrap().get(x).unwrap(), &[6.0]);
}

#[test]
fn constant_output_has_zero_gradients() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.0, -2.0]));
    let c = t.constant(Tensor::scalar(4.0));
    let y = t.sum(c);
    assert_eq!(t.backward(y).unwrap().wrt(&t, x), vec![0.0, 0.0]);
}

#[test]
fn quadratic_bowl_is_exact() {
    let centre = Tensor::vector(vec![0.3, -1.2, 2.0]);
    let e = worst(
        |t, v| {
            let c = t.constant(centre.clone());
            let d = t.sub(v[0], c)?;
            Ok(t.squared_norm(d))
        },
        &[Tensor::vector(vec![1.0, 0.5, -0.7])],
    );
    assert!(e <= 1e-9, "{e}");
}

#[test]
fn non_finite_function_value_is_error() {
    let r = check_gradients(
        |t, v| {
            let d = t.div(v[0], v[0])?;
            Ok(t.sum(d))
        },
        &[Tensor::vector(vec![0.0])],
        DEFAULT_FD_EPS,
    );
    assert!(r.is_err());
    assert!(check_gradients(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.0).is_err());
}

#[test]
fn shape_mismatch_is_error() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[3, 2]));
    let b = t.leaf(Tensor::zeros(&[3]));
    assert!(t.add(a, b).is_err());
    assert!(t.matmul(a, a).is_err());
    assert!(t.reshape(a, &[4]).is_err());
    assert!(t.gather(a, &[3]).is_err());
}

#[test]
fn matmul_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&mut rng, &[4, 3], -1.0, 1.0), random(&mut rng, &[3, 5], -1.0, 1.0));
    let mut t = Tape::new();
    let (va, vb) = (t.leaf(a.clone()), t.leaf(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    let got = t.value(c).data();
    for i in 0..4 {
        for j in 0..5 {
            let want: f64 = (0..3).map(|p| a.data()[i * 3 + p] * b.data()[p * 5 + j]).sum();
            assert!((got[i * 5 + j] - want).abs() < 1e-14);
        }
    }
}

/// Direct definition of a zero-padded strided convolution over `[C, D, H, W]`.
fn conv_oracle(x: &Tensor, w: &Tensor, bias: &[f64], geom: ConvGeom) -> Vec<f64> {
    let (xs, ws) = (x.shape(), w.shape());
    let (ci, co) = (xs[0], ws[0]);
    let inp = [xs[1], xs[2], xs[3]];
    let ker = [ws[2], ws[3], ws[4]];
    let out: Vec<usize> = (0..3).map(|a| geom.output_len(a, inp[a], ker[a]).unwrap()).collect();
    let mut y = vec![0.0; co * out[0] * out[1] * out[2]];
    for o in 0..co {
        for d in 0..out[0] {
            for h in 0..out[1] {
                for wi in 0..out[2] {
                    let mut acc = bias[o];
                    for c in 0..ci {
                        for kd in 0..ker[0] {
                            for kh in 0..ker[1] {
                                for kw in 0..ker[2] {
                                    let pos = [
                                        (d * geom.stride[0] + kd) as isize - geom.padding[0] as isize,
                                        (h * geom.stride[1] + kh) as isize - geom.padding[1] as isize,
                                        (wi * geom.stride[2] + kw) as isize - geom.padding[2] as isize,
                                    ];
                                    if (0..3).any(|a| pos[a] < 0 || pos[a] >= inp[a] as isize) {
                                        continue;
                                    }
                                    let xi = ((c * inp[0] + pos[0] as usize) * inp[1] + pos[1] as usize) * inp[2]
                                        + pos[2] as usize;
                                    let wj = (((o * ci + c) * ker[0] + kd) * ker[1] + kh) * ker[2] + kw;
                                    acc += x.data()[xi] * w.data()[wj];
                                }
                            }
                        }
                    }
                    y[((o * out[0] + d) * out[1] + h) * out[2] + wi] = acc;
                }
            }
        }
    }
    y
}

fn conv_cases() -> Vec<([usize; 4], [usize; 5], ConvGeom)> {
    vec![
        // 2-D, stride 1, same padding.
        ([2, 1, 6, 5], [3, 2, 1, 3, 3], ConvGeom::new([1, 1, 1], [0, 1, 1])),
        // 2-D, stride 2.
        ([1, 1, 7, 6], [2, 1, 1, 3, 3], ConvGeom::new([1, 2, 2], [0, 1, 1])),
        // 3-D with unequal strides.
        ([2, 4, 5, 4], [2, 2, 3, 3, 2], ConvGeom::new([2, 1, 2], [1, 1, 0])),
    ]
}

#[test]
fn conv_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (xs, ws, geom) in conv_cases() {
        let x = random(&mut rng, &xs, -1.0, 1.0);
        let w = random(&mut rng, &ws, -1.0, 1.0);
        let b = random(&mut rng, &[ws[0]], -1.0, 1.0);
        let mut t = Tape::new();
        let (vx, vw, vb) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv(vx, vw, Some(vb), geom).unwrap();
        let want = conv_oracle(&x, &w, b.data(), geom);
        assert_eq!(t.value(y).len(), want.len());
        for (g, w) in t.value(y).data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-13, "{g} vs {w}");
        }
    }
}

#[test]
fn conv_adjoint_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (i, (xs, ws, geom)) in conv_cases().into_iter().enumerate() {
        let point = [
            random(&mut rng, &xs, -1.0, 1.0),
            random(&mut rng, &ws, -1.0, 1.0),
            random(&mut rng, &[ws[0]], -1.0, 1.0),
        ];
        let e = worst(
            |t, v| {
                let y = t.conv(v[0], v[1], Some(v[2]), geom)?;
                project(t, y, i as u64)
            },
            &point,
        );
        assert!(e <= TOL, "case {i}: {e}");
    }
}

/// Coordinates at least `margin` cells from every cell face, inside the grid.
fn off_face_coords(rng: &mut ChaCha8Rng, grid: &Grid, m: usize, margin: f64) -> Tensor {
    let dim = grid.dim();
    let mut data = Vec::with_capacity(m * dim);
    for _ in 0..m {
        for a in 0..dim {
            let cell = rng.random_range(0..grid.dims()[a] - 1) as f64;
            let frac = rng.random_range(margin..1.0 - margin);
            data.push(grid.origin()[a] + (cell + frac) * grid.spacing()[a]);
        }
    }
    Tensor::new(vec![m, dim], data).unwrap()
}

#[test]
fn sample_adjoint_matches_finite_differences_in_values_and_coordinates() {
    let grids = [
        Grid::new(vec![5, 6], vec![1.5, 2.0], vec![-1.0, 3.0]).unwrap(),
        Grid::new(vec![4, 3, 5], vec![1.0, 0.5, 2.0], vec![0.0, 0.0, 1.0]).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (i, grid) in grids.into_iter().enumerate() {
        let grid = Arc::new(grid);
        let comps = 2;
        let values = random(&mut rng, &[grid.len(), comps], -1.0, 1.0);
        // The FD step is far below 1e-3 cells, so no probe crosses a face.
        let coords = off_face_coords(&mut rng, &grid, 9, 1e-3);
        let e = worst(
            |t, v| {
                let y = t.sample(v[0], v[1], &grid)?;
                project(t, y, i as u64)
            },
            &[values, coords],
        );
        assert!(e <= TOL, "grid {i}: {e}");
    }
}

#[test]
fn sample_coordinate_gradient_crosses_cell_boundaries() {
    // Points either side of an interior face lie in different cells and see
    // different slopes; both are finite-difference exact.
    let grid = Arc::new(Grid::uniform(&[4, 4], 1.0).unwrap());
    let values = Tensor::new(vec![16, 1], (0..16).map(|i| ((i * i) % 7) as f64).collect()).unwrap();
    for x in [0.999, 1.001, 1.999, 2.001] {
        let coords = Tensor::new(vec![1, 2], vec![1.5, x]).unwrap();
        let e = worst(
            |t, v| {
                let y = t.sample(v[0], v[1], &grid)?;
                Ok(t.sum(y))
            },
            &[values.clone(), coords],
        );
        assert!(e <= TOL, "x = {x}: {e}");
    }
}

#[test]
fn gather_concat_reshape_transpose_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = [random(&mut rng, &[4, 3], -1.0, 1.0), random(&mut rng, &[2, 3], -1.0, 1.0)];
    let e = worst(
        |t, v| {
            let g = t.gather(v[0], &[3, 0, 3, 1])?;
            let c = t.concat(&[g, v[1]])?;
            let r = t.reshape(c, &[3, 6])?;
            let tr = t.transpose(r)?;
            project(t, tr, 5)
        },
        &point,
    );
    assert!(e <= TOL, "{e}");
}

#[test]
fn elementwise_broadcast_and_matmul_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let point = [
        random(&mut rng, &[3, 4], -1.0, 1.0),
        random(&mut rng, &[4], 0.5, 2.0),
        random(&mut rng, &[4, 2], -1.0, 1.0),
    ];
    type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
    let cases: [(&str, Build); 8] = [
        ("add", |t, v| t.add(v[0], v[1])),
        ("sub", |t, v| t.sub(v[1], v[0])),
        ("mul", |t, v| t.mul(v[0], v[1])),
        ("div", |t, v| t.div(v[0], v[1])),
        ("neg", |t, v| Ok(t.neg(v[0]))),
        ("scale", |t, v| Ok(t.scale(v[0], -2.5))),
        ("matmul", |t, v| t.matmul(v[0], v[2])),
        ("tanh", |t, v| Ok(t.tanh(v[0]))),
    ];
    for (k, (name, build)) in cases.into_iter().enumerate() {
        let e = worst(
            |t, v| {
                let y = build(t, v)?;
                project(t, y, k as u64)
            },
            &point,
        );
        assert!(e <= TOL, "{name}: {e}");
    }
}

#[test]
fn unary_and_reduction_adjoints() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Entries at least 0.05 from zero keep relu's kink out of reach.
    let point = [away_from_zero(&mut rng, &[5, 2], 0.05, 1.5)];
    type Build = fn(&mut Tape, Var) -> Var;
    let cases: [(&str, Build); 6] = [
        ("exp", |t, x| t.exp(x)),
        ("relu", |t, x| t.relu(x)),
        ("tanh", |t, x| t.tanh(x)),
        ("sum", |t, x| t.sum(x)),
        ("mean", |t, x| t.mean(x)),
        ("squared_norm", |t, x| t.squared_norm(x)),
    ];
    for (k, (name, build)) in cases.into_iter().enumerate() {
        let e = worst(
            |t, v| {
                let y = build(t, v[0]);
                // A second nonlinearity so reductions see a non-constant
                // upstream gradient; the scale keeps tanh off its plateau.
                let y = t.scale(y, 0.2);
                let y = t.tanh(y);
                project(t, y, k as u64)
            },
            &point,
        );
        assert!(e <= TOL, "{name}: {e}");
    }
}

#[test]
fn nadaraya_watson_adjoint() {
    let grid = Arc::new(Grid::new(vec![6, 7], vec![1.0, 1.5], vec![0.0, -2.0]).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let centers = off_face_coords(&mut rng, &grid, 4, 0.1);
    let values = random(&mut rng, &[4, 2], -1.0, 1.0);
    for cutoff in [None, Some(4.0)] {
        let e = worst(
            |t, v| {
                let y = t.nadaraya_watson(v[0], v[1], &grid, 2.0, 1e-8, cutoff)?;
                project(t, y, 8)
            },
            &[centers.clone(), values.clone()],
        );
        assert!(e <= TOL, "cutoff {cutoff:?}: {e}");
    }
}

#[test]
fn paths_accumulate_by_sum() {
    // y = x*x + 3x + x: dy/dx = 2x + 4.
    let mut t = Tape::new();
    let x = t.leaf(Tensor::vector(vec![1.5, -2.0]));
    let sq = t.mul(x, x).unwrap();
    let lin = t.scale(x, 3.0);
    let a = t.add(sq, lin).unwrap();
    let a = t.add(a, x).unwrap();
    let y = t.sum(a);
    assert_eq!(t.backward(y).unwrap().wrt(&t, x), vec![7.0, 0.0]);
}

/// A small random graph over one `[3, 3]` leaf; `pick` selects the ops.
fn random_graph(t: &mut Tape, x: Var, pick: &[u8]) -> Var {
    let mut cur = x;
    for &p in pick {
        cur = match p % 5 {
            0 => t.tanh(cur),
            1 => {
                let s = t.scale(cur, 0.7);
                t.add(s, x).unwrap()
            }
            2 => t.mul(cur, x).unwrap(),
            3 => t.matmul(cur, x).unwrap(),
            _ => {
                let e = t.scale(cur, 0.3);
                t.exp(e)
            }
        };
    }
    t.mean(cur)
}

fn grad_of(pick: &[u8], x0: &Tensor) -> Vec<f64> {
    let mut t = Tape::new();
    let x = t.leaf(x0.clone());
    let y = random_graph(&mut t, x, pick);
    t.backward(y).unwrap().wrt(&t, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gradient_of_a_sum_is_the_sum_of_gradients(
        p in proptest::collection::vec(any::<u8>(), 1..5),
        q in proptest::collection::vec(any::<u8>(), 1..5),
        data in proptest::collection::vec(-1.0f64..1.0, 9),
    ) {
        let x0 = Tensor::new(vec![3, 3], data).unwrap();
        let mut t = Tape::new();
        let x = t.leaf(x0.clone());
        let f = random_graph(&mut t, x, &p);
        let g = random_graph(&mut t, x, &q);
        let s = t.add(f, g).unwrap();
        let joint = t.backward(s).unwrap().wrt(&t, x);
        let (gp, gq) = (grad_of(&p, &x0), grad_of(&q, &x0));
        for i in 0..9 {
            let want = gp[i] + gq[i];
            prop_assert!((joint[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn identical_tapes_give_bit_identical_gradients(
        p in proptest::collection::vec(any::<u8>(), 1..6),
        data in proptest::collection::vec(-1.0f64..1.0, 9),
    ) {
        let x0 = Tensor::new(vec![3, 3], data).unwrap();
        let a = grad_of(&p, &x0);
        let b = grad_of(&p, &x0);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    /// Entries are bounded away from zero: at `x = 0` a product chain has a
    /// zero gradient but an `eps^2` central-difference residual, which the
    /// relative error would report as a mismatch.
    #[test]
    fn random_graph_gradients_match_finite_differences(
        p in proptest::collection::vec(any::<u8>(), 1..5),
        mag in proptest::collection::vec(0.2f64..1.0, 9),
        sign in proptest::collection::vec(any::<bool>(), 9),
    ) {
        let data = mag.iter().zip(&sign).map(|(m, s)| if *s { *m } else { -*m }).collect();
        let x0 = Tensor::new(vec![3, 3], data).unwrap();
        let r = check_gradients(|t, v| Ok(random_graph(t, v[0], &p)), &[x0], DEFAULT_FD_EPS).unwrap();
        prop_assert!(r.max_relative_error <= TOL, "{}", r.max_relative_error);
        prop_assert!(r.per_parameter.iter().all(|e| *e >= 0.0));
    }
}
