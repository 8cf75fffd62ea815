//! Forward and adjoint kernels for the heavier primitives.

use crate::fieldcore::interp::Stencil;
use crate::fieldcore::Grid;

/// Geometry of a zero-padded strided convolution over `[C, D, H, W]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Self { stride, padding }
    }

    /// Output extent along one axis.
    pub fn output_len(&self, axis: usize, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.padding[axis];
        (padded >= kernel && self.stride[axis] >= 1)
            .then(|| (padded - kernel) / self.stride[axis] + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub ci: usize,
    pub co: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub output: [usize; 3],
    pub geom: ConvGeom,
}

impl ConvDims {
    /// Output positions `[lo, hi)` along `axis` whose tap `k` lands inside
    /// the input.
    #[inline]
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.geom.stride[axis];
        let p = self.geom.padding[axis];
        let n = self.input[axis];
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        if n - 1 + p < k {
            return (0, 0);
        }
        let hi = ((n - 1 + p - k) / s + 1).min(self.output[axis]);
        (lo.min(hi), hi)
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visit every (output offset, input offset) pair for one channel pair
    /// and tap. `f(out_row_start, in_row_start, count)`; input positions
    /// advance by the x stride.
    #[inline]
    fn for_each_row(&self, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (z0, z1) = self.valid(0, kz);
        let (y0, y1) = self.valid(1, ky);
        let (x0, x1) = self.valid(2, kx);
        if x0 >= x1 {
            return;
        }
        let [sd, sh, sw] = self.geom.stride;
        let [pd, ph, pw] = self.geom.padding;
        let [_, ih, iw] = self.input;
        let [_, oh, ow] = self.output;
        for oz in z0..z1 {
            let iz = oz * sd + kz - pd;
            for oy in y0..y1 {
                let iy = oy * sh + ky - ph;
                let out_row = (oz * oh + oy) * ow;
                let in_row = (iz * ih + iy) * iw;
                f(out_row + x0, in_row + x0 * sw + kx - pw, x1 - x0);
            }
        }
    }
}

pub(crate) fn conv_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, cd: &ConvDims) -> Vec<f64> {
    let (ip, op, taps) = (cd.in_plane(), cd.out_plane(), cd.taps());
    let [_, kh, kw] = cd.kernel;
    let sw = cd.geom.stride[2];
    let mut out = vec![0.0; cd.co * op];
    for co in 0..cd.co {
        let o = &mut out[co * op..(co + 1) * op];
        if let Some(b) = bias {
            o.fill(b[co]);
        }
        for ci in 0..cd.ci {
            let inp = &input[ci * ip..(ci + 1) * ip];
            let wbase = (co * cd.ci + ci) * taps;
            for t in 0..taps {
                let w = weight[wbase + t];
                if w == 0.0 {
                    continue;
                }
                let (kz, ky, kx) = (t / (kh * kw), (t / kw) % kh, t % kw);
                cd.for_each_row(kz, ky, kx, |orow, irow, n| {
                    for j in 0..n {
                        o[orow + j] += w * inp[irow + j * sw];
                    }
                });
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv_backward(
    input: &[f64],
    weight: &[f64],
    g: &[f64],
    cd: &ConvDims,
    want: [bool; 3],
) -> ConvGrads {
    let (ip, op, taps) = (cd.in_plane(), cd.out_plane(), cd.taps());
    let [_, kh, kw] = cd.kernel;
    let sw = cd.geom.stride[2];
    let mut gi = want[0].then(|| vec![0.0; cd.ci * ip]);
    let mut gw = want[1].then(|| vec![0.0; weight.len()]);
    let gb = want[2].then(|| {
        (0..cd.co)
            .map(|co| g[co * op..(co + 1) * op].iter().sum())
            .collect()
    });
    for co in 0..cd.co {
        let go = &g[co * op..(co + 1) * op];
        for ci in 0..cd.ci {
            let inp = &input[ci * ip..(ci + 1) * ip];
            let wbase = (co * cd.ci + ci) * taps;
            for t in 0..taps {
                let (kz, ky, kx) = (t / (kh * kw), (t / kw) % kh, t % kw);
                let w = weight[wbase + t];
                let mut acc = 0.0;
                let gi_c = gi.as_mut().map(|v| &mut v[ci * ip..(ci + 1) * ip]);
                match gi_c {
                    Some(gic) => cd.for_each_row(kz, ky, kx, |orow, irow, n| {
                        for j in 0..n {
                            let gv = go[orow + j];
                            acc += gv * inp[irow + j * sw];
                            gic[irow + j * sw] += w * gv;
                        }
                    }),
                    None => cd.for_each_row(kz, ky, kx, |orow, irow, n| {
                        for j in 0..n {
                            acc += go[orow + j] * inp[irow + j * sw];
                        }
                    }),
                }
                if let Some(gw) = gw.as_mut() {
                    gw[wbase + t] += acc;
                }
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Multilinear sampling of `comps`-component node values at world coords.
pub(crate) fn sample_forward(grid: &Grid, values: &[f64], comps: usize, coords: &[f64]) -> Vec<f64> {
    let dim = grid.dim();
    let m = coords.len() / dim;
    let mut out = vec![0.0; m * comps];
    for (p, o) in coords.chunks_exact(dim).zip(out.chunks_exact_mut(comps)) {
        Stencil::from_world(grid, p).gather(values, comps, o);
    }
    out
}

pub(crate) fn sample_backward(
    grid: &Grid,
    values: &[f64],
    comps: usize,
    coords: &[f64],
    g: &[f64],
    want_values: bool,
    want_coords: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let dim = grid.dim();
    let mut gv = want_values.then(|| vec![0.0; values.len()]);
    let mut gc = want_coords.then(|| vec![0.0; coords.len()]);
    for (m, p) in coords.chunks_exact(dim).enumerate() {
        let s = Stencil::from_world(grid, p);
        let go = &g[m * comps..(m + 1) * comps];
        for c in 0..s.corners {
            let base = s.index[c] * comps;
            if let Some(gv) = gv.as_mut() {
                for j in 0..comps {
                    gv[base + j] += s.weight[c] * go[j];
                }
            }
            if let Some(gc) = gc.as_mut() {
                let dot: f64 = (0..comps).map(|j| values[base + j] * go[j]).sum();
                for a in 0..dim {
                    gc[m * dim + a] += s.dweight[a][c] * dot;
                }
            }
        }
    }
    (gv, gc)
}

/// Per-landmark boxes of grid nodes with their per-axis Gaussian factors.
/// Without a cutoff every box spans the whole grid; with one, nodes farther
/// than `cutoff` from the centre along any axis are dropped.
struct NwBoxes {
    /// `start[k][i]` is the first node index of landmark `i` on axis `k`.
    start: Vec<Vec<usize>>,
    /// Factors `exp(-(x_k - p_k)^2 / (2 sigma^2))` for the nodes of the box.
    factors: Vec<Vec<Vec<f64>>>,
}

impl NwBoxes {
    fn new(grid: &Grid, centers: &[f64], sigma: f64, cutoff: Option<f64>) -> Self {
        let dim = grid.dim();
        let n = centers.len() / dim;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut start = vec![vec![0; n]; dim];
        let mut factors = vec![Vec::with_capacity(n); dim];
        for k in 0..dim {
            let (len, o, h) = (grid.dims()[k], grid.origin()[k], grid.spacing()[k]);
            for i in 0..n {
                let p = centers[i * dim + k];
                let (lo, hi) = match cutoff {
                    None => (0, len),
                    Some(r) => {
                        let lo = ((p - r - o) / h).ceil().max(0.0);
                        let hi = ((p + r - o) / h).floor() + 1.0;
                        let hi = hi.min(len as f64);
                        if hi <= lo {
                            (0, 0)
                        } else {
                            (lo as usize, hi as usize)
                        }
                    }
                };
                start[k][i] = lo;
                factors[k].push(
                    (lo..hi)
                        .map(|node| {
                            let d = o + node as f64 * h - p;
                            (-d * d * inv).exp()
                        })
                        .collect(),
                );
            }
        }
        Self { start, factors }
    }

    /// Calls `f(flat_node, weight)` for every node in the box of landmark
    /// `i`, in increasing flat order.
    #[inline]
    fn for_each(&self, grid: &Grid, i: usize, mut f: impl FnMut(usize, f64)) {
        let dims = grid.dims();
        if dims.len() == 2 {
            let (f0, f1) = (&self.factors[0][i], &self.factors[1][i]);
            let (s0, s1) = (self.start[0][i], self.start[1][i]);
            for (a, &w0) in f0.iter().enumerate() {
                let row = (s0 + a) * dims[1] + s1;
                for (b, &w1) in f1.iter().enumerate() {
                    f(row + b, w0 * w1);
                }
            }
        } else {
            let (f0, f1, f2) = (&self.factors[0][i], &self.factors[1][i], &self.factors[2][i]);
            let (s0, s1, s2) = (self.start[0][i], self.start[1][i], self.start[2][i]);
            for (a, &w0) in f0.iter().enumerate() {
                for (b, &w1) in f1.iter().enumerate() {
                    let row = ((s0 + a) * dims[1] + s1 + b) * dims[2] + s2;
                    let w01 = w0 * w1;
                    for (c, &w2) in f2.iter().enumerate() {
                        f(row + c, w01 * w2);
                    }
                }
            }
        }
    }

    /// Kernel-weight sum at every node.
    fn sums(&self, grid: &Grid, n: usize) -> Vec<f64> {
        let mut s = vec![0.0; grid.len()];
        for i in 0..n {
            self.for_each(grid, i, |q, w| s[q] += w);
        }
        s
    }
}

/// Kernel-weighted average of `values` (one `dim`-vector per center) at
/// every grid point; the weight sum is floored at `eps`. Contributions are
/// accumulated in landmark order at every node.
pub(crate) fn nw_forward(
    grid: &Grid,
    centers: &[f64],
    values: &[f64],
    sigma: f64,
    eps: f64,
    cutoff: Option<f64>,
) -> Vec<f64> {
    let dim = grid.dim();
    let n = centers.len() / dim;
    let boxes = NwBoxes::new(grid, centers, sigma, cutoff);
    let mut s = vec![0.0; grid.len()];
    let mut out = vec![0.0; grid.len() * dim];
    for i in 0..n {
        let v = &values[i * dim..(i + 1) * dim];
        boxes.for_each(grid, i, |q, w| {
            s[q] += w;
            for k in 0..dim {
                out[q * dim + k] += w * v[k];
            }
        });
    }
    for (q, &sq) in s.iter().enumerate() {
        let denom = sq.max(eps);
        for k in 0..dim {
            out[q * dim + k] /= denom;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn nw_backward(
    grid: &Grid,
    centers: &[f64],
    values: &[f64],
    sigma: f64,
    eps: f64,
    cutoff: Option<f64>,
    out: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let dim = grid.dim();
    let n = centers.len() / dim;
    let boxes = NwBoxes::new(grid, centers, sigma, cutoff);
    let s = boxes.sums(grid, n);
    let inv_var = 1.0 / (sigma * sigma);
    // Per node: 1/denominator and the output-weighted adjoint.
    let mut inv_denom = vec![0.0; grid.len()];
    let mut g_out = vec![0.0; grid.len()];
    for q in 0..grid.len() {
        let denom = s[q].max(eps);
        inv_denom[q] = 1.0 / denom;
        if s[q] > eps {
            g_out[q] = (0..dim).map(|k| g[q * dim + k] * out[q * dim + k]).sum::<f64>() / denom;
        }
    }
    let points = grid.points();
    let xs = points.as_flat();
    let mut gc = vec![0.0; centers.len()];
    let mut gv = vec![0.0; values.len()];
    for i in 0..n {
        let v = &values[i * dim..(i + 1) * dim];
        let p = &centers[i * dim..(i + 1) * dim];
        let mut acc_v = [0.0f64; 3];
        let mut acc_c = [0.0f64; 3];
        boxes.for_each(grid, i, |q, wi| {
            if wi == 0.0 {
                return;
            }
            let go = &g[q * dim..(q + 1) * dim];
            let denom = s[q].max(eps);
            let mut gdot = 0.0;
            for k in 0..dim {
                acc_v[k] += wi / denom * go[k];
                gdot += go[k] * v[k];
            }
            let a = (gdot * inv_denom[q] - g_out[q]) * wi * inv_var;
            for k in 0..dim {
                acc_c[k] += a * (xs[q * dim + k] - p[k]);
            }
        });
        gv[i * dim..(i + 1) * dim].copy_from_slice(&acc_v[..dim]);
        gc[i * dim..(i + 1) * dim].copy_from_slice(&acc_c[..dim]);
    }
    (gc, gv)
}
