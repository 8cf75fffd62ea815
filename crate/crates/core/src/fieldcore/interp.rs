use super::Grid;

/// Corner indices and weights of a multilinear interpolation cell.
///
/// Positions outside the lattice are clamped to the boundary; along a
/// clamped axis the coordinate derivative is zero.
#[derive(Clone, Debug)]
pub(crate) struct Stencil {
    pub corners: usize,
    pub index: [usize; 8],
    pub weight: [f64; 8],
    /// d weight / d world coordinate, per axis.
    pub dweight: [[f64; 8]; 3],
}

impl Stencil {
    /// Stencil for a continuous index position `u` (one entry per axis).
    pub fn from_index(grid: &Grid, u: &[f64]) -> Self {
        let dim = grid.dim();
        let dims = grid.dims();
        let spacing = grid.spacing();
        let mut base = [0usize; 3];
        let mut t = [0.0f64; 3];
        let mut live = [true; 3];
        for k in 0..dim {
            let hi = (dims[k] - 1) as f64;
            let mut uk = u[k];
            if uk < 0.0 {
                uk = 0.0;
                live[k] = false;
            } else if uk > hi {
                uk = hi;
                live[k] = false;
            }
            let i = (uk.floor() as usize).min(dims[k] - 2);
            base[k] = i;
            t[k] = uk - i as f64;
        }
        let strides = grid.strides();
        let corners = 1usize << dim;
        let mut s = Stencil {
            corners,
            index: [0; 8],
            weight: [0.0; 8],
            dweight: [[0.0; 8]; 3],
        };
        for c in 0..corners {
            let mut flat = 0;
            let mut w = 1.0;
            for k in 0..dim {
                let bit = (c >> (dim - 1 - k)) & 1;
                flat += (base[k] + bit) * strides[k];
                w *= if bit == 1 { t[k] } else { 1.0 - t[k] };
            }
            s.index[c] = flat;
            s.weight[c] = w;
            for a in 0..dim {
                if !live[a] {
                    continue;
                }
                let mut dw = 1.0;
                for k in 0..dim {
                    let bit = (c >> (dim - 1 - k)) & 1;
                    dw *= if k == a {
                        if bit == 1 {
                            1.0
                        } else {
                            -1.0
                        }
                    } else if bit == 1 {
                        t[k]
                    } else {
                        1.0 - t[k]
                    };
                }
                s.dweight[a][c] = dw / spacing[a];
            }
        }
        s
    }

    /// Stencil for a world-coordinate position.
    pub fn from_world(grid: &Grid, x: &[f64]) -> Self {
        let mut u = [0.0; 3];
        for k in 0..grid.dim() {
            u[k] = grid.to_index(k, x[k]);
        }
        Self::from_index(grid, &u[..grid.dim()])
    }

    /// Interpolate `comps`-component values stored point-major.
    #[inline]
    pub fn gather(&self, values: &[f64], comps: usize, out: &mut [f64]) {
        out[..comps].fill(0.0);
        for c in 0..self.corners {
            let w = self.weight[c];
            let base = self.index[c] * comps;
            for j in 0..comps {
                out[j] += w * values[base + j];
            }
        }
    }
}
