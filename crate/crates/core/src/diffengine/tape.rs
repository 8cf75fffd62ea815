use std::sync::Arc;

use super::kernels::{self, ConvDims, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::fieldcore::Grid;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SquaredNorm(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    Sample {
        field: Var,
        coords: Var,
        grid: Arc<Grid>,
    },
    Gather {
        input: Var,
        rows: Vec<usize>,
    },
    Concat(Vec<Var>),
    Nadaraya {
        centers: Var,
        values: Var,
        grid: Arc<Grid>,
        sigma: f64,
        eps: f64,
        cutoff: Option<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation supporting reverse-mode gradients.
///
/// Nodes are appended in evaluation order, so the tape is a topological
/// order by construction and the backward sweep walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every node that requires
/// them. Leaves off every path to the output get zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a vector, zeros when `v` did not require gradients.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
    }
}

/// Broadcast relation between two operand shapes.
///
/// The smaller operand must be a scalar or match the trailing dimensions
/// of the larger one.
fn broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let (la, lb): (usize, usize) = (a.iter().product(), b.iter().product());
    if a == b {
        return Some(a.to_vec());
    }
    let suffix = |big: &[usize], small: &[usize]| {
        small.iter().product::<usize>() == 1
            || (small.len() <= big.len() && big[big.len() - small.len()..] == *small)
    };
    if la >= lb && suffix(a, b) {
        Some(a.to_vec())
    } else if lb > la && suffix(b, a) {
        Some(b.to_vec())
    } else {
        None
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> Result<f64> {
        self.value(v)
            .item()
            .ok_or_else(|| Error::Shape(format!("node has shape {:?}, not scalar", self.value(v).shape())))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::Shape(format!(
                "cannot broadcast {:?} with {:?}",
                ta.shape(),
                tb.shape()
            ))
        })?;
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (la, lb) = (da.len(), db.len());
        let data = (0..n).map(|i| f(da[i % la], db[i % lb])).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn reduce(&mut self, a: Var, v: f64, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(Tensor::scalar(v), op, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        self.reduce(a, v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = t.data().iter().sum::<f64>() / t.len() as f64;
        self.reduce(a, v, Op::Mean(a))
    }

    /// Sum of squares of all entries.
    pub fn squared_norm(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().map(|x| x * x).sum();
        self.reduce(a, v, Op::SquaredNorm(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for p in 0..k {
                let x = da[i * k + p];
                for j in 0..n {
                    out[i * n + j] += x * db[p * n + j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose of {s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Zero-padded strided convolution.
    ///
    /// `input` is `[C_in, D, H, W]`, `weight` is `[C_out, C_in, kD, kH, kW]`
    /// and `bias` is `[C_out]`. 2-D data uses `D = kD = 1`.
    pub fn conv(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (ti, tw) = (self.value(input), self.value(weight));
        let (si, sw) = (ti.shape(), tw.shape());
        if si.len() != 4 || sw.len() != 5 || si[0] != sw[1] {
            return Err(Error::Shape(format!("conv input {si:?} with weight {sw:?}")));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [sw[0]] {
                return Err(Error::Shape(format!(
                    "conv bias {:?} for {} output channels",
                    self.value(b).shape(),
                    sw[0]
                )));
            }
        }
        if geom.stride.contains(&0) {
            return Err(Error::Shape("conv stride must be at least 1".into()));
        }
        let mut output = [0usize; 3];
        for a in 0..3 {
            output[a] = geom
                .output_len(a, si[a + 1], sw[a + 2])
                .ok_or_else(|| Error::Shape(format!("kernel {sw:?} larger than padded input {si:?}")))?;
        }
        let dims = ConvDims {
            ci: si[0],
            co: sw[0],
            input: [si[1], si[2], si[3]],
            kernel: [sw[2], sw[3], sw[4]],
            output,
            geom,
        };
        let data = kernels::conv_forward(
            ti.data(),
            tw.data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let shape = vec![dims.co, output[0], output[1], output[2]];
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Conv {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// Multilinear sample of node values `[n_nodes, comps]` on `grid` at
    /// world coordinates `[m, dim]`, giving `[m, comps]`. Differentiable in
    /// both the values and the coordinates; clamped axes have zero
    /// coordinate gradient.
    pub fn sample(&mut self, field: Var, coords: Var, grid: &Arc<Grid>) -> Result<Var> {
        let (tf, tc) = (self.value(field), self.value(coords));
        let (sf, sc) = (tf.shape(), tc.shape());
        if sf.len() != 2 || sf[0] != grid.len() {
            return Err(Error::Shape(format!(
                "sampled values {sf:?} do not match a grid of {} nodes",
                grid.len()
            )));
        }
        if sc.len() != 2 || sc[1] != grid.dim() {
            return Err(Error::Shape(format!("coordinates {sc:?} for a {}-D grid", grid.dim())));
        }
        if !tc.is_finite() {
            return Err(Error::NonFinite("sample coordinates".into()));
        }
        let comps = sf[1];
        let data = kernels::sample_forward(grid, tf.data(), comps, tc.data());
        let rg = self.rg(field) || self.rg(coords);
        let m = sc[0];
        Ok(self.push(
            Tensor::new(vec![m, comps], data)?,
            Op::Sample {
                field,
                coords,
                grid: Arc::clone(grid),
            },
            rg,
        ))
    }

    /// Rows of `input` along its first axis.
    pub fn gather(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::Shape("gather from a scalar".into()));
        }
        let row: usize = s[1..].iter().product();
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::Shape(format!("row {bad} out of range for {s:?}")));
        }
        let d = t.data();
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            data.extend_from_slice(&d[r * row..(r + 1) * row]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Gather {
                input,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape().is_empty() || t.shape()[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat of {:?} with trailing shape {tail:?}",
                    t.shape()
                )));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Nadaraya-Watson average of per-center vectors at every node of
    /// `grid` with a Gaussian kernel of bandwidth `sigma`.
    ///
    /// `centers` and `values` are `[n, dim]`; the result is `[grid.len(), dim]`.
    /// The kernel-weight sum is floored at `eps`. With `cutoff`, nodes
    /// farther than that many mm from a center along any axis get no weight
    /// from it.
    pub fn nadaraya_watson(
        &mut self,
        centers: Var,
        values: Var,
        grid: &Arc<Grid>,
        sigma: f64,
        eps: f64,
        cutoff: Option<f64>,
    ) -> Result<Var> {
        let (tc, tv) = (self.value(centers), self.value(values));
        let dim = grid.dim();
        if tc.shape().len() != 2 || tc.shape()[1] != dim || tc.shape() != tv.shape() {
            return Err(Error::Shape(format!(
                "kernel centers {:?} and values {:?} on a {dim}-D grid",
                tc.shape(),
                tv.shape()
            )));
        }
        if tc.shape()[0] == 0 {
            return Err(Error::InvalidInput("no landmarks to interpolate from".into()));
        }
        if !(sigma > 0.0 && eps > 0.0 && cutoff.is_none_or(|r| r > 0.0)) {
            return Err(Error::InvalidInput(format!(
                "kernel bandwidth {sigma}, floor {eps} and cutoff {cutoff:?} must be positive"
            )));
        }
        if !tc.is_finite() || !tv.is_finite() {
            return Err(Error::NonFinite("kernel centers or values".into()));
        }
        let data = kernels::nw_forward(grid, tc.data(), tv.data(), sigma, eps, cutoff);
        let rg = self.rg(centers) || self.rg(values);
        Ok(self.push(
            Tensor::new(vec![grid.len(), dim], data)?,
            Op::Nadaraya {
                centers,
                values,
                grid: Arc::clone(grid),
                sigma,
                eps,
                cutoff,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(output) {
            grads[output.0] = Some(vec![1.0]);
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let mut acc = |v: Var, contrib: &dyn Fn(&mut [f64])| {
            if !self.rg(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                let (a, b) = (*a, *b);
                let (da, db) = (val(a), val(b));
                let (la, lb) = (da.len(), db.len());
                let op = &node.op;
                acc(a, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % la] += gi
                            * match op {
                                Op::Add(..) | Op::Sub(..) => 1.0,
                                Op::Mul(..) => db[i % lb],
                                _ => 1.0 / db[i % lb],
                            };
                    }
                });
                acc(b, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % lb] += gi
                            * match op {
                                Op::Add(..) => 1.0,
                                Op::Sub(..) => -1.0,
                                Op::Mul(..) => da[i % la],
                                _ => -da[i % la] / (db[i % lb] * db[i % lb]),
                            };
                    }
                });
            }
            Op::Neg(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s -= gi)),
            Op::Scale(a, c) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += c * gi)),
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * y[i];
                    }
                })
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                })
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Sum(a) => acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0])),
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                acc(*a, &|s| s.iter_mut().for_each(|s| *s += g[0] / n))
            }
            Op::SquaredNorm(a) => {
                let x = val(*a);
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += 2.0 * x[i] * g[0];
                    }
                })
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (val(*a), val(*b));
                acc(*a, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut t = 0.0;
                            for j in 0..n {
                                t += g[i * n + j] * db[p * n + j];
                            }
                            s[i * k + p] += t;
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = da[i * k + p];
                            for j in 0..n {
                                s[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let sh = self.nodes[a.0].value.shape();
                let (m, n) = (sh[0], sh[1]);
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &|s| s.iter_mut().zip(g).for_each(|(s, gi)| *s += gi)),
            Op::Conv {
                input,
                weight,
                bias,
                dims,
            } => {
                let want = [
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                ];
                let cg = kernels::conv_backward(val(*input), val(*weight), g, dims, want);
                if let Some(gi) = cg.input {
                    acc(*input, &|s| s.iter_mut().zip(&gi).for_each(|(s, v)| *s += v));
                }
                if let Some(gw) = cg.weight {
                    acc(*weight, &|s| s.iter_mut().zip(&gw).for_each(|(s, v)| *s += v));
                }
                if let (Some(b), Some(gb)) = (bias, cg.bias) {
                    acc(*b, &|s| s.iter_mut().zip(&gb).for_each(|(s, v)| *s += v));
                }
            }
            Op::Sample {
                field,
                coords,
                grid,
            } => {
                let comps = self.nodes[field.0].value.shape()[1];
                let (gv, gc) = kernels::sample_backward(
                    grid,
                    val(*field),
                    comps,
                    val(*coords),
                    g,
                    self.rg(*field),
                    self.rg(*coords),
                );
                if let Some(gv) = gv {
                    acc(*field, &|s| s.iter_mut().zip(&gv).for_each(|(s, v)| *s += v));
                }
                if let Some(gc) = gc {
                    acc(*coords, &|s| s.iter_mut().zip(&gc).for_each(|(s, v)| *s += v));
                }
            }
            Op::Gather { input, rows } => {
                let row = self.nodes[input.0].value.len() / self.nodes[input.0].value.shape()[0];
                acc(*input, &|s| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..row {
                            s[r * row + j] += g[k * row + j];
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &|s| {
                        s.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(s, v)| *s += v)
                    });
                    offset += n;
                }
            }
            Op::Nadaraya {
                centers,
                values,
                grid,
                sigma,
                eps,
                cutoff,
            } => {
                let (gc, gv) = kernels::nw_backward(
                    grid,
                    val(*centers),
                    val(*values),
                    *sigma,
                    *eps,
                    *cutoff,
                    node.value.data(),
                    g,
                );
                acc(*centers, &|s| s.iter_mut().zip(&gc).for_each(|(s, v)| *s += v));
                acc(*values, &|s| s.iter_mut().zip(&gv).for_each(|(s, v)| *s += v));
            }
        }
    }
}
