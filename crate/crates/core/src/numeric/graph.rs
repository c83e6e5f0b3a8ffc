//! Reverse-mode differentiation over a recorded computation graph.
//!
//! A [`Graph`] is an append-only tape. Every operation evaluates eagerly,
//! stores its value, and remembers its inputs; [`Graph::backward`] walks the
//! tape in reverse accumulating gradients. One graph belongs to one thread.

use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Abs(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let bt = self.value(b);
        if bt.shape().len() != 2 || bt.shape()[0] != k {
            return Err(Error::Shape(format!("matmul: {m}×{k} by {:?}", bt.shape())));
        }
        let n = bt.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), bt.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`, with `b` stored as `n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a);
        let (n, kb) = self.dims2(b);
        if k != kb {
            return Err(Error::Shape(format!("matmul_nt: {m}×{k} by ({n}×{kb})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::Shape(format!(
                "add_row: {} columns vs row of {}",
                c,
                self.value(row).len()
            )));
        }
        let r = self.value(row).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v * sigmoid(v))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Last-axis softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Per-row standardization followed by `gain ⊙ x̂ + shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(gain).len() != c || self.value(shift).len() != c {
            return Err(Error::Shape(format!(
                "layer_norm: width {c} vs gain {} / shift {}",
                self.value(gain).len(),
                self.value(shift).len()
            )));
        }
        let tx = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(shift).data();
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                let h = (row[k] - mean) * is;
                xhat[r * c + k] = h;
                out[r * c + k] = g[k] * h + b[k];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(shift);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::Shape(format!(
                    "gather_rows: index {i} ≥ {rows} rows"
                )));
            }
            data.extend_from_slice(tx.row(i));
        }
        let value = Tensor::new(vec![idx.len(), c], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, idx.to_vec()), rg))
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Shape(format!("select_cols: column {bad} ≥ {c}")));
        }
        let mut data = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            let row = tx.row(r);
            data.extend(idx.iter().map(|&i| row[i]));
        }
        let value = Tensor::new(vec![rows, idx.len()], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SelectCols(x, idx.to_vec()), rg))
    }

    /// Contiguous column range `[start, start + width)`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + width).collect();
        self.select_cols(x, &idx)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(Error::Shape(format!(
                "concat_cols: {} rows vs {rows}",
                self.value(*p).rows()
            )));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Scales each row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let c = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            let n = dot(row, row).sqrt();
            if n > f64::MIN_POSITIVE {
                row.iter_mut().for_each(|v| *v /= n);
            } else {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::NormalizeRows(x), rg)
    }

    /// Linear layer `x · Wᵀ + b` with `W` stored `out×in`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Back-propagates from a scalar output. Gradients of earlier calls are
    /// discarded.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm_nt_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(av, g, gb, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| gemm_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| gemm_tn_acc(g, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for k in 0..ga.len() {
                        ga[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..gb.len() {
                        gb[k] += g[k] * av[k];
                    }
                });
            }
            Op::AddRow(x, row) => {
                acc(*x, &mut |gx| add_into(gx, g));
                let c = self.value(*row).len();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks_exact(c) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(x, s) => acc(*x, &mut |gx| {
                gx.iter_mut().zip(g).for_each(|(o, v)| *o += s * v)
            }),
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        let s = sigmoid(xv[k]);
                        gx[k] += g[k] * (s + xv[k] * s * (1.0 - s));
                    }
                });
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        let sgn = if xv[k] > 0.0 {
                            1.0
                        } else if xv[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[k] += g[k] * sgn;
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |gx| {
                    for k in 0..gx.len() {
                        gx[k] += 2.0 * xv[k] * g[k];
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (r, (yr, gr)) in y.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                        let d = dot(yr, gr);
                        for k in 0..c {
                            gx[r * c + k] += yr[k] * (gr[k] - d);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gain).data();
                acc(*x, &mut |gx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for k in 0..c {
                            let dh = gr[k] * gv[k];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[k];
                        }
                        mean_dh /= c as f64;
                        mean_dh_h /= c as f64;
                        for k in 0..c {
                            let dh = gr[k] * gv[k];
                            gx[r * c + k] += is * (dh - mean_dh - hr[k] * mean_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for k in 0..c {
                            gg[k] += gr[k] * hr[k];
                        }
                    }
                });
                acc(*shift, &mut |gs| {
                    for gr in g.chunks_exact(c) {
                        add_into(gs, gr);
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let c = node.value.cols();
                acc(*x, &mut |gx| {
                    for (o, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[o * c..(o + 1) * c]);
                    }
                });
            }
            Op::SelectCols(x, idx) => {
                let c_in = self.value(*x).cols();
                let c_out = idx.len();
                acc(*x, &mut |gx| {
                    for (r, gr) in g.chunks_exact(c_out).enumerate() {
                        for (k, &src) in idx.iter().enumerate() {
                            gx[r * c_in + src] += gr[k];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    acc(*p, &mut |gp| {
                        for (r, gr) in g.chunks_exact(total).enumerate() {
                            add_into(&mut gp[r * c..(r + 1) * c], &gr[offset..offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |gx| add_into(gx, g)),
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |gx| gx.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::NormalizeRows(x) => {
                let c = node.value.cols();
                let xv = self.value(*x).data();
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for r in 0..node.value.rows() {
                        let xr = &xv[r * c..(r + 1) * c];
                        let n = dot(xr, xr).sqrt();
                        if n <= f64::MIN_POSITIVE {
                            continue;
                        }
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let d = dot(yr, gr);
                        for k in 0..c {
                            gx[r * c + k] += (gr[k] - yr[k] * d) / n;
                        }
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
