//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation appends a node whose inputs all have smaller indices,
//! so the recorded graph is acyclic by construction and the backward pass
//! is a single reverse sweep over the node list.

use crate::error::{Error, Result};

use super::tensor::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Relu(Var),
    Sqrt(Var),
    LayerNorm(Var, T),
    SoftmaxRows(Var),
    Transpose(Var),
    RepeatRows(Var, usize),
    MeanBlocks(Var, usize),
    MaxBlocks(Var, Vec<usize>),
    BlockMatMulNt(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    ConcatCols(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64c(0.5);
    let inv_sqrt2 = T::from_f64c(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64c(0.398_942_280_401_432_7);
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, kind: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Trainable input.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        if bv.shape().len() != 2 || bv.shape()[0] != k {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let n = bv.cols();
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, kind: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op, av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        self.push(op, t, kind, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.cols();
        if bv.len() != n {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let b = bv.data();
        let data = av.data().chunks(n).flat_map(|r| r.iter().zip(b).map(|(&x, &y)| x + y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        self.push("add_row", t, Op::AddRow(a, bias), rg)
    }

    fn map(&mut self, op: &'static str, a: Var, f: impl Fn(T) -> T, kind: Op<T>) -> Result<Var> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.rg(&[a]);
        self.push(op, t, kind, rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.map("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.map("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map("gelu", a, gelu_scalar, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= T::zero()) {
            return Err(Error::InvalidArgument("sqrt of a non-positive value".into()));
        }
        self.map("sqrt", a, |x| x.sqrt(), Op::Sqrt(a))
    }

    /// Normalizes each row to zero mean and unit (biased) variance.
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        let nf = T::from_usize(n).unwrap();
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().map(|&x| (x - mean) * rstd));
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push("layer_norm", t, Op::LayerNorm(a, eps), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(av.len());
        for row in av.data().chunks(n) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut s = T::zero();
            for &x in row {
                let e = (x - mx).exp();
                s += e;
                out.push(e);
            }
            for o in &mut out[start..] {
                *o /= s;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        self.push("softmax_rows", t, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let d = av.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::matrix(n, m, out)?, Op::Transpose(a), rg)
    }

    /// Repeats every row `times` times consecutively: `[B, n] -> [B·times, n]`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let av = self.value(a);
        let n = av.cols();
        let mut out = Vec::with_capacity(av.len() * times);
        for row in av.data().chunks(n) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let rows = av.rows() * times;
        let rg = self.rg(&[a]);
        self.push("repeat_rows", Tensor::matrix(rows, n, out)?, Op::RepeatRows(a, times), rg)
    }

    fn check_blocks(&self, op: &'static str, a: Var, block: usize) -> Result<(usize, usize)> {
        let av = self.value(a);
        if block == 0 || !av.rows().is_multiple_of(block) {
            return Err(Error::shape(op, format!("{} rows not divisible into blocks of {block}", av.rows())));
        }
        Ok((av.rows() / block, av.cols()))
    }

    /// Mean over consecutive groups of `block` rows: `[B·block, n] -> [B, n]`.
    pub fn mean_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let (b, n) = self.check_blocks("mean_blocks", a, block)?;
        let d = self.value(a).data();
        let inv = T::one() / T::from_usize(block).unwrap();
        let mut out = vec![T::zero(); b * n];
        for (r, row) in d.chunks(n).enumerate() {
            let o = &mut out[(r / block) * n..(r / block + 1) * n];
            for (x, &y) in o.iter_mut().zip(row) {
                *x += y;
            }
        }
        for x in &mut out {
            *x *= inv;
        }
        let rg = self.rg(&[a]);
        self.push("mean_blocks", Tensor::matrix(b, n, out)?, Op::MeanBlocks(a, block), rg)
    }

    /// Column-wise max over consecutive groups of `block` rows. Ties resolve
    /// to the earliest row.
    pub fn max_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let (b, n) = self.check_blocks("max_blocks", a, block)?;
        let d = self.value(a).data();
        let mut out = vec![T::zero(); b * n];
        let mut arg = vec![0usize; b * n];
        for g in 0..b {
            for j in 0..n {
                let mut best = g * block;
                let mut bv = d[best * n + j];
                for r in g * block + 1..(g + 1) * block {
                    let v = d[r * n + j];
                    if v > bv {
                        bv = v;
                        best = r;
                    }
                }
                out[g * n + j] = bv;
                arg[g * n + j] = best;
            }
        }
        let rg = self.rg(&[a]);
        self.push("max_blocks", Tensor::matrix(b, n, out)?, Op::MaxBlocks(a, arg), rg)
    }

    /// Per block of `block` rows: `a_blk · b_blkᵀ`. `[B·block, k] x [B·block, k] -> [B·block, block]`.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (nb, k) = self.check_blocks("block_matmul_nt", a, block)?;
        same_shape("block_matmul_nt", self.value(a).shape(), self.value(b).shape())?;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); nb * block * block];
        for g in 0..nb {
            let r = g * block * k..(g + 1) * block * k;
            let o = g * block * block..(g + 1) * block * block;
            matmul_nt_into(&ad[r.clone()], &bd[r], &mut out[o], block, k, block);
        }
        let rg = self.rg(&[a, b]);
        let t = Tensor::matrix(nb * block, block, out)?;
        self.push("block_matmul_nt", t, Op::BlockMatMulNt(a, b, block), rg)
    }

    /// Per block: `p_blk · v_blk`. `[B·block, block] x [B·block, n] -> [B·block, n]`.
    pub fn block_matmul(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let (nb, pc) = self.check_blocks("block_matmul", p, block)?;
        let (nb2, n) = self.check_blocks("block_matmul", v, block)?;
        if pc != block || nb != nb2 {
            return Err(Error::shape(
                "block_matmul",
                format!("{:?} x {:?}", self.value(p).shape(), self.value(v).shape()),
            ));
        }
        let (pd, vd) = (self.value(p).data(), self.value(v).data());
        let mut out = vec![T::zero(); nb * block * n];
        for g in 0..nb {
            let pr = g * block * block..(g + 1) * block * block;
            let vr = g * block * n..(g + 1) * block * n;
            matmul_into(&pd[pr], &vd[vr.clone()], &mut out[vr], block, block, n);
        }
        let rg = self.rg(&[p, v]);
        let t = Tensor::matrix(nb * block, n, out)?;
        self.push("block_matmul", t, Op::BlockMatMul(p, v, block), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let m = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        self.push("concat_cols", Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let s = av.data().iter().copied().sum::<T>() / T::from_usize(av.len()).unwrap();
        let rg = self.rg(&[a]);
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(a), rg)
    }

    // -- composites ---------------------------------------------------------

    /// `x · W + b` with `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Single-head scaled dot-product attention applied independently to
    /// each block of `block` rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var> {
        let d = self.value(q).cols();
        let logits = self.block_matmul_nt(q, k, block)?;
        let scaled = self.scale(logits, T::one() / T::from_usize(d).unwrap().sqrt())?;
        let p = self.softmax_rows(scaled)?;
        self.block_matmul(p, v, block)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // -- backward -----------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Only nodes that require gradients
    /// receive one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.acc(grads, *a, |ga| matmul_nt_into(g, bv.data(), ga, m, n, k));
                self.acc(grads, *b, |gb| matmul_tn_into(av.data(), g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for ((x, &gy), &bb) in ga.iter_mut().zip(g).zip(bd) {
                        *x += gy * bb;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((x, &gy), &aa) in gb.iter_mut().zip(g).zip(ad) {
                        *x += gy * aa;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = out.cols();
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                self.acc(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c));
            }
            Op::AddScalar(a) => {
                self.acc(grads, *a, |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Gelu(a) => {
                let ad = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((x, &gy), &xa) in ga.iter_mut().zip(g).zip(ad) {
                        *x += gy * gelu_grad(xa);
                    }
                });
            }
            Op::Relu(a) => {
                let ad = self.value(*a).data();
                self.acc(grads, *a, |ga| {
                    for ((x, &gy), &xa) in ga.iter_mut().zip(g).zip(ad) {
                        if xa > T::zero() {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let od = out.data();
                let half = T::from_f64c(0.5);
                self.acc(grads, *a, |ga| {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(od) {
                        *x += gy * half / o;
                    }
                });
            }
            Op::LayerNorm(a, eps) => {
                let ad = self.value(*a).data();
                let n = out.cols();
                let nf = T::from_usize(n).unwrap();
                self.acc(grads, *a, |ga| {
                    for ((xrow, grow), (garow, yrow)) in ad
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(ga.chunks_mut(n).zip(out.data().chunks(n)))
                    {
                        let mean = xrow.iter().copied().sum::<T>() / nf;
                        let var = xrow.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / nf;
                        let rstd = T::one() / (var + *eps).sqrt();
                        let gmean = grow.iter().copied().sum::<T>() / nf;
                        let gy_mean = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        for ((o, &gy), &y) in garow.iter_mut().zip(grow).zip(yrow) {
                            *o += rstd * (gy - gmean - y * gy_mean);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                self.acc(grads, *a, |ga| {
                    for ((garow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((o, &gy), &y) in garow.iter_mut().zip(grow).zip(yrow) {
                            *o += y * (gy - dot);
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (out.rows(), out.cols());
                // out is [m, n] = a^T, a is [n, m]
                self.acc(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::RepeatRows(a, times) => {
                let n = out.cols();
                self.acc(grads, *a, |ga| {
                    for (r, row) in g.chunks(n).enumerate() {
                        let dst = &mut ga[(r / times) * n..(r / times + 1) * n];
                        dst.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::MeanBlocks(a, block) => {
                let n = out.cols();
                let inv = T::one() / T::from_usize(*block).unwrap();
                self.acc(grads, *a, |ga| {
                    for (r, dst) in ga.chunks_mut(n).enumerate() {
                        let src = &g[(r / block) * n..(r / block + 1) * n];
                        dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y * inv);
                    }
                });
            }
            Op::MaxBlocks(a, arg) => {
                let n = out.cols();
                self.acc(grads, *a, |ga| {
                    for (idx, (&src_row, &gy)) in arg.iter().zip(g).enumerate() {
                        ga[src_row * n + idx % n] += gy;
                    }
                });
            }
            Op::BlockMatMulNt(a, b, block) => {
                // out_blk = a_blk b_blk^T
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let k = self.value(*a).cols();
                let nb = out.rows() / block;
                let bs = *block;
                self.acc(grads, *a, |ga| {
                    for blk in 0..nb {
                        let r = blk * bs * k..(blk + 1) * bs * k;
                        let o = blk * bs * bs..(blk + 1) * bs * bs;
                        matmul_into(&g[o], &bd[r.clone()], &mut ga[r], bs, bs, k);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for blk in 0..nb {
                        let r = blk * bs * k..(blk + 1) * bs * k;
                        let o = blk * bs * bs..(blk + 1) * bs * bs;
                        matmul_tn_into(&g[o], &ad[r.clone()], &mut gb[r], bs, bs, k);
                    }
                });
            }
            Op::BlockMatMul(p, v, block) => {
                let (pd, vd) = (self.value(*p).data(), self.value(*v).data());
                let n = out.cols();
                let bs = *block;
                let nb = out.rows() / bs;
                self.acc(grads, *p, |gp| {
                    for blk in 0..nb {
                        let pr = blk * bs * bs..(blk + 1) * bs * bs;
                        let vr = blk * bs * n..(blk + 1) * bs * n;
                        matmul_nt_into(&g[vr.clone()], &vd[vr], &mut gp[pr], bs, n, bs);
                    }
                });
                self.acc(grads, *v, |gv| {
                    for blk in 0..nb {
                        let pr = blk * bs * bs..(blk + 1) * bs * bs;
                        let vr = blk * bs * n..(blk + 1) * bs * n;
                        matmul_tn_into(&pd[pr], &g[vr.clone()], &mut gv[vr], bs, bs, n);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for (r, dst) in gp.chunks_mut(w).enumerate() {
                            let src = &g[r * total + off..r * total + off + w];
                            dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                        }
                    });
                    off += w;
                }
            }
            Op::SumAll(a) => {
                let gy = g[0];
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += gy));
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let gy = g[0] / T::from_usize(n).unwrap();
                self.acc(grads, *a, |ga| ga.iter_mut().for_each(|x| *x += gy));
            }
        }
    }
}
