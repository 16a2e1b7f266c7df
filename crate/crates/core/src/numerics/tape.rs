//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state to run its adjoint. Nodes whose inputs are all constants are
//! marked `requires_grad = false` and skipped entirely by [`Tape::backward`],
//! so frozen sub-graphs cost nothing on the backward pass.
//!
//! Matrices are 2-D tensors `[rows, cols]`; "row" vectors passed to the
//! broadcasting ops may be `[n]` or `[1, n]`.

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, gemm, gemm_nt_acc, gemm_tn_acc, Tensor};
use crate::scalar::Scalar;

/// Layer-norm variance guard.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        scale: Option<Var>,
        shift: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    NarrowRows(Var, usize),
    NarrowCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_2d(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::shape(op, t, &[])),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::c(0.797_884_560_802_865_4);
    let a = T::c(0.044_715);
    let half = T::c(0.5);
    let x2 = x * x;
    let u = k * (x + a * x2 * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::c(3.0) * a * x2);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn rows_of(&self, v: Var) -> Result<(usize, usize)> {
        check_2d("matrix op", self.shape(v))
    }

    fn row_vec_len(&self, op: &'static str, v: Var) -> Result<usize> {
        match self.shape(v) {
            [n] => Ok(*n),
            [1, n] => Ok(*n),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul", self.shape(a))?;
        let (k2, n) = check_2d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let c = gemm(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], c)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_2d("matmul_nt", self.shape(a))?;
        let (n, k2) = check_2d("matmul_nt", self.shape(b))?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut c = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = dot(&ad[i * k..(i + 1) * k], &bd[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], c)?, rg, Op::MatMulNt(a, b)))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, va.shape(), vb.shape()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, rg, Op::Mul(a, b)))
    }

    /// `x[m×n] + r[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        if self.row_vec_len("add_row", r)? != n {
            return Err(Error::shape("add_row", self.shape(x), self.shape(r)));
        }
        let rv = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::AddRow(x, r)))
    }

    /// `x[m×n] ⊙ r[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        if self.row_vec_len("mul_row", r)? != n {
            return Err(Error::shape("mul_row", self.shape(x), self.shape(r)));
        }
        let rv = self.value(r).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o *= b;
            }
        }
        let rg = self.rg(x) || self.rg(r);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MulRow(x, r)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(x);
        self.push(v, rg, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a + s);
        let rg = self.rg(x);
        self.push(v, rg, Op::AddScalar(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| gelu_parts(a).0);
        let rg = self.rg(x);
        self.push(v, rg, Op::Gelu(x))
    }

    /// Layer norm over the last axis with optional per-column affine terms.
    pub fn layer_norm(&mut self, x: Var, scale: Option<Var>, shift: Option<Var>) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        for r in [scale, shift].into_iter().flatten() {
            if self.row_vec_len("layer_norm", r)? != n {
                return Err(Error::shape("layer_norm", self.shape(x), self.shape(r)));
            }
        }
        let eps = T::c(LAYER_NORM_EPS);
        let nf = T::from_usize(n).unwrap();
        let xd = self.value(x).data();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for (h, &v) in xhat[i * n..(i + 1) * n].iter_mut().zip(row) {
                *h = (v - mean) * r;
            }
        }
        let mut out = xhat.clone();
        if let Some(s) = scale {
            let sv = self.value(s).data();
            for i in 0..m {
                for (o, &g) in out[i * n..(i + 1) * n].iter_mut().zip(sv) {
                    *o *= g;
                }
            }
        }
        if let Some(b) = shift {
            let bv = self.value(b).data();
            for i in 0..m {
                for (o, &g) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                    *o += g;
                }
            }
        }
        let rg = self.rg(x) || scale.is_some_and(|s| self.rg(s)) || shift.is_some_and(|s| self.rg(s));
        Ok(self.push(
            Tensor::new(&[m, n], out)?,
            rg,
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            },
        ))
    }

    /// Row-wise softmax. `mask[j] == false` excludes column `j`; excluded
    /// entries are exactly zero in the output.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        if let Some(mk) = mask {
            if mk.len() != n {
                return Err(Error::shape("softmax_rows", self.shape(x), &[mk.len()]));
            }
        }
        let valid = |j: usize| mask.map_or(true, |mk| mk[j]);
        if m > 0 && !(0..n).any(valid) {
            return Err(Error::AllMasked { row: 0 });
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mx = (0..n)
                .filter(|&j| valid(j))
                .fold(T::neg_infinity(), |a, j| a.max(row[j]));
            let o = &mut out[i * n..(i + 1) * n];
            let mut z = T::zero();
            for j in 0..n {
                if valid(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::Softmax(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[n, m], out)?, rg, Op::Transpose(x)))
    }

    /// Stacks matrices with equal column counts. Zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.rows_of(parts[0])?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (r, c) = self.rows_of(p)?;
            if c != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            m += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], data)?, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.rows_of(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.rows_of(p)?;
            if r != m {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![T::zero(); m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], data)?, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn narrow_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        if start + len > m {
            return Err(Error::shape("narrow_rows", self.shape(x), &[start, len]));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[len, n], data)?, rg, Op::NarrowRows(x, start)))
    }

    pub fn narrow_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        if start + len > n {
            return Err(Error::shape("narrow_cols", self.shape(x), &[start, len]));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[m, len], data)?, rg, Op::NarrowCols(x, start)))
    }

    /// Mean over rows: `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.rows_of(x)?;
        if m == 0 {
            return Err(Error::EmptySequence("mean_rows"));
        }
        let xd = self.value(x).data();
        let inv = T::one() / T::from_usize(m).unwrap();
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&xd[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[1, n], out)?, rg, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(Tensor::full(&[1], s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::EmptySequence("mean"));
        }
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.rg(x);
        Ok(self.push(Tensor::full(&[1], s), rg, Op::Mean(x)))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", va.shape(), vb.shape()));
        }
        if va.is_empty() {
            return Err(Error::EmptySequence("mse"));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / T::from_usize(va.len()).unwrap();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::full(&[1], s), rg, Op::Mse(a, b)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(v, rg, Op::Reshape(x)))
    }

    fn acc(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    /// Reverse pass from a one-element node. Gradients accumulate into any
    /// existing buffers; call [`Tape::zero_grad`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[1]));
        }
        if let Some(g) = self.acc(loss) {
            g[0] += T::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); self.nodes[i].value.len()]);
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        // Temporarily move the op out so input grads can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = check_2d("", self.shape(a)).unwrap();
                let n = self.shape(b)[1];
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.clone();
                    gemm_nt_acc(g, bv.data(), self.acc(a).unwrap(), m, n, k);
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.clone();
                    gemm_tn_acc(av.data(), g, self.acc(b).unwrap(), m, k, n);
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = check_2d("", self.shape(a)).unwrap();
                let n = self.shape(b)[0];
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.clone();
                    let bd = bv.data();
                    let da = self.acc(a).unwrap();
                    for ii in 0..m {
                        for j in 0..n {
                            let gij = g[ii * n + j];
                            if gij == T::zero() {
                                continue;
                            }
                            for (d, &bb) in da[ii * k..(ii + 1) * k].iter_mut().zip(&bd[j * k..(j + 1) * k]) {
                                *d += gij * bb;
                            }
                        }
                    }
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.clone();
                    gemm_tn_acc(g, av.data(), self.acc(b).unwrap(), m, n, k);
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.acc(v) {
                        for (d, &gv) in d.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = self.acc(a) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(d) = self.acc(b) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.nodes[b.0].value.clone();
                    for ((d, &gv), &bb) in self.acc(a).unwrap().iter_mut().zip(g).zip(bv.data()) {
                        *d += gv * bb;
                    }
                }
                if self.rg(b) {
                    let av = self.nodes[a.0].value.clone();
                    for ((d, &gv), &aa) in self.acc(b).unwrap().iter_mut().zip(g).zip(av.data()) {
                        *d += gv * aa;
                    }
                }
            }
            &Op::AddRow(x, r) => {
                let n = self.shape(x)[1];
                if let Some(d) = self.acc(x) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(d) = self.acc(r) {
                    for grow in g.chunks_exact(n) {
                        for (d, &gv) in d.iter_mut().zip(grow) {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::MulRow(x, r) => {
                let n = self.shape(x)[1];
                if self.rg(x) {
                    let rv = self.nodes[r.0].value.clone();
                    let d = self.acc(x).unwrap();
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for ((dv, &gv), &rr) in drow.iter_mut().zip(grow).zip(rv.data()) {
                            *dv += gv * rr;
                        }
                    }
                }
                if self.rg(r) {
                    let xv = self.nodes[x.0].value.clone();
                    let d = self.acc(r).unwrap();
                    for (xrow, grow) in xv.data().chunks_exact(n).zip(g.chunks_exact(n)) {
                        for ((dv, &gv), &xx) in d.iter_mut().zip(grow).zip(xrow) {
                            *dv += gv * xx;
                        }
                    }
                }
            }
            &Op::Scale(x, s) => {
                if let Some(d) = self.acc(x) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if let Some(d) = self.acc(x) {
                    for (d, &gv) in d.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.nodes[x.0].value.clone();
                if let Some(d) = self.acc(x) {
                    for ((d, &gv), &xx) in d.iter_mut().zip(g).zip(xv.data()) {
                        *d += gv * gelu_parts(xx).1;
                    }
                }
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                xhat,
                rstd,
            } => {
                let (x, scale, shift) = (*x, *scale, *shift);
                let n = self.shape(x)[1];
                let nf = T::from_usize(n).unwrap();
                let sv = scale.map(|s| self.nodes[s.0].value.clone());
                if self.rg(x) {
                    let d = self.acc(x).unwrap();
                    let mut dxhat = vec![T::zero(); n];
                    for (row, ((drow, grow), hrow)) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dxhat[j] = match &sv {
                                Some(s) => grow[j] * s.data()[j],
                                None => grow[j],
                            };
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / nf;
                        let m2 = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / nf;
                        let r = rstd[row];
                        for j in 0..n {
                            drow[j] += r * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
                if let Some(s) = scale {
                    if let Some(d) = self.acc(s) {
                        for (grow, hrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                            for ((dv, &gv), &h) in d.iter_mut().zip(grow).zip(hrow) {
                                *dv += gv * h;
                            }
                        }
                    }
                }
                if let Some(b) = shift {
                    if let Some(d) = self.acc(b) {
                        for grow in g.chunks_exact(n) {
                            for (dv, &gv) in d.iter_mut().zip(grow) {
                                *dv += gv;
                            }
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = self.shape(x)[1];
                let y = self.nodes[i].value.clone();
                if let Some(d) = self.acc(x) {
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.data().chunks_exact(n))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            &Op::Transpose(x) => {
                let (m, n) = check_2d("", self.shape(x)).unwrap();
                if let Some(d) = self.acc(x) {
                    for ii in 0..m {
                        for j in 0..n {
                            d[ii * n + j] += g[j * m + ii];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(d) = self.acc(p) {
                        for (dv, &gv) in d.iter_mut().zip(&g[off..off + len]) {
                            *dv += gv;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[i].value.cols();
                let mut off = 0;
                for &p in parts {
                    let (m, w) = check_2d("", self.shape(p)).unwrap();
                    if let Some(d) = self.acc(p) {
                        for ii in 0..m {
                            for (dv, &gv) in d[ii * w..(ii + 1) * w].iter_mut().zip(&g[ii * n + off..ii * n + off + w]) {
                                *dv += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            &Op::NarrowRows(x, start) => {
                let n = self.shape(x)[1];
                if let Some(d) = self.acc(x) {
                    for (dv, &gv) in d[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
            &Op::NarrowCols(x, start) => {
                let n = self.shape(x)[1];
                let w = self.nodes[i].value.cols();
                if let Some(d) = self.acc(x) {
                    for (ii, grow) in g.chunks_exact(w).enumerate() {
                        for (dv, &gv) in d[ii * n + start..ii * n + start + w].iter_mut().zip(grow) {
                            *dv += gv;
                        }
                    }
                }
            }
            &Op::MeanRows(x) => {
                let (m, n) = check_2d("", self.shape(x)).unwrap();
                let inv = T::one() / T::from_usize(m).unwrap();
                if let Some(d) = self.acc(x) {
                    for drow in d.chunks_exact_mut(n) {
                        for (dv, &gv) in drow.iter_mut().zip(g) {
                            *dv += gv * inv;
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(d) = self.acc(x) {
                    for dv in d.iter_mut() {
                        *dv += g[0];
                    }
                }
            }
            &Op::Mean(x) => {
                let inv = T::one() / T::from_usize(self.nodes[x.0].value.len()).unwrap();
                if let Some(d) = self.acc(x) {
                    for dv in d.iter_mut() {
                        *dv += g[0] * inv;
                    }
                }
            }
            &Op::Mse(a, b) => {
                let av = self.nodes[a.0].value.clone();
                let bv = self.nodes[b.0].value.clone();
                let k = T::c(2.0) * g[0] / T::from_usize(av.len()).unwrap();
                if let Some(d) = self.acc(a) {
                    for ((dv, &x), &y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                        *dv += k * (x - y);
                    }
                }
                if let Some(d) = self.acc(b) {
                    for ((dv, &x), &y) in d.iter_mut().zip(av.data()).zip(bv.data()) {
                        *dv -= k * (x - y);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn identity_matmul() {
        let mut tp = Tape::new();
        let i = tp.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = tp.constant(t(&[&[2.0, 3.0], &[4.0, 5.0]]));
        let c = tp.matmul(i, m).unwrap();
        assert_eq!(tp.value(c), tp.value(m));
    }

    #[test]
    fn hand_matmul() {
        let mut tp = Tape::new();
        let a = tp.constant(t(&[&[1.0, 2.0]]));
        let b = tp.constant(t(&[&[3.0], &[4.0]]));
        let c = tp.matmul(a, b).unwrap();
        assert_eq!(tp.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let b = tp.constant(Tensor::zeros(&[2, 3]));
        let err = tp.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_symmetric_and_masked() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[&[0.0, 0.0]]));
        let y = tp.softmax_rows(x, None).unwrap();
        assert_eq!(tp.value(y).data(), &[0.5, 0.5]);
        let x = tp.constant(t(&[&[10.0, 10.0, 10.0]]));
        let y = tp.softmax_rows(x, Some(&[true, true, false])).unwrap();
        assert_eq!(tp.value(y).data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let mut tp = Tape::<f64>::new();
        let x = tp.constant(t(&[&[1.0, 2.0]]));
        assert!(matches!(
            tp.softmax_rows(x, Some(&[false, false])),
            Err(Error::AllMasked { .. })
        ));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[&[1.0, 2.0, 3.0]]));
        let y = tp.softmax_rows(x, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (j, &v) in tp.value(y).data().iter().enumerate() {
            let want = ((j + 1) as f64).exp() / z;
            assert!(((v - want) / want).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tp = Tape::new();
        let x = tp.constant(t(&[&[3.0, 3.0, 3.0]]));
        let y = tp.layer_norm(x, None, None).unwrap();
        assert!(tp.value(y).data().iter().all(|&v| v == 0.0));

        let x = tp.constant(t(&[&[1.0, -1.0]]));
        let s = tp.constant(Tensor::full(&[2], 1.0));
        let b = tp.constant(Tensor::zeros(&[2]));
        let y = tp.layer_norm(x, Some(s), Some(b)).unwrap();
        for (v, want) in tp.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((v - want).abs() < 1e-5);
        }
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  → dy/dx = 2x + 1
        let mut tp = Tape::new();
        let x = tp.param(Tensor::full(&[1, 1], 3.0));
        let sq = tp.mul(x, x).unwrap();
        let y = tp.add(sq, x).unwrap();
        let s = tp.sum(y);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(x).unwrap(), &[7.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tp = Tape::new();
        let w = tp.param(Tensor::full(&[1, 2], 1.0));
        let c = tp.constant(Tensor::full(&[2, 1], 2.0));
        let y = tp.matmul(w, c).unwrap();
        let s = tp.sum(y);
        tp.backward(s).unwrap();
        assert!(tp.grad(c).is_none());
        assert_eq!(tp.grad(w).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_params_get_zero_grad() {
        let mut tp = Tape::new();
        let w = tp.param(Tensor::full(&[2], 1.0));
        let x = tp.param(Tensor::full(&[1], 2.0));
        let s = tp.sum(x);
        tp.backward(s).unwrap();
        assert_eq!(tp.grad(w).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_row_concat() {
        let mut tp = Tape::<f64>::new();
        let a = tp.constant(Tensor::zeros(&[2, 3]));
        let e = tp.constant(Tensor::zeros(&[0, 3]));
        let c = tp.concat_rows(&[a, e]).unwrap();
        assert_eq!(tp.shape(c), &[2, 3]);
    }
}
