//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable operation appends a node holding its forward value and
//! the handles of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates one gradient per `requires_grad` leaf, then clears the tape.

use std::collections::HashMap;

use crate::error::{KgcmError, Result};
use crate::tensor::{kernels, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    /// Constant addend; the gradient passes straight through.
    AddConst(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatLast(Var, Var),
    SliceLast { input: Var, start: usize },
    SliceRows { input: Var, start: usize },
    GatherRows { table: Var, indices: Vec<usize> },
    LiftHistory { input: Var, n: usize },
    SelectLast { input: Var, k: usize },
    EmaScan { input: Var, lambda: f64 },
    Sum(Var),
    MeanRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated gradients for the `requires_grad` leaves of one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.by_leaf.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// `a * b` for rank-2 or rank-3 operands. A rank-2 operand is broadcast
    /// over the batch axis of a rank-3 partner.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` (transpose of the last two axes of `b`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, r, k) = av.as_batched("matmul")?;
        let (bb, b_rows, b_cols) = bv.as_batched("matmul")?;
        let (kb, c) = if trans_b {
            (b_cols, b_rows)
        } else {
            (b_rows, b_cols)
        };
        if k != kb || (ba != bb && ba != 1 && bb != 1) {
            return Err(KgcmError::shape(
                "matmul",
                format!(
                    "cannot multiply {:?} by {:?}{}",
                    av.dims(),
                    bv.dims(),
                    if trans_b { "^T" } else { "" }
                ),
            ));
        }
        let batch = ba.max(bb);
        let mut out = vec![0.0; batch * r * c];
        for i in 0..batch {
            let asl = &av.data()[if ba == 1 { 0 } else { i * r * k }..][..r * k];
            let bsl = &bv.data()[if bb == 1 { 0 } else { i * k * c }..][..k * c];
            let osl = &mut out[i * r * c..(i + 1) * r * c];
            if trans_b {
                kernels::mm_nt(asl, bsl, osl, r, k, c);
            } else {
                kernels::mm(asl, bsl, osl, r, k, c);
            }
        }
        let dims = if av.rank() == 3 || bv.rank() == 3 {
            vec![batch, r, c]
        } else {
            vec![r, c]
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts(dims, out),
            Op::MatMul { a, b, trans_b },
            needs,
            "matmul",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transposed()?;
        let needs = self.needs(a);
        self.push(value, Op::Transpose(a), needs, "transpose")
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(KgcmError::shape(
                op,
                format!("operands {:?} and {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        Tensor::from_parts(
            av.dims().to_vec(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs, "mul")
    }

    /// Adds the rank-1 `bias` to every slice along the last axis of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.dims(bias) != [c] {
            return Err(KgcmError::shape(
                "add_bias",
                format!("bias {:?} vs input {:?}", self.dims(bias), self.dims(a)),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (x, b) in row.iter_mut().zip(&bv) {
                *x += b;
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddBias(a, bias), needs, "add_bias")
    }

    /// Adds a constant array of identical dims.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.dims(a) != c.dims() {
            return Err(KgcmError::shape(
                "add_const",
                format!("operands {:?} and {:?}", self.dims(a), c.dims()),
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(c);
        let needs = self.needs(a);
        self.push(value, Op::AddConst(a), needs, "add_const")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        let needs = self.needs(a);
        self.push(value, Op::AddConst(a), needs, "add_scalar")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        let needs = self.needs(a);
        self.push(value, Op::Scale(a, s), needs, "scale")
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let neg = self.scale(a, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let needs = self.needs(a);
        self.push(value, Op::Relu(a), needs, "relu")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        let needs = self.needs(a);
        self.push(value, Op::Sigmoid(a), needs, "sigmoid")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = softmax_last(self.value(a), None)?;
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a), needs, "softmax")
    }

    /// Softmax along the last axis over the entries where `mask` is true.
    /// Masked entries get probability zero; a fully masked row is all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(KgcmError::shape(
                "masked_softmax",
                format!("mask of {} for input {:?}", mask.len(), self.dims(a)),
            ));
        }
        let value = softmax_last(self.value(a), Some(mask))?;
        let needs = self.needs(a);
        self.push(value, Op::Softmax(a), needs, "masked_softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.dims(gamma) != [c] || self.dims(beta) != [c] {
            return Err(KgcmError::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs input {:?}",
                    self.dims(gamma),
                    self.dims(beta),
                    self.dims(a)
                ),
            ));
        }
        let x = self.value(a);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.outer_len());
        let mut out = vec![0.0; x.len()];
        for (r, row) in x.data().chunks(c).enumerate() {
            let (norm, inv) = normalize_row(row, eps);
            for j in 0..c {
                xhat[r * c + j] = norm[j];
                out[r * c + j] = g[j] * norm[j] + b[j];
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(x.dims().to_vec(), out);
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
            "layer_norm",
        )
    }

    /// Concatenates two rank-2 arrays along the column axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).as_matrix("concat_last")?;
        let (rb, cb) = self.value(b).as_matrix("concat_last")?;
        if ra != rb {
            return Err(KgcmError::shape(
                "concat_last",
                format!("row counts {ra} and {rb}"),
            ));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts(vec![ra, ca + cb], out),
            Op::ConcatLast(a, b),
            needs,
            "concat_last",
        )
    }

    /// Columns `start..start+len` of a rank-2 array.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).as_matrix("slice_last")?;
        if len == 0 || start + len > c {
            return Err(KgcmError::shape(
                "slice_last",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceLast { input: a, start },
            needs,
            "slice_last",
        )
    }

    /// Rows `start..start+len` of a rank-2 array.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).as_matrix("slice_rows")?;
        if len == 0 || start + len > r {
            return Err(KgcmError::shape(
                "slice_rows",
                format!("rows {start}..{} of {r}", start + len),
            ));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows { input: a, start },
            needs,
            "slice_rows",
        )
    }

    /// Row lookup into a rank-2 table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(table).as_matrix("gather_rows")?;
        if indices.is_empty() {
            return Err(KgcmError::shape("gather_rows", "no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(KgcmError::shape(
                    "gather_rows",
                    format!("index {i} out of range for {r} rows"),
                ));
            }
            out.extend_from_slice(self.value(table).row(i));
        }
        let needs = self.needs(table);
        self.push(
            Tensor::from_parts(vec![indices.len(), c], out),
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            needs,
            "gather_rows",
        )
    }

    /// Turns a `T x d` sequence into per-step `d x n` history blocks:
    /// `out[t, i, k] = h[max(t + 1 + k - n, 0), i]`. Steps before the start of
    /// the sequence repeat the earliest row.
    pub fn lift_history(&mut self, h: Var, n: usize) -> Result<Var> {
        let (t_len, d) = self.value(h).as_matrix("lift_history")?;
        if n == 0 {
            return Err(KgcmError::shape("lift_history", "history length 0"));
        }
        let src = self.value(h).data();
        let mut out = vec![0.0; t_len * d * n];
        for t in 0..t_len {
            for k in 0..n {
                let s = (t + 1 + k).saturating_sub(n);
                for i in 0..d {
                    out[(t * d + i) * n + k] = src[s * d + i];
                }
            }
        }
        let needs = self.needs(h);
        self.push(
            Tensor::from_parts(vec![t_len, d, n], out),
            Op::LiftHistory { input: h, n },
            needs,
            "lift_history",
        )
    }

    /// `out[b, i] = a[b, i, k]` for a rank-3 input.
    pub fn select_last(&mut self, a: Var, k: usize) -> Result<Var> {
        let (b, r, c) = match self.dims(a) {
            [b, r, c] => (*b, *r, *c),
            d => {
                return Err(KgcmError::shape(
                    "select_last",
                    format!("expected rank 3, got {d:?}"),
                ))
            }
        };
        if k >= c {
            return Err(KgcmError::shape(
                "select_last",
                format!("index {k} out of range for {c}"),
            ));
        }
        let src = self.value(a).data();
        let out: Vec<f64> = (0..b * r).map(|i| src[i * c + k]).collect();
        let needs = self.needs(a);
        self.push(
            Tensor::from_parts(vec![b, r], out),
            Op::SelectLast { input: a, k },
            needs,
            "select_last",
        )
    }

    /// Exponential smoothing along the first axis:
    /// `out[0] = lambda * init + (1 - lambda) * a[0]`,
    /// `out[t] = lambda * out[t-1] + (1 - lambda) * a[t]`.
    /// `init` has the size of one slice of `a` and is a constant.
    pub fn ema_scan(&mut self, a: Var, init: &[f64], lambda: f64) -> Result<Var> {
        let dims = self.dims(a).to_vec();
        let steps = dims[0];
        let block = self.value(a).len() / steps.max(1);
        if dims.len() < 2 || init.len() != block {
            return Err(KgcmError::shape(
                "ema_scan",
                format!("initial slice of {} for input {dims:?}", init.len()),
            ));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(src.len());
        let mut prev = init.to_vec();
        for cur in src.chunks(block) {
            for (p, r) in prev.iter_mut().zip(cur) {
                *p = lambda * *p + (1.0 - lambda) * r;
            }
            out.extend_from_slice(&prev);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::from_parts(dims, out),
            Op::EmaScan { input: a, lambda },
            needs,
            "ema_scan",
        )
    }

    /// Sum of all entries, as a one-element array.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(a);
        self.push(value, Op::Sum(a), needs, "sum")
    }

    /// Column means of a rank-2 array, as a `1 x c` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).as_matrix("mean_rows")?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let needs = self.needs(a);
        self.push(
            Tensor::from_parts(vec![1, c], out),
            Op::MeanRows(a),
            needs,
            "mean_rows",
        )
    }

    /// Sum of squared entries.
    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.sum(sq)
    }

    /// Reverse pass from a scalar `loss`. Returns a gradient for every leaf
    /// created with `requires_grad` (zeros when the loss does not depend on
    /// it) and clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(KgcmError::contract("backward", "tape is empty"));
        }
        if self.value(loss).len() != 1 {
            return Err(KgcmError::contract(
                "backward",
                format!("loss must be scalar, got dims {:?}", self.dims(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.dims(loss), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, g, &mut grads, &mut out)?;
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                out.by_leaf
                    .entry(Var(idx))
                    .or_insert_with(|| Tensor::zeros(node.value.dims()));
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn propagate(
        &self,
        idx: usize,
        g: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {
                out.by_leaf.insert(Var(idx), g);
            }
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (ba, r, k) = av.as_batched("matmul")?;
                let (bb, _, _) = bv.as_batched("matmul")?;
                let c = g.last_dim();
                let batch = ba.max(bb);
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                let mut da = need_a.then(|| vec![0.0; av.len()]);
                let mut db = need_b.then(|| vec![0.0; bv.len()]);
                for i in 0..batch {
                    let a_off = if ba == 1 { 0 } else { i * r * k };
                    let b_off = if bb == 1 { 0 } else { i * k * c };
                    let gs = &g.data()[i * r * c..(i + 1) * r * c];
                    let asl = &av.data()[a_off..a_off + r * k];
                    let bsl = &bv.data()[b_off..b_off + k * c];
                    if let Some(da) = da.as_mut() {
                        let dst = &mut da[a_off..a_off + r * k];
                        if *trans_b {
                            kernels::mm(gs, bsl, dst, r, c, k);
                        } else {
                            kernels::mm_nt(gs, bsl, dst, r, c, k);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let dst = &mut db[b_off..b_off + k * c];
                        if *trans_b {
                            kernels::mm_tn(gs, asl, dst, r, c, k);
                        } else {
                            kernels::mm_tn(asl, gs, dst, r, k, c);
                        }
                    }
                }
                if let Some(da) = da {
                    acc(*a, Tensor::from_parts(av.dims().to_vec(), da));
                }
                if let Some(db) = db {
                    acc(*b, Tensor::from_parts(bv.dims().to_vec(), db));
                }
            }
            Op::Transpose(a) => acc(*a, g.transposed()?),
            Op::Add(a, b) => {
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                if self.needs(*b) {
                    acc(*b, g.map(|x| -x));
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, hadamard(&g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(*b, hadamard(&g, self.value(*a)));
                }
            }
            Op::AddBias(a, bias) => {
                if self.needs(*bias) {
                    let c = g.last_dim();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*bias, Tensor::from_parts(vec![c], db));
                }
                acc(*a, g);
            }
            Op::AddConst(a) => acc(*a, g),
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*a, Tensor::from_parts(g.dims().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                acc(*a, Tensor::from_parts(g.dims().to_vec(), d));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut d = vec![0.0; y.len()];
                for ((drow, grow), yrow) in d
                    .chunks_mut(c)
                    .zip(g.data().chunks(c))
                    .zip(y.data().chunks(c))
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                acc(*a, Tensor::from_parts(y.dims().to_vec(), d));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = g.last_dim();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut dbt = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * xrow[j];
                            dbt[j] += grow[j];
                        }
                    }
                    acc(*gamma, Tensor::from_parts(vec![c], dg));
                    acc(*beta, Tensor::from_parts(vec![c], dbt));
                }
                if self.needs(*input) {
                    let n = c as f64;
                    let mut dx = vec![0.0; g.len()];
                    for (r, (grow, xrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dxhat: Vec<f64> = (0..c).map(|j| grow[j] * gam[j]).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        for j in 0..c {
                            dx[r * c + j] = inv / n * (n * dxhat[j] - s1 - xrow[j] * s2);
                        }
                    }
                    acc(*input, Tensor::from_parts(g.dims().to_vec(), dx));
                }
            }
            Op::ConcatLast(a, b) => {
                let ca = self.value(*a).last_dim();
                let cb = self.value(*b).last_dim();
                let r = g.rows();
                let mut da = Vec::with_capacity(r * ca);
                let mut db = Vec::with_capacity(r * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, Tensor::from_parts(vec![r, ca], da));
                acc(*b, Tensor::from_parts(vec![r, cb], db));
            }
            Op::SliceLast { input, start } => {
                let c = self.value(*input).last_dim();
                let len = g.last_dim();
                let mut d = vec![0.0; self.value(*input).len()];
                for (i, row) in g.data().chunks(len).enumerate() {
                    d[i * c + start..i * c + start + len].copy_from_slice(row);
                }
                acc(*input, Tensor::from_parts(self.dims(*input).to_vec(), d));
            }
            Op::SliceRows { input, start } => {
                let c = self.value(*input).last_dim();
                let mut d = vec![0.0; self.value(*input).len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*input, Tensor::from_parts(self.dims(*input).to_vec(), d));
            }
            Op::GatherRows { table, indices } => {
                let c = self.value(*table).last_dim();
                let mut d = vec![0.0; self.value(*table).len()];
                for (row, &i) in g.data().chunks(c).zip(indices) {
                    for (x, y) in d[i * c..(i + 1) * c].iter_mut().zip(row) {
                        *x += y;
                    }
                }
                acc(*table, Tensor::from_parts(self.dims(*table).to_vec(), d));
            }
            Op::LiftHistory { input, n } => {
                let (t_len, d_len) = self.value(*input).as_matrix("lift_history")?;
                let n = *n;
                let gd = g.data();
                let mut d = vec![0.0; t_len * d_len];
                for t in 0..t_len {
                    for k in 0..n {
                        let s = (t + 1 + k).saturating_sub(n);
                        for i in 0..d_len {
                            d[s * d_len + i] += gd[(t * d_len + i) * n + k];
                        }
                    }
                }
                acc(*input, Tensor::from_parts(vec![t_len, d_len], d));
            }
            Op::SelectLast { input, k } => {
                let c = self.value(*input).last_dim();
                let mut d = vec![0.0; self.value(*input).len()];
                for (i, &gv) in g.data().iter().enumerate() {
                    d[i * c + k] = gv;
                }
                acc(*input, Tensor::from_parts(self.dims(*input).to_vec(), d));
            }
            Op::EmaScan { input, lambda } => {
                // carry[t] = g[t] + lambda * carry[t+1]; d a[t] = (1 - lambda) * carry[t]
                let steps = self.dims(*input)[0];
                let block = g.len() / steps;
                let mut d = vec![0.0; g.len()];
                let mut carry = vec![0.0; block];
                for t in (0..steps).rev() {
                    let gt = &g.data()[t * block..(t + 1) * block];
                    for (j, c) in carry.iter_mut().enumerate() {
                        *c = gt[j] + lambda * *c;
                        d[t * block + j] = (1.0 - lambda) * *c;
                    }
                }
                acc(*input, Tensor::from_parts(self.dims(*input).to_vec(), d));
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                acc(*a, Tensor::filled(self.dims(*a), gv));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.value(*a).as_matrix("mean_rows")?;
                let scale = 1.0 / r as f64;
                let mut d = Vec::with_capacity(r * c);
                for _ in 0..r {
                    d.extend(g.data().iter().map(|x| x * scale));
                }
                acc(*a, Tensor::from_parts(vec![r, c], d));
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_parts(
        a.dims().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect(),
    )
}

/// Mean-centred, variance-scaled copy of `row` and its inverse std.
pub(crate) fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    (row.iter().map(|x| (x - mean) * inv).collect(), inv)
}

/// Row softmax with per-row max subtraction.
pub(crate) fn softmax_last(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let c = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for (r, (orow, xrow)) in out.chunks_mut(c).zip(x.data().chunks(c)).enumerate() {
        let keep = |j: usize| mask.is_none_or(|m| m[r * c + j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xrow.iter().enumerate() {
            if keep(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            if mask.is_none() {
                return Err(KgcmError::shape("softmax", "empty row"));
            }
            continue;
        }
        let mut total = 0.0;
        for (j, &v) in xrow.iter().enumerate() {
            if keep(j) {
                let e = (v - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for o in orow.iter_mut() {
            *o /= total;
        }
    }
    Ok(Tensor::from_parts(x.dims().to_vec(), out))
}
