//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A fresh graph is built per training step: leaves are registered with
//! [`Tape::param`]/[`Tape::constant`], ops compute their forward value
//! eagerly and record enough to replay the chain rule in reverse.
//!
//! Gradient contract: each [`Tape::backward`] call propagates through a
//! pass-local scratch buffer (zeroed at the start of the pass) and then
//! adds the result into the persistent per-node accumulators, so calling
//! `backward` twice without [`Tape::zero_grads`] yields exactly twice the
//! gradient.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

// Parent edges are kept on every op (including gradient-blocking ones) so
// the recorded graph stays complete for inspection.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    StopGrad { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, k: f64 },
    AddConst { a: Var, c: f64 },
    MatMul { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    BAdd { a: Var, s: Var },
    BMul { a: Var, s: Var },
    Exp { a: Var },
    Ln { a: Var },
    Tanh { a: Var },
    Softplus { a: Var },
    Sigmoid { a: Var },
    Square { a: Var },
    Sqrt { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Huber { a: Var, delta: f64 },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumRows { a: Var },
    LogSumExpRows { a: Var },
    SliceLast { a: Var, start: usize, len: usize },
    ConcatLast { parts: Vec<Var> },
    SliceRows { a: Var, start: usize, len: usize },
    Reshape { a: Var },
    GatherCols { a: Var, idx: Vec<usize> },
    ScatterCols { a: Var, idx: Vec<usize>, out_cols: usize },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGrad { .. } => "stop_gradient",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::MatMul { .. } => "matmul",
            Op::AddRow { .. } => "add_row",
            Op::MulRow { .. } => "mul_row",
            Op::BAdd { .. } => "broadcast_add",
            Op::BMul { .. } => "broadcast_mul",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "log",
            Op::Tanh { .. } => "tanh",
            Op::Softplus { .. } => "softplus",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Square { .. } => "square",
            Op::Sqrt { .. } => "sqrt",
            Op::Clamp { .. } => "clamp",
            Op::Huber { .. } => "huber",
            Op::SumAll { .. } => "sum",
            Op::MeanAll { .. } => "mean",
            Op::SumRows { .. } => "sum_rows",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
            Op::SliceLast { .. } => "slice",
            Op::ConcatLast { .. } => "concat",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape { .. } => "reshape",
            Op::GatherCols { .. } => "gather_cols",
            Op::ScatterCols { .. } => "scatter_cols",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    /// Accumulated gradient across backward passes.
    grad: Option<Tensor>,
    param: bool,
}

/// Dynamic Wengert tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    numeric_failure: Option<(&'static str, String)>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new(), numeric_failure: None }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, grad: None, param: false });
        Var(id)
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].param = true;
        self.params.push(v);
        v
    }

    /// Register a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zeros if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    pub fn registered_params(&self) -> &[Var] {
        &self.params
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record_failure(&mut self, op: &'static str, detail: String) {
        if self.numeric_failure.is_none() {
            self.numeric_failure = Some((op, detail));
        }
    }

    /// First numeric failure recorded during forward construction, if any.
    pub fn numeric_failure(&self) -> Option<Error> {
        self.numeric_failure
            .as_ref()
            .map(|(op, detail)| Error::numeric(op, detail.clone()))
    }

    // ── Op builders ──────────────────────────────────────────────────

    /// Forward identity; blocks all gradient flow into ancestors of `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGrad { a })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "add shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "sub shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "mul shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        self.push(value, Op::Scale { a, k })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddConst { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rank(), 2, "matmul lhs must be rank 2");
        assert_eq!(tb.rank(), 2, "matmul rhs must be rank 2");
        assert_eq!(ta.shape()[1], tb.shape()[0], "matmul inner dim mismatch");
        let (r, c) = (ta.shape()[0], tb.shape()[1]);
        let mut out = vec![0.0; r * c];
        matmul(ta, tb, &mut out);
        self.push(Tensor::matrix(r, c, out), Op::MatMul { a, b })
    }

    /// `a[r,c] + row[c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tr.numel(), ta.shape()[1], "add_row width mismatch");
        let c = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::AddRow { a, row })
    }

    /// `a[r,c] * row[c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(ta.rank(), 2);
        assert_eq!(tr.numel(), ta.shape()[1], "mul_row width mismatch");
        let c = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tr.data()[i % c])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(value, Op::MulRow { a, row })
    }

    /// `a + s` with scalar `s` broadcast over every element of `a`.
    pub fn badd(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "badd scalar must have one element");
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x + sv);
        self.push(value, Op::BAdd { a, s })
    }

    /// `a * s` with scalar `s` broadcast over every element of `a`.
    pub fn bmul(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "bmul scalar must have one element");
        let sv = self.value(s).data()[0];
        let value = self.value(a).map(|x| x * sv);
        self.push(value, Op::BMul { a, s })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        if !value.is_finite() {
            self.record_failure("exp", "overflow to non-finite value".into());
        }
        self.push(value, Op::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            self.record_failure("log", format!("non-positive input {bad}"));
        }
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh { a })
    }

    /// ln(1 + e^x), computed as max(x,0) + ln1p(e^{-|x|}).
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        self.push(value, Op::Softplus { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid { a })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        if let Some(&bad) = self.value(a).data().iter().find(|&&x| x < 0.0) {
            self.record_failure("sqrt", format!("negative input {bad}"));
        }
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt { a })
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp { a, lo, hi })
    }

    /// Elementwise Huber penalty: ½x² for |x| ≤ δ, δ(|x| − δ/2) beyond.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        assert!(delta > 0.0, "huber delta must be positive");
        let value = self.value(a).map(|x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        });
        self.push(value, Op::Huber { a, delta })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = crate::tensor::pairwise_sum(self.value(a).data());
        self.push(Tensor::scalar(s), Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = crate::tensor::pairwise_sum(t.data()) / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll { a })
    }

    /// Sum along the last axis of a rank-2 tensor: `[r,c] -> [r]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "sum_rows needs rank 2");
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = (0..r)
            .map(|i| crate::tensor::pairwise_sum(&t.data()[i * c..(i + 1) * c]))
            .collect();
        self.push(Tensor::vector(data), Op::SumRows { a })
    }

    /// Row-wise logsumexp of a rank-2 tensor: `[r,c] -> [r]`, overflow-safe.
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2, "logsumexp_rows needs rank 2");
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = (0..r)
            .map(|i| crate::tensor::logsumexp(&t.data()[i * c..(i + 1) * c]))
            .collect();
        self.push(Tensor::vector(data), Op::LogSumExpRows { a })
    }

    /// Slice `len` entries starting at `start` along the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let c = t.cols();
        assert!(start + len <= c, "slice [{start}, {}) out of width {c}", start + len);
        let value = match t.rank() {
            1 => Tensor::vector(t.data()[start..start + len].to_vec()),
            2 => {
                let r = t.shape()[0];
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
                }
                Tensor::matrix(r, len, data)
            }
            n => panic!("slice_last on rank-{n} tensor"),
        };
        self.push(value, Op::SliceLast { a, start, len })
    }

    /// Concatenate along the last axis. All parts must share rank and leading dim.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let rank = self.value(parts[0]).rank();
        let value = match rank {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    assert_eq!(self.value(p).rank(), 1);
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::vector(data)
            }
            2 => {
                let r = self.value(parts[0]).shape()[0];
                let total_c: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
                let mut data = Vec::with_capacity(r * total_c);
                for i in 0..r {
                    for &p in parts {
                        let t = self.value(p);
                        assert_eq!(t.shape()[0], r, "concat row mismatch");
                        let c = t.shape()[1];
                        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::matrix(r, total_c, data)
            }
            n => panic!("concat_last on rank-{n} tensor"),
        };
        self.push(value, Op::ConcatLast { parts: parts.to_vec() })
    }

    /// Same data, new shape (element count preserved).
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a);
        assert_eq!(
            t.numel(),
            shape.iter().product::<usize>(),
            "reshape to {:?} changes element count",
            shape
        );
        let value = Tensor::new(shape, t.data().to_vec());
        self.push(value, Op::Reshape { a })
    }

    /// Rows `start..start+len` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2);
        let (r, c) = (t.shape()[0], t.shape()[1]);
        assert!(start + len <= r);
        let data = t.data()[start * c..(start + len) * c].to_vec();
        self.push(Tensor::matrix(len, c, data), Op::SliceRows { a, start, len })
    }

    /// Select columns `idx` of a rank-2 tensor (order preserved, repeats allowed).
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2);
        let (r, c) = (t.shape()[0], t.shape()[1]);
        assert!(idx.iter().all(|&j| j < c), "gather index out of range");
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            data.extend(idx.iter().map(|&j| row[j]));
        }
        self.push(Tensor::matrix(r, idx.len(), data), Op::GatherCols { a, idx: idx.to_vec() })
    }

    /// Place columns of `a[r,m]` at positions `idx` in an `[r, out_cols]`
    /// tensor that is zero elsewhere.
    pub fn scatter_cols(&mut self, a: Var, idx: &[usize], out_cols: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rank(), 2);
        let (r, m) = (t.shape()[0], t.shape()[1]);
        assert_eq!(m, idx.len(), "scatter index count mismatch");
        assert!(idx.iter().all(|&j| j < out_cols), "scatter index out of range");
        let mut data = vec![0.0; r * out_cols];
        for i in 0..r {
            for (t_j, &o_j) in idx.iter().enumerate() {
                data[i * out_cols + o_j] = t.data()[i * m + t_j];
            }
        }
        self.push(
            Tensor::matrix(r, out_cols, data),
            Op::ScatterCols { a, idx: idx.to_vec(), out_cols },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Adds this pass's gradients into the
    /// persistent accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if let Some(err) = self.numeric_failure() {
            return Err(err);
        }
        let loss_t = self.value(loss);
        if loss_t.numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss_t.shape()
            )));
        }
        if !loss_t.data()[0].is_finite() {
            return Err(Error::numeric("backward", "loss is not finite"));
        }

        let mut scratch: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(d_out) = scratch[i].take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backward_op(i, &op, &d_out, &mut scratch)?;
            scratch[i] = Some(d_out);
        }

        // Fold the pass-local gradients into the accumulators.
        for (i, g) in scratch.into_iter().enumerate() {
            if let Some(g) = g {
                match &mut self.nodes[i].grad {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => self.nodes[i].grad = Some(g),
                }
            }
        }

        // Param gradients must be finite; if not, name the responsible region.
        for &p in &self.params {
            if let Some(g) = &self.nodes[p.0].grad {
                if !g.is_finite() {
                    return Err(Error::numeric("backward", "non-finite parameter gradient"));
                }
            }
        }
        Ok(())
    }

    fn accumulate(scratch: &mut [Option<Tensor>], v: Var, contribution: Tensor) {
        match &mut scratch[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_op(
        &self,
        node: usize,
        op: &Op,
        d_out: &Tensor,
        scratch: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::StopGrad { .. } => {}

            Op::Add { a, b } => {
                Self::accumulate(scratch, *a, d_out.clone());
                Self::accumulate(scratch, *b, d_out.clone());
            }
            Op::Sub { a, b } => {
                Self::accumulate(scratch, *a, d_out.clone());
                Self::accumulate(scratch, *b, d_out.map(|x| -x));
            }
            Op::Mul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out.data().iter().zip(tb.data()).map(|(d, y)| d * y).collect(),
                );
                let db = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out.data().iter().zip(ta.data()).map(|(d, x)| d * x).collect(),
                );
                Self::accumulate(scratch, *a, da);
                Self::accumulate(scratch, *b, db);
            }
            Op::Scale { a, k } => {
                Self::accumulate(scratch, *a, d_out.map(|x| k * x));
            }
            Op::AddConst { a, .. } => {
                Self::accumulate(scratch, *a, d_out.clone());
            }
            Op::MatMul { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                // dA = dOut @ B^T ; dB = A^T @ dOut
                let mut da = vec![0.0; ta.numel()];
                matmul_bt(d_out, tb, &mut da);
                let mut db = vec![0.0; tb.numel()];
                matmul_at(ta, d_out, &mut db);
                Self::accumulate(scratch, *a, Tensor::new(ta.shape().to_vec(), da));
                Self::accumulate(scratch, *b, Tensor::new(tb.shape().to_vec(), db));
            }
            Op::AddRow { a, row } => {
                Self::accumulate(scratch, *a, d_out.clone());
                let c = self.value(*row).numel();
                let mut dr = vec![0.0; c];
                for (i, d) in d_out.data().iter().enumerate() {
                    dr[i % c] += d;
                }
                let shape = self.value(*row).shape().to_vec();
                Self::accumulate(scratch, *row, Tensor::new(shape, dr));
            }
            Op::MulRow { a, row } => {
                let ta = self.value(*a);
                let trow = self.value(*row);
                let c = trow.numel();
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * trow.data()[i % c])
                        .collect(),
                );
                let mut dr = vec![0.0; c];
                for (i, d) in d_out.data().iter().enumerate() {
                    dr[i % c] += d * ta.data()[i];
                }
                Self::accumulate(scratch, *a, da);
                let shape = trow.shape().to_vec();
                Self::accumulate(scratch, *row, Tensor::new(shape, dr));
            }
            Op::BAdd { a, s } => {
                Self::accumulate(scratch, *a, d_out.clone());
                let ds = crate::tensor::pairwise_sum(d_out.data());
                Self::accumulate(scratch, *s, Tensor::scalar(ds));
            }
            Op::BMul { a, s } => {
                let sv = self.value(*s).data()[0];
                Self::accumulate(scratch, *a, d_out.map(|x| x * sv));
                let ta = self.value(*a);
                let prods: Vec<f64> =
                    d_out.data().iter().zip(ta.data()).map(|(d, x)| d * x).collect();
                Self::accumulate(scratch, *s, Tensor::scalar(crate::tensor::pairwise_sum(&prods)));
            }
            Op::Exp { a } => {
                // node value == e^a
                let out = &self.nodes[node].value;
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out.data().iter().zip(out.data()).map(|(d, o)| d * o).collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Ln { a } => {
                let ta = self.value(*a);
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out.data().iter().zip(ta.data()).map(|(d, x)| d / x).collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Tanh { a } => {
                let out = &self.nodes[node].value;
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(d, o)| d * (1.0 - o * o))
                        .collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Softplus { a } => {
                let ta = self.value(*a);
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(d, x)| d / (1.0 + (-x).exp()))
                        .collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Sigmoid { a } => {
                let out = &self.nodes[node].value;
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(d, o)| d * o * (1.0 - o))
                        .collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Square { a } => {
                let ta = self.value(*a);
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out.data().iter().zip(ta.data()).map(|(d, x)| 2.0 * d * x).collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Sqrt { a } => {
                let out = &self.nodes[node].value;
                // Subgradient 0 at exactly zero.
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(d, o)| if *o > 0.0 { d / (2.0 * o) } else { 0.0 })
                        .collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Clamp { a, lo, hi } => {
                let ta = self.value(*a);
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(d, x)| if *x >= *lo && *x <= *hi { *d } else { 0.0 })
                        .collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::Huber { a, delta } => {
                let ta = self.value(*a);
                let da = Tensor::new(
                    d_out.shape().to_vec(),
                    d_out
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(d, x)| {
                            let g = if x.abs() <= *delta { *x } else { delta * x.signum() };
                            d * g
                        })
                        .collect(),
                );
                Self::accumulate(scratch, *a, da);
            }
            Op::SumAll { a } => {
                let d = d_out.data()[0];
                let ta = self.value(*a);
                Self::accumulate(scratch, *a, Tensor::filled(ta.shape().to_vec(), d));
            }
            Op::MeanAll { a } => {
                let ta = self.value(*a);
                let d = d_out.data()[0] / ta.numel() as f64;
                Self::accumulate(scratch, *a, Tensor::filled(ta.shape().to_vec(), d));
            }
            Op::SumRows { a } => {
                let ta = self.value(*a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let d = d_out.data()[i];
                    for j in 0..c {
                        da[i * c + j] = d;
                    }
                }
                Self::accumulate(scratch, *a, Tensor::matrix(r, c, da));
            }
            Op::LogSumExpRows { a } => {
                let ta = self.value(*a);
                let out = &self.nodes[node].value;
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let d = d_out.data()[i];
                    let lse = out.data()[i];
                    for j in 0..c {
                        da[i * c + j] = d * (ta.data()[i * c + j] - lse).exp();
                    }
                }
                Self::accumulate(scratch, *a, Tensor::matrix(r, c, da));
            }
            Op::SliceLast { a, start, len } => {
                let ta = self.value(*a);
                let mut da = Tensor::zeros(ta.shape().to_vec());
                match ta.rank() {
                    1 => {
                        da.data_mut()[*start..start + len].copy_from_slice(d_out.data());
                    }
                    2 => {
                        let (r, c) = (ta.shape()[0], ta.shape()[1]);
                        for i in 0..r {
                            for j in 0..*len {
                                da.data_mut()[i * c + start + j] = d_out.data()[i * len + j];
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                Self::accumulate(scratch, *a, da);
            }
            Op::ConcatLast { parts } => match self.value(parts[0]).rank() {
                1 => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        let dp = Tensor::vector(d_out.data()[offset..offset + n].to_vec());
                        Self::accumulate(scratch, p, dp);
                        offset += n;
                    }
                }
                2 => {
                    let r = self.value(parts[0]).shape()[0];
                    let total_c = d_out.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[1];
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c].copy_from_slice(
                                &d_out.data()[i * total_c + offset..i * total_c + offset + c],
                            );
                        }
                        Self::accumulate(scratch, p, Tensor::matrix(r, c, dp));
                        offset += c;
                    }
                }
                _ => unreachable!(),
            },
            Op::SliceRows { a, start, len } => {
                let ta = self.value(*a);
                let c = ta.shape()[1];
                let mut da = Tensor::zeros(ta.shape().to_vec());
                da.data_mut()[start * c..(start + len) * c].copy_from_slice(d_out.data());
                Self::accumulate(scratch, *a, da);
            }
            Op::Reshape { a } => {
                let shape = self.value(*a).shape().to_vec();
                Self::accumulate(scratch, *a, Tensor::new(shape, d_out.data().to_vec()));
            }
            Op::GatherCols { a, idx } => {
                let ta = self.value(*a);
                let (r, c) = (ta.shape()[0], ta.shape()[1]);
                let m = idx.len();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for (t_j, &o_j) in idx.iter().enumerate() {
                        da[i * c + o_j] += d_out.data()[i * m + t_j];
                    }
                }
                Self::accumulate(scratch, *a, Tensor::matrix(r, c, da));
            }
            Op::ScatterCols { a, idx, out_cols } => {
                let ta = self.value(*a);
                let (r, m) = (ta.shape()[0], ta.shape()[1]);
                let mut da = vec![0.0; r * m];
                for i in 0..r {
                    for (t_j, &o_j) in idx.iter().enumerate() {
                        da[i * m + t_j] = d_out.data()[i * out_cols + o_j];
                    }
                }
                Self::accumulate(scratch, *a, Tensor::matrix(r, m, da));
            }
        }

        // Catch NaN as soon as an op sees it so the error names the op.
        if d_out.data().iter().any(|x| x.is_nan()) {
            return Err(Error::numeric(op.kind(), "NaN gradient"));
        }
        Ok(())
    }
}
