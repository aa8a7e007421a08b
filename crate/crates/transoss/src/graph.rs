//! Define-by-run reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is a tape: every op executes eagerly, records its inputs, and
//! pushes the result. [`Graph::backward`] walks the tape in reverse and
//! accumulates vector-Jacobian products. The op set is exactly what the
//! encoder and the three losses need; there is no general broadcasting.
//!
//! Graphs are rebuilt each forward pass and confined to one thread. All
//! arithmetic is straight-line scalar code, so results are bitwise
//! deterministic for a given input.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// GELU evaluation form. Exact-erf is the default; the tanh approximation
/// exists for parity experiments and diverges from exact in the 1e-3 range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeluForm {
    ExactErf,
    Tanh,
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRowBroadcast { x: NodeId, row: NodeId },
    ScaleConst { x: NodeId, c: F },
    AddConst { x: NodeId },
    MulScalar { x: NodeId, s: NodeId },
    Exp { x: NodeId },
    Relu { x: NodeId },
    Gelu { x: NodeId, form: GeluForm },
    SqrtEps { x: NodeId },
    SumAll { x: NodeId },
    ConcatRows { xs: Vec<NodeId> },
    ConcatCols { xs: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize },
    SliceCols { x: NodeId, start: usize },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: F },
    CrossEntropyRows { logits: NodeId, targets: Vec<usize> },
    L2NormalizeRows { x: NodeId },
}

fn op_label<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRowBroadcast { .. } => "add_row_broadcast",
        Op::ScaleConst { .. } => "scale_const",
        Op::AddConst { .. } => "add_const",
        Op::MulScalar { .. } => "mul_scalar",
        Op::Exp { .. } => "exp",
        Op::Relu { .. } => "relu",
        Op::Gelu { .. } => "gelu",
        Op::SqrtEps { .. } => "sqrt_eps",
        Op::SumAll { .. } => "sum_all",
        Op::ConcatRows { .. } => "concat_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::SliceCols { .. } => "slice_cols",
        Op::SoftmaxRows { .. } => "softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CrossEntropyRows { .. } => "cross_entropy_rows",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
    }
}

/// Reverse-mode tape. One per forward pass.
pub struct Graph<F: Scalar = f64> {
    ops: Vec<Op<F>>,
    values: Vec<Tensor<F>>,
    grads: Vec<Vec<F>>,
    backward_run: bool,
    grad_corruption: Option<(String, F)>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            backward_run: false,
            grad_corruption: None,
        }
    }

    /// Debug fixture: during backward, scale the gradient flowing out of
    /// every op with this label. Implants a known gradient bug so the
    /// verification harness can prove it detects one.
    pub fn corrupt_op_gradient(&mut self, op_label: &str, scale: F) {
        self.grad_corruption = Some((op_label.to_string(), scale));
    }

    /// Labels accepted by [`Graph::corrupt_op_gradient`].
    pub fn op_labels() -> &'static [&'static str] {
        &[
            "matmul",
            "transpose",
            "add",
            "sub",
            "mul",
            "add_row_broadcast",
            "scale_const",
            "add_const",
            "mul_scalar",
            "exp",
            "relu",
            "gelu",
            "sqrt_eps",
            "sum_all",
            "concat_rows",
            "concat_cols",
            "slice_rows",
            "slice_cols",
            "softmax_rows",
            "layer_norm",
            "cross_entropy_rows",
            "l2_normalize_rows",
        ]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> NodeId {
        let id = NodeId(self.values.len());
        self.grads.push(vec![F::zero(); value.numel()]);
        self.values.push(value);
        self.ops.push(op);
        id
    }

    /// Record an input tensor. Gradients are accumulated for every node;
    /// the `requires_grad` flag on the tensor is the caller's bookkeeping.
    pub fn leaf(&mut self, t: Tensor<F>) -> NodeId {
        self.push(Op::Leaf, t)
    }

    /// Convenience leaf from raw parts, no gradient tracking intent.
    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<F>) -> NodeId {
        self.leaf(Tensor::from_vec(shape, data))
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.values[id.0]
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> &[F] {
        &self.grads[id.0]
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> F {
        let t = &self.values[id.0];
        debug_assert_eq!(t.numel(), 1, "scalar() on node of shape {:?}", t.shape());
        t.data()[0]
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.values[id.0].shape();
        if s.len() != 2 {
            return Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![0, 0],
            });
        }
        Ok((s[0], s[1]))
    }

    // ── op constructors ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        let out = matmul_raw(
            self.values[a.0].data(),
            self.values[b.0].data(),
            m,
            k,
            n,
        );
        Ok(self.push(Op::MatMul { a, b }, Tensor::from_vec(vec![m, n], out)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "transpose")?;
        let xd = self.values[x.0].data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xd[i * c + j];
            }
        }
        Ok(self.push(Op::Transpose { x }, Tensor::from_vec(vec![c, r], out)))
    }

    fn elementwise_pair(
        &mut self,
        a: NodeId,
        b: NodeId,
        op_name: &'static str,
    ) -> Result<()> {
        if self.values[a.0].shape() != self.values[b.0].shape() {
            return Err(Error::Dimension {
                op: op_name,
                lhs: self.values[a.0].shape().to_vec(),
                rhs: self.values[b.0].shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "add")?;
        let out: Vec<F> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::from_vec(shape, out)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "sub")?;
        let out: Vec<F> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(Op::Sub { a, b }, Tensor::from_vec(shape, out)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair(a, b, "mul")?;
        let out: Vec<F> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.values[a.0].shape().to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::from_vec(shape, out)))
    }

    /// `x[r×c] + row[1×c]`, the bias pattern of every linear layer.
    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "add_row_broadcast")?;
        if self.values[row.0].numel() != c {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                lhs: vec![r, c],
                rhs: self.values[row.0].shape().to_vec(),
            });
        }
        let xd = self.values[x.0].data();
        let rd = self.values[row.0].data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(xd[i * c + j] + rd[j]);
            }
        }
        Ok(self.push(Op::AddRowBroadcast { x, row }, Tensor::from_vec(vec![r, c], out)))
    }

    pub fn scale_const(&mut self, x: NodeId, c: F) -> NodeId {
        let out: Vec<F> = self.values[x.0].data().iter().map(|&v| v * c).collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::ScaleConst { x, c }, Tensor::from_vec(shape, out))
    }

    pub fn add_const(&mut self, x: NodeId, c: F) -> NodeId {
        let out: Vec<F> = self.values[x.0].data().iter().map(|&v| v + c).collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::AddConst { x }, Tensor::from_vec(shape, out))
    }

    /// Multiply every element of `x` by the single-element node `s`.
    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.values[s.0].numel() != 1 {
            return Err(Error::Dimension {
                op: "mul_scalar",
                lhs: self.values[x.0].shape().to_vec(),
                rhs: self.values[s.0].shape().to_vec(),
            });
        }
        let sv = self.values[s.0].data()[0];
        let out: Vec<F> = self.values[x.0].data().iter().map(|&v| v * sv).collect();
        let shape = self.values[x.0].shape().to_vec();
        Ok(self.push(Op::MulScalar { x, s }, Tensor::from_vec(shape, out)))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out: Vec<F> = self.values[x.0].data().iter().map(|&v| v.exp()).collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::Exp { x }, Tensor::from_vec(shape, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<F> = self.values[x.0]
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::Relu { x }, Tensor::from_vec(shape, out))
    }

    pub fn gelu(&mut self, x: NodeId, form: GeluForm) -> NodeId {
        let out: Vec<F> = self.values[x.0]
            .data()
            .iter()
            .map(|&v| gelu_value(v, form))
            .collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::Gelu { x, form }, Tensor::from_vec(shape, out))
    }

    /// `sqrt(x + eps)` elementwise; `eps > 0` keeps the derivative finite
    /// at `x = 0` (used for Euclidean distances between coincident points).
    pub fn sqrt_eps(&mut self, x: NodeId, eps: F) -> NodeId {
        let out: Vec<F> = self.values[x.0]
            .data()
            .iter()
            .map(|&v| (v + eps).sqrt())
            .collect();
        let shape = self.values[x.0].shape().to_vec();
        self.push(Op::SqrtEps { x }, Tensor::from_vec(shape, out))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = F::zero();
        for &v in self.values[x.0].data() {
            s += v;
        }
        self.push(Op::SumAll { x }, Tensor::from_vec(vec![1], vec![s]))
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat_rows of zero nodes".into()));
        }
        let (_, c0) = self.dims2(xs[0], "concat_rows")?;
        let mut rows = 0;
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_rows")?;
            if c != c0 {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.values[xs[0].0].shape().to_vec(),
                    rhs: self.values[x.0].shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * c0);
        for &x in xs {
            out.extend_from_slice(self.values[x.0].data());
        }
        Ok(self.push(
            Op::ConcatRows { xs: xs.to_vec() },
            Tensor::from_vec(vec![rows, c0], out),
        ))
    }

    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat_cols of zero nodes".into()));
        }
        let (r0, _) = self.dims2(xs[0], "concat_cols")?;
        let mut cols = 0;
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_cols")?;
            if r != r0 {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.values[xs[0].0].shape().to_vec(),
                    rhs: self.values[x.0].shape().to_vec(),
                });
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(r0 * cols);
        for i in 0..r0 {
            for &x in xs {
                let (_, c) = self.dims2(x, "concat_cols")?;
                let d = self.values[x.0].data();
                out.extend_from_slice(&d[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(
            Op::ConcatCols { xs: xs.to_vec() },
            Tensor::from_vec(vec![r0, cols], out),
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Invalid(format!(
                "slice_rows [{start}, {}) out of {r} rows",
                start + len
            )));
        }
        let d = self.values[x.0].data();
        let out = d[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows { x, start }, Tensor::from_vec(vec![len, c], out)))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Invalid(format!(
                "slice_cols [{start}, {}) out of {c} cols",
                start + len
            )));
        }
        let d = self.values[x.0].data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&d[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Op::SliceCols { x, start }, Tensor::from_vec(vec![r, len], out)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "softmax_rows")?;
        let d = self.values[x.0].data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] = out[i * c + j] / z;
            }
        }
        Ok(self.push(Op::SoftmaxRows { x }, Tensor::from_vec(vec![r, c], out)))
    }

    /// Per-row normalization to zero mean / unit variance, then `gamma`
    /// scale and `beta` shift. Variance is the biased (1/D) estimate.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: F,
    ) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.values[gamma.0].numel() != c || self.values[beta.0].numel() != c {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.values[gamma.0].shape().to_vec(),
            });
        }
        let d = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let cn = F::of_f64(c as f64);
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mut mean = F::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / cn;
            let mut var = F::zero();
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var = var / cn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta, eps },
            Tensor::from_vec(vec![r, c], out),
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed via a
    /// max-subtracted log-sum-exp.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (n, c) = self.dims2(logits, "cross_entropy_rows")?;
        if targets.len() != n {
            return Err(Error::Invalid(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::ClassIndex {
                    index: t,
                    classes: c,
                    row,
                });
            }
        }
        let d = self.values[logits.0].data();
        let mut total = F::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &d[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for &v in row {
                z += (v - m).exp();
            }
            total += m + z.ln() - row[t];
        }
        let loss = total / F::of_f64(n as f64);
        Ok(self.push(
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::from_vec(vec![1], vec![loss]),
        ))
    }

    /// Scale each row to unit Euclidean norm. Rows with norm below 1e-12
    /// are rejected: a zero feature has no direction.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims2(x, "l2_normalize_rows")?;
        let d = self.values[x.0].data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &d[i * c..(i + 1) * c];
            let mut sq = F::zero();
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm < F::of_f64(1e-12) {
                return Err(Error::DegenerateFeature {
                    row: i,
                    norm: norm.as_f64(),
                });
            }
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        Ok(self.push(Op::L2NormalizeRows { x }, Tensor::from_vec(vec![r, c], out)))
    }

    // ── reverse pass ──────────────────────────────────────────────────

    /// Accumulate gradients of `root` with respect to every node.
    /// `root` must be a single-element node; a tape runs backward once.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if root.0 >= self.values.len() {
            return Err(Error::DetachedNode(root.0));
        }
        if self.values[root.0].numel() != 1 {
            return Err(Error::NonScalarRoot(self.values[root.0].shape().to_vec()));
        }
        if self.backward_run {
            return Err(Error::BackwardReused);
        }
        self.backward_run = true;
        self.grads[root.0][0] = F::one();

        for i in (0..self.ops.len()).rev() {
            if self.grads[i].iter().all(|v| *v == F::zero()) {
                continue;
            }
            let mut g = self.grads[i].clone();
            let op = self.ops[i].clone();
            if let Some((label, scale)) = &self.grad_corruption {
                if op_label(&op) == label {
                    let s = *scale;
                    for v in &mut g {
                        *v *= s;
                    }
                }
            }
            self.backprop_node(i, &op, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.values[a.0].shape();
                    (s[0], s[1])
                };
                let n = self.values[b.0].shape()[1];
                let (av, bv) = (self.values[a.0].data().to_vec(), self.values[b.0].data().to_vec());
                {
                    let da = &mut self.grads[a.0];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = F::zero();
                            for j in 0..n {
                                s += g[r * n + j] * bv[p * n + j];
                            }
                            da[r * k + p] += s;
                        }
                    }
                }
                {
                    let db = &mut self.grads[b.0];
                    for p in 0..k {
                        for j in 0..n {
                            let mut s = F::zero();
                            for r in 0..m {
                                s += av[r * k + p] * g[r * n + j];
                            }
                            db[p * n + j] += s;
                        }
                    }
                }
            }
            Op::Transpose { x } => {
                let (c, r) = {
                    let s = self.values[i].shape();
                    (s[0], s[1])
                };
                let dx = &mut self.grads[x.0];
                for a in 0..c {
                    for b in 0..r {
                        dx[b * c + a] += g[a * r + b];
                    }
                }
            }
            Op::Add { a, b } => {
                for (dst, &gv) in self.grads[a.0].iter_mut().zip(g) {
                    *dst += gv;
                }
                for (dst, &gv) in self.grads[b.0].iter_mut().zip(g) {
                    *dst += gv;
                }
            }
            Op::Sub { a, b } => {
                for (dst, &gv) in self.grads[a.0].iter_mut().zip(g) {
                    *dst += gv;
                }
                for (dst, &gv) in self.grads[b.0].iter_mut().zip(g) {
                    *dst -= gv;
                }
            }
            Op::Mul { a, b } => {
                let bv = self.values[b.0].data().to_vec();
                for ((dst, &gv), &ov) in self.grads[a.0].iter_mut().zip(g).zip(&bv) {
                    *dst += gv * ov;
                }
                let av = self.values[a.0].data().to_vec();
                for ((dst, &gv), &ov) in self.grads[b.0].iter_mut().zip(g).zip(&av) {
                    *dst += gv * ov;
                }
            }
            Op::AddRowBroadcast { x, row } => {
                for (dst, &gv) in self.grads[x.0].iter_mut().zip(g) {
                    *dst += gv;
                }
                let c = self.values[row.0].numel();
                let r = self.values[x.0].shape()[0];
                let drow = &mut self.grads[row.0];
                for ri in 0..r {
                    for j in 0..c {
                        drow[j] += g[ri * c + j];
                    }
                }
            }
            Op::ScaleConst { x, c } => {
                for (dst, &gv) in self.grads[x.0].iter_mut().zip(g) {
                    *dst += gv * c;
                }
            }
            Op::AddConst { x } => {
                for (dst, &gv) in self.grads[x.0].iter_mut().zip(g) {
                    *dst += gv;
                }
            }
            Op::MulScalar { x, s } => {
                let sv = self.values[s.0].data()[0];
                let xv = self.values[x.0].data().to_vec();
                for (dst, &gv) in self.grads[x.0].iter_mut().zip(g) {
                    *dst += gv * sv;
                }
                let mut acc = F::zero();
                for (&gv, &xvv) in g.iter().zip(&xv) {
                    acc += gv * xvv;
                }
                self.grads[s.0][0] += acc;
            }
            Op::Exp { x } => {
                let yv = self.values[i].data().to_vec();
                for ((dst, &gv), &y) in self.grads[x.0].iter_mut().zip(g).zip(&yv) {
                    *dst += gv * y;
                }
            }
            Op::Relu { x } => {
                let xv = self.values[x.0].data().to_vec();
                for ((dst, &gv), &v) in self.grads[x.0].iter_mut().zip(g).zip(&xv) {
                    if v > F::zero() {
                        *dst += gv;
                    }
                }
            }
            Op::Gelu { x, form } => {
                let xv = self.values[x.0].data().to_vec();
                for ((dst, &gv), &v) in self.grads[x.0].iter_mut().zip(g).zip(&xv) {
                    *dst += gv * gelu_derivative(v, form);
                }
            }
            Op::SqrtEps { x } => {
                let yv = self.values[i].data().to_vec();
                let half = F::of_f64(0.5);
                for ((dst, &gv), &y) in self.grads[x.0].iter_mut().zip(g).zip(&yv) {
                    *dst += gv * half / y;
                }
            }
            Op::SumAll { x } => {
                let gv = g[0];
                for dst in self.grads[x.0].iter_mut() {
                    *dst += gv;
                }
            }
            Op::ConcatRows { ref xs } => {
                let mut off = 0;
                for &x in xs {
                    let n = self.values[x.0].numel();
                    for (dst, &gv) in self.grads[x.0].iter_mut().zip(&g[off..off + n]) {
                        *dst += gv;
                    }
                    off += n;
                }
            }
            Op::ConcatCols { ref xs } => {
                let r = self.values[xs[0].0].shape()[0];
                let total_c = self.values[i].shape()[1];
                let mut off = 0;
                for &x in xs {
                    let c = self.values[x.0].shape()[1];
                    let dx = &mut self.grads[x.0];
                    for ri in 0..r {
                        for j in 0..c {
                            dx[ri * c + j] += g[ri * total_c + off + j];
                        }
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = self.values[x.0].shape()[1];
                let dx = &mut self.grads[x.0];
                for (idx, &gv) in g.iter().enumerate() {
                    dx[start * c + idx] += gv;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.values[x.0].shape()[1];
                let len = self.values[i].shape()[1];
                let r = self.values[i].shape()[0];
                let dx = &mut self.grads[x.0];
                for ri in 0..r {
                    for j in 0..len {
                        dx[ri * c + start + j] += g[ri * len + j];
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let (r, c) = {
                    let s = self.values[i].shape();
                    (s[0], s[1])
                };
                let yv = self.values[i].data().to_vec();
                let dx = &mut self.grads[x.0];
                for ri in 0..r {
                    let y = &yv[ri * c..(ri + 1) * c];
                    let gr = &g[ri * c..(ri + 1) * c];
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot += gr[j] * y[j];
                    }
                    for j in 0..c {
                        dx[ri * c + j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = {
                    let s = self.values[x.0].shape();
                    (s[0], s[1])
                };
                let xv = self.values[x.0].data().to_vec();
                let gam = self.values[gamma.0].data().to_vec();
                let cn = F::of_f64(c as f64);
                let mut dgamma = vec![F::zero(); c];
                let mut dbeta = vec![F::zero(); c];
                {
                    let dx = &mut self.grads[x.0];
                    for ri in 0..r {
                        let row = &xv[ri * c..(ri + 1) * c];
                        let gr = &g[ri * c..(ri + 1) * c];
                        let mut mean = F::zero();
                        for &v in row {
                            mean += v;
                        }
                        mean = mean / cn;
                        let mut var = F::zero();
                        for &v in row {
                            let dv = v - mean;
                            var += dv * dv;
                        }
                        var = var / cn;
                        let inv = (var + eps).sqrt().recip();
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gr[j] * gam[j];
                            dgamma[j] += gr[j] * xhat;
                            dbeta[j] += gr[j];
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat = mean_dxhat / cn;
                        mean_dxhat_xhat = mean_dxhat_xhat / cn;
                        for j in 0..c {
                            let xhat = (row[j] - mean) * inv;
                            let dxhat = gr[j] * gam[j];
                            dx[ri * c + j] +=
                                (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv;
                        }
                    }
                }
                for (dst, v) in self.grads[gamma.0].iter_mut().zip(dgamma) {
                    *dst += v;
                }
                for (dst, v) in self.grads[beta.0].iter_mut().zip(dbeta) {
                    *dst += v;
                }
            }
            Op::CrossEntropyRows { logits, ref targets } => {
                let (n, c) = {
                    let s = self.values[logits.0].shape();
                    (s[0], s[1])
                };
                let lv = self.values[logits.0].data().to_vec();
                let scale = g[0] / F::of_f64(n as f64);
                let dl = &mut self.grads[logits.0];
                for (ri, &t) in targets.iter().enumerate() {
                    let row = &lv[ri * c..(ri + 1) * c];
                    let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for &v in row {
                        z += (v - m).exp();
                    }
                    for j in 0..c {
                        let p = (row[j] - m).exp() / z;
                        let ind = if j == t { F::one() } else { F::zero() };
                        dl[ri * c + j] += scale * (p - ind);
                    }
                }
            }
            Op::L2NormalizeRows { x } => {
                let (r, c) = {
                    let s = self.values[x.0].shape();
                    (s[0], s[1])
                };
                let xv = self.values[x.0].data().to_vec();
                let yv = self.values[i].data().to_vec();
                let dx = &mut self.grads[x.0];
                for ri in 0..r {
                    let row = &xv[ri * c..(ri + 1) * c];
                    let y = &yv[ri * c..(ri + 1) * c];
                    let gr = &g[ri * c..(ri + 1) * c];
                    let mut sq = F::zero();
                    for &v in row {
                        sq += v * v;
                    }
                    let norm = sq.sqrt();
                    let mut dot = F::zero();
                    for j in 0..c {
                        dot += gr[j] * y[j];
                    }
                    for j in 0..c {
                        dx[ri * c + j] += (gr[j] - y[j] * dot) / norm;
                    }
                }
            }
        }
    }
}

fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn gelu_value<F: Scalar>(x: F, form: GeluForm) -> F {
    let half = F::of_f64(0.5);
    match form {
        GeluForm::ExactErf => {
            let inv_sqrt2 = F::of_f64(std::f64::consts::FRAC_1_SQRT_2);
            half * x * (F::one() + (x * inv_sqrt2).erf())
        }
        GeluForm::Tanh => {
            let c = F::of_f64((2.0 / std::f64::consts::PI).sqrt());
            let a = F::of_f64(0.044715);
            let u = c * (x + a * x * x * x);
            half * x * (F::one() + u.tanh())
        }
    }
}

fn gelu_derivative<F: Scalar>(x: F, form: GeluForm) -> F {
    let half = F::of_f64(0.5);
    match form {
        GeluForm::ExactErf => {
            let inv_sqrt2 = F::of_f64(std::f64::consts::FRAC_1_SQRT_2);
            let phi_cdf = half * (F::one() + (x * inv_sqrt2).erf());
            let inv_sqrt_2pi = F::of_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
            let pdf = inv_sqrt_2pi * (-half * x * x).exp();
            phi_cdf + x * pdf
        }
        GeluForm::Tanh => {
            let c = F::of_f64((2.0 / std::f64::consts::PI).sqrt());
            let a = F::of_f64(0.044715);
            let three = F::of_f64(3.0);
            let u = c * (x + a * x * x * x);
            let t = u.tanh();
            let du = c * (F::one() + three * a * x * x);
            half * (F::one() + t) + half * x * (F::one() - t * t) * du
        }
    }
}
