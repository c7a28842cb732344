//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every operation records its inputs and enough cached state to replay a
//! backward rule. Nodes are appended in execution order, so the tape is
//! topologically sorted by construction and [`Tape::backward`] is a single
//! reverse sweep.
//!
//! Gradients are accumulated in two stages: a backward call propagates the
//! seed through a scratch buffer, then adds the scratch into each node's
//! persistent gradient. Calling `backward` twice on the same tape therefore
//! accumulates exactly twice the single-pass gradient; persistent gradients
//! survive until [`Tape::zero_all_grads`].
//!
//! Long-lived parameters live outside the tape as [`Tensor`] values. A
//! forward pass copies them in via [`Tape::leaf`]; after backward, the
//! caller moves gradients back out with [`Tape::write_grad_to`].

use std::sync::Arc;

use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::TokenId;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    /// c[m,n] = a[m,k] * b[k,n]
    Matmul { a: Var, b: Var },
    /// y[t,dout] = x[t,din] * w[dout,din]^T
    Linear { x: Var, w: Var },
    Add { a: Var, b: Var },
    /// x[t,d] + row[d] broadcast over rows
    AddRow { x: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: S },
    Softmax { x: Var, axis: usize },
    /// Row-wise softmax over entries whose mask bit is set; masked-out
    /// entries are structurally zero and never touched by backward.
    MaskedRowSoftmax { x: Var, mask: Arc<Vec<bool>> },
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<TokenId>>,
        mask: Arc<Vec<bool>>,
        /// cached softmax of the logits, [t, v]
        probs: Vec<S>,
        n_masked: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// cached normalized activations, same shape as x
        xhat: Vec<S>,
        /// cached 1/sqrt(var + eps) per row
        inv_std: Vec<S>,
    },
    Gelu { x: Var },
    Embedding { table: Var, ids: Arc<Vec<TokenId>> },
    Transpose { x: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum { x: Var },
}

#[derive(Debug)]
struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    needs_grad: bool,
    op: Op<S>,
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, needs_grad: bool, op: Op<S>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.node(v).needs_grad
    }

    /// Copies a tensor onto the tape as a leaf. Whether gradients flow into
    /// it follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn leaf_from(
        &mut self,
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(self.push(shape, data, requires_grad, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).data
    }

    pub fn shape_of(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.node(v).grad.as_deref()
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor_of(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape consistent")
    }

    /// Adds the node's accumulated gradient into `target.grad`.
    pub fn write_grad_to(&self, v: Var, target: &mut Tensor<S>) {
        if let Some(g) = self.grad(v) {
            target.accumulate_grad(g);
        }
    }

    pub fn zero_all_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = &self.node(v).shape;
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: "a rank-2 tensor",
                shape: s.clone(),
            });
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Standard matrix product `a[m,k] * b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            false,
            false,
            m,
            ka,
            n,
            S::one(),
            &self.node(a).data,
            &self.node(b).data,
            S::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, needs, Op::Matmul { a, b }))
    }

    /// Projection `x[t,din] * w[dout,din]^T`, the layout used by all model
    /// weight matrices.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (t, din) = self.dims2(x, "linear")?;
        let (dout, win) = self.dims2(w, "linear")?;
        if din != win {
            return Err(TensorError::DimensionMismatch {
                op: "linear",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(w).shape.clone(),
            });
        }
        let mut out = vec![S::zero(); t * dout];
        // y = x * w^T: treat w as transposed operand of shape [din, dout]
        S::gemm(
            false,
            true,
            t,
            din,
            dout,
            S::one(),
            &self.node(x).data,
            &self.node(w).data,
            S::zero(),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(vec![t, dout], out, needs, Op::Linear { x, w }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| *x + *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Add { a, b }))
    }

    /// Adds a length-d row vector to every row of `x[t,d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (t, d) = self.dims2(x, "add_row")?;
        if self.node(row).shape != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "add_row",
                lhs: self.node(x).shape.clone(),
                rhs: self.node(row).shape.clone(),
            });
        }
        let mut data = self.node(x).data.clone();
        for r in 0..t {
            for c in 0..d {
                data[r * d + c] += self.node(row).data[c];
            }
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(vec![t, d], data, needs, Op::AddRow { x, row }))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.node(a).shape != self.node(b).shape {
            return Err(TensorError::DimensionMismatch {
                op: "multiply",
                lhs: self.node(a).shape.clone(),
                rhs: self.node(b).shape.clone(),
            });
        }
        let data = self
            .node(a)
            .data
            .iter()
            .zip(&self.node(b).data)
            .map(|(x, y)| *x * *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.node(a).shape.clone(), data, needs, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let data = self.node(x).data.iter().map(|v| *v * c).collect();
        let needs = self.needs(x);
        self.push(self.node(x).shape.clone(), data, needs, Op::Scale { x, c })
    }

    /// Numerically stable softmax along `axis`; every slice sums to 1.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.node(x).shape.clone();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                shape,
            });
        }
        let axis_len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = &self.node(x).data;
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |a: usize| o * axis_len * inner + a * inner + i;
                let mut mx = S::neg_infinity();
                for a in 0..axis_len {
                    mx = mx.max(src[idx(a)]);
                }
                let mut sum = S::zero();
                for a in 0..axis_len {
                    let e = (src[idx(a)] - mx).exp();
                    out[idx(a)] = e;
                    sum += e;
                }
                for a in 0..axis_len {
                    out[idx(a)] = out[idx(a)] / sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(shape, out, needs, Op::Softmax { x, axis }))
    }

    /// Row-wise softmax of `x[r,c]` restricted to positions where `mask`
    /// is true. Masked-out entries are exactly zero in the output, so
    /// downstream values are bit-for-bit independent of them.
    pub fn masked_row_softmax(
        &mut self,
        x: Var,
        mask: Arc<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "masked_row_softmax")?;
        if mask.len() != r * c {
            return Err(TensorError::DimensionMismatch {
                op: "masked_row_softmax",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        let src = &self.node(x).data;
        let mut out = vec![S::zero(); r * c];
        for row in 0..r {
            let base = row * c;
            let mut mx = S::neg_infinity();
            let mut any = false;
            for j in 0..c {
                if mask[base + j] {
                    mx = mx.max(src[base + j]);
                    any = true;
                }
            }
            if !any {
                return Err(TensorError::Contract(format!(
                    "masked_row_softmax: row {row} has no visible entries"
                )));
            }
            let mut sum = S::zero();
            for j in 0..c {
                if mask[base + j] {
                    let e = (src[base + j] - mx).exp();
                    out[base + j] = e;
                    sum += e;
                }
            }
            for j in 0..c {
                if mask[base + j] {
                    out[base + j] = out[base + j] / sum;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, c], out, needs, Op::MaskedRowSoftmax { x, mask }))
    }

    /// Mean over mask-selected positions of `-log softmax(logits)[target]`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[TokenId],
        loss_mask: &[bool],
    ) -> Result<Var, TensorError> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || loss_mask.len() != t {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: vec![t, v],
                rhs: vec![targets.len(), loss_mask.len()],
            });
        }
        for &id in targets {
            if id as usize >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: id as usize,
                    len: v,
                });
            }
        }
        let n_masked = loss_mask.iter().filter(|m| **m).count();
        if n_masked == 0 {
            return Err(TensorError::EmptyLossMask);
        }

        let src = &self.node(logits).data;
        let mut probs = vec![S::zero(); t * v];
        let mut nll_sum = S::zero();
        for row in 0..t {
            let base = row * v;
            let mut mx = S::neg_infinity();
            for j in 0..v {
                mx = mx.max(src[base + j]);
            }
            let mut sum = S::zero();
            for j in 0..v {
                let e = (src[base + j] - mx).exp();
                probs[base + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[base + j] = probs[base + j] / sum;
            }
            if loss_mask[row] {
                // -log softmax = log(sum) - (x - mx)
                nll_sum += sum.ln() - (src[base + targets[row] as usize] - mx);
            }
        }
        let loss = nll_sum / S::from_f64c(n_masked as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            needs,
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
                mask: Arc::new(loss_mask.to_vec()),
                probs,
                n_masked,
            },
        ))
    }

    /// Per-row layer normalization of `x[t,d]` with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: S,
    ) -> Result<Var, TensorError> {
        let (t, d) = self.dims2(x, "layer_norm")?;
        if self.node(gain).shape != [d] || self.node(bias).shape != [d] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: vec![t, d],
                rhs: self.node(gain).shape.clone(),
            });
        }
        let src = &self.node(x).data;
        let gain_d = &self.node(gain).data;
        let bias_d = &self.node(bias).data;
        let dn = S::from_f64c(d as f64);
        let mut xhat = vec![S::zero(); t * d];
        let mut inv_std = vec![S::zero(); t];
        let mut out = vec![S::zero(); t * d];
        for row in 0..t {
            let base = row * d;
            let mut mean = S::zero();
            for j in 0..d {
                mean += src[base + j];
            }
            mean = mean / dn;
            let mut var = S::zero();
            for j in 0..d {
                let dv = src[base + j] - mean;
                var += dv * dv;
            }
            var = var / dn;
            let is = (var + eps).sqrt().recip();
            inv_std[row] = is;
            for j in 0..d {
                let h = (src[base + j] - mean) * is;
                xhat[base + j] = h;
                out[base + j] = gain_d[j] * h + bias_d[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            vec![t, d],
            out,
            needs,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self.node(x).data.iter().map(|&v| gelu_fwd(v)).collect();
        let needs = self.needs(x);
        self.push(self.node(x).shape.clone(), data, needs, Op::Gelu { x })
    }

    /// Gathers rows of `table[vocab,d]` at the given ids.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[TokenId]) -> Result<Var, TensorError> {
        let (vocab, d) = self.dims2(table, "embedding_lookup")?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_lookup",
                    index: id as usize,
                    len: vocab,
                });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let base = id as usize * d;
            data.extend_from_slice(&self.node(table).data[base..base + d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), d],
            data,
            needs,
            Op::Embedding {
                table,
                ids: Arc::new(ids.to_vec()),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = &self.node(x).data;
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(vec![c, r], data, needs, Op::Transpose { x }))
    }

    /// Concatenation along the sequence (row) dimension.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of zero parts".into()));
        }
        let (_, c) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_rows",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.node(p).data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![rows, c],
            data,
            needs,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Concatenation along the feature (column) dimension.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero parts".into()));
        }
        let (r, _) = self.dims2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(TensorError::DimensionMismatch {
                    op: "concat_cols",
                    lhs: self.node(parts[0]).shape.clone(),
                    rhs: self.node(p).shape.clone(),
                });
            }
            cols += pc;
        }
        let mut data = vec![S::zero(); r * cols];
        let mut off = 0;
        for &p in parts {
            let pc = self.node(p).shape[1];
            for row in 0..r {
                let src = &self.node(p).data[row * pc..(row + 1) * pc];
                data[row * cols + off..row * cols + off + pc].copy_from_slice(src);
            }
            off += pc;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            vec![r, cols],
            data,
            needs,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start > end || end > r {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: r,
            });
        }
        let data = self.node(x).data[start * c..end * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![end - start, c], data, needs, Op::SliceRows { x, start }))
    }

    /// Copy of columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start > end || end > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: c,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for row in 0..r {
            data.extend_from_slice(&self.node(x).data[row * c + start..row * c + end]);
        }
        let needs = self.needs(x);
        Ok(self.push(vec![r, w], data, needs, Op::SliceCols { x, start }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .node(x)
            .data
            .iter()
            .fold(S::zero(), |acc, v| acc + *v);
        let needs = self.needs(x);
        self.push(vec![1], vec![s], needs, Op::Sum { x })
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every gradient-requiring node
    /// reachable from `loss`, adding into persistent gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.node(loss).data.len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let n = self.nodes.len();
        let mut scratch: Vec<Option<Vec<S>>> = vec![None; n];
        scratch[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            self.dispatch_backward(i, &g, &mut scratch);
            // park the propagated seed back for the final accumulation
            scratch[i] = Some(g);
        }

        for (i, slot) in scratch.into_iter().enumerate() {
            if let Some(g) = slot {
                if self.nodes[i].needs_grad {
                    let grad = self.nodes[i]
                        .grad
                        .get_or_insert_with(|| vec![S::zero(); g.len()]);
                    for (dst, src) in grad.iter_mut().zip(&g) {
                        *dst += *src;
                    }
                }
            }
        }
        Ok(())
    }

    fn seed<'a>(
        scratch: &'a mut [Option<Vec<S>>],
        v: Var,
        len: usize,
    ) -> &'a mut Vec<S> {
        scratch[v.0].get_or_insert_with(|| vec![S::zero(); len])
    }

    fn dispatch_backward(&self, node_idx: usize, g: &[S], scratch: &mut [Option<Vec<S>>]) {
        match &self.nodes[node_idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.node(*a).shape[0], self.node(*a).shape[1]);
                let n = self.node(*b).shape[1];
                if self.needs(*a) {
                    // dA = G[m,n] * B^T[n,k]
                    let b_data = &self.node(*b).data;
                    let da = Self::seed(scratch, *a, m * k);
                    S::gemm(false, true, m, n, k, S::one(), g, b_data, S::one(), da);
                }
                if self.needs(*b) {
                    // dB = A^T[k,m] * G[m,n]
                    let a_data = &self.node(*a).data;
                    let db = Self::seed(scratch, *b, k * n);
                    S::gemm(true, false, k, m, n, S::one(), a_data, g, S::one(), db);
                }
            }
            Op::Linear { x, w } => {
                let (t, din) = (self.node(*x).shape[0], self.node(*x).shape[1]);
                let dout = self.node(*w).shape[0];
                if self.needs(*x) {
                    // dX = G[t,dout] * W[dout,din]
                    let w_data = &self.node(*w).data;
                    let dx = Self::seed(scratch, *x, t * din);
                    S::gemm(false, false, t, dout, din, S::one(), g, w_data, S::one(), dx);
                }
                if self.needs(*w) {
                    // dW = G^T[dout,t] * X[t,din]
                    let x_data = &self.node(*x).data;
                    let dw = Self::seed(scratch, *w, dout * din);
                    S::gemm(true, false, dout, t, din, S::one(), g, x_data, S::one(), dw);
                }
            }
            Op::Add { a, b } => {
                for &v in [a, b] {
                    if self.needs(v) {
                        let dst = Self::seed(scratch, v, g.len());
                        for (d, s) in dst.iter_mut().zip(g) {
                            *d += *s;
                        }
                    }
                }
            }
            Op::AddRow { x, row } => {
                let (t, d) = (self.node(*x).shape[0], self.node(*x).shape[1]);
                if self.needs(*x) {
                    let dst = Self::seed(scratch, *x, g.len());
                    for (dv, s) in dst.iter_mut().zip(g) {
                        *dv += *s;
                    }
                }
                if self.needs(*row) {
                    let dst = Self::seed(scratch, *row, d);
                    for r in 0..t {
                        for c in 0..d {
                            dst[c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let b_data = &self.node(*b).data;
                    let dst = Self::seed(scratch, *a, g.len());
                    for ((d, s), bv) in dst.iter_mut().zip(g).zip(b_data) {
                        *d += *s * *bv;
                    }
                }
                if self.needs(*b) {
                    let a_data = &self.node(*a).data;
                    let dst = Self::seed(scratch, *b, g.len());
                    for ((d, s), av) in dst.iter_mut().zip(g).zip(a_data) {
                        *d += *s * *av;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.needs(*x) {
                    let dst = Self::seed(scratch, *x, g.len());
                    for (d, s) in dst.iter_mut().zip(g) {
                        *d += *s * *c;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if !self.needs(*x) {
                    return;
                }
                let shape = &self.node(*x).shape;
                let axis_len = shape[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                // this node's own output is the softmax
                let p = &self.nodes[node_idx].data;
                let dst = Self::seed(scratch, *x, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |a: usize| o * axis_len * inner + a * inner + i;
                        let mut dot = S::zero();
                        for a in 0..axis_len {
                            dot += g[idx(a)] * p[idx(a)];
                        }
                        for a in 0..axis_len {
                            dst[idx(a)] += p[idx(a)] * (g[idx(a)] - dot);
                        }
                    }
                }
            }
            Op::MaskedRowSoftmax { x, mask } => {
                if !self.needs(*x) {
                    return;
                }
                let (r, c) = (self.node(*x).shape[0], self.node(*x).shape[1]);
                let p = &self.nodes[node_idx].data;
                let dst = Self::seed(scratch, *x, r * c);
                for row in 0..r {
                    let base = row * c;
                    let mut dot = S::zero();
                    for j in 0..c {
                        if mask[base + j] {
                            dot += g[base + j] * p[base + j];
                        }
                    }
                    for j in 0..c {
                        if mask[base + j] {
                            dst[base + j] += p[base + j] * (g[base + j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                n_masked,
            } => {
                if !self.needs(*logits) {
                    return;
                }
                let (t, v) = (self.node(*logits).shape[0], self.node(*logits).shape[1]);
                let scale = g[0] / S::from_f64c(*n_masked as f64);
                let dst = Self::seed(scratch, *logits, t * v);
                for row in 0..t {
                    if !mask[row] {
                        continue;
                    }
                    let base = row * v;
                    let tgt = targets[row] as usize;
                    for j in 0..v {
                        let indicator = if j == tgt { S::one() } else { S::zero() };
                        dst[base + j] += scale * (probs[base + j] - indicator);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (t, d) = (self.node(*x).shape[0], self.node(*x).shape[1]);
                let dn = S::from_f64c(d as f64);
                if self.needs(*gain) {
                    let dst = Self::seed(scratch, *gain, d);
                    for row in 0..t {
                        for j in 0..d {
                            dst[j] += g[row * d + j] * xhat[row * d + j];
                        }
                    }
                }
                if self.needs(*bias) {
                    let dst = Self::seed(scratch, *bias, d);
                    for row in 0..t {
                        for j in 0..d {
                            dst[j] += g[row * d + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let gain_d = &self.node(*gain).data;
                    let dst = Self::seed(scratch, *x, t * d);
                    for row in 0..t {
                        let base = row * d;
                        let mut mean_gy = S::zero();
                        let mut mean_gyx = S::zero();
                        for j in 0..d {
                            let gy = g[base + j] * gain_d[j];
                            mean_gy += gy;
                            mean_gyx += gy * xhat[base + j];
                        }
                        mean_gy = mean_gy / dn;
                        mean_gyx = mean_gyx / dn;
                        for j in 0..d {
                            let gy = g[base + j] * gain_d[j];
                            dst[base + j] +=
                                (gy - mean_gy - xhat[base + j] * mean_gyx) * inv_std[row];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if !self.needs(*x) {
                    return;
                }
                let src = &self.node(*x).data;
                let dst = Self::seed(scratch, *x, g.len());
                for ((d, s), v) in dst.iter_mut().zip(g).zip(src) {
                    *d += *s * gelu_bwd(*v);
                }
            }
            Op::Embedding { table, ids } => {
                if !self.needs(*table) {
                    return;
                }
                let d = self.node(*table).shape[1];
                let len = self.node(*table).data.len();
                let dst = Self::seed(scratch, *table, len);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g[row * d..(row + 1) * d];
                    let base = id as usize * d;
                    for j in 0..d {
                        dst[base + j] += src[j];
                    }
                }
            }
            Op::Transpose { x } => {
                if !self.needs(*x) {
                    return;
                }
                let (r, c) = (self.node(*x).shape[0], self.node(*x).shape[1]);
                let dst = Self::seed(scratch, *x, r * c);
                // g has shape [c, r]
                for i in 0..c {
                    for j in 0..r {
                        dst[j * c + i] += g[i * r + j];
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.node(p).data.len();
                    if self.needs(p) {
                        let dst = Self::seed(scratch, p, len);
                        for (d, s) in dst.iter_mut().zip(&g[off..off + len]) {
                            *d += *s;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.node(parts[0]).shape[0];
                let total: usize = parts.iter().map(|&p| self.node(p).shape[1]).sum();
                let mut off = 0;
                for &p in parts {
                    let pc = self.node(p).shape[1];
                    if self.needs(p) {
                        let dst = Self::seed(scratch, p, r * pc);
                        for row in 0..r {
                            for j in 0..pc {
                                dst[row * pc + j] += g[row * total + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                if !self.needs(*x) {
                    return;
                }
                let c = self.node(*x).shape[1];
                let len = self.node(*x).data.len();
                let dst = Self::seed(scratch, *x, len);
                for (i, s) in g.iter().enumerate() {
                    dst[start * c + i] += *s;
                }
            }
            Op::SliceCols { x, start } => {
                if !self.needs(*x) {
                    return;
                }
                let (r, c) = (self.node(*x).shape[0], self.node(*x).shape[1]);
                let w = g.len() / r;
                let dst = Self::seed(scratch, *x, r * c);
                for row in 0..r {
                    for j in 0..w {
                        dst[row * c + start + j] += g[row * w + j];
                    }
                }
            }
            Op::Sum { x } => {
                if !self.needs(*x) {
                    return;
                }
                let len = self.node(*x).data.len();
                let dst = Self::seed(scratch, *x, len);
                for d in dst.iter_mut() {
                    *d += g[0];
                }
            }
        }
    }
}

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64c(0.044715);
    let half = S::from_f64c(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let c = S::from_f64c((2.0 / std::f64::consts::PI).sqrt());
    let k = S::from_f64c(0.044715);
    let half = S::from_f64c(0.5);
    let three = S::from_f64c(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf32(tape: &mut Tape<f32>, shape: Vec<usize>, data: Vec<f32>) -> Var {
        tape.leaf_from(shape, data, true).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf32(&mut tape, vec![2, 2], vec![3.0, 1.0, 2.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf32(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf32(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::DimensionMismatch { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn softmax_symmetry_and_closed_form() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let s = tape.softmax(x, 1).unwrap();
        assert_eq!(tape.value(s), &[0.5, 0.5]);

        let y = leaf32(&mut tape, vec![1, 2], vec![1.0f32.ln(), 3.0f32.ln()]);
        let sy = tape.softmax(y, 1).unwrap();
        let got = tape.value(sy);
        assert!((got[0] - 0.25).abs() < 1e-6);
        assert!((got[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::<f32>::new();
        let vals = vec![0.3, -1.2, 2.5, 0.0];
        let x = leaf32(&mut tape, vec![1, 4], vals.clone());
        let shifted: Vec<f32> = vals.iter().map(|v| v + 7.25).collect();
        let y = leaf32(&mut tape, vec![1, 4], shifted);
        let sx = tape.softmax(x, 1).unwrap();
        let sy = tape.softmax(y, 1).unwrap();
        for (a, b) in tape.value(sx).iter().zip(tape.value(sy)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_closed_form_ln2() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let loss = tape.cross_entropy(logits, &[0], &[true]).unwrap();
        assert!((tape.value(loss)[0] - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_certainty_case() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, vec![1, 2], vec![1000.0, 0.0]);
        let loss = tape.cross_entropy(logits, &[0], &[true]).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_masked_positions_do_not_matter() {
        let mut t1 = Tape::<f32>::new();
        let l1 = leaf32(&mut t1, vec![2, 3], vec![0.1, 0.2, 0.3, 9.0, -4.0, 2.0]);
        let a = t1.cross_entropy(l1, &[2, 0], &[true, false]).unwrap();

        let mut t2 = Tape::<f32>::new();
        let l2 = leaf32(&mut t2, vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 55.0, 0.0]);
        let b = t2.cross_entropy(l2, &[2, 0], &[true, false]).unwrap();

        assert_eq!(t1.value(a)[0].to_bits(), t2.value(b)[0].to_bits());
    }

    #[test]
    fn cross_entropy_empty_mask_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let err = tape.cross_entropy(logits, &[0], &[false]).unwrap_err();
        assert!(matches!(err, TensorError::EmptyLossMask));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, vec![3], vec![5.0, -2.0, 0.5]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, vec![2], vec![1.0, 2.0]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_accumulates_exactly_double() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, vec![2], vec![1.5, -0.25]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        let once: Vec<f32> = tape.grad(x).unwrap().to_vec();
        tape.backward(loss).unwrap();
        let twice = tape.grad(x).unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn frozen_leaves_get_no_grad() {
        let mut tape = Tape::<f32>::new();
        let frozen = tape.leaf_from(vec![2], vec![1.0, 2.0], false).unwrap();
        let hot = tape.leaf_from(vec![2], vec![3.0, 4.0], true).unwrap();
        let prod = tape.mul(frozen, hot).unwrap();
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        assert!(tape.grad(frozen).is_none());
        assert_eq!(tape.grad(hot).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn masked_row_softmax_ignores_hidden_entries_bitwise() {
        let mask = Arc::new(vec![true, true, false]);
        let mut t1 = Tape::<f32>::new();
        let x1 = leaf32(&mut t1, vec![1, 3], vec![0.5, 1.5, 100.0]);
        let s1 = t1.masked_row_softmax(x1, mask.clone()).unwrap();
        let mut t2 = Tape::<f32>::new();
        let x2 = leaf32(&mut t2, vec![1, 3], vec![0.5, 1.5, -3.0]);
        let s2 = t2.masked_row_softmax(x2, mask).unwrap();
        assert_eq!(t1.value(s1), t2.value(s2));
        assert_eq!(t1.value(s1)[2], 0.0);
    }

    #[test]
    fn transpose_and_concat_round_trip() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let xt = tape.transpose(x).unwrap();
        assert_eq!(tape.shape_of(xt), &[3, 2]);
        assert_eq!(tape.value(xt), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);

        let top = tape.slice_rows(x, 0, 1).unwrap();
        let bottom = tape.slice_rows(x, 1, 2).unwrap();
        let back = tape.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));

        let left = tape.slice_cols(x, 0, 2).unwrap();
        let right = tape.slice_cols(x, 2, 3).unwrap();
        let back2 = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back2), tape.value(x));
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let mut tape = Tape::<f32>::new();
        let table = leaf32(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let e = tape.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let loss = tape.sum(e);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_rejects_out_of_vocab_ids() {
        let mut tape = Tape::<f32>::new();
        let table = leaf32(&mut tape, vec![3, 2], vec![0.0; 6]);
        let err = tape.embedding_lookup(table, &[3]).unwrap_err();
        assert!(matches!(err, TensorError::IndexOutOfRange { index: 3, len: 3, .. }));
    }

    #[test]
    fn operations_are_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = leaf32(&mut tape, vec![4, 4], (0..16).map(|i| (i as f32).sin()).collect());
            let w = leaf32(&mut tape, vec![4, 4], (0..16).map(|i| (i as f32).cos()).collect());
            let h = tape.matmul(x, w).unwrap();
            let a = tape.gelu(h);
            let s = tape.softmax(a, 1).unwrap();
            tape.value(s).to_vec()
        };
        let one: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
        let two: Vec<u32> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(one, two);
    }
}
