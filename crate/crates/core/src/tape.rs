//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Operations
//! are methods on the tape; each records the inputs it needs for its local
//! backward rule. [`Tape::backward`] walks the node list once in reverse,
//! accumulating gradients additively, so a value used twice receives the sum
//! of both contributions.
//!
//! There is no implicit broadcasting: shapes must conform exactly, except for
//! the scalar-times-tensor ops (`scale`, `mul_scalar`). Slices and lookups
//! copy; nothing aliases.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Recip(Var),
    Sqrt(Var),
    MatMul { lhs: Var, rhs: Var, m: usize, k: usize, n: usize },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Var, Var),
    ConcatCols(Var, Var),
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize, end: usize },
    Lookup { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm { input: Var, gain: Var, bias: Var, eps: f64 },
    AddBias(Var, Var),
    MaskedFill { input: Var, mask: Vec<bool> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Records one forward pass. Not shareable across threads.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf; gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), t.requires_grad, Op::Leaf)
    }

    /// Register raw data as a constant (no gradient).
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(
                "constant",
                format!("shape {:?} vs {} elements", shape, data.len()),
            ));
        }
        Ok(self.push(data, shape, false, Op::Leaf))
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.push(vec![x], vec![], false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last `backward` root w.r.t. `v`, if `v` participates.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Copy a node out into a standalone tensor (no grad flags carried over).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::invalid(op, format!("expected 2-d tensor, got shape {:?}", s)));
        }
        Ok((s[0], s[1]))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, needs, op))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, needs, Op::Scale(a, c))
    }

    /// Multiply a tensor by a scalar node (shape `[]`).
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.shape(s).is_empty() {
            return Err(shape_err("mul_scalar", self.shape(a), self.shape(s)));
        }
        let sv = self.nodes[s.0].data[0];
        let data = self.nodes[a.0].data.iter().map(|&x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(data, shape, needs, Op::MulScalar(a, s)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|&x| x == 0.0) {
            return Err(Error::domain("recip", "zero input"));
        }
        let data = self.nodes[a.0].data.iter().map(|&x| 1.0 / x).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Recip(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|&x| x < 0.0) {
            return Err(Error::domain("sqrt", "negative input"));
        }
        let data = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Sqrt(a)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        // e^710 overflows f64; reject rather than emit Inf.
        if self.nodes[a.0].data.iter().any(|&x| x > 709.0) {
            return Err(Error::domain("exp", "input exceeds 709, result would overflow"));
        }
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Exp(a)))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.nodes[a.0].data.iter().any(|&x| x <= 0.0) {
            return Err(Error::domain("log", "non-positive input"));
        }
        let data = self.nodes[a.0].data.iter().map(|&x| x.ln()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(data, shape, needs, Op::Tanh(a))
    }

    // ── Linear algebra and shape ops ────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(&self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![m, n], needs, Op::MatMul { lhs: a, rhs: b, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(data, vec![n, m], needs, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.nodes[a.0].data.len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let data = self.nodes[a.0].data.clone();
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Reshape(a)))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2("concat_rows", a)?;
        let (mb, nb) = self.dims2("concat_rows", b)?;
        if na != nb {
            return Err(shape_err("concat_rows", self.shape(a), self.shape(b)));
        }
        let mut data = Vec::with_capacity((ma + mb) * na);
        data.extend_from_slice(&self.nodes[a.0].data);
        data.extend_from_slice(&self.nodes[b.0].data);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![ma + mb, na], needs, Op::ConcatRows(a, b)))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = self.dims2("concat_cols", a)?;
        let (mb, nb) = self.dims2("concat_cols", b)?;
        if ma != mb {
            return Err(shape_err("concat_cols", self.shape(a), self.shape(b)));
        }
        let mut data = Vec::with_capacity(ma * (na + nb));
        for i in 0..ma {
            data.extend_from_slice(&self.nodes[a.0].data[i * na..(i + 1) * na]);
            data.extend_from_slice(&self.nodes[b.0].data[i * nb..(i + 1) * nb]);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(data, vec![ma, na + nb], needs, Op::ConcatCols(a, b)))
    }

    /// Copy rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_rows", a)?;
        if start >= end || end > m {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} out of bounds for {m} rows"),
            ));
        }
        let data = self.nodes[a.0].data[start * n..end * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, vec![end - start, n], needs, Op::SliceRows { input: a, start }))
    }

    /// Copy columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", a)?;
        if start >= end || end > n {
            return Err(Error::invalid(
                "slice_cols",
                format!("range {start}..{end} out of bounds for {n} columns"),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        let src = &self.nodes[a.0].data;
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let needs = self.needs(a);
        Ok(self.push(data, vec![m, w], needs, Op::SliceCols { input: a, start, end }))
    }

    /// Gather rows of a 2-d table by index (embedding lookup). Duplicate ids
    /// accumulate their gradients into the same row.
    pub fn lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2("lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "lookup",
                format!("id {bad} out of range for table with {rows} rows"),
            ));
        }
        let src = &self.nodes[table.0].data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            data,
            vec![ids.len(), d],
            needs,
            Op::Lookup { table, ids: ids.to_vec() },
        ))
    }

    // ── Reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![s], vec![], needs, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len() as f64;
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(vec![s / n], vec![], needs, Op::Mean(a))
    }

    /// Column means of a 2-d tensor: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("mean_rows", a)?;
        if m == 0 {
            return Err(Error::invalid("mean_rows", "empty input"));
        }
        let src = &self.nodes[a.0].data;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        for x in &mut out {
            *x /= m as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(out, vec![n], needs, Op::MeanRows(a)))
    }

    // ── Neural-net ops ──────────────────────────────────────────────────

    /// Numerically stable softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("softmax", "scalar input"))?;
        let src = &self.nodes[a.0].data;
        let mut data = vec![0.0; src.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            softmax_row(row_in, row_out);
        }
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::Softmax(a)))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().ok_or_else(|| Error::invalid("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(gain)));
        }
        if self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", &shape, self.shape(bias)));
        }
        let src = &self.nodes[a.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; src.len()];
        for (row_out, row_in) in data.chunks_mut(d).zip(src.chunks(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let needs = self.needs(a) || self.needs(gain) || self.needs(bias);
        Ok(self.push(data, shape, needs, Op::LayerNorm { input: a, gain, bias, eps }))
    }

    /// Add a length-`n` bias vector to every row of an `[m, n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", a)?;
        if self.shape(bias) != [n] {
            return Err(shape_err("add_bias", self.shape(a), self.shape(bias)));
        }
        let src = &self.nodes[a.0].data;
        let b = &self.nodes[bias.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = src[i * n + j] + b[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(data, vec![m, n], needs, Op::AddBias(a, bias)))
    }

    /// Replace entries where `mask` is true with `value` (a constant; no
    /// gradient flows to masked positions).
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        if mask.len() != self.nodes[a.0].data.len() {
            return Err(Error::invalid(
                "masked_fill",
                format!("mask length {} vs {} elements", mask.len(), self.nodes[a.0].data.len()),
            ));
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(data, shape, needs, Op::MaskedFill { input: a, mask: mask.to_vec() }))
    }

    /// Mean token-level cross-entropy of `[n, d]` logits against `n` target
    /// class ids, computed via a stable log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::invalid(
                "cross_entropy",
                format!("{} logit rows vs {} targets", n, targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target id {bad} out of range for {d} classes"),
            ));
        }
        let src = &self.nodes[logits.0].data;
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * d..(i + 1) * d];
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / n as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            vec![loss],
            vec![],
            needs,
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Populate gradients of every grad-requiring node w.r.t. a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.shape(root).is_empty() {
            return Err(Error::NonScalarRoot {
                shape: self.shape(root).to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = if node.needs_grad {
                Some(vec![0.0; node.data.len()])
            } else {
                None
            };
        }
        if !self.nodes[root.0].needs_grad {
            // Root does not depend on any grad-requiring leaf; nothing to do.
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let grad = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            self.apply_backward(i, &op, &grad);
        }
        Ok(())
    }

    fn add_to_grad(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = &mut self.nodes[v.0].grad {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    fn add_to_grad_with(&mut self, v: Var, f: impl Fn(usize) -> f64) {
        if let Some(g) = &mut self.nodes[v.0].grad {
            for (j, a) in g.iter_mut().enumerate() {
                *a += f(j);
            }
        }
    }

    fn apply_backward(&mut self, out_idx: usize, op: &Op, grad: &[f64]) {
        match *op {
            Op::Leaf => {}

            Op::Add(a, b) => {
                self.add_to_grad(a, grad);
                self.add_to_grad(b, grad);
            }

            Op::Sub(a, b) => {
                self.add_to_grad(a, grad);
                self.add_to_grad_with(b, |j| -grad[j]);
            }

            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bd = self.nodes[b.0].data.clone();
                    self.add_to_grad_with(a, |j| grad[j] * bd[j]);
                }
                if self.needs(b) {
                    let ad = self.nodes[a.0].data.clone();
                    self.add_to_grad_with(b, |j| grad[j] * ad[j]);
                }
            }

            Op::Scale(a, c) => {
                self.add_to_grad_with(a, |j| grad[j] * c);
            }

            Op::MulScalar(a, s) => {
                if self.needs(a) {
                    let sv = self.nodes[s.0].data[0];
                    self.add_to_grad_with(a, |j| grad[j] * sv);
                }
                if self.needs(s) {
                    let ad = &self.nodes[a.0].data;
                    let ds: f64 = grad.iter().zip(ad).map(|(&g, &x)| g * x).sum();
                    self.add_to_grad(s, &[ds]);
                }
            }

            Op::Recip(a) => {
                let out = self.nodes[out_idx].data.clone();
                self.add_to_grad_with(a, |j| -grad[j] * out[j] * out[j]);
            }

            Op::Sqrt(a) => {
                let out = self.nodes[out_idx].data.clone();
                self.add_to_grad_with(a, |j| grad[j] / (2.0 * out[j]));
            }

            Op::MatMul { lhs, rhs, m, k, n } => {
                if self.needs(lhs) {
                    // dA = G · Bᵀ
                    let b = &self.nodes[rhs.0].data;
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &grad[i * n..(i + 1) * n];
                        let darow = &mut da[i * k..(i + 1) * k];
                        for p in 0..k {
                            let brow = &b[p * n..(p + 1) * n];
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            darow[p] += acc;
                        }
                    }
                    self.add_to_grad(lhs, &da);
                }
                if self.needs(rhs) {
                    // dB = Aᵀ · G
                    let a = &self.nodes[lhs.0].data;
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = a[i * k + p];
                            if av != 0.0 {
                                let grow = &grad[i * n..(i + 1) * n];
                                let drow = &mut db[p * n..(p + 1) * n];
                                for j in 0..n {
                                    drow[j] += av * grow[j];
                                }
                            }
                        }
                    }
                    self.add_to_grad(rhs, &db);
                }
            }

            Op::Transpose(a) => {
                let (n, m) = (self.nodes[out_idx].shape[0], self.nodes[out_idx].shape[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = grad[i * m + j];
                    }
                }
                self.add_to_grad(a, &da);
            }

            Op::Reshape(a) => {
                self.add_to_grad(a, grad);
            }

            Op::ConcatRows(a, b) => {
                let na = self.nodes[a.0].data.len();
                self.add_to_grad(a, &grad[..na]);
                self.add_to_grad(b, &grad[na..]);
            }

            Op::ConcatCols(a, b) => {
                let (m, na) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let nb = self.nodes[b.0].shape[1];
                let w = na + nb;
                if self.needs(a) {
                    let mut da = vec![0.0; m * na];
                    for i in 0..m {
                        da[i * na..(i + 1) * na].copy_from_slice(&grad[i * w..i * w + na]);
                    }
                    self.add_to_grad(a, &da);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; m * nb];
                    for i in 0..m {
                        db[i * nb..(i + 1) * nb].copy_from_slice(&grad[i * w + na..(i + 1) * w]);
                    }
                    self.add_to_grad(b, &db);
                }
            }

            Op::SliceRows { input, start } => {
                let n = self.nodes[input.0].shape[1];
                let rows = self.nodes[out_idx].shape[0];
                if let Some(g) = &mut self.nodes[input.0].grad {
                    let base = start * n;
                    for (a, b) in g[base..base + rows * n].iter_mut().zip(grad) {
                        *a += b;
                    }
                }
            }

            Op::SliceCols { input, start, end } => {
                let n = self.nodes[input.0].shape[1];
                let m = self.nodes[input.0].shape[0];
                let w = end - start;
                if let Some(g) = &mut self.nodes[input.0].grad {
                    for i in 0..m {
                        for j in 0..w {
                            g[i * n + start + j] += grad[i * w + j];
                        }
                    }
                }
            }

            Op::Lookup { table, ref ids } => {
                let d = self.nodes[table.0].shape[1];
                if let Some(g) = &mut self.nodes[table.0].grad {
                    for (row, &id) in ids.iter().enumerate() {
                        let dst = &mut g[id * d..(id + 1) * d];
                        let src = &grad[row * d..(row + 1) * d];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
            }

            Op::Sum(a) => {
                let g = grad[0];
                self.add_to_grad_with(a, |_| g);
            }

            Op::Mean(a) => {
                let n = self.nodes[a.0].data.len() as f64;
                let g = grad[0] / n;
                self.add_to_grad_with(a, |_| g);
            }

            Op::MeanRows(a) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let inv = 1.0 / m as f64;
                self.add_to_grad_with(a, |j| grad[j % n] * inv);
            }

            Op::Exp(a) => {
                let out = self.nodes[out_idx].data.clone();
                self.add_to_grad_with(a, |j| grad[j] * out[j]);
            }

            Op::Log(a) => {
                let xd = self.nodes[a.0].data.clone();
                self.add_to_grad_with(a, |j| grad[j] / xd[j]);
            }

            Op::Tanh(a) => {
                let out = self.nodes[out_idx].data.clone();
                self.add_to_grad_with(a, |j| grad[j] * (1.0 - out[j] * out[j]));
            }

            Op::Softmax(a) => {
                // Per row: dx = s ⊙ (g − ⟨g, s⟩)
                let d = *self.nodes[out_idx].shape.last().unwrap();
                let out = &self.nodes[out_idx].data;
                let mut da = vec![0.0; out.len()];
                for ((da_row, s_row), g_row) in
                    da.chunks_mut(d).zip(out.chunks(d)).zip(grad.chunks(d))
                {
                    let dot: f64 = g_row.iter().zip(s_row).map(|(&g, &s)| g * s).sum();
                    for j in 0..d {
                        da_row[j] = s_row[j] * (g_row[j] - dot);
                    }
                }
                self.add_to_grad(a, &da);
            }

            Op::LayerNorm { input, gain, bias, eps } => {
                let d = *self.nodes[out_idx].shape.last().unwrap();
                let x = self.nodes[input.0].data.clone();
                let g_aff = self.nodes[gain.0].data.clone();
                let rows = x.len() / d;
                let mut dx = vec![0.0; x.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let xr = &x[r * d..(r + 1) * d];
                    let gr = &grad[r * d..(r + 1) * d];
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(&g_aff).map(|(&g, &w)| g * w).collect();
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                        dx[r * d + j] =
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                self.add_to_grad(input, &dx);
                self.add_to_grad(gain, &dgain);
                self.add_to_grad(bias, &dbias);
            }

            Op::AddBias(a, bias) => {
                let (m, n) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                self.add_to_grad(a, grad);
                if self.needs(bias) {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += grad[i * n + j];
                        }
                    }
                    self.add_to_grad(bias, &db);
                }
            }

            Op::MaskedFill { input, ref mask } => {
                let mask = mask.clone();
                self.add_to_grad_with(input, |j| if mask[j] { 0.0 } else { grad[j] });
            }

            Op::CrossEntropy { logits, ref targets } => {
                let d = self.nodes[logits.0].shape[1];
                let n = targets.len();
                let src = self.nodes[logits.0].data.clone();
                let g0 = grad[0] / n as f64;
                let mut dl = vec![0.0; src.len()];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &src[i * d..(i + 1) * d];
                    let out = &mut dl[i * d..(i + 1) * d];
                    softmax_row(row, out);
                    out[t] -= 1.0;
                    for v in out.iter_mut() {
                        *v *= g0;
                    }
                }
                self.add_to_grad(logits, &dl);
            }
        }
    }
}

/// Raw `[m,k] · [k,n]` multiply in i-k-j order.
pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
    }
    c
}

fn softmax_row(row_in: &[f64], row_out: &mut [f64]) {
    let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in row_out.iter_mut().zip(row_in) {
        let e = (x - max).exp();
        *o = e;
        sum += e;
    }
    for o in row_out.iter_mut() {
        *o /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap().with_grad()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = tape.softmax(a).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut tape = Tape::new();
        let a = tape
            .constant(vec![2, 3], vec![5.0, -2.0, 0.3, 100.0, 99.0, -50.0])
            .unwrap();
        let s = tape.softmax(a).unwrap();
        for row in tape.value(s).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn product_rule_gradient() {
        // f = sum(x * y); df/dx = y
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]));
        let y = tape.leaf(&tensor(&[2], &[3.0, 4.0]));
        let p = tape.mul(x, y).unwrap();
        let f = tape.sum(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[5.0, 7.0]));
        let f = tape.sum(x);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn reused_node_accumulates() {
        // z = x*x, f = z + z  =>  df/dx = 4x
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.5, -2.0]));
        let z = tape.mul(x, x).unwrap();
        let f2 = tape.add(z, z).unwrap();
        let f = tape.sum(f2);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0, -8.0]);
    }

    #[test]
    fn neg_exp_dot_matches_finite_differences() {
        // f = exp(-h·e), central differences at eps = 1e-5, rel tol 1e-6
        let h0 = [0.3, -0.2, 0.5];
        let e0 = [0.1, 0.4, -0.3];
        let f = |h: &[f64]| {
            let dot: f64 = h.iter().zip(&e0).map(|(&a, &b)| a * b).sum();
            (-dot).exp()
        };

        let mut tape = Tape::new();
        let h = tape.leaf(&tensor(&[3], &h0));
        let e = tape.constant(vec![3], e0.to_vec()).unwrap();
        let prod = tape.mul(h, e).unwrap();
        let dot = tape.sum(prod);
        let neg = tape.scale(dot, -1.0);
        let out = tape.exp(neg).unwrap();
        tape.backward(out).unwrap();
        let analytic = tape.grad(h).unwrap();

        let eps = 1e-5;
        for i in 0..3 {
            let mut hp = h0;
            let mut hm = h0;
            hp[i] += eps;
            hm[i] -= eps;
            let numeric = (f(&hp) - f(&hm)) / (2.0 * eps);
            let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-6, "component {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad of (l1 + l2) equals grad(l1) + grad(l2), exactly to 1e-12
        let x0 = tensor(&[3], &[0.4, -1.1, 2.2]);

        let build = |tape: &mut Tape, x: Var| -> (Var, Var) {
            let t = tape.tanh(x);
            let l1 = tape.sum(t);
            let sq = tape.mul(x, x).unwrap();
            let l2 = tape.mean(sq);
            (l1, l2)
        };

        let mut tape = Tape::new();
        let x = tape.leaf(&x0);
        let (l1, l2) = build(&mut tape, x);
        let total = tape.add(l1, l2).unwrap();
        tape.backward(total).unwrap();
        let combined = tape.grad(x).unwrap().to_vec();

        let mut t1 = Tape::new();
        let x1 = t1.leaf(&x0);
        let (a, _) = build(&mut t1, x1);
        t1.backward(a).unwrap();
        let g1 = t1.grad(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(&x0);
        let (_, b) = build(&mut t2, x2);
        t2.backward(b).unwrap();
        let g2 = t2.grad(x2).unwrap().to_vec();

        for i in 0..3 {
            assert!((combined[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![3, 3], vec![0.0; 9]).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2], vec![1.0, 0.0]).unwrap();
        assert!(matches!(tape.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_d() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 64], vec![0.0; 128]).unwrap();
        let l = tape.cross_entropy(logits, &[5, 17]).unwrap();
        assert!((tape.value(l)[0] - (64.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn masked_fill_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = tape
            .masked_fill(x, &[false, true, false, true], -1e30)
            .unwrap();
        let sq = tape.mul(m, m).unwrap();
        let f = tape.sum(sq);
        tape.backward(f).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1], 0.0);
        assert_eq!(g[3], 0.0);
        assert_eq!(g[0], 2.0);
        assert_eq!(g[2], 6.0);
    }
}
