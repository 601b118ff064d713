//! Wengert-list autodiff.
//!
//! Nodes are appended in evaluation order, which is already a topological
//! order of the graph, so the backward pass is a single reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch layout for fused multi-head self-attention over `[batch*seq, dim]`
/// activations. `key_mask[b*seq + j]` is false for padding keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub key_mask: Vec<bool>,
}

impl AttentionLayout {
    pub fn unmasked(batch: usize, seq: usize, heads: usize) -> Self {
        Self {
            batch,
            seq,
            heads,
            key_mask: vec![true; batch * seq],
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<T>),
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
        dropout: Option<Vec<T>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        smoothing: T,
        probs: Vec<T>,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, true)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    fn two_d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        if s.len() != 2 {
            return Err(shape_err(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let crow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let shape = sa.to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let cols = xs.cols();
        if self.value(bias).len() != cols {
            return Err(shape_err("add_row", xs.shape(), self.value(bias).shape()));
        }
        let shape = xs.shape().to_vec();
        let bd = self.value(bias).data();
        let out = xs.data().iter().enumerate().map(|(i, &v)| v + bd[i % cols]).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), rg))
    }

    /// Adds a constant tensor outside the graph; no gradient reaches `c`.
    pub fn add_const(&mut self, x: Var, c: &Tensor<T>) -> Result<Var> {
        let xs = self.value(x);
        if xs.shape() != c.shape() {
            return Err(shape_err("add_const", xs.shape(), c.shape()));
        }
        let shape = xs.shape().to_vec();
        let out = xs.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddConst(x), rg))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        let xs = self.value(x);
        if xs.len() != c.len() {
            return Err(shape_err("mul_const", xs.shape(), &[c.len()]));
        }
        let shape = xs.shape().to_vec();
        let out = xs.data().iter().zip(&c).map(|(&a, &b)| a * b).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, alpha: T) -> Result<Var> {
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        let out = xs.data().iter().map(|&a| a * alpha).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale(x, alpha), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        let out = xs.data().iter().map(|&a| gelu_parts(a).0).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu(x), rg))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.value(x);
        let shape = xs.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} invalid for shape {shape:?}"
            )));
        }
        if xs.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("softmax"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xs.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| o * len * inner + a * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - mx).exp();
                    out[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[at(a)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let xs = self.value(x);
        let h = xs.cols();
        if !(eps > T::zero()) {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        if h < 2 {
            return Err(Error::SingularVariance(h));
        }
        if self.value(gamma).len() != h || self.value(beta).len() != h {
            return Err(shape_err("layer_norm", xs.shape(), self.value(gamma).shape()));
        }
        let shape = xs.shape().to_vec();
        let rows = xs.len() / h;
        let hf = T::from_usize(h).unwrap();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let src = xs.data();
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * h..(r + 1) * h];
            let mean = row.iter().copied().sum::<T>() / hf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.two_d(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.two_d(x, "select_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::Index {
                what: "rows",
                index: bad,
                bound: n,
            });
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&xd[r * d..(r + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::SelectRows { x, rows: rows.to_vec() },
            rg,
        ))
    }

    /// Scaled dot-product attention over all heads of a padded batch.
    ///
    /// `dropout`, when given, holds one multiplier per attention weight laid
    /// out as `[batch, heads, seq, seq]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        dropout: Option<Vec<T>>,
    ) -> Result<Var> {
        let (n, d) = self.two_d(q, "attention")?;
        let AttentionLayout {
            batch,
            seq,
            heads,
            ref key_mask,
        } = *layout;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(shape_err("attention", self.value(q).shape(), self.value(k).shape()));
        }
        if n != batch * seq || key_mask.len() != n || heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", &[n, d], &[batch, seq, heads]));
        }
        let pn = batch * heads * seq * seq;
        if dropout.as_ref().is_some_and(|m| m.len() != pn) {
            return Err(shape_err("attention dropout", &[pn], &[dropout.unwrap().len()]));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); pn];
        let mut out = vec![T::zero(); n * d];
        for b in 0..batch {
            if !(0..seq).any(|j| key_mask[b * seq + j]) {
                return Err(Error::InvalidArgument(format!("sequence {b} has no unmasked keys")));
            }
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    let pbase = ((b * heads + h) * seq + i) * seq;
                    let prow = &mut probs[pbase..pbase + seq];
                    let mut mx = T::neg_infinity();
                    for j in 0..seq {
                        if key_mask[b * seq + j] {
                            let kj = &kd[(b * seq + j) * d + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(&a, &c)| a * c).sum::<T>() * scale;
                            prow[j] = s;
                            mx = mx.max(s);
                        }
                    }
                    if !mx.is_finite() {
                        return Err(Error::NumericDomain("attention"));
                    }
                    let mut sum = T::zero();
                    for j in 0..seq {
                        if key_mask[b * seq + j] {
                            let e = (prow[j] - mx).exp();
                            prow[j] = e;
                            sum += e;
                        } else {
                            prow[j] = T::zero();
                        }
                    }
                    for p in prow.iter_mut() {
                        *p /= sum;
                    }
                    let orow = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..seq {
                        let mut p = probs[pbase + j];
                        if let Some(m) = &dropout {
                            p *= m[pbase + j];
                        }
                        if p == T::zero() {
                            continue;
                        }
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        for (o, &vv) in orow.iter_mut().zip(vj) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                probs,
                dropout,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of softmax(logits) against label-smoothed targets:
    /// `1 - s` on the gold class and `s / (C - 1)` elsewhere.
    pub fn cross_entropy_smoothed(&mut self, logits: Var, targets: &[usize], smoothing: T) -> Result<Var> {
        let (n, c) = self.two_d(logits, "cross_entropy")?;
        if n != targets.len() {
            return Err(shape_err("cross_entropy", &[n, c], &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::EmptyInput);
        }
        if !(smoothing >= T::zero() && smoothing < T::one()) {
            return Err(Error::InvalidArgument("label smoothing must lie in [0, 1)".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "classes",
                index: bad,
                bound: c,
            });
        }
        let ld = self.value(logits).data();
        if ld.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("cross_entropy"));
        }
        let (on, off) = smoothed_targets(smoothing, c);
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for r in 0..n {
            let row = &ld[r * c..(r + 1) * c];
            let (arg, mx) = row.iter().enumerate().fold(
                (0, T::neg_infinity()),
                |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) },
            );
            let mut rest = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                probs[r * c + j] = e;
                if j != arg {
                    rest += e;
                }
            }
            let log_z = rest.ln_1p();
            let denom = T::one() + rest;
            let mut row_loss = T::zero();
            for (j, &v) in row.iter().enumerate() {
                probs[r * c + j] /= denom;
                let qj = if j == targets[r] { on } else { off };
                if qj != T::zero() {
                    row_loss -= qj * ((v - mx) - log_z);
                }
            }
            total += row_loss;
        }
        let loss = total / T::from_usize(n).unwrap();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    /// Backpropagates from a single-element `loss`; populates the gradient of
    /// every node that requires one (zeros when unreachable from `loss`).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.value(loss).shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].value.requires_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if node.value.requires_grad {
                let n = node.value.len();
                node.value.grad = Some(g.unwrap_or_else(|| vec![T::zero(); n]));
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        fn buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if wants(a) {
                    let bd = val(b).data();
                    let da = buf(grads, a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                }
                if wants(b) {
                    let ad = val(a).data();
                    let db = buf(grads, b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        for (d, &gv) in buf(grads, v, g.len()).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if wants(*x) {
                    for (d, &gv) in buf(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if wants(*bias) {
                    let cols = val(*bias).len();
                    let db = buf(grads, *bias, cols);
                    for (idx, &gv) in g.iter().enumerate() {
                        db[idx % cols] += gv;
                    }
                }
            }
            Op::AddConst(x) => {
                if wants(*x) {
                    for (d, &gv) in buf(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::MulConst(x, c) => {
                if wants(*x) {
                    for ((d, &gv), &cv) in buf(grads, *x, g.len()).iter_mut().zip(g).zip(c) {
                        *d += gv * cv;
                    }
                }
            }
            Op::Scale(x, alpha) => {
                if wants(*x) {
                    for (d, &gv) in buf(grads, *x, g.len()).iter_mut().zip(g) {
                        *d += gv * *alpha;
                    }
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xd = val(*x).data();
                    for ((d, &gv), &xv) in buf(grads, *x, g.len()).iter_mut().zip(g).zip(xd) {
                        *d += gv * gelu_parts(xv).1;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if wants(*x) {
                    let y = nodes[i].value.data();
                    let dx = buf(grads, *x, g.len());
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |a: usize| o * len * inner + a * inner + ii;
                            let s = (0..*len).map(|a| g[at(a)] * y[at(a)]).sum::<T>();
                            for a in 0..*len {
                                dx[at(a)] += y[at(a)] * (g[at(a)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let h = val(*gamma).len();
                let rows = rstd.len();
                let gm = val(*gamma).data();
                if wants(*gamma) {
                    let dg = buf(grads, *gamma, h);
                    for r in 0..rows {
                        for j in 0..h {
                            dg[j] += g[r * h + j] * xhat[r * h + j];
                        }
                    }
                }
                if wants(*beta) {
                    let db = buf(grads, *beta, h);
                    for r in 0..rows {
                        for j in 0..h {
                            db[j] += g[r * h + j];
                        }
                    }
                }
                if wants(*x) {
                    let hf = T::from_usize(h).unwrap();
                    let dx = buf(grads, *x, rows * h);
                    for r in 0..rows {
                        let xh = &xhat[r * h..(r + 1) * h];
                        let gr = &g[r * h..(r + 1) * h];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..h {
                            let dxh = gr[j] * gm[j];
                            m1 += dxh;
                            m2 += dxh * xh[j];
                        }
                        m1 /= hf;
                        m2 /= hf;
                        for j in 0..h {
                            let dxh = gr[j] * gm[j];
                            dx[r * h + j] += rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = val(*table).cols();
                    let n = val(*table).len();
                    let dt = buf(grads, *table, n);
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if wants(*x) {
                    let d = val(*x).cols();
                    let n = val(*x).len();
                    let dx = buf(grads, *x, n);
                    for (r, &src) in rows.iter().enumerate() {
                        for j in 0..d {
                            dx[src * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                dropout,
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (n, d) = (val(q).shape()[0], val(q).shape()[1]);
                let AttentionLayout { batch, seq, heads, .. } = *layout;
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qd, kd, vd) = (val(q).data(), val(k).data(), val(v).data());
                let mut dq = vec![T::zero(); n * d];
                let mut dk = vec![T::zero(); n * d];
                let mut dv = vec![T::zero(); n * d];
                let mut dp = vec![T::zero(); seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..seq {
                            let pbase = ((b * heads + h) * seq + i) * seq;
                            let gi = &g[(b * seq + i) * d + off..][..dh];
                            let mut dot = T::zero();
                            for j in 0..seq {
                                let p = probs[pbase + j];
                                if p == T::zero() {
                                    dp[j] = T::zero();
                                    continue;
                                }
                                let m = dropout.as_ref().map_or(T::one(), |mk| mk[pbase + j]);
                                let vj = &vd[(b * seq + j) * d + off..][..dh];
                                let gv = gi.iter().zip(vj).map(|(&a, &c)| a * c).sum::<T>();
                                dp[j] = gv * m;
                                dot += p * dp[j];
                                let pw = p * m;
                                if pw != T::zero() {
                                    let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                                    for (o, &gg) in dvj.iter_mut().zip(gi) {
                                        *o += pw * gg;
                                    }
                                }
                            }
                            let qi = &qd[(b * seq + i) * d + off..][..dh];
                            for j in 0..seq {
                                let p = probs[pbase + j];
                                if p == T::zero() {
                                    continue;
                                }
                                let ds = p * (dp[j] - dot) * scale;
                                let kj = &kd[(b * seq + j) * d + off..][..dh];
                                let dqi = &mut dq[(b * seq + i) * d + off..][..dh];
                                for (o, &kv) in dqi.iter_mut().zip(kj) {
                                    *o += ds * kv;
                                }
                                let dkj = &mut dk[(b * seq + j) * d + off..][..dh];
                                for (o, &qv) in dkj.iter_mut().zip(qi) {
                                    *o += ds * qv;
                                }
                            }
                        }
                    }
                }
                for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                    if wants(var) {
                        for (d, l) in buf(grads, var, n * d).iter_mut().zip(local) {
                            *d += l;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                if wants(*logits) {
                    let c = val(*logits).cols();
                    let n = targets.len();
                    let (on, off) = smoothed_targets(*smoothing, c);
                    let scale = g[0] / T::from_usize(n).unwrap();
                    let dl = buf(grads, *logits, n * c);
                    for r in 0..n {
                        for j in 0..c {
                            let qj = if j == targets[r] { on } else { off };
                            dl[r * c + j] += scale * (probs[r * c + j] - qj);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = val(*x).len();
                    for d in buf(grads, *x, n).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

fn smoothed_targets<T: Scalar>(s: T, classes: usize) -> (T, T) {
    if classes < 2 {
        (T::one(), T::zero())
    } else {
        (T::one() - s, s / T::from_usize(classes - 1).unwrap())
    }
}
