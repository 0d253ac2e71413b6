//! Reverse-mode autodiff over a recorded operation list.
//!
//! Every op appends one node holding its inputs, its output tensor, and a
//! `needs_grad` bit (true iff any ancestor requires gradients). `backward`
//! walks the nodes in exact reverse recording order on a single thread, so
//! repeated runs over the same graph produce bit-identical gradients.
//!
//! Inference paths simply drop the tape after reading the outputs.

use crate::error::{Error, Result};

use super::linalg::{matmul_nn, matmul_nt, matmul_tn};
use super::tensor::{BoolMat, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`]. Only valid for the tape that
/// produced it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S: Scalar> {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    AddScalar(ValueId),
    MulScalar(ValueId, S),
    AddBias(ValueId, ValueId),
    Matmul(ValueId, ValueId),
    Transpose(ValueId),
    Reshape(ValueId),
    SliceRows(ValueId, usize),
    SliceCols(ValueId, usize),
    ConcatRows(Vec<ValueId>),
    ConcatCols(Vec<ValueId>),
    SumAll(ValueId),
    MeanAll(ValueId),
    Exp(ValueId),
    Sigmoid(ValueId),
    Silu(ValueId),
    Sqrt(ValueId),
    GatherRows(ValueId, Vec<usize>),
    SoftmaxMasked(ValueId, BoolMat),
    RmsNorm { x: ValueId, gain: ValueId, eps: S },
    Rope { x: ValueId, cos: Vec<S>, sin: Vec<S> },
    CrossEntropy { logits: ValueId, targets: Vec<usize> },
}

struct Node<S: Scalar> {
    op: Op<S>,
    value: Tensor<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`ValueId`].
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `id`, or `None` if no gradient flowed
    /// there (value not on any differentiable path).
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

fn ew2<S: Scalar>(
    op: &'static str,
    a: &Tensor<S>,
    b: &Tensor<S>,
    f: impl Fn(S, S) -> S,
) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

fn map<S: Scalar>(a: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn transpose_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let (r, c) = match t.shape() {
        [r, c] => (*r, *c),
        _ => return Err(Error::shape("transpose", t.shape(), &[])),
    };
    let src = t.data();
    let mut out = vec![S::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

fn sigmoid_val<S: Scalar>(x: S) -> S {
    S::ONE / (S::ONE + (-x).exp())
}

/// Rows and row stride for tensors treated as a stack of rows along axis 0.
fn row_layout(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [] => None,
        [r, rest @ ..] => Some((*r, rest.iter().product())),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a recorded node. `id` must come from this tape.
    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, needs_grad: bool) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value, needs_grad });
        id
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Register an input tensor. Gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor<S>) -> ValueId {
        let ng = t.requires_grad();
        self.push(Op::Leaf, t, ng)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ew2("add", self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ew2("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), out, ng))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = ew2("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    pub fn add_scalar(&mut self, a: ValueId, s: S) -> Result<ValueId> {
        let out = map(self.value(a), |x| x + s);
        let ng = self.needs(a);
        Ok(self.push(Op::AddScalar(a), out, ng))
    }

    pub fn mul_scalar(&mut self, a: ValueId, s: S) -> Result<ValueId> {
        let out = map(self.value(a), |x| x * s);
        let ng = self.needs(a);
        Ok(self.push(Op::MulScalar(a, s), out, ng))
    }

    /// Broadcast a rank-1 bias over the trailing dimension of `a`. The only
    /// broadcasting form supported anywhere on the tape.
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let v = self.value(a);
        let b = self.value(bias);
        let d = match b.shape() {
            [d] => *d,
            _ => return Err(Error::shape("add_bias", v.shape(), b.shape())),
        };
        if v.shape().last() != Some(&d) {
            return Err(Error::shape("add_bias", v.shape(), b.shape()));
        }
        let bd = b.data();
        let data = v
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % d])
            .collect();
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddBias(a, bias), out, ng))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let out = matmul_nn(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), out, ng))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let out = transpose_tensor(self.value(a))?;
        let ng = self.needs(a);
        Ok(self.push(Op::Transpose(a), out, ng))
    }

    pub fn reshape(&mut self, a: ValueId, shape: &[usize]) -> Result<ValueId> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), out, ng))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let v = self.value(a);
        let Some((rows, stride)) = row_layout(v.shape()) else {
            return Err(Error::shape("slice_rows", v.shape(), &[]));
        };
        if start > end || end > rows {
            return Err(Error::Contract(format!(
                "slice_rows: range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::from_parts(shape, v.data()[start * stride..end * stride].to_vec());
        let ng = self.needs(a);
        Ok(self.push(Op::SliceRows(a, start), out, ng))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: ValueId, start: usize, end: usize) -> Result<ValueId> {
        let v = self.value(a);
        let (rows, cols) = match v.shape() {
            [r, c] => (*r, *c),
            _ => return Err(Error::shape("slice_cols", v.shape(), &[])),
        };
        if start > end || end > cols {
            return Err(Error::Contract(format!(
                "slice_cols: range {start}..{end} out of bounds for {cols} cols"
            )));
        }
        let w = end - start;
        let src = v.data();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let out = Tensor::from_parts(vec![rows, w], data);
        let ng = self.needs(a);
        Ok(self.push(Op::SliceCols(a, start), out, ng))
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: no inputs".into()));
        }
        let tail = self.value(parts[0]).shape().get(1..).map(<[usize]>::to_vec);
        let Some(tail) = tail else {
            return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), &[]));
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().get(1..) != Some(tail.as_slice()) {
                return Err(Error::shape("concat_rows", self.value(parts[0]).shape(), v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let out = Tensor::from_parts(shape, data);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out, ng))
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let rows = match self.value(parts[0]).shape() {
            [r, _] => *r,
            s => return Err(Error::shape("concat_cols", s, &[])),
        };
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            match self.value(p).shape() {
                [r, c] if *r == rows => {
                    widths.push(*c);
                    total += c;
                }
                s => return Err(Error::shape("concat_cols", &[rows], s)),
            }
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (i, &p) in parts.iter().enumerate() {
                let v = self.value(p);
                let c = widths[i];
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, ng))
    }

    pub fn sum_all(&mut self, a: ValueId) -> Result<ValueId> {
        let mut acc = S::ZERO;
        for &x in self.value(a).data() {
            acc += x;
        }
        let ng = self.needs(a);
        Ok(self.push(Op::SumAll(a), Tensor::scalar(acc), ng))
    }

    pub fn mean_all(&mut self, a: ValueId) -> Result<ValueId> {
        let v = self.value(a);
        if v.numel() == 0 {
            return Err(Error::Contract("mean_all: empty tensor".into()));
        }
        let mut acc = S::ZERO;
        for &x in v.data() {
            acc += x;
        }
        let out = Tensor::scalar(acc / S::from_f64(v.numel() as f64));
        let ng = self.needs(a);
        Ok(self.push(Op::MeanAll(a), out, ng))
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        let out = map(self.value(a), Scalar::exp);
        let ng = self.needs(a);
        Ok(self.push(Op::Exp(a), out, ng))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> Result<ValueId> {
        let out = map(self.value(a), sigmoid_val);
        let ng = self.needs(a);
        Ok(self.push(Op::Sigmoid(a), out, ng))
    }

    pub fn silu(&mut self, a: ValueId) -> Result<ValueId> {
        let out = map(self.value(a), |x| x * sigmoid_val(x));
        let ng = self.needs(a);
        Ok(self.push(Op::Silu(a), out, ng))
    }

    pub fn sqrt(&mut self, a: ValueId) -> Result<ValueId> {
        let out = map(self.value(a), Scalar::sqrt);
        let ng = self.needs(a);
        Ok(self.push(Op::Sqrt(a), out, ng))
    }

    /// `out[i] = a[indices[i]]` along axis 0. Duplicate indices are allowed;
    /// their gradients accumulate. Doubles as embedding lookup when `a` is
    /// an id-to-vector table.
    pub fn gather_rows(&mut self, a: ValueId, indices: &[usize]) -> Result<ValueId> {
        let v = self.value(a);
        let Some((rows, stride)) = row_layout(v.shape()) else {
            return Err(Error::shape("gather_rows", v.shape(), &[]));
        };
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of bounds for {rows} rows"
            )));
        }
        let src = v.data();
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            data.extend_from_slice(&src[i * stride..(i + 1) * stride]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::from_parts(shape, data);
        let ng = self.needs(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), out, ng))
    }

    /// Embedding lookup: `gather_rows` specialised to an id table.
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        self.gather_rows(table, ids)
    }

    /// Row-wise softmax restricted to visible entries. Hidden entries get a
    /// large negative additive surrogate before the stable softmax and are
    /// then written as exact zeros, so each visible row sums to 1 and hidden
    /// probabilities are bitwise 0. A row with nothing visible is an error.
    pub fn softmax_masked(&mut self, scores: ValueId, mask: &BoolMat) -> Result<ValueId> {
        let v = self.value(scores);
        let (rows, cols) = match v.shape() {
            [r, c] => (*r, *c),
            _ => return Err(Error::shape("softmax_masked", v.shape(), &[])),
        };
        if mask.rows() != rows || mask.cols() != cols {
            return Err(Error::shape(
                "softmax_masked",
                v.shape(),
                &[mask.rows(), mask.cols()],
            ));
        }
        let src = v.data();
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            let srow = &src[r * cols..(r + 1) * cols];
            let mrow = mask.row(r);
            if !mrow.iter().any(|&b| b) {
                return Err(Error::EmptyVisibleRow { row: r });
            }
            let orow = &mut out[r * cols..(r + 1) * cols];
            for j in 0..cols {
                orow[j] = if mrow[j] { srow[j] } else { srow[j] + S::MASK_NEG };
            }
            let mut m = orow[0];
            for &s in orow.iter() {
                m = m.max_val(s);
            }
            let mut sum = S::ZERO;
            for j in 0..cols {
                let e = (orow[j] - m).exp();
                orow[j] = e;
                sum += e;
            }
            for j in 0..cols {
                orow[j] = if mrow[j] { orow[j] / sum } else { S::ZERO };
            }
        }
        let outt = Tensor::from_parts(vec![rows, cols], out);
        let ng = self.needs(scores);
        Ok(self.push(Op::SoftmaxMasked(scores, mask.clone()), outt, ng))
    }

    /// RMS normalisation over the last axis with a learnable gain:
    /// `out = x / sqrt(mean(x^2) + eps) * gain`.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId, eps: f64) -> Result<ValueId> {
        let v = self.value(x);
        let g = self.value(gain);
        let dim = match v.shape().last() {
            Some(&d) if d > 0 => d,
            _ => return Err(Error::shape("rms_norm", v.shape(), g.shape())),
        };
        if g.shape() != [dim] {
            return Err(Error::shape("rms_norm", v.shape(), g.shape()));
        }
        let epss = S::from_f64(eps);
        let src = v.data();
        let gd = g.data();
        let rows = v.numel() / dim;
        let mut out = vec![S::ZERO; v.numel()];
        for r in 0..rows {
            let xrow = &src[r * dim..(r + 1) * dim];
            let mut ms = S::ZERO;
            for &xv in xrow {
                ms += xv * xv;
            }
            let inv = S::ONE / (ms / S::from_f64(dim as f64) + epss).sqrt();
            let orow = &mut out[r * dim..(r + 1) * dim];
            for j in 0..dim {
                orow[j] = xrow[j] * inv * gd[j];
            }
        }
        let outt = Tensor::from_parts(v.shape().to_vec(), out);
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(Op::RmsNorm { x, gain, eps: epss }, outt, ng))
    }

    /// Rotate adjacent column pairs `(2k, 2k+1)` of each row by the given
    /// per-(row, pair) angles. `cos`/`sin` must hold `rows * cols / 2`
    /// entries in row-major (row, pair) order.
    pub fn rope(&mut self, x: ValueId, cos: &[S], sin: &[S]) -> Result<ValueId> {
        let v = self.value(x);
        let (rows, cols) = match v.shape() {
            [r, c] if c % 2 == 0 => (*r, *c),
            _ => return Err(Error::shape("rope", v.shape(), &[])),
        };
        let pairs = cols / 2;
        if cos.len() != rows * pairs || sin.len() != rows * pairs {
            return Err(Error::Contract(format!(
                "rope: need {} angle entries, got cos {} sin {}",
                rows * pairs,
                cos.len(),
                sin.len()
            )));
        }
        let src = v.data();
        let mut out = vec![S::ZERO; rows * cols];
        for r in 0..rows {
            for k in 0..pairs {
                let (c, s) = (cos[r * pairs + k], sin[r * pairs + k]);
                let (a, b) = (src[r * cols + 2 * k], src[r * cols + 2 * k + 1]);
                out[r * cols + 2 * k] = a * c - b * s;
                out[r * cols + 2 * k + 1] = a * s + b * c;
            }
        }
        let outt = Tensor::from_parts(vec![rows, cols], out);
        let ng = self.needs(x);
        Ok(self.push(
            Op::Rope { x, cos: cos.to_vec(), sin: sin.to_vec() },
            outt,
            ng,
        ))
    }

    /// Mean token-level cross-entropy between rows of logits and integer
    /// targets. Returns a scalar.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let v = self.value(logits);
        let (rows, cols) = match v.shape() {
            [r, c] => (*r, *c),
            _ => return Err(Error::shape("cross_entropy", v.shape(), &[])),
        };
        if targets.len() != rows || rows == 0 {
            return Err(Error::Contract(format!(
                "cross_entropy: {} logit rows vs {} targets",
                rows,
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Contract(format!(
                "cross_entropy: target {bad} out of bounds for {cols} classes"
            )));
        }
        let src = v.data();
        let mut loss = S::ZERO;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * cols..(r + 1) * cols];
            let mut m = row[0];
            for &x in row {
                m = m.max_val(x);
            }
            let mut sum = S::ZERO;
            for &x in row {
                sum += (x - m).exp();
            }
            loss += m + sum.ln() - row[t];
        }
        loss = loss / S::from_f64(rows as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec() },
            Tensor::scalar(loss),
            ng,
        ))
    }

    /// Reverse pass from a scalar loss. Single-threaded; node order is the
    /// recording order, so gradients are bit-reproducible.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<S>> {
        let lnode = self
            .nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract("backward: unknown value id".into()))?;
        if lnode.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                lnode.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lnode.value.shape(), S::ONE));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate_into(&self, grads: &mut [Option<Tensor<S>>], id: ValueId, delta: Tensor<S>) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id.0] {
            slot @ None => *slot = Some(delta),
            Some(t) => {
                for (d, s) in t.data_mut().iter_mut().zip(delta.data()) {
                    *d += *s;
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate_into(grads, *a, g.clone());
                self.accumulate_into(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate_into(grads, *a, g.clone());
                self.accumulate_into(grads, *b, map(g, |x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = ew2("mul_bwd", g, self.value(*b), |x, y| x * y)?;
                    self.accumulate_into(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = ew2("mul_bwd", g, self.value(*a), |x, y| x * y)?;
                    self.accumulate_into(grads, *b, d);
                }
            }
            Op::AddScalar(a) => {
                self.accumulate_into(grads, *a, g.clone());
            }
            Op::MulScalar(a, s) => {
                let s = *s;
                self.accumulate_into(grads, *a, map(g, |x| x * s));
            }
            Op::AddBias(a, bias) => {
                if self.needs(*a) {
                    self.accumulate_into(grads, *a, g.clone());
                }
                if self.needs(*bias) {
                    let d = self.value(*bias).numel();
                    let mut acc = vec![S::ZERO; d];
                    for (i, &gv) in g.data().iter().enumerate() {
                        acc[i % d] += gv;
                    }
                    self.accumulate_into(grads, *bias, Tensor::from_parts(vec![d], acc));
                }
            }
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    self.accumulate_into(grads, *a, matmul_nt(g, self.value(*b))?);
                }
                if self.needs(*b) {
                    self.accumulate_into(grads, *b, matmul_tn(self.value(*a), g)?);
                }
            }
            Op::Transpose(a) => {
                self.accumulate_into(grads, *a, transpose_tensor(g)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate_into(grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
            }
            Op::SliceRows(a, start) => {
                let v = self.value(*a);
                let (_, stride) = row_layout(v.shape()).expect("validated at record time");
                let out_rows = g.shape()[0];
                let mut d = vec![S::ZERO; v.numel()];
                d[start * stride..(start + out_rows) * stride].copy_from_slice(g.data());
                self.accumulate_into(grads, *a, Tensor::from_parts(v.shape().to_vec(), d));
            }
            Op::SliceCols(a, start) => {
                let v = self.value(*a);
                let (rows, cols) = (v.shape()[0], v.shape()[1]);
                let w = g.shape()[1];
                let mut d = vec![S::ZERO; v.numel()];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                self.accumulate_into(grads, *a, Tensor::from_parts(v.shape().to_vec(), d));
            }
            Op::ConcatRows(parts) => {
                let (_, stride) = row_layout(g.shape()).expect("validated at record time");
                let mut offset = 0;
                for &p in parts {
                    let v = self.value(p);
                    let n = v.shape()[0] * stride;
                    let d = Tensor::from_parts(
                        v.shape().to_vec(),
                        g.data()[offset..offset + n].to_vec(),
                    );
                    offset += n;
                    self.accumulate_into(grads, p, d);
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (g.shape()[0], g.shape()[1]);
                let mut start = 0;
                for &p in parts {
                    let v = self.value(p);
                    let w = v.shape()[1];
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&g.data()[r * total + start..r * total + start + w]);
                    }
                    start += w;
                    self.accumulate_into(grads, p, Tensor::from_parts(vec![rows, w], d));
                }
            }
            Op::SumAll(a) => {
                let gv = g.data()[0];
                let shape = self.value(*a).shape().to_vec();
                self.accumulate_into(grads, *a, Tensor::full(&shape, gv));
            }
            Op::MeanAll(a) => {
                let v = self.value(*a);
                let gv = g.data()[0] / S::from_f64(v.numel() as f64);
                self.accumulate_into(grads, *a, Tensor::full(v.shape(), gv));
            }
            Op::Exp(a) => {
                let d = ew2("exp_bwd", g, &self.nodes[i].value, |x, y| x * y)?;
                self.accumulate_into(grads, *a, d);
            }
            Op::Sigmoid(a) => {
                let d = ew2("sigmoid_bwd", g, &self.nodes[i].value, |gv, s| {
                    gv * s * (S::ONE - s)
                })?;
                self.accumulate_into(grads, *a, d);
            }
            Op::Silu(a) => {
                let d = ew2("silu_bwd", g, self.value(*a), |gv, x| {
                    let s = sigmoid_val(x);
                    gv * s * (S::ONE + x * (S::ONE - s))
                })?;
                self.accumulate_into(grads, *a, d);
            }
            Op::Sqrt(a) => {
                let half = S::from_f64(0.5);
                let d = ew2("sqrt_bwd", g, &self.nodes[i].value, |gv, r| gv * half / r)?;
                self.accumulate_into(grads, *a, d);
            }
            Op::GatherRows(a, indices) => {
                let v = self.value(*a);
                let (_, stride) = row_layout(v.shape()).expect("validated at record time");
                let mut d = vec![S::ZERO; v.numel()];
                for (r, &idx) in indices.iter().enumerate() {
                    let grow = &g.data()[r * stride..(r + 1) * stride];
                    let drow = &mut d[idx * stride..(idx + 1) * stride];
                    for (dst, src) in drow.iter_mut().zip(grow) {
                        *dst += *src;
                    }
                }
                self.accumulate_into(grads, *a, Tensor::from_parts(v.shape().to_vec(), d));
            }
            Op::SoftmaxMasked(a, _mask) => {
                let p = self.nodes[i].value.data();
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let gd = g.data();
                let mut d = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    let pr = &p[r * cols..(r + 1) * cols];
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let mut dot = S::ZERO;
                    for j in 0..cols {
                        dot += gr[j] * pr[j];
                    }
                    // Hidden entries have p = 0, so their slots stay 0.
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        dr[j] = pr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate_into(grads, *a, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::RmsNorm { x, gain, eps } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let dim = *xv.shape().last().expect("validated at record time");
                let rows = xv.numel() / dim;
                let (xd, gaind, gd) = (xv.data(), gv.data(), g.data());
                let dimf = S::from_f64(dim as f64);
                let needs_x = self.needs(*x);
                let needs_gain = self.needs(*gain);
                let mut dx = vec![S::ZERO; xv.numel()];
                let mut dgain = vec![S::ZERO; dim];
                for r in 0..rows {
                    let xrow = &xd[r * dim..(r + 1) * dim];
                    let grow = &gd[r * dim..(r + 1) * dim];
                    let mut ms = S::ZERO;
                    for &v in xrow {
                        ms += v * v;
                    }
                    let inv = S::ONE / (ms / dimf + *eps).sqrt();
                    if needs_gain {
                        for j in 0..dim {
                            dgain[j] += grow[j] * xrow[j] * inv;
                        }
                    }
                    if needs_x {
                        // u = g * gain; dx = inv*u - inv^3 * x * <u, x>/dim
                        let mut dot = S::ZERO;
                        for j in 0..dim {
                            dot += grow[j] * gaind[j] * xrow[j];
                        }
                        let k = inv * inv * inv * dot / dimf;
                        let dxrow = &mut dx[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dxrow[j] = inv * grow[j] * gaind[j] - k * xrow[j];
                        }
                    }
                }
                if needs_x {
                    self.accumulate_into(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if needs_gain {
                    self.accumulate_into(grads, *gain, Tensor::from_parts(vec![dim], dgain));
                }
            }
            Op::Rope { x, cos, sin } => {
                // Inverse rotation: transpose of an orthogonal map.
                let (rows, cols) = (g.shape()[0], g.shape()[1]);
                let pairs = cols / 2;
                let gd = g.data();
                let mut d = vec![S::ZERO; rows * cols];
                for r in 0..rows {
                    for k in 0..pairs {
                        let (c, s) = (cos[r * pairs + k], sin[r * pairs + k]);
                        let (ga, gb) = (gd[r * cols + 2 * k], gd[r * cols + 2 * k + 1]);
                        d[r * cols + 2 * k] = ga * c + gb * s;
                        d[r * cols + 2 * k + 1] = -ga * s + gb * c;
                    }
                }
                self.accumulate_into(grads, *x, Tensor::from_parts(vec![rows, cols], d));
            }
            Op::CrossEntropy { logits, targets } => {
                let v = self.value(*logits);
                let (rows, cols) = (v.shape()[0], v.shape()[1]);
                let src = v.data();
                let scale = g.data()[0] / S::from_f64(rows as f64);
                let mut d = vec![S::ZERO; rows * cols];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &src[r * cols..(r + 1) * cols];
                    let mut m = row[0];
                    for &x in row {
                        m = m.max_val(x);
                    }
                    let mut sum = S::ZERO;
                    for &x in row {
                        sum += (x - m).exp();
                    }
                    let dr = &mut d[r * cols..(r + 1) * cols];
                    for j in 0..cols {
                        let p = (row[j] - m).exp() / sum;
                        let delta = if j == t { S::ONE } else { S::ZERO };
                        dr[j] = scale * (p - delta);
                    }
                }
                self.accumulate_into(grads, *logits, Tensor::from_parts(vec![rows, cols], d));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn mul_sum_gradients_are_the_other_operand() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0]).with_grad());
        let b = tape.leaf(t64(&[3], &[4.0, 5.0, 6.0]).with_grad());
        let m = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        // loss = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones.
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad());
        let b = tape.leaf(t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]).with_grad());
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let mut tape = Tape::new();
        let table = tape.leaf(t64(&[3, 2], &[0.0; 6]).with_grad());
        let picked = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        assert_eq!(picked.index(), 1);
        let loss = tape.sum_all(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_masked_matches_exp_normalize_oracle() {
        let mut tape = Tape::new();
        let s = tape.leaf(t64(&[2, 3], &[0.3, -1.2, 2.0, 1.0, 1.0, 1.0]));
        let mut mask = BoolMat::new_true(2, 3);
        mask.set(0, 1, false);
        let p = tape.softmax_masked(s, &mask).unwrap();
        let pd = tape.value(p).data().to_vec();
        // Row 0 oracle over visible {0, 2}.
        let z = (0.3f64).exp() + (2.0f64).exp();
        assert!((pd[0] - (0.3f64).exp() / z).abs() < 1e-12);
        assert_eq!(pd[1], 0.0);
        assert!((pd[2] - (2.0f64).exp() / z).abs() < 1e-12);
        // Row 1: uniform.
        for j in 3..6 {
            assert!((pd[j] - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_rejects_empty_row() {
        let mut tape = Tape::<f32>::new();
        let s = tape.leaf(Tensor::zeros(&[2, 2]));
        let mut mask = BoolMat::new_true(2, 2);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        match tape.softmax_masked(s, &mask) {
            Err(Error::EmptyVisibleRow { row }) => assert_eq!(row, 1),
            other => panic!("expected EmptyVisibleRow, got {other:?}"),
        }
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t64(&[1, 3], &[1.0, 2.0, 3.0]));
        let loss = tape.cross_entropy(logits, &[2]).unwrap();
        // -log softmax([1,2,3])[2] = log(e^1+e^2+e^3) - 3
        let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn rope_is_inverted_by_negated_angles() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 4], &[0.3, -0.7, 1.1, 0.2]));
        let ang: Vec<f64> = vec![0.5, 1.3];
        let cos: Vec<f64> = ang.iter().map(|a| a.cos()).collect();
        let sin: Vec<f64> = ang.iter().map(|a| a.sin()).collect();
        let neg_sin: Vec<f64> = sin.iter().map(|s| -s).collect();
        let fwd = tape.rope(x, &cos, &sin).unwrap();
        let back = tape.rope(fwd, &cos, &neg_sin).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(tape.value(x).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_bitwise_repeatable() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2, 2], &[0.1, -0.5, 0.7, 1.3]).with_grad());
        let b = tape.leaf(t64(&[2, 2], &[1.0, 0.2, -0.3, 0.8]).with_grad());
        let g1 = tape.leaf(t64(&[2], &[1.0, 1.0]).with_grad());
        let m = tape.matmul(a, b).unwrap();
        let s = tape.silu(m).unwrap();
        let n = tape.rms_norm(s, g1, 1e-6).unwrap();
        let loss = tape.mean_all(n).unwrap();
        let r1 = tape.backward(loss).unwrap();
        let r2 = tape.backward(loss).unwrap();
        for id in [a, b, g1] {
            let x: Vec<u64> = r1.get(id).unwrap().data().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = r2.get(id).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn no_grad_leaves_receive_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t64(&[2], &[3.0, 4.0]).with_grad());
        let m = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]).with_grad());
        assert!(tape.backward(a).is_err());
    }
}
