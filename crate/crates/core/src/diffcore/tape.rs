//! Reverse-mode automatic differentiation over an operation tape.
//!
//! A [`Tape`] records every forward operation together with its input value
//! ids. `backward` replays the record in reverse, applying each operation's
//! vector-Jacobian product, and accumulates the resulting gradients into the
//! [`ParamStore`] entries the tape's leaves were bound to. One tape serves
//! one forward pass; construction and backward are single-threaded, distinct
//! tapes are independent.

use std::ops::Range;

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Elementwise binary operation kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

/// Elementwise unary operation kinds. `abs` and `relu` use subgradient 0 at 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Abs,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf,
    Linear {
        weight: ValueId,
        input: ValueId,
        bias: Option<ValueId>,
    },
    Binary {
        kind: BinaryKind,
        a: ValueId,
        b: ValueId,
    },
    /// Tensor-with-constant variant of `Binary`; the scalar side carries no
    /// gradient. `scalar_left` marks `scalar op tensor` orientation.
    BinaryScalar {
        kind: BinaryKind,
        a: ValueId,
        scalar: f64,
        scalar_left: bool,
    },
    Unary {
        kind: UnaryKind,
        input: ValueId,
    },
    SoftmaxRows {
        input: ValueId,
    },
    Transpose {
        input: ValueId,
    },
    SegmentMean {
        input: ValueId,
        segments: Vec<Range<usize>>,
    },
    Concat {
        parts: Vec<ValueId>,
        axis: usize,
    },
    GatherCols {
        input: ValueId,
        indices: Vec<usize>,
    },
    Reshape {
        input: ValueId,
    },
    SumAll {
        input: ValueId,
    },
    MeanAll {
        input: ValueId,
    },
    BceWithLogitsMean {
        logits: ValueId,
        targets: Tensor,
    },
    LayerNormCols {
        input: ValueId,
        eps: f64,
    },
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tape {
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    sources: Vec<Option<ParamId>>,
    corrupt_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            values: Vec::new(),
            sources: Vec::new(),
            corrupt_backward: false,
        }
    }

    /// Debug hook: scales one backward rule by 2 so gradient checks must
    /// fail. Negative control for the checking machinery itself.
    pub fn set_backward_corruption(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    /// Distance from the recorded forward pass to the nearest
    /// non-differentiable point: the smallest |input| over `abs`/`relu`
    /// nodes and the smallest |a - b| over `max` nodes. Finite-difference
    /// checks are only meaningful when this clears the differencing step.
    pub fn min_kink_distance(&self) -> f64 {
        let mut min = f64::INFINITY;
        for (node, _) in self.nodes.iter().zip(&self.values) {
            match node {
                Node::Unary {
                    kind: UnaryKind::Abs | UnaryKind::Relu,
                    input,
                } => {
                    for v in self.values[input.0].data() {
                        min = min.min(v.abs());
                    }
                }
                Node::Binary {
                    kind: BinaryKind::Max,
                    a,
                    b,
                } => {
                    let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                    for (x, y) in ta.data().iter().zip(tb.data()) {
                        min = min.min((x - y).abs());
                    }
                }
                Node::BinaryScalar {
                    kind: BinaryKind::Max,
                    a,
                    scalar,
                    ..
                } => {
                    for v in self.values[a.0].data() {
                        min = min.min((v - scalar).abs());
                    }
                }
                _ => {}
            }
        }
        min
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, value: Tensor, source: Option<ParamId>) -> ValueId {
        debug_assert!(value.is_finite(), "non-finite forward value");
        self.nodes.push(node);
        self.values.push(value);
        self.sources.push(source);
        ValueId(self.values.len() - 1)
    }

    /// Record a constant leaf; no gradient flows out of it.
    pub fn constant(&mut self, value: Tensor) -> ValueId {
        self.push(Node::Leaf, value, None)
    }

    /// Record a leaf bound to a stored parameter; `backward` will accumulate
    /// the leaf's gradient into that parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> ValueId {
        self.push(Node::Leaf, store.value(id).clone(), Some(id))
    }

    /// `weight[O,I] @ input[I,K] (+ bias[O] per column)`. A point-wise (1x1)
    /// convolution over the channel dimension is exactly this map.
    pub fn linear(
        &mut self,
        weight: ValueId,
        input: ValueId,
        bias: Option<ValueId>,
    ) -> Result<ValueId> {
        let w = self.value(weight);
        let x = self.value(input);
        if w.shape().len() != 2 || x.shape().len() != 2 || w.cols() != x.rows() {
            return Err(Error::dim("linear", w.shape(), x.shape()));
        }
        let (o, i, k) = (w.rows(), w.cols(), x.cols());
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [o] {
                return Err(Error::dim("linear bias", bt.shape(), &[o]));
            }
        }
        let mut out = vec![0.0; o * k];
        let (w, x) = (self.value(weight), self.value(input));
        for r in 0..o {
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..i {
                    acc += w.data()[r * i + j] * x.data()[j * k + c];
                }
                out[r * k + c] = acc;
            }
        }
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for r in 0..o {
                for c in 0..k {
                    out[r * k + c] += bd[r];
                }
            }
        }
        let value = Tensor::new(vec![o, k], out)?;
        Ok(self.push(
            Node::Linear {
                weight,
                input,
                bias,
            },
            value,
            None,
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("elementwise", ta.shape(), tb.shape()));
        }
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| apply_binary(kind, x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Node::Binary { kind, a, b }, value, None))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Elementwise maximum; on ties the gradient routes to the first operand.
    pub fn elem_max(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary(BinaryKind::Max, a, b)
    }

    fn binary_scalar(
        &mut self,
        kind: BinaryKind,
        a: ValueId,
        scalar: f64,
        scalar_left: bool,
    ) -> ValueId {
        let ta = self.value(a);
        let data: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| {
                if scalar_left {
                    apply_binary(kind, scalar, x)
                } else {
                    apply_binary(kind, x, scalar)
                }
            })
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(
            Node::BinaryScalar {
                kind,
                a,
                scalar,
                scalar_left,
            },
            value,
            None,
        )
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: ValueId, scalar: f64) -> ValueId {
        self.binary_scalar(BinaryKind::Mul, a, scalar, false)
    }

    /// Add a constant.
    pub fn add_scalar(&mut self, a: ValueId, scalar: f64) -> ValueId {
        self.binary_scalar(BinaryKind::Add, a, scalar, false)
    }

    fn unary(&mut self, kind: UnaryKind, input: ValueId) -> ValueId {
        let t = self.value(input);
        let data: Vec<f64> = t
            .data()
            .iter()
            .map(|&x| match kind {
                UnaryKind::Abs => x.abs(),
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::Sigmoid => sigmoid(x),
            })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Node::Unary { kind, input }, value, None)
    }

    pub fn abs(&mut self, input: ValueId) -> ValueId {
        self.unary(UnaryKind::Abs, input)
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        self.unary(UnaryKind::Relu, input)
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        self.unary(UnaryKind::Sigmoid, input)
    }

    /// Row-wise softmax with max subtraction. Column softmax is obtained by
    /// transposing before and after.
    pub fn softmax_rows(&mut self, input: ValueId) -> Result<ValueId> {
        let t = self.value(input);
        if t.shape().len() != 2 || t.cols() == 0 {
            return Err(Error::dim("softmax_rows", t.shape(), &[0, 1]));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for row in 0..r {
            let src = &t.data()[row * c..(row + 1) * c];
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &x) in src.iter().enumerate() {
                let e = (x - max).exp();
                data[row * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                data[row * c + j] /= sum;
            }
        }
        let value = Tensor::new(vec![r, c], data)?;
        Ok(self.push(Node::SoftmaxRows { input }, value, None))
    }

    pub fn transpose(&mut self, input: ValueId) -> Result<ValueId> {
        let t = self.value(input);
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[0, 0]));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(Node::Transpose { input }, value, None))
    }

    /// Column-block means: `segments` must be a contiguous, non-empty
    /// partition of `[0, L)`; output column `j` is the mean of input columns
    /// in segment `j`. Backward spreads each gradient column uniformly over
    /// its segment.
    pub fn segment_mean(&mut self, input: ValueId, segments: &[Range<usize>]) -> Result<ValueId> {
        let t = self.value(input);
        if t.shape().len() != 2 {
            return Err(Error::dim("segment_mean", t.shape(), &[0, 0]));
        }
        let (d, l) = (t.rows(), t.cols());
        let mut cursor = 0usize;
        for (j, seg) in segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::DegenerateDetection(format!(
                    "segment {j} is empty in segment_mean"
                )));
            }
            if seg.start != cursor || seg.end > l {
                return Err(Error::Contract(format!(
                    "segments must partition [0, {l}); segment {j} is {seg:?}"
                )));
            }
            cursor = seg.end;
        }
        if cursor != l {
            return Err(Error::Contract(format!(
                "segments cover [0, {cursor}) but input has {l} columns"
            )));
        }
        let n_seg = segments.len();
        let mut data = vec![0.0; d * n_seg];
        for (j, seg) in segments.iter().enumerate() {
            let inv = 1.0 / seg.len() as f64;
            for r in 0..d {
                let mut acc = 0.0;
                for c in seg.clone() {
                    acc += t.data()[r * l + c];
                }
                data[r * n_seg + j] = acc * inv;
            }
        }
        let value = Tensor::new(vec![d, n_seg], data)?;
        Ok(self.push(
            Node::SegmentMean {
                input,
                segments: segments.to_vec(),
            },
            value,
            None,
        ))
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns), in
    /// argument order.
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> Result<ValueId> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::Contract(format!(
                "concat needs >=1 part and axis in {{0,1}}, got {} parts, axis {axis}",
                parts.len()
            )));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.len() != 2 {
            return Err(Error::dim("concat", &first, &[0, 0]));
        }
        let other_axis = 1 - axis;
        let mut along = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[other_axis] != first[other_axis] {
                return Err(Error::dim("concat", &first, s));
            }
            along += s[axis];
        }
        let (rows, cols) = if axis == 0 {
            (along, first[1])
        } else {
            (first[0], along)
        };
        let mut data = vec![0.0; rows * cols];
        if axis == 0 {
            let mut row_off = 0;
            for &p in parts {
                let t = self.value(p);
                let pr = t.rows();
                data[row_off * cols..(row_off + pr) * cols].copy_from_slice(t.data());
                row_off += pr;
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let t = self.value(p);
                let pc = t.cols();
                for r in 0..rows {
                    data[r * cols + col_off..r * cols + col_off + pc]
                        .copy_from_slice(&t.data()[r * pc..(r + 1) * pc]);
                }
                col_off += pc;
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(
            Node::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            None,
        ))
    }

    /// Select columns by index (repeats allowed). Backward scatter-adds each
    /// output column's gradient back into its source column.
    pub fn gather_cols(&mut self, input: ValueId, indices: &[usize]) -> Result<ValueId> {
        let t = self.value(input);
        if t.shape().len() != 2 {
            return Err(Error::dim("gather_cols", t.shape(), &[0, 0]));
        }
        let (r, c) = (t.rows(), t.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Contract(format!(
                "gather_cols index {bad} out of range for {c} columns"
            )));
        }
        let k = indices.len();
        let mut data = vec![0.0; r * k];
        for row in 0..r {
            for (out_c, &src_c) in indices.iter().enumerate() {
                data[row * k + out_c] = t.data()[row * c + src_c];
            }
        }
        let value = Tensor::new(vec![r, k], data)?;
        Ok(self.push(
            Node::GatherCols {
                input,
                indices: indices.to_vec(),
            },
            value,
            None,
        ))
    }

    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId> {
        let t = self.value(input);
        let n: usize = shape.iter().product();
        if n != t.numel() {
            return Err(Error::dim("reshape", t.shape(), shape));
        }
        let value = Tensor::new(shape.to_vec(), t.data().to_vec())?;
        Ok(self.push(Node::Reshape { input }, value, None))
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let s: f64 = self.value(input).data().iter().sum();
        self.push(Node::SumAll { input }, Tensor::scalar(s), None)
    }

    pub fn mean_all(&mut self, input: ValueId) -> Result<ValueId> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(Error::Contract("mean_all over empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(Node::MeanAll { input }, Tensor::scalar(m), None))
    }

    /// Mean binary cross-entropy with the sigmoid folded in:
    /// `mean(max(x,0) - x*t + ln(1+exp(-|x|)))`.
    pub fn bce_with_logits_mean(&mut self, logits: ValueId, targets: &Tensor) -> Result<ValueId> {
        let x = self.value(logits);
        if x.shape() != targets.shape() {
            return Err(Error::dim("bce_with_logits", x.shape(), targets.shape()));
        }
        if x.numel() == 0 {
            return Err(Error::Contract("bce_with_logits over empty tensor".into()));
        }
        let mut acc = 0.0;
        for (&xi, &ti) in x.data().iter().zip(targets.data()) {
            acc += xi.max(0.0) - xi * ti + (1.0 + (-xi.abs()).exp()).ln();
        }
        let value = Tensor::scalar(acc / x.numel() as f64);
        Ok(self.push(
            Node::BceWithLogitsMean {
                logits,
                targets: targets.clone(),
            },
            value,
            None,
        ))
    }

    /// Standardize each column to zero mean and unit variance (population
    /// statistics over the row dimension, stabilized by `eps`).
    pub fn layer_norm_cols(&mut self, input: ValueId, eps: f64) -> Result<ValueId> {
        let t = self.value(input);
        if t.shape().len() != 2 || t.rows() == 0 {
            return Err(Error::dim("layer_norm_cols", t.shape(), &[1, 0]));
        }
        let (d, k) = (t.rows(), t.cols());
        let mut data = vec![0.0; d * k];
        for c in 0..k {
            let mut mean = 0.0;
            for r in 0..d {
                mean += t.data()[r * k + c];
            }
            mean /= d as f64;
            let mut var = 0.0;
            for r in 0..d {
                let dv = t.data()[r * k + c] - mean;
                var += dv * dv;
            }
            var /= d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for r in 0..d {
                data[r * k + c] = (t.data()[r * k + c] - mean) * inv;
            }
        }
        let value = Tensor::new(vec![d, k], data)?;
        Ok(self.push(Node::LayerNormCols { input, eps }, value, None))
    }

    /// Reverse pass from a scalar output. Gradients of every reachable
    /// parameter leaf are accumulated into `store`; callers that want fresh
    /// gradients zero the store first. Deterministic: identical tapes yield
    /// bit-identical gradients.
    pub fn backward(&mut self, output: ValueId, store: &mut ParamStore) -> Result<()> {
        let out_t = self.value(output);
        if !out_t.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                out_t.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(Tensor::filled(out_t.shape(), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, grad) in grads.into_iter().enumerate() {
            if let (Some(pid), Some(g)) = (self.sources[idx], grad) {
                store.accumulate_grad(pid, &g)?;
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, contrib: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx] {
            Node::Leaf => {}
            Node::Linear {
                weight,
                input,
                bias,
            } => {
                let w = &self.values[weight.0];
                let x = &self.values[input.0];
                let (o, i, k) = (w.rows(), w.cols(), x.cols());
                let corrupt = if self.corrupt_backward { 2.0 } else { 1.0 };
                // gw = g . x^T
                let mut gw = vec![0.0; o * i];
                for r in 0..o {
                    for j in 0..i {
                        let mut acc = 0.0;
                        for c in 0..k {
                            acc += g.data()[r * k + c] * x.data()[j * k + c];
                        }
                        gw[r * i + j] = acc * corrupt;
                    }
                }
                Self::accumulate(grads, *weight, Tensor::new(vec![o, i], gw).expect("shape"));
                // gx = w^T . g
                let mut gx = vec![0.0; i * k];
                for j in 0..i {
                    for c in 0..k {
                        let mut acc = 0.0;
                        for r in 0..o {
                            acc += w.data()[r * i + j] * g.data()[r * k + c];
                        }
                        gx[j * k + c] = acc;
                    }
                }
                Self::accumulate(grads, *input, Tensor::new(vec![i, k], gx).expect("shape"));
                if let Some(b) = bias {
                    let mut gb = vec![0.0; o];
                    for r in 0..o {
                        for c in 0..k {
                            gb[r] += g.data()[r * k + c];
                        }
                    }
                    Self::accumulate(grads, *b, Tensor::vector(&gb));
                }
            }
            Node::Binary { kind, a, b } => {
                let ta = &self.values[a.0];
                let tb = &self.values[b.0];
                let mut ga = Tensor::zeros(ta.shape());
                let mut gb = Tensor::zeros(tb.shape());
                for i in 0..g.numel() {
                    let (x, y, gi) = (ta.data()[i], tb.data()[i], g.data()[i]);
                    let (da, db) = binary_grads(*kind, x, y);
                    ga.data_mut()[i] = gi * da;
                    gb.data_mut()[i] = gi * db;
                }
                Self::accumulate(grads, *a, ga);
                Self::accumulate(grads, *b, gb);
            }
            Node::BinaryScalar {
                kind,
                a,
                scalar,
                scalar_left,
            } => {
                let ta = &self.values[a.0];
                let mut ga = Tensor::zeros(ta.shape());
                for i in 0..g.numel() {
                    let x = ta.data()[i];
                    let d = if *scalar_left {
                        binary_grads(*kind, *scalar, x).1
                    } else {
                        binary_grads(*kind, x, *scalar).0
                    };
                    ga.data_mut()[i] = g.data()[i] * d;
                }
                Self::accumulate(grads, *a, ga);
            }
            Node::Unary { kind, input } => {
                let x = &self.values[input.0];
                let y = &self.values[idx];
                let mut gx = Tensor::zeros(x.shape());
                for i in 0..g.numel() {
                    let d = match kind {
                        UnaryKind::Abs => {
                            let xi = x.data()[i];
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Relu => {
                            if x.data()[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnaryKind::Sigmoid => {
                            let yi = y.data()[i];
                            yi * (1.0 - yi)
                        }
                    };
                    gx.data_mut()[i] = g.data()[i] * d;
                }
                Self::accumulate(grads, *input, gx);
            }
            Node::SoftmaxRows { input } => {
                let y = &self.values[idx];
                let (r, c) = (y.rows(), y.cols());
                let mut gx = Tensor::zeros(y.shape());
                for row in 0..r {
                    let base = row * c;
                    let mut dot = 0.0;
                    for j in 0..c {
                        dot += g.data()[base + j] * y.data()[base + j];
                    }
                    for j in 0..c {
                        gx.data_mut()[base + j] = y.data()[base + j] * (g.data()[base + j] - dot);
                    }
                }
                Self::accumulate(grads, *input, gx);
            }
            Node::Transpose { input } => {
                let (r, c) = (g.rows(), g.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g.data()[i * c + j];
                    }
                }
                Self::accumulate(
                    grads,
                    *input,
                    Tensor::new(vec![c, r], gx).expect("shape"),
                );
            }
            Node::SegmentMean { input, segments } => {
                let x = &self.values[input.0];
                let (d, l) = (x.rows(), x.cols());
                let n_seg = segments.len();
                let mut gx = Tensor::zeros(x.shape());
                for (j, seg) in segments.iter().enumerate() {
                    let inv = 1.0 / seg.len() as f64;
                    for r in 0..d {
                        let gv = g.data()[r * n_seg + j] * inv;
                        for c in seg.clone() {
                            gx.data_mut()[r * l + c] += gv;
                        }
                    }
                }
                Self::accumulate(grads, *input, gx);
            }
            Node::Concat { parts, axis } => {
                let (rows, cols) = (g.rows(), g.cols());
                let mut offset = 0;
                for &p in parts {
                    let ps = self.values[p.0].shape().to_vec();
                    let mut gp = Tensor::zeros(&ps);
                    if *axis == 0 {
                        let pr = ps[0];
                        gp.data_mut()
                            .copy_from_slice(&g.data()[offset * cols..(offset + pr) * cols]);
                        offset += pr;
                    } else {
                        let pc = ps[1];
                        for r in 0..rows {
                            gp.data_mut()[r * pc..(r + 1) * pc].copy_from_slice(
                                &g.data()[r * cols + offset..r * cols + offset + pc],
                            );
                        }
                        offset += pc;
                    }
                    Self::accumulate(grads, p, gp);
                }
            }
            Node::GatherCols { input, indices } => {
                let x = &self.values[input.0];
                let (r, c) = (x.rows(), x.cols());
                let k = indices.len();
                let mut gx = Tensor::zeros(x.shape());
                for row in 0..r {
                    for (out_c, &src_c) in indices.iter().enumerate() {
                        gx.data_mut()[row * c + src_c] += g.data()[row * k + out_c];
                    }
                }
                Self::accumulate(grads, *input, gx);
            }
            Node::Reshape { input } => {
                let x = &self.values[input.0];
                let gx = Tensor::new(x.shape().to_vec(), g.data().to_vec()).expect("same numel");
                Self::accumulate(grads, *input, gx);
            }
            Node::SumAll { input } => {
                let x = &self.values[input.0];
                Self::accumulate(grads, *input, Tensor::filled(x.shape(), g.item()));
            }
            Node::MeanAll { input } => {
                let x = &self.values[input.0];
                let gv = g.item() / x.numel() as f64;
                Self::accumulate(grads, *input, Tensor::filled(x.shape(), gv));
            }
            Node::BceWithLogitsMean { logits, targets } => {
                let x = &self.values[logits.0];
                let scale = g.item() / x.numel() as f64;
                let mut gx = Tensor::zeros(x.shape());
                for i in 0..x.numel() {
                    gx.data_mut()[i] = (sigmoid(x.data()[i]) - targets.data()[i]) * scale;
                }
                Self::accumulate(grads, *logits, gx);
            }
            Node::LayerNormCols { input, eps } => {
                let x = &self.values[input.0];
                let y = &self.values[idx];
                let (d, k) = (x.rows(), x.cols());
                let mut gx = Tensor::zeros(x.shape());
                for c in 0..k {
                    let mut mean = 0.0;
                    for r in 0..d {
                        mean += x.data()[r * k + c];
                    }
                    mean /= d as f64;
                    let mut var = 0.0;
                    for r in 0..d {
                        let dv = x.data()[r * k + c] - mean;
                        var += dv * dv;
                    }
                    var /= d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut g_mean = 0.0;
                    let mut gy_dot = 0.0;
                    for r in 0..d {
                        g_mean += g.data()[r * k + c];
                        gy_dot += g.data()[r * k + c] * y.data()[r * k + c];
                    }
                    g_mean /= d as f64;
                    gy_dot /= d as f64;
                    for r in 0..d {
                        gx.data_mut()[r * k + c] =
                            inv * (g.data()[r * k + c] - g_mean - y.data()[r * k + c] * gy_dot);
                    }
                }
                Self::accumulate(grads, *input, gx);
            }
        }
    }
}

fn apply_binary(kind: BinaryKind, a: f64, b: f64) -> f64 {
    match kind {
        BinaryKind::Add => a + b,
        BinaryKind::Sub => a - b,
        BinaryKind::Mul => a * b,
        BinaryKind::Div => a / b,
        BinaryKind::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
    }
}

/// Partial derivatives (d/da, d/db) of `a kind b`.
fn binary_grads(kind: BinaryKind, a: f64, b: f64) -> (f64, f64) {
    match kind {
        BinaryKind::Add => (1.0, 1.0),
        BinaryKind::Sub => (1.0, -1.0),
        BinaryKind::Mul => (b, a),
        BinaryKind::Div => (1.0 / b, -a / (b * b)),
        BinaryKind::Max => {
            if a >= b {
                (1.0, 0.0)
            } else {
                (0.0, 1.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(*n, t.clone()))
            .collect();
        (store, ids)
    }

    #[test]
    fn linear_identity_passthrough() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = tape.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = tape.linear(w, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_summation_row() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::matrix(&[&[1.0, 1.0]]));
        let x = tape.constant(Tensor::matrix(&[&[2.0], &[3.0]]));
        let y = tape.linear(w, x, None).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn linear_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[2, 3]));
        let x = tape.constant(Tensor::zeros(&[4, 1]));
        let err = tape.linear(w, x, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 1]"), "{msg}");
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&[0.0]).clone());
        let x = tape.reshape(x, &[1, 1]).unwrap();
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).data(), &[0.5]);
    }

    #[test]
    fn abs_sub_direct_arithmetic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[&[1.0, 4.0]]));
        let b = tape.constant(Tensor::matrix(&[&[3.0, 1.0]]));
        let d = tape.sub(a, b).unwrap();
        let y = tape.abs(d);
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::matrix(&[&[1.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let e = std::f64::consts::E;
        let got = tape.value(y).data();
        assert!((got[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((got[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 0]));
        assert!(tape.softmax_rows(x).is_err());
    }

    #[test]
    fn segment_mean_basic_and_identity() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[1.0, 3.0]]));
        let y = tape.segment_mean(x, &[0..2]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);

        let x = tape.constant(Tensor::matrix(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let y = tape.segment_mean(x, &[0..1, 1..2]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn segment_mean_rejects_empty_segment() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2]));
        let err = tape.segment_mean(x, &[0..0, 0..2]).unwrap_err();
        assert!(matches!(err, Error::DegenerateDetection(_)));
    }

    #[test]
    fn concat_rows_and_single_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(&[&[1.0]]));
        let b = tape.constant(Tensor::matrix(&[&[2.0]]));
        let y = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 1]);
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let y = tape.concat(&[a], 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);
    }

    #[test]
    fn concat_mismatched_shapes_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2]));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.concat(&[a, b], 0).is_err());
        assert!(tape.concat(&[a, b], 1).is_ok());
    }

    #[test]
    fn backward_linear_grad_is_input() {
        // out = sum(w . x) with x fixed => d out / d w = column sums of x per w entry.
        let (mut store, ids) = store_with(&[("w", Tensor::matrix(&[&[1.0, 1.0]]))]);
        let mut tape = Tape::new();
        let w = tape.param(&store, ids[0]);
        let x = tape.constant(Tensor::matrix(&[&[2.0], &[3.0]]));
        let y = tape.linear(w, x, None).unwrap();
        let out = tape.sum_all(y);
        tape.backward(out, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[2.0, 3.0]);
    }

    #[test]
    fn backward_constant_output_gives_zero_grads() {
        let (mut store, ids) = store_with(&[("w", Tensor::vector(&[1.0, 2.0]))]);
        let mut tape = Tape::new();
        let _w = tape.param(&store, ids[0]);
        let c = tape.constant(Tensor::scalar(5.0));
        tape.backward(c, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(&[1.0, 2.0]));
        let err = tape.backward(c, &mut store).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn backward_accumulates_for_reused_parameter() {
        // out = sum(p) + 2 * sum(p) => grad = 3 per entry.
        let (mut store, ids) = store_with(&[("p", Tensor::matrix(&[&[1.0, 2.0]]))]);
        let mut tape = Tape::new();
        let p1 = tape.param(&store, ids[0]);
        let p2 = tape.param(&store, ids[0]);
        let s1 = tape.sum_all(p1);
        let s2 = tape.sum_all(p2);
        let s2 = tape.scale(s2, 2.0);
        let out = tape.add(s1, s2).unwrap();
        tape.backward(out, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[3.0, 3.0]);
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let build = |store: &mut ParamStore, id: ParamId| {
            let mut tape = Tape::new();
            let p = tape.param(store, id);
            let s = tape.sigmoid(p);
            let m = tape.mul(s, p).unwrap();
            let sm = tape.softmax_rows(m).unwrap();
            let out = tape.mean_all(sm).unwrap();
            tape.backward(out, store).unwrap();
            store.grad(id).data().to_vec()
        };
        let t = Tensor::matrix(&[&[0.3, -1.2, 0.7], &[2.0, 0.1, -0.4]]);
        let (mut store, ids) = store_with(&[("p", t)]);
        let g1 = build(&mut store, ids[0]);
        store.zero_grads();
        let g2 = build(&mut store, ids[0]);
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gather_cols_scatter_adds_backward() {
        let (mut store, ids) = store_with(&[("p", Tensor::matrix(&[&[1.0, 2.0]]))]);
        let mut tape = Tape::new();
        let p = tape.param(&store, ids[0]);
        let g = tape.gather_cols(p, &[0, 0, 1]).unwrap();
        let out = tape.sum_all(g);
        tape.backward(out, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).data(), &[2.0, 1.0]);
    }

    #[test]
    fn layer_norm_cols_standardizes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(&[&[1.0], &[3.0]]));
        let y = tape.layer_norm_cols(x, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-6);
        assert!((d[1] - 1.0).abs() < 1e-6);
    }
}
