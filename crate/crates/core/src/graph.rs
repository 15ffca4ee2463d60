//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node whose inputs are earlier
//! nodes, so node order is already a topological order. [`Graph::backward`]
//! walks the tape once in reverse. Every forward op checks its output for
//! non-finite values and reports which op produced them.
//!
//! Shape rules (no broadcasting):
//! - `matmul`: `[m, k] x [k, n] -> [m, n]`
//! - `add`/`sub`/`mul`: identical shapes
//! - `add_row`: `[m, n] + [1, n]`, the row is added to every row
//! - `max_pool`/`mean_pool`: `[g * size, n] -> [g, n]` over consecutive groups of `size` rows
//! - `tile`: `[g, n] -> [g * size, n]`, each row repeated `size` times
//! - `concat`: along columns, equal row counts
//! - `vstack`: along rows, equal column counts
//! - `slice_rows`/`slice_cols`: contiguous half-open ranges
//! - `reshape`: any shape with the same element count

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation implemented outside the graph module, with its own backward.
///
/// Forward results are recomputed from inputs where backward needs them.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Returns one gradient per input, `None` where the input is not differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

enum Op<T: Scalar> {
    Constant,
    Variable,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Relu,
    Softmax,
    SoftmaxCrossEntropy { labels: Vec<usize>, probs: Tensor<T> },
    MaxPool { argmax: Vec<usize> },
    MeanPool { size: usize },
    Tile { size: usize },
    Concat,
    VStack,
    SliceRows { start: usize },
    SliceCols { start: usize },
    Reshape,
    CausalMean { len: usize, counts: Vec<usize> },
    Sum,
    Mean,
    Scale(T),
    Square,
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::AddRow => "add_row",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::MaxPool { .. } => "max_pool",
            Op::MeanPool { .. } => "mean_pool",
            Op::Tile { .. } => "tile",
            Op::Concat => "concat",
            Op::VStack => "vstack",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape => "reshape",
            Op::CausalMean { .. } => "causal_mean",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Scale(_) => "scale",
            Op::Square => "square",
            Op::Custom(c) => c.name(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    inputs: Vec<NodeId>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<NodeId>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let needs_grad = matches!(op, Op::Variable)
            || inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            inputs,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Constant, vec![])
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(value, Op::Variable, vec![])
    }

    /// A constant copy of `id`'s current value; gradients stop here.
    pub fn detach(&mut self, id: NodeId) -> Result<NodeId> {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul, vec![a, b])
    }

    fn zip_same(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op.name(), va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, op, vec![a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same(a, b, Op::Mul, |x, y| x * y)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(shape_err("add_row", va, vr));
        }
        let mut out = va.clone();
        let bias = vr.data();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow, vec![a, row])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu, vec![a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::Softmax, vec![a])
    }

    /// Mean over rows of `-log softmax(logits)[label]`, as a `[1, 1]` scalar.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        if v.rows() != labels.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v.cols()) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                v.cols()
            )));
        }
        let probs = softmax_rows(v);
        let mut total = 0.0f64;
        for (r, &l) in labels.iter().enumerate() {
            // log-sum-exp form keeps tiny probabilities finite
            let row = v.row(r);
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64();
            let lse = row.iter().map(|&x| (x.as_f64() - m).exp()).sum::<f64>().ln() + m;
            total += lse - row[l].as_f64();
        }
        let n = labels.len().max(1) as f64;
        let out = Tensor::scalar(T::from_f64(total / n));
        self.push(
            out,
            Op::SoftmaxCrossEntropy {
                labels: labels.to_vec(),
                probs,
            },
            vec![logits],
        )
    }

    pub fn max_pool(&mut self, a: NodeId, size: usize) -> Result<NodeId> {
        let v = self.value(a);
        if size == 0 || v.rows() % size != 0 {
            return Err(Error::Shape {
                op: "max_pool",
                lhs: v.shape().to_vec(),
                rhs: vec![size],
            });
        }
        let (groups, c) = (v.rows() / size, v.cols());
        let mut out = Tensor::zeros([groups, c]);
        let mut argmax = vec![0usize; groups * c];
        for g in 0..groups {
            for j in 0..c {
                let mut best = g * size;
                for r in g * size + 1..(g + 1) * size {
                    // strict comparison: ties go to the earliest row
                    if v.at(r, j) > v.at(best, j) {
                        best = r;
                    }
                }
                argmax[g * c + j] = best;
                out.data_mut()[g * c + j] = v.at(best, j);
            }
        }
        self.push(out, Op::MaxPool { argmax }, vec![a])
    }

    pub fn mean_pool(&mut self, a: NodeId, size: usize) -> Result<NodeId> {
        let v = self.value(a);
        if size == 0 || v.rows() % size != 0 {
            return Err(Error::Shape {
                op: "mean_pool",
                lhs: v.shape().to_vec(),
                rhs: vec![size],
            });
        }
        let (groups, c) = (v.rows() / size, v.cols());
        let inv = T::from_f64(1.0 / size as f64);
        let mut out = Tensor::zeros([groups, c]);
        for g in 0..groups {
            for r in g * size..(g + 1) * size {
                for j in 0..c {
                    out.data_mut()[g * c + j] += v.at(r, j);
                }
            }
        }
        for o in out.data_mut() {
            *o *= inv;
        }
        self.push(out, Op::MeanPool { size }, vec![a])
    }

    pub fn tile(&mut self, a: NodeId, size: usize) -> Result<NodeId> {
        let v = self.value(a);
        let c = v.cols();
        let mut data = Vec::with_capacity(v.rows() * size * c);
        for r in 0..v.rows() {
            for _ in 0..size {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new([v.rows() * size, c], data)?;
        self.push(out, Op::Tile { size }, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.value(p).rows()).unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(shape_err("concat", self.value(parts[0]), v));
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new([rows, cols], data)?;
        self.push(out, Op::Concat, parts.to_vec())
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.value(p).cols()).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(shape_err("vstack", self.value(parts[0]), v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new([rows, cols], data)?;
        self.push(out, Op::VStack, parts.to_vec())
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start > end || end > v.rows() {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let c = v.cols();
        let out = Tensor::new([end - start, c], v.data()[start * c..end * c].to_vec())?;
        self.push(out, Op::SliceRows { start }, vec![a])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let mut data = Vec::with_capacity(v.rows() * (end - start));
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let out = Tensor::new([v.rows(), end - start], data)?;
        self.push(out, Op::SliceCols { start }, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape, vec![a])
    }

    /// Causal running mean over consecutive sequences of `len` rows.
    ///
    /// Row `t` of sequence `b` becomes
    /// `(prefix[b] + sum_{s<t} x[b, s]) / (counts[b] + t)`, or zeros when the
    /// denominator is zero. `prefix` holds sums over earlier context frames
    /// that are not part of `x`.
    pub fn causal_mean(
        &mut self,
        x: NodeId,
        prefix: NodeId,
        counts: &[usize],
        len: usize,
    ) -> Result<NodeId> {
        let (vx, vp) = (self.value(x), self.value(prefix));
        let c = vx.cols();
        if len == 0
            || vx.rows() != counts.len() * len
            || vp.rows() != counts.len()
            || vp.cols() != c
        {
            return Err(shape_err("causal_mean", vx, vp));
        }
        let mut out = Tensor::zeros([vx.rows(), c]);
        for (b, &count) in counts.iter().enumerate() {
            let mut acc: Vec<T> = vp.row(b).to_vec();
            for t in 0..len {
                let denom = count + t;
                if denom > 0 {
                    let inv = T::from_f64(1.0 / denom as f64);
                    for (o, &a) in out.row_mut(b * len + t).iter_mut().zip(&acc) {
                        *o = a * inv;
                    }
                }
                for (a, &xv) in acc.iter_mut().zip(vx.row(b * len + t)) {
                    *a += xv;
                }
            }
        }
        self.push(
            out,
            Op::CausalMean {
                len,
                counts: counts.to_vec(),
            },
            vec![x, prefix],
        )
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(a).data().iter().map(|v| v.as_f64()).sum();
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let s: f64 = v.data().iter().map(|v| v.as_f64()).sum();
        let n = v.len().max(1) as f64;
        self.push(Tensor::scalar(T::from_f64(s / n)), Op::Mean, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(s), vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square, vec![a])
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&vals)?;
        self.push(out, Op::Custom(op), inputs.to_vec())
    }

    /// Populates gradients of `loss` for every node that needs one.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let input_grads = self.local_backward(idx, &g)?;
            for (inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(ig.shape(), self.nodes[inp.0].value.shape());
                match &mut grads[inp.0] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn local_backward(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let node = &self.nodes[idx];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let out = &node.value;
        let grads = match &node.op {
            Op::Constant | Op::Variable => vec![],
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.rows(), a.cols(), b.cols());
                let mut ga = Tensor::zeros([m, k]);
                // dA = dC B^T
                T::gemm(
                    m,
                    n,
                    k,
                    g.data(),
                    (n as isize, 1),
                    b.data(),
                    (1, n as isize),
                    ga.data_mut(),
                    false,
                );
                let mut gb = Tensor::zeros([k, n]);
                // dB = A^T dC
                T::gemm(
                    k,
                    m,
                    n,
                    a.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    gb.data_mut(),
                    false,
                );
                vec![Some(ga), Some(gb)]
            }
            Op::Add => vec![Some(g.clone()), Some(g.clone())],
            Op::Sub => vec![Some(g.clone()), Some(g.map(|v| -v))],
            Op::Mul => {
                let (a, b) = (inp(0), inp(1));
                let ga = zip_map(g, b, |x, y| x * y);
                let gb = zip_map(g, a, |x, y| x * y);
                vec![Some(ga), Some(gb)]
            }
            Op::AddRow => {
                let c = g.cols();
                let mut gr = Tensor::zeros([1, c]);
                for r in 0..g.rows() {
                    for (o, &v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                vec![Some(g.clone()), Some(gr)]
            }
            Op::Relu => {
                let a = inp(0);
                // subgradient 0 at the kink
                vec![Some(zip_map(g, a, |gv, av| if av > T::zero() { gv } else { T::zero() }))]
            }
            Op::Softmax => {
                let mut ga = Tensor::zeros(out.shape().to_vec());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot = y.iter().zip(gr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(ga)]
            }
            Op::SoftmaxCrossEntropy { labels, probs } => {
                let scale = g.data()[0] / T::from_f64(labels.len().max(1) as f64);
                let mut ga = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    ga.row_mut(r)[l] -= T::one();
                }
                for v in ga.data_mut() {
                    *v *= scale;
                }
                vec![Some(ga)]
            }
            Op::MaxPool { argmax } => {
                let a = inp(0);
                let c = a.cols();
                let mut ga = Tensor::zeros(a.shape().to_vec());
                for (k, &r) in argmax.iter().enumerate() {
                    let j = k % c;
                    ga.data_mut()[r * c + j] += g.data()[k];
                }
                vec![Some(ga)]
            }
            Op::MeanPool { size } => {
                let a = inp(0);
                let inv = T::from_f64(1.0 / *size as f64);
                let mut ga = Tensor::zeros(a.shape().to_vec());
                for r in 0..a.rows() {
                    let src = g.row(r / size);
                    for (o, &v) in ga.row_mut(r).iter_mut().zip(src) {
                        *o = v * inv;
                    }
                }
                vec![Some(ga)]
            }
            Op::Tile { size } => {
                let a = inp(0);
                let mut ga = Tensor::zeros(a.shape().to_vec());
                for r in 0..g.rows() {
                    let dst = r / size;
                    let src = g.row(r).to_vec();
                    for (o, v) in ga.row_mut(dst).iter_mut().zip(src) {
                        *o += v;
                    }
                }
                vec![Some(ga)]
            }
            Op::Concat => {
                let mut offset = 0;
                let mut out_grads = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let a = inp(k);
                    let c = a.cols();
                    let mut ga = Tensor::zeros(a.shape().to_vec());
                    for r in 0..a.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    out_grads.push(Some(ga));
                }
                out_grads
            }
            Op::VStack => {
                let mut offset = 0;
                let mut out_grads = Vec::with_capacity(node.inputs.len());
                for k in 0..node.inputs.len() {
                    let a = inp(k);
                    let n = a.len();
                    let ga = Tensor::new(a.shape().to_vec(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    out_grads.push(Some(ga));
                }
                out_grads
            }
            Op::SliceRows { start } => {
                let a = inp(0);
                let c = a.cols();
                let mut ga = Tensor::zeros(a.shape().to_vec());
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![Some(ga)]
            }
            Op::SliceCols { start } => {
                let a = inp(0);
                let w = g.cols();
                let mut ga = Tensor::zeros(a.shape().to_vec());
                for r in 0..a.rows() {
                    ga.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
                }
                vec![Some(ga)]
            }
            Op::Reshape => {
                let a = inp(0);
                vec![Some(g.clone().reshape(a.shape().to_vec())?)]
            }
            Op::CausalMean { len, counts } => {
                let x = inp(0);
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape().to_vec());
                let mut gp = Tensor::zeros([counts.len(), c]);
                for (b, &count) in counts.iter().enumerate() {
                    // suffix accumulation of g[t] / denom[t] for t > s
                    let mut acc = vec![T::zero(); c];
                    for t in (0..*len).rev() {
                        for (gv, &a) in gx.row_mut(b * len + t).iter_mut().zip(&acc) {
                            *gv = a;
                        }
                        let denom = count + t;
                        if denom > 0 {
                            let inv = T::from_f64(1.0 / denom as f64);
                            for (a, &gv) in acc.iter_mut().zip(g.row(b * len + t)) {
                                *a += gv * inv;
                            }
                        }
                    }
                    gp.row_mut(b).copy_from_slice(&acc);
                }
                vec![Some(gx), Some(gp)]
            }
            Op::Sum => {
                let a = inp(0);
                vec![Some(Tensor::full(a.shape().to_vec(), g.data()[0]))]
            }
            Op::Mean => {
                let a = inp(0);
                let v = g.data()[0] / T::from_f64(a.len().max(1) as f64);
                vec![Some(Tensor::full(a.shape().to_vec(), v))]
            }
            Op::Scale(s) => vec![Some(g.map(|v| v * *s))],
            Op::Square => {
                let a = inp(0);
                let two = T::from_f64(2.0);
                vec![Some(zip_map(g, a, |gv, av| two * gv * av))]
            }
            Op::Custom(c) => {
                let vals: Vec<&Tensor<T>> =
                    node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let gs = c.backward(&vals, out, g)?;
                if gs.len() != vals.len() {
                    return Err(Error::InvalidArgument(format!(
                        "custom op {} returned {} gradients for {} inputs",
                        c.name(),
                        gs.len(),
                        vals.len()
                    )));
                }
                gs
            }
        };
        Ok(grads)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let mut out = v.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x = *x / s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros([1, 3])).unwrap();
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([1, 2], vec![-1.0, 2.0]).unwrap()).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f32>::new();
        let w = g.variable(Tensor::from_fn([2, 3], |i| i as f32)).unwrap();
        let s = g.sum(w).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(w).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut g = Graph::<f64>::new();
        let t = Tensor::from_fn([3, 2], |i| i as f64 - 2.5);
        let w = g.variable(t.clone()).unwrap();
        let sq = g.square(w).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &t);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::<f32>::new();
        let w = g.variable(Tensor::zeros([2, 2])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_carry_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2, 3])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full([1, 1], f32::MAX)).unwrap();
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref op) if op == "scale"));
    }

    #[test]
    fn max_pool_ties_go_to_first_row() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(Tensor::new([2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
        let p = g.max_pool(x, 2).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        // 2x3 identity-padded times 3x1
        let a = Tensor::<f64>::new([2, 3], vec![1., 0., 0., 0., 1., 0.]).unwrap();
        let b = Tensor::<f64>::new([3, 1], vec![0.3, -0.7, 1.1]).unwrap();
        let f = |params: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let a = g.variable(params[0].clone())?;
            let b = g.variable(params[1].clone())?;
            let c = g.matmul(a, b)?;
            let c2 = g.square(c)?;
            let l = g.sum(c2)?;
            Ok(g.value(l).data()[0])
        };
        let mut g = Graph::new();
        let an = g.variable(a.clone()).unwrap();
        let bn = g.variable(b.clone()).unwrap();
        let c = g.matmul(an, bn).unwrap();
        let c2 = g.square(c).unwrap();
        let l = g.sum(c2).unwrap();
        g.backward(l).unwrap();
        let params = vec![a, b];
        let fd = finite_difference(&f, &params, 1e-3).unwrap();
        assert!(relative_error(g.grad(an).unwrap(), &fd[0]) < 1e-4);
        assert!(relative_error(g.grad(bn).unwrap(), &fd[1]) < 1e-4);
    }

    /// Every differentiable op against central differences on random inputs.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..130 {
            let x = rand_tensor(&mut rng, [4, 3]);
            let y = rand_tensor(&mut rng, [4, 3]);
            let w = rand_tensor(&mut rng, [3, 2]);
            let row = rand_tensor(&mut rng, [1, 3]);
            let prefix = rand_tensor(&mut rng, [2, 3]);
            let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..3)).collect();
            let counts = [rng.gen_range(0..3usize), rng.gen_range(0..3usize)];
            let build = |g: &mut Graph<f64>, p: &[NodeId]| -> Result<NodeId> {
                let (x, y, w, row, prefix) = (p[0], p[1], p[2], p[3], p[4]);
                let a = match trial % 13 {
                    0 => g.add(x, y)?,
                    1 => g.sub(x, y)?,
                    2 => g.mul(x, y)?,
                    3 => g.add_row(x, row)?,
                    4 => {
                        let t = g.add(x, y)?;
                        g.relu(t)?
                    }
                    5 => g.softmax(x)?,
                    6 => return g.softmax_cross_entropy(x, &labels),
                    7 => {
                        let m = g.max_pool(x, 2)?;
                        let t = g.tile(m, 2)?;
                        g.mul(t, y)?
                    }
                    8 => {
                        let m = g.mean_pool(x, 2)?;
                        let c = g.concat(&[m, prefix])?;
                        let s = g.square(c)?;
                        return g.mean(s);
                    }
                    9 => {
                        let v = g.vstack(&[x, prefix])?;
                        let v = g.slice_rows(v, 1, 5)?;
                        g.mul(v, y)?
                    }
                    10 => {
                        let c = g.slice_cols(x, 1, 3)?;
                        let r = g.reshape(c, [2, 4])?;
                        let s = g.square(r)?;
                        let r = g.reshape(s, [4, 2])?;
                        let c = g.concat(&[r, y])?;
                        let c = g.slice_cols(c, 2, 5)?;
                        g.mul(c, x)?
                    }
                    _ => g.causal_mean(x, prefix, &counts, 2)?,
                };
                let a = g.matmul(a, w)?;
                let a = g.square(a)?;
                g.mean(a)
            };
            let params = vec![x, y, w, row, prefix];
            let f = |ps: &[Tensor<f64>]| -> Result<f64> {
                let mut g = Graph::new();
                let ids: Vec<NodeId> = ps.iter().map(|p| g.variable(p.clone()).unwrap()).collect();
                let l = build(&mut g, &ids)?;
                Ok(g.value(l).data()[0])
            };
            let mut g = Graph::new();
            let ids: Vec<NodeId> = params.iter().map(|p| g.variable(p.clone()).unwrap()).collect();
            let l = build(&mut g, &ids).unwrap();
            g.backward(l).unwrap();
            let fd = finite_difference(&f, &params, 1e-6).unwrap();
            for (k, id) in ids.iter().enumerate() {
                let analytic = g
                    .grad(*id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(params[k].shape().to_vec()));
                let err = relative_error(&analytic, &fd[k]);
                assert!(err < 1e-3, "trial {trial} param {k}: rel err {err}");
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn([20, 23], |_| rng.gen_range(-30.0..30.0));
        let y = softmax_rows(&x);
        for r in 0..y.rows() {
            let s: f64 = y.row(r).iter().map(|&v| v as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(y.row(r).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let mut g = Graph::<f32>::new();
            let x = g.constant(Tensor::from_fn([64, 57], |_| rng.gen_range(-1.0..1.0))).unwrap();
            let w = g.constant(Tensor::from_fn([57, 32], |_| rng.gen_range(-1.0..1.0))).unwrap();
            let h = g.matmul(x, w).unwrap();
            let h = g.relu(h).unwrap();
            let p = g.max_pool(h, 8).unwrap();
            g.value(p).clone()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
