use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{shape_err, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        rows: usize,
        k: usize,
        m: usize,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        batch: usize,
        c_in: usize,
        width: usize,
        c_out: usize,
        ksize: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
        train: bool,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Mask {
        x: NodeId,
        mask: Vec<f64>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        widths: Vec<usize>,
        rows: usize,
    },
    Gather {
        x: NodeId,
        idx: Vec<usize>,
    },
    Stack {
        parts: Vec<NodeId>,
    },
    Tanh {
        x: NodeId,
    },
    LstmCell {
        x: NodeId,
        hc: NodeId,
        w: NodeId,
        b: NodeId,
        hidden: usize,
        input: usize,
        /// Activated gates i, f, g, o.
        gates: Vec<f64>,
        tanh_c: Vec<f64>,
    },
    Affine {
        x: NodeId,
        scale: f64,
    },
    Square {
        x: NodeId,
    },
    Sum {
        x: NodeId,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Conv1d { x, w, b, .. } => vec![*x, *w, *b],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::LeakyRelu { x, .. }
            | Op::Mask { x, .. }
            | Op::MaxPool { x, .. }
            | Op::Reshape { x }
            | Op::Gather { x, .. }
            | Op::Tanh { x }
            | Op::Affine { x, .. }
            | Op::Square { x }
            | Op::Sum { x }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::Concat { parts, .. } | Op::Stack { parts } => parts.clone(),
            Op::LstmCell { x, hc, w, b, .. } => vec![*x, *hc, *w, *b],
            Op::Add { a, b } => vec![*a, *b],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

/// A tape of tensor operations supporting one reverse sweep per root.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = op.inputs().iter().any(|&i| self.needs(i));
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; gradients are not accumulated for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Gradient-tracking leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Affine map `x·Wᵀ + b`. `x` is `[k]` or `[rows, k]`, `w` is `[m, k]`,
    /// `b` is `[m]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(shape_err(format!("linear weights must be 2-D, got {:?}", ws)));
        }
        let (m, k) = (ws[0], ws[1]);
        let (rows, out_shape) = match xs.as_slice() {
            [kk] if *kk == k => (1, vec![m]),
            [r, kk] if *kk == k => (*r, vec![*r, m]),
            _ => return Err(shape_err(format!("linear input {:?} does not match weights {:?}", xs, ws))),
        };
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err(format!("linear bias {:?} does not match {} outputs", self.shape(b), m)));
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; rows * m];
        for r in 0..rows {
            let xr = &xv[r * k..(r + 1) * k];
            for j in 0..m {
                let wr = &wv[j * k..(j + 1) * k];
                out[r * m + j] = dot(xr, wr);
            }
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                for j in 0..m {
                    out[r * m + j] += bv[j];
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b, rows, k, m }))
    }

    /// Valid (unpadded) stride-1 cross-correlation. `x` is `[c_in, width]` or
    /// `[batch, c_in, width]`, `w` is `[c_out, c_in, ksize]`, `b` is `[c_out]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return Err(shape_err(format!("conv kernels must be 3-D, got {:?}", ws)));
        }
        let (c_out, c_in, ksize) = (ws[0], ws[1], ws[2]);
        let (batch, width, batched) = match xs.as_slice() {
            [c, wd] if *c == c_in => (1, *wd, false),
            [bt, c, wd] if *c == c_in => (*bt, *wd, true),
            _ => return Err(shape_err(format!("conv input {:?} does not match kernels {:?}", xs, ws))),
        };
        if width < ksize {
            return Err(shape_err(format!("conv input width {} is smaller than kernel {}", width, ksize)));
        }
        if self.shape(b) != [c_out] {
            return Err(shape_err(format!("conv bias {:?} != [{}]", self.shape(b), c_out)));
        }
        let wo = width - ksize + 1;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * c_out * wo];
        for n in 0..batch {
            for o in 0..c_out {
                let row = &mut out[(n * c_out + o) * wo..(n * c_out + o + 1) * wo];
                row.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..c_in {
                    let xr = &xv[(n * c_in + c) * width..(n * c_in + c + 1) * width];
                    let kr = &wv[(o * c_in + c) * ksize..(o * c_in + c + 1) * ksize];
                    for (kk, &kw) in kr.iter().enumerate() {
                        for t in 0..wo {
                            row[t] += kw * xr[t + kk];
                        }
                    }
                }
            }
        }
        let shape = if batched { vec![batch, c_out, wo] } else { vec![c_out, wo] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, batch, c_in, width, c_out, ksize }))
    }

    /// Batch normalization over `[batch, channels]` or `[batch, channels, len]`
    /// using the batch's own statistics. Returns the output node with the
    /// per-channel batch mean and (population) variance.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>), TensorError> {
        let (batch, channels, inner) = self.bn_dims(x, gamma, beta)?;
        let count = batch * inner;
        if count < 2 {
            return Err(TensorError::BatchTooSmall(count));
        }
        let xv = self.value(x).data();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for n in 0..batch {
            for c in 0..channels {
                let s = &xv[(n * channels + c) * inner..(n * channels + c + 1) * inner];
                mean[c] += s.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for n in 0..batch {
            for c in 0..channels {
                let s = &xv[(n * channels + c) * inner..(n * channels + c + 1) * inner];
                var[c] += s.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        let node = self.bn_apply(x, gamma, beta, &mean, inv_std, channels, inner, true)?;
        Ok((node, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let (_, channels, inner) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != channels || running_var.len() != channels {
            return Err(shape_err("running statistics do not match channel count"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, channels, inner, false)
    }

    fn bn_dims(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize), TensorError> {
        let dims = match self.shape(x) {
            [b, c] => (*b, *c, 1),
            [b, c, l] => (*b, *c, *l),
            s => return Err(shape_err(format!("batch norm input must be 2-D or 3-D, got {:?}", s))),
        };
        if self.shape(gamma) != [dims.1] || self.shape(beta) != [dims.1] {
            return Err(shape_err("batch norm scale/shift do not match channel count"));
        }
        Ok(dims)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        inv_std: Vec<f64>,
        channels: usize,
        inner: usize,
        train: bool,
    ) -> Result<NodeId, TensorError> {
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for (i, (&v, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / inner) % channels;
            *h = (v - mean[c]) * inv_std[c];
            *o = gv[c] * *h + bv[c];
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, inner, train }))
    }

    /// `x` for `x ≥ 0`, `slope·x` otherwise. The derivative at 0 is 1.
    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::LeakyRelu { x, slope })
    }

    /// Inverted dropout. With `train == false` or `p == 0` the input node is
    /// returned unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, train: bool, rng: &mut R) -> NodeId {
        if !train || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let src = self.value(x);
        let mask: Vec<f64> = (0..src.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Mask { x, mask })
    }

    /// Windowed maximum over the last axis of `[c, w]` or `[b, c, w]`.
    /// Gradient goes to the first maximal element of each window.
    pub fn max_pool1d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().ok_or_else(|| shape_err("max pool on a scalar"))?;
        if shape.len() < 2 || width < kernel || kernel == 0 || stride == 0 {
            return Err(shape_err(format!("max pool kernel {} does not fit input {:?}", kernel, shape)));
        }
        let wo = (width - kernel) / stride + 1;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * wo);
        let mut argmax = Vec::with_capacity(rows * wo);
        for r in 0..rows {
            for t in 0..wo {
                let start = r * width + t * stride;
                let mut best = start;
                for j in start + 1..start + kernel {
                    if xv[j] > xv[best] {
                        best = j;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = wo;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Concatenates along the last axis. Parts are all `[k_i]` or all
    /// `[rows, k_i]` with a common row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat of nothing"));
        }
        let rank = self.shape(parts[0]).len();
        let rows = if rank == 1 { 1 } else { self.shape(parts[0])[0] };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match (rank, s) {
                (1, [k]) => widths.push(*k),
                (2, [r, k]) if *r == rows => widths.push(*k),
                _ => return Err(shape_err(format!("cannot concat part of shape {:?}", s))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &k) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * k..(r + 1) * k]);
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), widths, rows }))
    }

    /// Flat gather: output `[idx.len()]` with `out[i] = x.flat[idx[i]]`.
    pub fn gather(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, TensorError> {
        let xv = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xv.len()) {
            return Err(shape_err(format!("gather index {} out of {}", bad, xv.len())));
        }
        let data = idx.iter().map(|&i| xv[i]).collect();
        let value = Tensor::from_vec(data);
        Ok(self.push(value, Op::Gather { x, idx }))
    }

    /// Stacks equally sized vectors into `[parts.len(), k]`.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let k = parts.first().map(|&p| self.value(p).len()).ok_or_else(|| shape_err("stack of nothing"))?;
        let mut out = Vec::with_capacity(parts.len() * k);
        for &p in parts {
            let v = self.value(p).data();
            if v.len() != k {
                return Err(shape_err("stack parts differ in length"));
            }
            out.extend_from_slice(v);
        }
        let value = Tensor::new(vec![parts.len(), k], out)?;
        Ok(self.push(value, Op::Stack { parts: parts.to_vec() }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| libm::tanh(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Tanh { x })
    }

    /// One LSTM step. `x` is `[input]`, `hc` is the previous hidden and cell
    /// state stacked as `[2·hidden]`, `w` is `[4·hidden, hidden + input]`
    /// acting on `[h; x]`, `b` is `[4·hidden]`. Gate blocks are ordered
    /// input, forget, candidate, output. Returns the new `[h; c]`.
    pub fn lstm_cell(&mut self, x: NodeId, hc: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let hs = self.value(hc).len();
        if hs % 2 != 0 || self.shape(hc).len() != 1 {
            return Err(shape_err(format!("lstm state must be [2h], got {:?}", self.shape(hc))));
        }
        let hidden = hs / 2;
        let input = self.value(x).len();
        if self.shape(x).len() != 1 {
            return Err(shape_err(format!("lstm input must be 1-D, got {:?}", self.shape(x))));
        }
        let cols = hidden + input;
        if self.shape(w) != [4 * hidden, cols] || self.shape(b) != [4 * hidden] {
            return Err(shape_err(format!(
                "lstm weights {:?}/{:?} do not match hidden {} input {}",
                self.shape(w),
                self.shape(b),
                hidden,
                input
            )));
        }
        let hcv = self.value(hc).data();
        let mut z = Vec::with_capacity(cols);
        z.extend_from_slice(&hcv[..hidden]);
        z.extend_from_slice(self.value(x).data());
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut gates = vec![0.0; 4 * hidden];
        for (j, g) in gates.iter_mut().enumerate() {
            let pre = bv[j] + dot(&wv[j * cols..(j + 1) * cols], &z);
            *g = if (2 * hidden..3 * hidden).contains(&j) { libm::tanh(pre) } else { sigmoid(pre) };
        }
        let c_prev = &hcv[hidden..];
        let mut out = vec![0.0; 2 * hidden];
        let mut tanh_c = vec![0.0; hidden];
        for u in 0..hidden {
            let (i, f, g, o) = (gates[u], gates[hidden + u], gates[2 * hidden + u], gates[3 * hidden + u]);
            let c = f * c_prev[u] + i * g;
            tanh_c[u] = libm::tanh(c);
            out[u] = o * tanh_c[u];
            out[hidden + u] = c;
        }
        let value = Tensor::from_vec(out);
        Ok(self.push(value, Op::LstmCell { x, hc, w, b, hidden, input, gates, tanh_c }))
    }

    /// `scale·x + shift`, where `shift` has one entry (broadcast) or one per
    /// element.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: &[f64]) -> Result<NodeId, TensorError> {
        let src = self.value(x);
        let n = src.len();
        if shift.len() != 1 && shift.len() != n {
            return Err(shape_err(format!("shift of length {} for {} values", shift.len(), n)));
        }
        let data = src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| scale * v + if shift.len() == 1 { shift[0] } else { shift[i] })
            .collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Affine { x, scale }))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * v).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Square { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, &[0.0]).expect("scalar")
    }

    /// `Σ weights[i]·x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Vec<f64>) -> Result<NodeId, TensorError> {
        let xv = self.value(x).data();
        if xv.len() != weights.len() {
            return Err(shape_err(format!("{} weights for {} values", weights.len(), xv.len())));
        }
        let s = dot(xv, &weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Elementwise sum of two tensors with the same number of elements.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(shape_err(format!("add {:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }))
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        if self.value(root).len() != 1 {
            return Err(shape_err(format!("backward root must be a scalar, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b, rows, k, m } => {
                let (rows, k, m) = (*rows, *k, *m);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*x) {
                    let gx = acc(grads, *x, rows * k);
                    for r in 0..rows {
                        for j in 0..m {
                            let g = gout[r * m + j];
                            if g != 0.0 {
                                axpy(&mut gx[r * k..(r + 1) * k], g, &wv[j * k..(j + 1) * k]);
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, m * k);
                    for r in 0..rows {
                        for j in 0..m {
                            let g = gout[r * m + j];
                            if g != 0.0 {
                                axpy(&mut gw[j * k..(j + 1) * k], g, &xv[r * k..(r + 1) * k]);
                            }
                        }
                    }
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = acc(grads, *b, m);
                        for r in 0..rows {
                            for j in 0..m {
                                gb[j] += gout[r * m + j];
                            }
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, batch, c_in, width, c_out, ksize } => {
                let (batch, c_in, width, c_out, ksize) = (*batch, *c_in, *width, *c_out, *ksize);
                let wo = width - ksize + 1;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.needs(*b) {
                    let gb = acc(grads, *b, c_out);
                    for n in 0..batch {
                        for o in 0..c_out {
                            gb[o] += gout[(n * c_out + o) * wo..(n * c_out + o + 1) * wo].iter().sum::<f64>();
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, c_out * c_in * ksize);
                    for n in 0..batch {
                        for o in 0..c_out {
                            let go = &gout[(n * c_out + o) * wo..(n * c_out + o + 1) * wo];
                            for c in 0..c_in {
                                let xr = &xv[(n * c_in + c) * width..(n * c_in + c + 1) * width];
                                for kk in 0..ksize {
                                    gw[(o * c_in + c) * ksize + kk] += dot(go, &xr[kk..kk + wo]);
                                }
                            }
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = acc(grads, *x, batch * c_in * width);
                    for n in 0..batch {
                        for o in 0..c_out {
                            let go = &gout[(n * c_out + o) * wo..(n * c_out + o + 1) * wo];
                            for c in 0..c_in {
                                let gxr = &mut gx[(n * c_in + c) * width..(n * c_in + c + 1) * width];
                                for kk in 0..ksize {
                                    let kw = wv[(o * c_in + c) * ksize + kk];
                                    axpy(&mut gxr[kk..kk + wo], kw, go);
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, channels, inner, train } => {
                let (channels, inner) = (*channels, *inner);
                let gv = self.value(*gamma).data();
                let mut sum_g = vec![0.0; channels];
                let mut sum_gx = vec![0.0; channels];
                for (i, (&g, &h)) in gout.iter().zip(xhat).enumerate() {
                    let c = (i / inner) % channels;
                    sum_g[c] += g;
                    sum_gx[c] += g * h;
                }
                if self.needs(*gamma) {
                    let gg = acc(grads, *gamma, channels);
                    for c in 0..channels {
                        gg[c] += sum_gx[c];
                    }
                }
                if self.needs(*beta) {
                    let gb = acc(grads, *beta, channels);
                    for c in 0..channels {
                        gb[c] += sum_g[c];
                    }
                }
                if self.needs(*x) {
                    let count = (gout.len() / channels) as f64;
                    let gx = acc(grads, *x, gout.len());
                    for (i, gxi) in gx.iter_mut().enumerate() {
                        let c = (i / inner) % channels;
                        let scale = gv[c] * inv_std[c];
                        if *train {
                            // d/dx of gamma·(x − mean)/std with batch statistics.
                            *gxi += scale * (gout[i] - sum_g[c] / count - xhat[i] * sum_gx[c] / count);
                        } else {
                            *gxi += scale * gout[i];
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let gx = acc(grads, *x, xv.len());
                    for ((gxi, &v), &g) in gx.iter_mut().zip(xv).zip(gout) {
                        *gxi += if v >= 0.0 { g } else { slope * g };
                    }
                }
            }
            Op::Mask { x, mask } => {
                if self.needs(*x) {
                    let gx = acc(grads, *x, mask.len());
                    for ((gxi, &m), &g) in gx.iter_mut().zip(mask).zip(gout) {
                        *gxi += m * g;
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let gx = acc(grads, *x, n);
                    for (&j, &g) in argmax.iter().zip(gout) {
                        gx[j] += g;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    let gx = acc(grads, *x, gout.len());
                    axpy(gx, 1.0, gout);
                }
            }
            Op::Concat { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &k) in parts.iter().zip(widths) {
                    if self.needs(p) {
                        let gp = acc(grads, p, rows * k);
                        for r in 0..*rows {
                            axpy(&mut gp[r * k..(r + 1) * k], 1.0, &gout[r * total + offset..r * total + offset + k]);
                        }
                    }
                    offset += k;
                }
            }
            Op::Gather { x, idx } => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let gx = acc(grads, *x, n);
                    for (&j, &g) in idx.iter().zip(gout) {
                        gx[j] += g;
                    }
                }
            }
            Op::Stack { parts } => {
                let k = gout.len() / parts.len().max(1);
                for (r, &p) in parts.iter().enumerate() {
                    if self.needs(p) {
                        let gp = acc(grads, p, k);
                        axpy(gp, 1.0, &gout[r * k..(r + 1) * k]);
                    }
                }
            }
            Op::Tanh { x } => {
                if self.needs(*x) {
                    let yv = node.value.data();
                    let gx = acc(grads, *x, yv.len());
                    for ((gxi, &y), &g) in gx.iter_mut().zip(yv).zip(gout) {
                        *gxi += (1.0 - y * y) * g;
                    }
                }
            }
            Op::LstmCell { x, hc, w, b, hidden, input, gates, tanh_c } => {
                let (hidden, input) = (*hidden, *input);
                let cols = hidden + input;
                let hcv = self.value(*hc).data();
                let c_prev = &hcv[hidden..];
                let (gh, gc) = gout.split_at(hidden);
                // Pre-activation gradient for all four gate blocks.
                let mut dz = vec![0.0; 4 * hidden];
                let mut dc_prev = vec![0.0; hidden];
                for u in 0..hidden {
                    let (i, f, g, o) = (gates[u], gates[hidden + u], gates[2 * hidden + u], gates[3 * hidden + u]);
                    let tc = tanh_c[u];
                    let dc = gc[u] + gh[u] * o * (1.0 - tc * tc);
                    let d_o = gh[u] * tc;
                    dz[u] = dc * g * i * (1.0 - i);
                    dz[hidden + u] = dc * c_prev[u] * f * (1.0 - f);
                    dz[2 * hidden + u] = dc * i * (1.0 - g * g);
                    dz[3 * hidden + u] = d_o * o * (1.0 - o);
                    dc_prev[u] = dc * f;
                }
                let wv = self.value(*w).data();
                if self.needs(*b) {
                    let gb = acc(grads, *b, 4 * hidden);
                    axpy(gb, 1.0, &dz);
                }
                if self.needs(*w) {
                    let mut z = Vec::with_capacity(cols);
                    z.extend_from_slice(&hcv[..hidden]);
                    z.extend_from_slice(self.value(*x).data());
                    let gw = acc(grads, *w, 4 * hidden * cols);
                    for (j, &d) in dz.iter().enumerate() {
                        if d != 0.0 {
                            axpy(&mut gw[j * cols..(j + 1) * cols], d, &z);
                        }
                    }
                }
                let need_hc = self.needs(*hc);
                let need_x = self.needs(*x);
                if need_hc || need_x {
                    let mut dzin = vec![0.0; cols];
                    for (j, &d) in dz.iter().enumerate() {
                        if d != 0.0 {
                            axpy(&mut dzin, d, &wv[j * cols..(j + 1) * cols]);
                        }
                    }
                    if need_hc {
                        let ghc = acc(grads, *hc, 2 * hidden);
                        axpy(&mut ghc[..hidden], 1.0, &dzin[..hidden]);
                        axpy(&mut ghc[hidden..], 1.0, &dc_prev);
                    }
                    if need_x {
                        let gx = acc(grads, *x, input);
                        axpy(gx, 1.0, &dzin[hidden..]);
                    }
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    let gx = acc(grads, *x, gout.len());
                    axpy(gx, *scale, gout);
                }
            }
            Op::Square { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x).data();
                    let gx = acc(grads, *x, xv.len());
                    for ((gxi, &v), &g) in gx.iter_mut().zip(xv).zip(gout) {
                        *gxi += 2.0 * v * g;
                    }
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let gx = acc(grads, *x, n);
                    gx.iter_mut().for_each(|v| *v += gout[0]);
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let gx = acc(grads, *x, weights.len());
                    axpy(gx, gout[0], weights);
                }
            }
            Op::Add { a, b } => {
                for &p in [a, b] {
                    if self.needs(p) {
                        let gp = acc(grads, p, gout.len());
                        axpy(gp, 1.0, gout);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
