//! Minimal reverse-mode autodiff over [`Tensor`].
//!
//! A [`Graph`] is a growing arena of nodes; building an expression runs the
//! forward computation eagerly and records the op so [`Graph::backward`] can
//! replay it in reverse. Convolutions lower to im2col plus a single GEMM
//! call, which is where nearly all the training time goes.
//!
//! Determinism: every kernel iterates in a fixed order and the GEMM backend
//! runs single-threaded, so forward values, gradients, and therefore whole
//! training runs are bitwise reproducible for a given seed.

use std::collections::HashMap;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Spatial padding behavior for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Named parameter tensors with matching gradient accumulators.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Register a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        let idx = self.values.len();
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn value(&self, idx: usize) -> &Tensor<T> {
        &self.values[idx]
    }

    pub fn value_by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.idx(name).map(|i| &self.values[i])
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.values[idx]
    }

    pub fn grad(&self, idx: usize) -> &Tensor<T> {
        &self.grads[idx]
    }

    pub fn grad_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.grads[idx]
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Indices sorted by parameter name; the checkpoint record order.
    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.values.len()).collect();
        idx.sort_by(|&a, &b| self.names[a].cmp(&self.names[b]));
        idx
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            out.add(name, value.cast::<U>());
        }
        out
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param { idx: usize },
    Conv2d { stride: usize, pad: usize, pad_mode: PadMode },
    ConvT2x,
    LeakyRelu { slope: f64 },
    Sigmoid,
    Add,
    Sub,
    Mul,
    MulChannel,
    ConcatC,
    SliceC { start: usize, len: usize },
    InstanceNorm { eps: f64 },
    GlobalAvgPool,
    AvgPoolCeil { k: usize },
    UpsampleNearest,
    BranchSoftmax { branches: usize },
    L1Loss,
    SqDiffMean,
    ForwardDiff { axis: usize },
    Scale { c: f64 },
    SumAll,
}

struct Node<T> {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient at a node, if it was reachable and required one.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Expression arena; see module docs.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound_params: HashMap<usize, NodeId>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bound_params: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let needs_grad = match op {
            Op::Param { .. } => true,
            Op::Input => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// External data; `requires_grad` only matters for gradient checks.
    pub fn input(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        let id = self.push(Op::Input, vec![], value);
        self.nodes[id.0].needs_grad = requires_grad;
        id
    }

    /// Bind a named parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> NodeId {
        let idx = store
            .idx(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        if let Some(&id) = self.bound_params.get(&idx) {
            return id;
        }
        let id = self.push(Op::Param { idx }, vec![], store.value(idx).clone());
        self.bound_params.insert(idx, id);
        id
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    /// 2-D convolution. `x` is `(Cin,H,W)`, `w` is `(Cout,Cin,kh,kw)`,
    /// `b` is `(Cout)`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        pad_mode: PadMode,
    ) -> NodeId {
        let value = conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            pad_mode,
        );
        self.push(Op::Conv2d { stride, pad, pad_mode }, vec![x, w, b], value)
    }

    /// Transposed convolution doubling both spatial dims (kernel 2, stride 2).
    /// `x` is `(Cin,H,W)`, `w` is `(Cin,Cout,2,2)`, `b` is `(Cout)`.
    pub fn conv_transpose2x(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let value = convt2x_forward(self.value(x), self.value(w), self.value(b));
        self.push(Op::ConvT2x, vec![x, w, b], value)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { s * v });
        self.push(Op::LeakyRelu { slope }, vec![x], value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| T::ONE / (T::ONE + (-v).exp()));
        self.push(Op::Sigmoid, vec![x], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(self.value(a), self.value(b), |x, y| x + y);
        self.push(Op::Add, vec![a, b], value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(self.value(a), self.value(b), |x, y| x - y);
        self.push(Op::Sub, vec![a, b], value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(self.value(a), self.value(b), |x, y| x * y);
        self.push(Op::Mul, vec![a, b], value)
    }

    /// Broadcast-multiply a `(C,H,W)` map by per-channel scalars `(C,1,1)`.
    pub fn mul_channel(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert_eq!(self.value(s).dims3(), (c, 1, 1), "scale shape");
        let mut value = Tensor::zeros(&[c, h, w]);
        let pix = h * w;
        for ch in 0..c {
            let sc = self.value(s).data()[ch];
            let src = &self.value(x).data()[ch * pix..(ch + 1) * pix];
            let dst = &mut value.data_mut()[ch * pix..(ch + 1) * pix];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * sc;
            }
        }
        self.push(Op::MulChannel, vec![x, s], value)
    }

    /// Concatenate along the channel axis.
    pub fn concat_c(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let (_, h, w) = self.value(parts[0]).dims3();
        let total: usize = parts.iter().map(|&p| self.value(p).dims3().0).sum();
        let mut data = Vec::with_capacity(total * h * w);
        for &p in parts {
            let (_, ph, pw) = self.value(p).dims3();
            assert_eq!((ph, pw), (h, w), "concat spatial dims");
            data.extend_from_slice(self.value(p).data());
        }
        self.push(Op::ConcatC, parts.to_vec(), Tensor::from_vec(&[total, h, w], data))
    }

    /// Select channels `[start, start+len)`.
    pub fn slice_c(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        assert!(start + len <= c, "slice range");
        let pix = h * w;
        let data = self.value(x).data()[start * pix..(start + len) * pix].to_vec();
        self.push(
            Op::SliceC { start, len },
            vec![x],
            Tensor::from_vec(&[len, h, w], data),
        )
    }

    /// Per-channel normalization to zero mean, unit variance (population
    /// statistics, epsilon inside the square root).
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        let pix = h * w;
        let mut value = Tensor::zeros(&[c, h, w]);
        for ch in 0..c {
            let src = &self.value(x).data()[ch * pix..(ch + 1) * pix];
            let (mean, std) = channel_stats(src, eps);
            let dst = &mut value.data_mut()[ch * pix..(ch + 1) * pix];
            let inv = T::ONE / std;
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mean) * inv;
            }
        }
        self.push(Op::InstanceNorm { eps }, vec![x], value)
    }

    /// `(C,H,W)` -> `(C,1,1)` spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        let pix = h * w;
        let mut value = Tensor::zeros(&[c, 1, 1]);
        for ch in 0..c {
            let src = &self.value(x).data()[ch * pix..(ch + 1) * pix];
            let sum: f64 = src.iter().map(|v| v.to_f64()).sum();
            value.data_mut()[ch] = T::from_f64(sum / pix as f64);
        }
        self.push(Op::GlobalAvgPool, vec![x], value)
    }

    /// Average pooling with kernel and stride `k`; edge windows shrink, so
    /// output dims are `ceil(H/k), ceil(W/k)`.
    pub fn avg_pool_ceil(&mut self, x: NodeId, k: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        let (oh, ow) = (h.div_ceil(k), w.div_ceil(k));
        let mut value = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let y1 = (oy * k + k).min(h);
                    let x1 = (ox * k + k).min(w);
                    let mut acc = T::ZERO;
                    for y in oy * k..y1 {
                        for xx in ox * k..x1 {
                            acc += self.value(x).data()[(ch * h + y) * w + xx];
                        }
                    }
                    let cnt = ((y1 - oy * k) * (x1 - ox * k)) as f64;
                    value.data_mut()[(ch * oh + oy) * ow + ox] = acc * T::from_f64(1.0 / cnt);
                }
            }
        }
        self.push(Op::AvgPoolCeil { k }, vec![x], value)
    }

    /// Nearest-neighbor resize to `(oh, ow)`; source index is
    /// `floor(dst * src_dim / dst_dim)`.
    pub fn upsample_nearest(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (c, h, w) = self.value(x).dims3();
        let mut value = Tensor::zeros(&[c, oh, ow]);
        for ch in 0..c {
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    let ix = ox * w / ow;
                    value.data_mut()[(ch * oh + oy) * ow + ox] =
                        self.value(x).data()[(ch * h + iy) * w + ix];
                }
            }
        }
        self.push(Op::UpsampleNearest, vec![x], value)
    }

    /// Softmax across `n` branch groups: input `(n*C,1,1)` holds `n` logit
    /// vectors of length `C`; output sums to one across branches per channel.
    pub fn branch_softmax(&mut self, x: NodeId, branches: usize) -> NodeId {
        let (nc, h, w) = self.value(x).dims3();
        assert_eq!((h, w), (1, 1), "branch softmax expects descriptors");
        assert_eq!(nc % branches, 0);
        let c = nc / branches;
        let mut value = Tensor::zeros(&[nc, 1, 1]);
        let src = self.value(x).data();
        for ch in 0..c {
            let mut m = src[ch];
            for k in 1..branches {
                m = m.max(src[k * c + ch]);
            }
            let mut denom = T::ZERO;
            for k in 0..branches {
                denom += (src[k * c + ch] - m).exp();
            }
            for k in 0..branches {
                value.data_mut()[k * c + ch] = (src[k * c + ch] - m).exp() / denom;
            }
        }
        self.push(Op::BranchSoftmax { branches }, vec![x], value)
    }

    /// Mean absolute difference, a scalar node.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut acc = 0.0f64;
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += (x - y).abs().to_f64();
        }
        let value = Tensor::scalar(T::from_f64(acc / self.value(a).numel() as f64));
        self.push(Op::L1Loss, vec![a, b], value)
    }

    /// Mean squared difference, a scalar node.
    pub fn sq_diff_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut acc = 0.0f64;
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = (x - y).to_f64();
            acc += d * d;
        }
        let value = Tensor::scalar(T::from_f64(acc / self.value(a).numel() as f64));
        self.push(Op::SqDiffMean, vec![a, b], value)
    }

    /// Forward difference along `axis` (0 = channel/spectral, 1 = vertical,
    /// 2 = horizontal); the trailing slice is zero.
    pub fn forward_diff(&mut self, x: NodeId, axis: usize) -> NodeId {
        assert!(axis < 3);
        let (c, h, w) = self.value(x).dims3();
        let mut value = Tensor::zeros(&[c, h, w]);
        let src = self.value(x).data();
        let idx = |ch: usize, y: usize, xx: usize| (ch * h + y) * w + xx;
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let next = match axis {
                        0 if ch + 1 < c => Some(idx(ch + 1, y, xx)),
                        1 if y + 1 < h => Some(idx(ch, y + 1, xx)),
                        2 if xx + 1 < w => Some(idx(ch, y, xx + 1)),
                        _ => None,
                    };
                    if let Some(n) = next {
                        value.data_mut()[idx(ch, y, xx)] = src[n] - src[idx(ch, y, xx)];
                    }
                }
            }
        }
        self.push(Op::ForwardDiff { axis }, vec![x], value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let s = T::from_f64(c);
        let value = self.value(x).map(|v| v * s);
        self.push(Op::Scale { c }, vec![x], value)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let acc: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let value = Tensor::scalar(T::from_f64(acc));
        self.push(Op::SumAll, vec![x], value)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode differentiation seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
        }
        Gradients { by_node: grads }
    }

    /// Add parameter gradients of one backward pass into the store.
    pub fn accumulate_param_grads(&self, grads: &Gradients<T>, store: &mut ParamStore<T>) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param { idx } = node.op {
                if let Some(g) = grads.get(NodeId(id)) {
                    let dst = store.grad_mut(idx);
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], target: NodeId, delta: Tensor<T>) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(g) => {
                for (d, &s) in g.data_mut().iter_mut().zip(delta.data()) {
                    *d += s;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn backward_node(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let input = |k: usize| &self.nodes[node.inputs[k].0].value;
        match &node.op {
            Op::Input | Op::Param { .. } => {}
            Op::Conv2d { stride, pad, pad_mode } => {
                let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
                let (gx, gw, gb) = conv2d_backward(
                    input(0),
                    input(1),
                    g,
                    *stride,
                    *pad,
                    *pad_mode,
                    wants(0),
                    wants(1),
                    wants(2),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, node.inputs[0], gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, node.inputs[1], gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, node.inputs[2], gb);
                }
            }
            Op::ConvT2x => {
                let wants = |k: usize| self.nodes[node.inputs[k].0].needs_grad;
                let (gx, gw, gb) = convt2x_backward(input(0), input(1), g, wants(0), wants(1), wants(2));
                if let Some(gx) = gx {
                    self.accumulate(grads, node.inputs[0], gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, node.inputs[1], gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, node.inputs[2], gb);
                }
            }
            Op::LeakyRelu { slope } => {
                let s = T::from_f64(*slope);
                let x = input(0);
                let mut gx = Tensor::zeros(x.shape());
                for ((d, &xv), &gv) in gx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                    *d = if xv > T::ZERO { gv } else { s * gv };
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::Sigmoid => {
                let y = &node.value;
                let mut gx = Tensor::zeros(y.shape());
                for ((d, &yv), &gv) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *d = gv * yv * (T::ONE - yv);
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::Add => {
                self.accumulate(grads, node.inputs[0], g.clone());
                self.accumulate(grads, node.inputs[1], g.clone());
            }
            Op::Sub => {
                self.accumulate(grads, node.inputs[0], g.clone());
                self.accumulate(grads, node.inputs[1], g.map(|v| -v));
            }
            Op::Mul => {
                let (a, b) = (input(0), input(1));
                self.accumulate(grads, node.inputs[0], zip(g, b, |gv, bv| gv * bv));
                self.accumulate(grads, node.inputs[1], zip(g, a, |gv, av| gv * av));
            }
            Op::MulChannel => {
                let (x, s) = (input(0), input(1));
                let (c, h, w) = x.dims3();
                let pix = h * w;
                if self.nodes[node.inputs[0].0].needs_grad {
                    let mut gx = Tensor::zeros(&[c, h, w]);
                    for ch in 0..c {
                        let sc = s.data()[ch];
                        for i in 0..pix {
                            gx.data_mut()[ch * pix + i] = g.data()[ch * pix + i] * sc;
                        }
                    }
                    self.accumulate(grads, node.inputs[0], gx);
                }
                if self.nodes[node.inputs[1].0].needs_grad {
                    let mut gs = Tensor::zeros(&[c, 1, 1]);
                    for ch in 0..c {
                        let mut acc = T::ZERO;
                        for i in 0..pix {
                            acc += g.data()[ch * pix + i] * x.data()[ch * pix + i];
                        }
                        gs.data_mut()[ch] = acc;
                    }
                    self.accumulate(grads, node.inputs[1], gs);
                }
            }
            Op::ConcatC => {
                let (_, h, w) = node.value.dims3();
                let pix = h * w;
                let mut offset = 0;
                for &inp in &node.inputs {
                    let (ci, _, _) = self.nodes[inp.0].value.dims3();
                    let part = Tensor::from_vec(
                        &[ci, h, w],
                        g.data()[offset * pix..(offset + ci) * pix].to_vec(),
                    );
                    self.accumulate(grads, inp, part);
                    offset += ci;
                }
            }
            Op::SliceC { start, len } => {
                let x = input(0);
                let (c, h, w) = x.dims3();
                let pix = h * w;
                let mut gx = Tensor::zeros(&[c, h, w]);
                gx.data_mut()[start * pix..(start + len) * pix].copy_from_slice(g.data());
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::InstanceNorm { eps } => {
                let x = input(0);
                let y = &node.value;
                let (c, h, w) = x.dims3();
                let pix = h * w;
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    let xs = &x.data()[ch * pix..(ch + 1) * pix];
                    let ys = &y.data()[ch * pix..(ch + 1) * pix];
                    let gs = &g.data()[ch * pix..(ch + 1) * pix];
                    let (_, std) = channel_stats(xs, *eps);
                    let mut gmean = 0.0f64;
                    let mut gydot = 0.0f64;
                    for i in 0..pix {
                        gmean += gs[i].to_f64();
                        gydot += (gs[i] * ys[i]).to_f64();
                    }
                    gmean /= pix as f64;
                    gydot /= pix as f64;
                    let inv = T::ONE / std;
                    let gm = T::from_f64(gmean);
                    let gy = T::from_f64(gydot);
                    let dst = &mut gx.data_mut()[ch * pix..(ch + 1) * pix];
                    for i in 0..pix {
                        dst[i] = inv * (gs[i] - gm - ys[i] * gy);
                    }
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::GlobalAvgPool => {
                let x = input(0);
                let (c, h, w) = x.dims3();
                let pix = h * w;
                let mut gx = Tensor::zeros(&[c, h, w]);
                let inv = T::from_f64(1.0 / pix as f64);
                for ch in 0..c {
                    let gv = g.data()[ch] * inv;
                    for i in 0..pix {
                        gx.data_mut()[ch * pix + i] = gv;
                    }
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::AvgPoolCeil { k } => {
                let x = input(0);
                let (c, h, w) = x.dims3();
                let (oh, ow) = (h.div_ceil(*k), w.div_ceil(*k));
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let y1 = (oy * k + k).min(h);
                            let x1 = (ox * k + k).min(w);
                            let cnt = ((y1 - oy * k) * (x1 - ox * k)) as f64;
                            let gv = g.data()[(ch * oh + oy) * ow + ox] * T::from_f64(1.0 / cnt);
                            for y in oy * k..y1 {
                                for xx in ox * k..x1 {
                                    gx.data_mut()[(ch * h + y) * w + xx] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::UpsampleNearest => {
                let x = input(0);
                let (c, h, w) = x.dims3();
                let (_, oh, ow) = node.value.dims3();
                let mut gx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for oy in 0..oh {
                        let iy = oy * h / oh;
                        for ox in 0..ow {
                            let ix = ox * w / ow;
                            gx.data_mut()[(ch * h + iy) * w + ix] +=
                                g.data()[(ch * oh + oy) * ow + ox];
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::BranchSoftmax { branches } => {
                let y = &node.value;
                let nc = y.dims3().0;
                let c = nc / branches;
                let mut gx = Tensor::zeros(&[nc, 1, 1]);
                for ch in 0..c {
                    let mut dot = T::ZERO;
                    for k in 0..*branches {
                        dot += g.data()[k * c + ch] * y.data()[k * c + ch];
                    }
                    for k in 0..*branches {
                        let i = k * c + ch;
                        gx.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::L1Loss => {
                let (a, b) = (input(0), input(1));
                let scale = g.item() * T::from_f64(1.0 / a.numel() as f64);
                let mk = |flip: bool| {
                    let mut out = Tensor::zeros(a.shape());
                    for ((d, &av), &bv) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                        let diff = av - bv;
                        let s = if diff > T::ZERO {
                            T::ONE
                        } else if diff < T::ZERO {
                            -T::ONE
                        } else {
                            T::ZERO
                        };
                        *d = if flip { -(s * scale) } else { s * scale };
                    }
                    out
                };
                if self.nodes[node.inputs[0].0].needs_grad {
                    self.accumulate(grads, node.inputs[0], mk(false));
                }
                if self.nodes[node.inputs[1].0].needs_grad {
                    self.accumulate(grads, node.inputs[1], mk(true));
                }
            }
            Op::SqDiffMean => {
                let (a, b) = (input(0), input(1));
                let scale = g.item() * T::from_f64(2.0 / a.numel() as f64);
                if self.nodes[node.inputs[0].0].needs_grad {
                    let ga = zip(a, b, |av, bv| (av - bv) * scale);
                    self.accumulate(grads, node.inputs[0], ga);
                }
                if self.nodes[node.inputs[1].0].needs_grad {
                    let gb = zip(a, b, |av, bv| -((av - bv) * scale));
                    self.accumulate(grads, node.inputs[1], gb);
                }
            }
            Op::ForwardDiff { axis } => {
                let x = input(0);
                let (c, h, w) = x.dims3();
                let mut gx = Tensor::zeros(&[c, h, w]);
                let idx = |ch: usize, y: usize, xx: usize| (ch * h + y) * w + xx;
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let next = match axis {
                                0 if ch + 1 < c => Some(idx(ch + 1, y, xx)),
                                1 if y + 1 < h => Some(idx(ch, y + 1, xx)),
                                2 if xx + 1 < w => Some(idx(ch, y, xx + 1)),
                                _ => None,
                            };
                            if let Some(n) = next {
                                let gv = g.data()[idx(ch, y, xx)];
                                gx.data_mut()[n] += gv;
                                gx.data_mut()[idx(ch, y, xx)] -= gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, node.inputs[0], gx);
            }
            Op::Scale { c } => {
                let s = T::from_f64(*c);
                self.accumulate(grads, node.inputs[0], g.map(|v| v * s));
            }
            Op::SumAll => {
                let x = input(0);
                let gv = g.item();
                self.accumulate(grads, node.inputs[0], Tensor::full(x.shape(), gv));
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Population mean and `sqrt(var + eps)` of one channel, accumulated in f64
/// so f32 graphs do not lose the statistics to rounding.
fn channel_stats<T: Scalar>(xs: &[T], eps: f64) -> (T, T) {
    let n = xs.len() as f64;
    let mean: f64 = xs.iter().map(|v| v.to_f64()).sum::<f64>() / n;
    let var: f64 = xs
        .iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (T::from_f64(mean), T::from_f64((var + eps).sqrt()))
}

// ----------------------------------------------------------------------
// Convolution kernels
// ----------------------------------------------------------------------

#[inline]
fn pad_lookup(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Reflect => Some(crate::cube::reflect_index(i, n)),
        }
    }
}

fn conv_out_dim(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> (Tensor<T>, usize, usize) {
    let (c, h, w) = x.dims3();
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let mut col = Tensor::zeros(&[c * kh * kw, oh * ow]);
    let src = x.data();
    let cols = oh * ow;
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * cols;
                let dst = &mut col.data_mut()[row..row + cols];
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    let Some(iy) = pad_lookup(iy, h, mode) else { continue };
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if let Some(ix) = pad_lookup(ix, w, mode) {
                            dst[oy * ow + ox] = src[(ci * h + iy) * w + ix];
                        }
                    }
                }
            }
        }
    }
    (col, oh, ow)
}

fn col2im_add<T: Scalar>(
    gcol: &Tensor<T>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor<T> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let cols = oh * ow;
    let mut gx = Tensor::zeros(&[c, h, w]);
    let src = gcol.data();
    for ci in 0..c {
        for u in 0..kh {
            for v in 0..kw {
                let row = ((ci * kh + u) * kw + v) * cols;
                for oy in 0..oh {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    let Some(iy) = pad_lookup(iy, h, mode) else { continue };
                    for ox in 0..ow {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if let Some(ix) = pad_lookup(ix, w, mode) {
                            gx.data_mut()[(ci * h + iy) * w + ix] += src[row + oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Tensor<T> {
    let (cin, _, _) = x.dims3();
    let (cout, wcin, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "conv input channels");
    assert_eq!(b.numel(), cout, "conv bias length");
    let (col, oh, ow) = im2col(x, kh, kw, stride, pad, mode);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    T::gemm(
        cout,
        cin * kh * kw,
        oh * ow,
        T::ONE,
        w.data(),
        col.data(),
        T::ZERO,
        out.data_mut(),
    );
    let pix = oh * ow;
    for co in 0..cout {
        let bias = b.data()[co];
        for v in &mut out.data_mut()[co * pix..(co + 1) * pix] {
            *v += bias;
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    mode: PadMode,
    want_gx: bool,
    want_gw: bool,
    want_gb: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cin, h, wd) = x.dims3();
    let (cout, _, kh, kw) = w.dims4();
    let (_, oh, ow) = g.dims3();
    let cols = oh * ow;
    let ckk = cin * kh * kw;

    let gb = want_gb.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        for co in 0..cout {
            let mut acc = T::ZERO;
            for &v in &g.data()[co * cols..(co + 1) * cols] {
                acc += v;
            }
            gb.data_mut()[co] = acc;
        }
        gb
    });

    let gw = want_gw.then(|| {
        let (col, _, _) = im2col(x, kh, kw, stride, pad, mode);
        let mut gw = Tensor::zeros(w.shape());
        // gw (cout x ckk) = g (cout x cols) . col^T (cols x ckk)
        gemm_nt(cout, cols, ckk, g.data(), col.data(), gw.data_mut());
        gw
    });

    let gx = want_gx.then(|| {
        // gcol (ckk x cols) = w^T (ckk x cout) . g (cout x cols)
        let mut gcol = Tensor::zeros(&[ckk, cols]);
        gemm_tn(ckk, cout, cols, w.data(), g.data(), gcol.data_mut());
        col2im_add(&gcol, cin, h, wd, kh, kw, stride, pad, mode)
    });

    (gx, gw, gb)
}

/// `c (m x n) += a (m x k) . b^T` where `b` is `(n x k)` row-major.
fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_raw::<T>(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            c.as_mut_ptr(),
        );
    }
}

/// `c (m x n) += a^T . b` where `a` is `(k x m)` row-major and `b` is `(k x n)`.
fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        gemm_raw::<T>(
            m,
            k,
            n,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
        );
    }
}

/// Strided GEMM dispatch: `c += a . b` with explicit row/col strides,
/// `c` contiguous row-major `(m x n)`.
///
/// # Safety
/// Pointers must reference buffers consistent with the given dimensions and
/// strides.
unsafe fn gemm_raw<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: *const T,
    rsa: isize,
    csa: isize,
    b: *const T,
    rsb: isize,
    csb: isize,
    c: *mut T,
) {
    use std::any::TypeId;
    if TypeId::of::<T>() == TypeId::of::<f32>() {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a as *const f32,
            rsa,
            csa,
            b as *const f32,
            rsb,
            csb,
            1.0,
            c as *mut f32,
            n as isize,
            1,
        );
    } else if TypeId::of::<T>() == TypeId::of::<f64>() {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a as *const f64,
            rsa,
            csa,
            b as *const f64,
            rsb,
            csb,
            1.0,
            c as *mut f64,
            n as isize,
            1,
        );
    } else {
        unreachable!("Scalar is implemented for f32 and f64 only");
    }
}

fn convt2x_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (cin, h, wd) = x.dims3();
    let (wcin, cout, kh, kw) = w.dims4();
    assert_eq!(cin, wcin, "transposed conv input channels");
    assert_eq!((kh, kw), (2, 2), "transposed conv is fixed to kernel 2");
    assert_eq!(b.numel(), cout);
    let pix = h * wd;
    // col (cout*4 x pix) = w^T (cout*4 x cin) . x (cin x pix)
    let mut col = Tensor::zeros(&[cout * 4, pix]);
    gemm_tn(cout * 4, cin, pix, w.data(), x.data(), col.data_mut());
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for co in 0..cout {
        let bias = b.data()[co];
        for u in 0..2 {
            for v in 0..2 {
                let row = ((co * 2 + u) * 2 + v) * pix;
                for iy in 0..h {
                    for ix in 0..wd {
                        out.data_mut()[(co * oh + 2 * iy + u) * ow + 2 * ix + v] =
                            col.data()[row + iy * wd + ix] + bias;
                    }
                }
            }
        }
    }
    out
}

fn convt2x_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    want_gx: bool,
    want_gw: bool,
    want_gb: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (cin, h, wd) = x.dims3();
    let (_, cout, _, _) = w.dims4();
    let (_, oh, ow) = g.dims3();
    let pix = h * wd;

    let gb = want_gb.then(|| {
        let mut gb = Tensor::zeros(&[cout]);
        for co in 0..cout {
            let mut acc = T::ZERO;
            for &v in &g.data()[co * oh * ow..(co + 1) * oh * ow] {
                acc += v;
            }
            gb.data_mut()[co] = acc;
        }
        gb
    });

    if !want_gx && !want_gw {
        return (None, None, gb);
    }

    // Gather the output gradient into the col layout used by the forward.
    let mut gcol = Tensor::zeros(&[cout * 4, pix]);
    for co in 0..cout {
        for u in 0..2 {
            for v in 0..2 {
                let row = ((co * 2 + u) * 2 + v) * pix;
                for iy in 0..h {
                    for ix in 0..wd {
                        gcol.data_mut()[row + iy * wd + ix] =
                            g.data()[(co * oh + 2 * iy + u) * ow + 2 * ix + v];
                    }
                }
            }
        }
    }

    let gx = want_gx.then(|| {
        // gx (cin x pix) = w (cin x cout*4) . gcol (cout*4 x pix)
        let mut gx = Tensor::zeros(&[cin, h, wd]);
        T::gemm(cin, cout * 4, pix, T::ONE, w.data(), gcol.data(), T::ZERO, gx.data_mut());
        gx
    });

    let gw = want_gw.then(|| {
        // gw (cin x cout*4) = x (cin x pix) . gcol^T (pix x cout*4)
        let mut gw = Tensor::zeros(w.shape());
        gemm_nt(cin, pix, cout * 4, x.data(), gcol.data(), gw.data_mut());
        gw
    });

    (gx, gw, gb)
}
