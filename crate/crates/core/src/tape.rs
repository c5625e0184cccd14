//! Reverse-mode gradient tape over the fully unrolled time graph.
//!
//! Ops are coarse (matmul, conv, batch norm, a whole neuron sequence, masked
//! attention) so one training step records a few dozen nodes rather than one
//! per scalar. Backward through a neuron node is exact spatio-temporal
//! backpropagation: it walks the time axis in reverse, carrying the membrane
//! gradient from step `t+1` into step `t`.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::neurons::{fire, surrogate_grad, LifParams, SpikeMode};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{kernels, ConvGeom, SpikeTensor, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Channel layout for batch norm: the tensor is viewed as `[outer, channels, inner]`
/// and statistics are taken over `outer × inner` for each channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl BnLayout {
    /// Channel axis is axis 1 for rank ≥ 3, otherwise the last axis.
    pub fn for_shape(shape: &[usize]) -> Self {
        match shape.len() {
            0 => Self { outer: 1, channels: 1, inner: 1 },
            1 => Self { outer: 1, channels: shape[0], inner: 1 },
            2 => Self { outer: shape[0], channels: shape[1], inner: 1 },
            _ => Self {
                outer: shape[0],
                channels: shape[1],
                inner: shape[2..].iter().product(),
            },
        }
    }
}

/// Statistics used by a batch-norm node.
#[derive(Clone, Debug)]
pub enum BnStats<'a> {
    Batch { eps: f64 },
    Running { mean: &'a [f64], var: &'a [f64], eps: f64 },
}

/// Per-channel batch statistics returned from a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Coarse op kind, exposed for op counting and spike statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Mul,
    ScaleBy,
    ScaleConst,
    Sum,
    Reshape,
    Conv2d,
    BatchNorm,
    Neuron,
    CausalAttention,
    AvgPool,
    TimeMean,
    CrossEntropy,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleBy { x: Var, s: Var },
    ScaleConst { x: Var, c: f64 },
    Sum { x: Var },
    Reshape { x: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: BnLayout,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Neuron {
        input: Var,
        recurrent: Option<Var>,
        params: LifParams,
        mode: SpikeMode,
        steps: usize,
        width: usize,
        u_pre: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<Vec<u8>>,
        steps: usize,
        batch: usize,
        dim: usize,
        scores: Vec<f64>,
    },
    AvgPool { x: Var, inner: usize },
    TimeMean { x: Var, steps: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::ScaleConst { .. } => OpKind::ScaleConst,
            Op::Sum { .. } => OpKind::Sum,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Neuron { .. } => OpKind::Neuron,
            Op::CausalAttention { .. } => OpKind::CausalAttention,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::TimeMean { .. } => OpKind::TimeMean,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::AddBias { x, bias } => vec![*x, *bias],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::ScaleConst { x, .. }
            | Op::Sum { x }
            | Op::Reshape { x }
            | Op::AvgPool { x, .. }
            | Op::TimeMean { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Neuron { input, recurrent, .. } => {
                let mut v = vec![*input];
                v.extend(recurrent);
                v
            }
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
    scope: Arc<str>,
}

/// Read-only view of a recorded node.
#[derive(Clone, Copy, Debug)]
pub struct NodeView<'a> {
    pub var: Var,
    pub kind: OpKind,
    pub scope: &'a str,
    pub value: &'a Tensor,
    pub inputs: [Option<Var>; 3],
    pub param: Option<ParamId>,
    /// Extra geometry for conv nodes.
    pub conv: Option<ConvGeom>,
    /// Mask for attention nodes.
    pub mask: Option<&'a [u8]>,
    /// Decay constant for neuron nodes.
    pub neuron: Option<LifParams>,
    /// Batch-norm node recorded with batch statistics.
    pub bn_train: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: HashMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
    /// Number of nodes whose backward rule ran.
    pub visited: usize,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<_> = self.params.keys().copied().collect();
        ids.sort();
        ids
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Tensor> {
        self.params.get_mut(&id)
    }

    /// Global L2 norm over all parameter gradients, in a fixed order.
    pub fn global_norm(&self) -> f64 {
        self.param_ids()
            .iter()
            .map(|id| self.params[id].data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TapeState {
    Recording,
    Consumed,
}

/// Single-writer record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    mode: SpikeMode,
    state: TapeState,
    scope: Arc<str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            mode: SpikeMode::Spiking,
            state: TapeState::Recording,
            scope: Arc::from(""),
        }
    }

    pub fn with_mode(mode: SpikeMode) -> Self {
        Self { mode, ..Self::new() }
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    /// Selects spiking or relaxed neurons. Fails once a forward has started.
    pub fn set_mode(&mut self, relaxed: bool) -> Result<()> {
        if !self.nodes.is_empty() && self.state == TapeState::Recording {
            return Err(Error::State(
                "spike mode cannot change in the middle of a forward pass".into(),
            ));
        }
        self.mode = if relaxed {
            SpikeMode::Relaxed
        } else {
            SpikeMode::Spiking
        };
        Ok(())
    }

    /// Drops every recorded node so the tape can record a new step.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.state = TapeState::Recording;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Label attached to subsequently recorded nodes.
    pub fn set_scope(&mut self, scope: &str) {
        if &*self.scope != scope {
            self.scope = Arc::from(scope);
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a spiking node as a binary tensor.
    pub fn spikes(&self, v: Var) -> Result<SpikeTensor> {
        SpikeTensor::from_real(self.value(v))
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeView<'_>> {
        self.nodes.iter().enumerate().map(|(i, n)| {
            let ins = n.op.inputs();
            let mut inputs = [None; 3];
            for (slot, v) in inputs.iter_mut().zip(ins) {
                *slot = Some(v);
            }
            NodeView {
                var: Var(i),
                kind: n.op.kind(),
                scope: &n.scope,
                value: &n.value,
                inputs,
                param: n.param,
                conv: match &n.op {
                    Op::Conv2d { geom, .. } => Some(*geom),
                    _ => None,
                },
                mask: match &n.op {
                    Op::CausalAttention { mask, .. } => Some(mask.as_slice()),
                    _ => None,
                },
                neuron: match &n.op {
                    Op::Neuron { params, .. } => Some(*params),
                    _ => None,
                },
                bn_train: matches!(&n.op, Op::BatchNorm { train: true, .. }),
            }
        })
    }

    fn ensure_recording(&mut self) -> Result<()> {
        if self.state == TapeState::Consumed {
            return Err(Error::StaleTape(
                "tape was consumed by backward; clear it before recording".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are collected for it if `value.requires_grad()`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    /// Records a parameter leaf; trainable parameters receive gradients.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.param(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            requires_grad: p.trainable,
            param: Some(id),
            scope: self.scope.clone(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds a vector over the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.ensure_recording()?;
        let xs = self.shape(x);
        let n = *xs.last().unwrap_or(&0);
        if self.value(bias).numel() != n {
            return Err(Error::shape("add_bias", xs, self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).clone().with_requires_grad(false);
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ensure_recording()?;
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Multiplies every element by a scalar node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        self.ensure_recording()?;
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale_by", &[1], self.shape(s)));
        }
        let sv = self.value(s).item();
        let data = self.value(x).data().iter().map(|v| v * sv).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::ScaleBy { x, s }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.ensure_recording()?;
        let data = self.value(x).data().iter().map(|v| v * c).collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::ScaleConst { x, c }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.ensure_recording()?;
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Batched cross-correlation: `x [N,C,H,W]`, `w [O,C,k,k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.ensure_recording()?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] || stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.value(b).numel() != ws[0] {
                return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            out_channels: ws[0],
            kernel: ws[2],
            stride,
            pad,
        };
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let out = Tensor::new(geom.out_shape().to_vec(), data)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// Affine batch normalization. Returns the batch moments in batch mode so
    /// the owning layer can update its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        self.ensure_recording()?;
        let layout = BnLayout::for_shape(self.shape(x));
        let c = layout.channels;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let count = layout.outer * layout.inner;
        let (mean, var, eps, train) = match stats {
            BnStats::Batch { eps } => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for o in 0..layout.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * layout.inner;
                        mean[ch] += xd[base..base + layout.inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..layout.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * layout.inner;
                        var[ch] += xd[base..base + layout.inner]
                            .iter()
                            .map(|v| (v - mean[ch]) * (v - mean[ch]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                (mean, var, eps, true)
            }
            BnStats::Running { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..layout.outer {
            for ch in 0..c {
                let base = (o * c + ch) * layout.inner;
                for i in base..base + layout.inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        let moments = train.then(|| BatchMoments {
            mean: mean.clone(),
            var: var.clone(),
            count,
        });
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, moments))
    }

    /// Runs a layer of (R)LIF neurons over the leading time axis of `input`.
    ///
    /// With `recurrent = Some(V)` the input must be `[T, B, N]` and `V` is
    /// `[N, N]`; the layer's spikes at `t` drive `s_t · V` into step `t+1`.
    pub fn neuron(&mut self, input: Var, recurrent: Option<Var>, params: &LifParams) -> Result<Var> {
        self.ensure_recording()?;
        let shape = self.shape(input).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("neuron", &shape, &[]));
        }
        let steps = shape[0];
        let width: usize = shape[1..].iter().product();
        let n_rec = match recurrent {
            Some(r) => {
                let n = *shape.last().unwrap();
                if shape.len() < 2 || self.shape(r) != [n, n] {
                    return Err(Error::shape("rlif recurrent weights", &shape, self.shape(r)));
                }
                n
            }
            None => 0,
        };
        let mode = self.mode;
        let x = self.value(input).data();
        let vw = recurrent.map(|r| self.value(r).data());
        let mut out = vec![0.0; x.len()];
        let mut u_pre = vec![0.0; x.len()];
        let mut post = vec![0.0; width];
        for t in 0..steps {
            let cur = &x[t * width..(t + 1) * width];
            let mut u: Vec<f64> = post.iter().zip(cur).map(|(p, c)| params.tau * p + c).collect();
            if let (Some(vw), true) = (vw, t > 0) {
                let prev = &out[(t - 1) * width..t * width];
                let drive = kernels::matmul(prev, vw, width / n_rec, n_rec, n_rec);
                u.iter_mut().zip(&drive).for_each(|(a, d)| *a += d);
            }
            for j in 0..width {
                let s = fire(u[j], params, mode);
                out[t * width + j] = s;
                u_pre[t * width + j] = u[j];
                post[j] = u[j] * (1.0 - s);
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Neuron {
                input,
                recurrent,
                params: *params,
                mode,
                steps,
                width,
                u_pre,
            },
        ))
    }

    /// `(mask ⊙ (Q Kᵀ)) V` for each batch element; `q, k, v` are `[T, B, D]`
    /// and `mask` is a row-major `T × T` 0/1 matrix.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, mask: Arc<Vec<u8>>) -> Result<Var> {
        self.ensure_recording()?;
        self.same_shape("attention q/k", q, k)?;
        self.same_shape("attention k/v", k, v)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || mask.len() != s[0] * s[0] {
            return Err(Error::shape("attention mask", &s, &[mask.len()]));
        }
        let (steps, batch, dim) = (s[0], s[1], s[2]);
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut scores = vec![0.0; batch * steps * steps];
        let mut out = vec![0.0; qd.len()];
        let at = |t: usize, b: usize| (t * batch + b) * dim;
        for b in 0..batch {
            for i in 0..steps {
                for j in 0..steps {
                    if mask[i * steps + j] == 0 {
                        continue;
                    }
                    let sc: f64 = qd[at(i, b)..at(i, b) + dim]
                        .iter()
                        .zip(&kd[at(j, b)..at(j, b) + dim])
                        .map(|(x, y)| x * y)
                        .sum();
                    scores[(b * steps + i) * steps + j] = sc;
                    if sc != 0.0 {
                        let (oi, vj) = (at(i, b), at(j, b));
                        for d in 0..dim {
                            out[oi + d] += sc * vd[vj + d];
                        }
                    }
                }
            }
        }
        let out = Tensor::new(s, out)?;
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                mask,
                steps,
                batch,
                dim,
                scores,
            },
        ))
    }

    /// Mean over all axes after the first two: `[N, C, ...] → [N, C]`.
    pub fn avg_pool(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::shape("avg_pool", &s, &[]));
        }
        let inner: usize = s[2..].iter().product();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(out, Op::AvgPool { x, inner }))
    }

    /// Mean over the leading time axis: `[T, ...] → [...]`.
    pub fn time_mean(&mut self, x: Var) -> Result<Var> {
        self.ensure_recording()?;
        let s = self.shape(x).to_vec();
        if s.len() < 2 || s[0] == 0 {
            return Err(Error::shape("time_mean", &s, &[]));
        }
        let steps = s[0];
        let width: usize = s[1..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; width];
        for t in 0..steps {
            out.iter_mut()
                .zip(&xd[t * width..(t + 1) * width])
                .for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= steps as f64);
        let out = Tensor::new(s[1..].to_vec(), out)?;
        Ok(self.push(out, Op::TimeMean { x, steps }))
    }

    /// Mean softmax cross-entropy of `logits [B, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.ensure_recording()?;
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.value(logits).data();
        if let Some(i) = ld.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite logit {} at sample {}, class {} (scope {:?})",
                ld[i],
                i / c,
                i % c,
                self.nodes[logits.0].scope
            )));
        }
        let mut probs = vec![0.0; ld.len()];
        let mut loss = 0.0;
        for (b, &y) in labels.iter().enumerate() {
            let row = &ld[b * c..(b + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..c {
                probs[b * c + j] = (row[j] - max).exp() / z;
            }
            loss += -(row[y] - max - z.ln());
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Backpropagates from a scalar node. The tape is consumed: a second call
    /// without a new forward is a stale-tape error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.state == TapeState::Consumed {
            return Err(Error::StaleTape(
                "backward already ran on this tape; record a new forward first".into(),
            ));
        }
        if self.nodes.is_empty() {
            return Err(Error::StaleTape("backward on an empty tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape("backward (loss must be scalar)", &[1], self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            out.visited += 1;
            if let Op::Leaf = node.op {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                match node.param {
                    Some(id) => match out.params.get_mut(&id) {
                        Some(acc) => acc
                            .data_mut()
                            .iter_mut()
                            .zip(t.data())
                            .for_each(|(a, b)| *a += b),
                        None => {
                            out.params.insert(id, t);
                        }
                    },
                    None => {
                        out.leaves.insert(Var(i), t);
                    }
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        self.state = TapeState::Consumed;
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, d: Vec<f64>| match grads[v.0].as_mut() {
            Some(e) => e.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            None => grads[v.0] = Some(d),
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.wants(*a) {
                    acc(*a, kernels::matmul_a_bt(g, val(*b), *m, *k, *n));
                }
                if self.wants(*b) {
                    acc(*b, kernels::matmul_at_b(val(*a), g, *m, *k, *n));
                }
            }
            Op::AddBias { x, bias } => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*bias) {
                    let n = self.nodes[bias.0].value.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    acc(*bias, gb);
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(x, y)| x * y).collect());
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = val(*s)[0];
                if self.wants(*x) {
                    acc(*x, g.iter().map(|v| v * sv).collect());
                }
                if self.wants(*s) {
                    acc(*s, vec![g.iter().zip(val(*x)).map(|(a, b)| a * b).sum()]);
                }
            }
            Op::ScaleConst { x, c } => {
                if self.wants(*x) {
                    acc(*x, g.iter().map(|v| v * c).collect());
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    acc(*x, vec![g[0]; self.nodes[x.0].value.numel()]);
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) =
                    kernels::conv2d_backward(val(*x), val(*w), g, geom, self.wants(*x));
                if let Some(gx) = gx {
                    acc(*x, gx);
                }
                if self.wants(*w) {
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        acc(*b, gb);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                train,
            } => {
                let c = layout.channels;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for o in 0..layout.outer {
                    for ch in 0..c {
                        let base = (o * c + ch) * layout.inner;
                        for j in base..base + layout.inner {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gam = val(*gamma);
                    let n = (layout.outer * layout.inner) as f64;
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..layout.outer {
                        for ch in 0..c {
                            let base = (o * c + ch) * layout.inner;
                            let k = gam[ch] * inv_std[ch];
                            for j in base..base + layout.inner {
                                gx[j] = if *train {
                                    k * (g[j] - sum_g[ch] / n - xhat[j] * sum_gx[ch] / n)
                                } else {
                                    k * g[j]
                                };
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if self.wants(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if self.wants(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::Neuron {
                input,
                recurrent,
                params,
                mode,
                steps,
                width,
                u_pre,
            } => {
                let (steps, width) = (*steps, *width);
                let spikes = self.nodes[i].value.data();
                let vw = recurrent.map(|r| val(r));
                let n_rec = recurrent.map_or(0, |r| self.nodes[r.0].value.shape()[0]);
                let rows = if n_rec > 0 { width / n_rec } else { 0 };
                let mut g_in = vec![0.0; g.len()];
                let mut g_rec = vec![0.0; n_rec * n_rec];
                let mut gu_next = vec![0.0; width];
                for t in (0..steps).rev() {
                    let mut gs = g[t * width..(t + 1) * width].to_vec();
                    if let (Some(vw), true) = (vw, t + 1 < steps) {
                        let back = kernels::matmul_a_bt(&gu_next, vw, rows, n_rec, n_rec);
                        gs.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                    }
                    let mut gu = vec![0.0; width];
                    for j in 0..width {
                        let idx = t * width + j;
                        let u = u_pre[idx];
                        let s = spikes[idx];
                        let h = surrogate_grad(u, params);
                        let gpost = if t + 1 < steps { params.tau * gu_next[j] } else { 0.0 };
                        let dpost = match mode {
                            SpikeMode::Spiking => 1.0 - s,
                            SpikeMode::Relaxed => (1.0 - s) - u * h,
                        };
                        gu[j] = gs[j] * h + gpost * dpost;
                    }
                    g_in[t * width..(t + 1) * width].copy_from_slice(&gu);
                    if n_rec > 0 && t > 0 {
                        let prev = &spikes[(t - 1) * width..t * width];
                        let gv = kernels::matmul_at_b(prev, &gu, rows, n_rec, n_rec);
                        g_rec.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
                    }
                    gu_next = gu;
                }
                if self.wants(*input) {
                    acc(*input, g_in);
                }
                if let Some(r) = recurrent {
                    if self.wants(*r) {
                        acc(*r, g_rec);
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                mask,
                steps,
                batch,
                dim,
                scores,
            } => {
                let (steps, batch, dim) = (*steps, *batch, *dim);
                let (qd, kd, vd) = (val(*q), val(*k), val(*v));
                let at = |t: usize, b: usize| (t * batch + b) * dim;
                let mut gq = vec![0.0; qd.len()];
                let mut gk = vec![0.0; kd.len()];
                let mut gv = vec![0.0; vd.len()];
                for b in 0..batch {
                    for i in 0..steps {
                        for j in 0..steps {
                            if mask[i * steps + j] == 0 {
                                continue;
                            }
                            let (gi, vj) = (at(i, b), at(j, b));
                            let sc = scores[(b * steps + i) * steps + j];
                            let mut gs = 0.0;
                            for d in 0..dim {
                                gs += g[gi + d] * vd[vj + d];
                                gv[vj + d] += sc * g[gi + d];
                            }
                            for d in 0..dim {
                                gq[gi + d] += gs * kd[vj + d];
                                gk[vj + d] += gs * qd[gi + d];
                            }
                        }
                    }
                }
                if self.wants(*q) {
                    acc(*q, gq);
                }
                if self.wants(*k) {
                    acc(*k, gk);
                }
                if self.wants(*v) {
                    acc(*v, gv);
                }
            }
            Op::AvgPool { x, inner } => {
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(g.len() * inner);
                    for &gv in g {
                        gx.extend(std::iter::repeat_n(gv / *inner as f64, *inner));
                    }
                    acc(*x, gx);
                }
            }
            Op::TimeMean { x, steps } => {
                if self.wants(*x) {
                    let mut gx = Vec::with_capacity(g.len() * steps);
                    for _ in 0..*steps {
                        gx.extend(g.iter().map(|v| v / *steps as f64));
                    }
                    acc(*x, gx);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.wants(*logits) {
                    let c = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (b, &y) in labels.iter().enumerate() {
                        gl[b * c + y] -= scale;
                    }
                    acc(*logits, gl);
                }
            }
        }
    }
}
