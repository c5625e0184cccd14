//! Linear, convolution and batch-norm layers, plus the composite blocks the
//! two subnets are built from.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neurons::LifParams;
use crate::params::{ParamId, ParamStore};
use crate::tape::{BnStats, Tape, Var};
use crate::tensor::{kernels, ConvGeom, SpikeTensor, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Everything a layer needs while recording a forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a mut ParamStore,
    pub train: bool,
    /// Running-stat update rate; 1.0 overwrites the running stats with the
    /// current batch (used for calibration).
    pub bn_momentum: f64,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, train: bool) -> Self {
        Self {
            tape,
            store,
            train,
            bn_momentum: BN_MOMENTUM,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }
}

/// Uniform Kaiming init over fan-in: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Random orthogonal `n × n` matrix scaled by `gain`.
pub fn orthogonal<R: Rng>(n: usize, gain: f64, rng: &mut R) -> Tensor {
    let m = DMatrix::<f64>::from_fn(n, n, |_, _| rng.sample(StandardNormal));
    let qr = m.qr();
    let (q, r) = (qr.q(), qr.r());
    // Sign-fix so the distribution is uniform over the orthogonal group.
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
            data[i * n + j] = gain * q[(i, j)] * sign;
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Fully connected layer `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(&[in_dim, out_dim], in_dim, rng),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), true));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [N, in] → [N, out]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let y = ctx.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = ctx.param(b);
                ctx.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Square-kernel 2-D convolution with "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &VisualBlockCfg, bias: bool, rng: &mut R) -> Self {
        let fan_in = cfg.in_channels * cfg.kernel * cfg.kernel;
        let weight = store.add(
            format!("{name}.weight"),
            kaiming_uniform(
                &[cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel],
                fan_in,
                rng,
            ),
            true,
        );
        let bias =
            bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[cfg.out_channels]), true));
        Self {
            weight,
            bias,
            stride: cfg.stride,
            pad: cfg.kernel / 2,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Per-timestep cross-correlation of a spike tensor `[T, C, H, W]` with
/// `w: [O, C, k, k]` and optional bias `[O]`, "same" padding.
pub fn conv2d_forward(x: &SpikeTensor, w: &Tensor, b: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2] % 2 == 0 {
        return Err(Error::shape("conv2d_forward", xs, ws));
    }
    if b.is_some_and(|b| b.numel() != ws[0]) {
        return Err(Error::shape("conv2d_forward bias", ws, b.unwrap().shape()));
    }
    let geom = ConvGeom {
        batch: xs[0],
        in_channels: xs[1],
        height: xs[2],
        width: xs[3],
        out_channels: ws[0],
        kernel: ws[2],
        stride,
        pad: ws[2] / 2,
    };
    let xr = x.to_real();
    let out = kernels::conv2d_forward(xr.data(), w.data(), b.map(Tensor::data), &geom);
    Tensor::new(geom.out_shape().to_vec(), out)
}

/// Batch normalization with learnable scale/shift and running statistics.
///
/// Statistics are shared over batch, time and space.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub batches_seen: ParamId,
    pub channels: usize,
    name: String,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false),
            batches_seen: store.add(format!("{name}.batches_seen"), Tensor::scalar(0.0), false),
            channels,
            name: name.to_string(),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        if ctx.train {
            let (y, moments) = ctx.tape.batch_norm(x, gamma, beta, BnStats::Batch { eps: BN_EPS })?;
            let m = moments.expect("batch mode returns moments");
            let mom = ctx.bn_momentum;
            let unbias = if m.count > 1 {
                m.count as f64 / (m.count as f64 - 1.0)
            } else {
                1.0
            };
            let rm = ctx.store.get_mut(self.running_mean).data_mut();
            for (r, v) in rm.iter_mut().zip(&m.mean) {
                *r = (1.0 - mom) * *r + mom * v;
            }
            let rv = ctx.store.get_mut(self.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&m.var) {
                *r = (1.0 - mom) * *r + mom * v * unbias;
            }
            ctx.store.get_mut(self.batches_seen).data_mut()[0] += 1.0;
            Ok(y)
        } else {
            if ctx.store.get(self.batches_seen).item() == 0.0 {
                warn!(
                    "batch norm {} evaluated before any training batch; using initial statistics",
                    self.name
                );
            }
            let mean = ctx.store.get(self.running_mean).data().to_vec();
            let var = ctx.store.get(self.running_var).data().to_vec();
            let (y, _) = ctx.tape.batch_norm(
                x,
                gamma,
                beta,
                BnStats::Running {
                    mean: &mean,
                    var: &var,
                    eps: BN_EPS,
                },
            )?;
            Ok(y)
        }
    }

    /// Eval-mode affine form: `y = x · scale + shift` per channel.
    pub fn eval_affine(&self, store: &ParamStore) -> (Vec<f64>, Vec<f64>) {
        let g = store.get(self.gamma).data();
        let b = store.get(self.beta).data();
        let m = store.get(self.running_mean).data();
        let v = store.get(self.running_var).data();
        let scale: Vec<f64> = g.iter().zip(v).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
        let shift = b.iter().zip(m).zip(&scale).map(|((b, m), s)| b - m * s).collect();
        (scale, shift)
    }
}

/// Folds an eval-mode batch norm into the preceding linear layer.
/// Returns `(W', b')` with `BN(xW + b) = xW' + b'`.
pub fn fold_linear_bn(lin: &Linear, bn: &BatchNorm, store: &ParamStore) -> (Tensor, Tensor) {
    let (scale, shift) = bn.eval_affine(store);
    let mut w = store.get(lin.weight).clone();
    for row in w.data_mut().chunks_mut(lin.out_dim) {
        row.iter_mut().zip(&scale).for_each(|(v, s)| *v *= s);
    }
    let b0 = lin
        .bias
        .map(|b| store.get(b).data().to_vec())
        .unwrap_or_else(|| vec![0.0; lin.out_dim]);
    let b = b0
        .iter()
        .zip(&scale)
        .zip(&shift)
        .map(|((b, s), sh)| b * s + sh)
        .collect();
    (w, Tensor::new(vec![lin.out_dim], b).expect("out_dim"))
}

/// Reshapes `[T·B, ...]` to `[T, B·...]`, runs a neuron layer, and restores the shape.
pub fn spike_sequence(ctx: &mut Ctx<'_>, x: Var, steps: usize, params: &LifParams) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let total: usize = shape.iter().product();
    if steps == 0 || total % steps != 0 {
        return Err(Error::shape("spike_sequence", &shape, &[steps]));
    }
    let seq = ctx.tape.reshape(x, &[steps, total / steps])?;
    let s = ctx.tape.neuron(seq, None, params)?;
    ctx.tape.reshape(s, &shape)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct VisualBlockCfg {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    /// Spatial stride; 2 halves the resolution.
    pub stride: usize,
}

impl VisualBlockCfg {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("visual block channels must be > 0".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("visual block kernel must be odd, got {}", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::Config("visual block stride must be > 0".into()));
        }
        Ok(())
    }
}

/// Convolution → batch norm → LIF.
#[derive(Clone, Debug)]
pub struct VisualBlock {
    pub cfg: VisualBlockCfg,
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub neuron: LifParams,
    pub name: String,
}

impl VisualBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: VisualBlockCfg, neuron: LifParams, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), &cfg, false, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cfg.out_channels),
            cfg,
            neuron,
            name: name.to_string(),
        })
    }

    /// `x: [T·B, C, H, W]` spikes → `[T·B, C', H', W']` spikes.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize) -> Result<Var> {
        ctx.tape.set_scope(&self.name);
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        spike_sequence(ctx, y, steps, &self.neuron)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeechBlockCfg {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_attention: bool,
}

impl SpeechBlockCfg {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config("speech block dims must be > 0".into()));
        }
        Ok(())
    }
}

/// Linear → batch norm → LIF. The attention variant is assembled in the
/// model by running a cueing module on the block input first.
#[derive(Clone, Debug)]
pub struct SpeechBlock {
    pub cfg: SpeechBlockCfg,
    pub linear: Linear,
    pub bn: BatchNorm,
    pub neuron: LifParams,
    pub name: String,
}

impl SpeechBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: SpeechBlockCfg, neuron: LifParams, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            linear: Linear::new(store, &format!("{name}.linear"), cfg.in_dim, cfg.out_dim, true, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cfg.out_dim),
            cfg,
            neuron,
            name: name.to_string(),
        })
    }

    /// Pre-activation `BN(Linear(x))` for `x: [T·B, in]`, with an optional
    /// extra input term folded in before batch norm.
    pub fn preactivation(&self, ctx: &mut Ctx<'_>, x: Var, extra: Option<Var>) -> Result<Var> {
        ctx.tape.set_scope(&self.name);
        let mut y = self.linear.forward(ctx, x)?;
        if let Some(e) = extra {
            y = ctx.tape.add(y, e)?;
        }
        self.bn.forward(ctx, y)
    }

    /// `x: [T·B, in]` → `[T·B, out]` spikes.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize) -> Result<Var> {
        let y = self.preactivation(ctx, x, None)?;
        spike_sequence(ctx, y, steps, &self.neuron)
    }

    /// Eager forward on a time-major input `[T, B, in]` (or `[T, in]`).
    pub fn run(&self, store: &mut ParamStore, x: &Tensor, train: bool) -> Result<SpikeTensor> {
        let s = x.shape().to_vec();
        if s.len() < 2 || *s.last().unwrap() != self.cfg.in_dim {
            return Err(Error::shape("speech block input", &s, &[self.cfg.in_dim]));
        }
        let steps = s[0];
        let rows = x.numel() / self.cfg.in_dim;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, train);
        let xin = ctx.tape.constant(x.clone().reshape(&[rows, self.cfg.in_dim])?);
        let y = self.forward(&mut ctx, xin, steps)?;
        let mut out_shape = s.clone();
        *out_shape.last_mut().unwrap() = self.cfg.out_dim;
        let t = tape.value(y).clone().reshape(&out_shape)?;
        SpikeTensor::from_real(&t)
    }
}

/// Linear → batch norm → recurrent LIF, used by the audio encoder.
#[derive(Clone, Debug)]
pub struct RlifLayer {
    pub linear: Linear,
    pub bn: BatchNorm,
    pub recurrent: ParamId,
    pub neuron: LifParams,
    pub width: usize,
    pub name: String,
}

impl RlifLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, width: usize, neuron: LifParams, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, &format!("{name}.linear"), in_dim, width, true, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), width),
            recurrent: store.add(format!("{name}.recurrent"), orthogonal(width, 0.1, rng), true),
            neuron,
            width,
            name: name.to_string(),
        }
    }

    /// `x: [T·B, in]` → `[T·B, width]` spikes.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var, steps: usize) -> Result<Var> {
        ctx.tape.set_scope(&self.name);
        let y = self.linear.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        let rows = ctx.tape.shape(y)[0];
        let seq = ctx.tape.reshape(y, &[steps, rows / steps, self.width])?;
        let v = ctx.param(self.recurrent);
        let s = ctx.tape.neuron(seq, Some(v), &self.neuron)?;
        ctx.tape.reshape(s, &[rows, self.width])
    }
}
