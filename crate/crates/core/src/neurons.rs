//! Leaky integrate-and-fire neurons with multiplicative reset.
//!
//! Forward uses a Heaviside spike; backward uses a triangular surrogate of
//! width `gamma` around the threshold. A relaxed mode swaps the Heaviside for
//! the triangle's antiderivative (a clamped piecewise-quadratic ramp) so the
//! whole network becomes differentiable and can be checked against finite
//! differences.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SpikeTensor, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct LifParams {
    /// Membrane decay per timestep, in `[0, 1)`.
    pub tau: f64,
    pub v_th: f64,
    /// Half-width of the surrogate triangle.
    pub gamma: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 0.5,
            v_th: 1.0,
            gamma: 1.0,
        }
    }
}

impl LifParams {
    pub fn new(tau: f64, v_th: f64, gamma: f64) -> Result<Self> {
        let p = Self { tau, v_th, gamma };
        p.validate()?;
        Ok(p)
    }

    pub fn with_threshold(self, v_th: f64) -> Self {
        Self { v_th, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_th > 0.0 && self.v_th.is_finite()) {
            return Err(Error::Config(format!("v_th must be > 0, got {}", self.v_th)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0,1), got {}", self.tau)));
        }
        Ok(())
    }
}

/// How the spike nonlinearity is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpikeMode {
    /// Heaviside forward, surrogate backward, reset path detached.
    #[default]
    Spiking,
    /// Differentiable ramp forward with its exact derivative.
    Relaxed,
}

/// Triangular surrogate `(1/γ²)·max(0, γ − |u − V_th|)`.
pub fn surrogate_grad(u: f64, p: &LifParams) -> f64 {
    (p.gamma - (u - p.v_th).abs()).max(0.0) / (p.gamma * p.gamma)
}

/// Antiderivative of [`surrogate_grad`], clamped to `[0, 1]`.
pub fn soft_spike(u: f64, p: &LifParams) -> f64 {
    let d = u - p.v_th;
    let g2 = 2.0 * p.gamma * p.gamma;
    if d <= -p.gamma {
        0.0
    } else if d >= p.gamma {
        1.0
    } else if d <= 0.0 {
        (d + p.gamma) * (d + p.gamma) / g2
    } else {
        1.0 - (p.gamma - d) * (p.gamma - d) / g2
    }
}

/// Spike nonlinearity for the given mode. A potential exactly at threshold fires.
#[inline]
pub fn fire(u: f64, p: &LifParams, mode: SpikeMode) -> f64 {
    match mode {
        SpikeMode::Spiking => {
            if u >= p.v_th {
                1.0
            } else {
                0.0
            }
        }
        SpikeMode::Relaxed => soft_spike(u, p),
    }
}

/// Membrane state of one layer carried across timesteps.
#[derive(Clone, Debug)]
pub struct NeuronState {
    /// Post-reset potential.
    pub u: Tensor,
    /// Pre-reset potential of every step taken so far.
    pub recorded_u: Vec<Tensor>,
    mode: SpikeMode,
}

impl NeuronState {
    /// Resting state (all potentials 0).
    pub fn new(shape: &[usize]) -> Self {
        Self {
            u: Tensor::zeros(shape),
            recorded_u: Vec::new(),
            mode: SpikeMode::Spiking,
        }
    }

    pub fn mode(&self) -> SpikeMode {
        self.mode
    }

    /// Switches between spiking and relaxed evaluation. Only allowed before
    /// the first step or after [`NeuronState::reset`].
    pub fn set_mode(&mut self, relaxed: bool) -> Result<()> {
        if !self.recorded_u.is_empty() {
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

    pub fn reset(&mut self) {
        self.u.data_mut().iter_mut().for_each(|v| *v = 0.0);
        self.recorded_u.clear();
    }

    /// One integrate / fire / reset step. Returns the (possibly soft) spikes.
    pub fn step(&mut self, current: &Tensor, recurrent: Option<&[f64]>, p: &LifParams) -> Result<Tensor> {
        if current.shape() != self.u.shape() {
            return Err(Error::shape("neuron step", self.u.shape(), current.shape()));
        }
        let mut pre = self.u.clone();
        let mut out = Tensor::zeros(self.u.shape());
        for (i, u) in pre.data_mut().iter_mut().enumerate() {
            let mut v = p.tau * *u + current.data()[i];
            if let Some(r) = recurrent {
                v += r[i];
            }
            *u = v;
        }
        for (i, (&u, post)) in pre.data().iter().zip(self.u.data_mut()).enumerate() {
            let s = fire(u, p, self.mode);
            out.data_mut()[i] = s;
            *post = u * (1.0 - s);
        }
        self.recorded_u.push(pre);
        Ok(out)
    }
}

/// `u ← τu + I; x = Θ(u − V_th); u ← u(1 − x)`.
pub fn lif_step(state: &mut NeuronState, input_current: &Tensor, params: &LifParams) -> Result<SpikeTensor> {
    if state.mode == SpikeMode::Relaxed {
        return Err(Error::State("lif_step returns binary spikes; state is in relaxed mode".into()));
    }
    let s = state.step(input_current, None, params)?;
    SpikeTensor::from_real(&s)
}

/// LIF step with an added recurrent drive `prev_spikes · recurrent_w`.
///
/// `prev_spikes` has the layer's shape (`[N]` or `[B, N]`) and
/// `recurrent_w` is `[N, N]`, applied to each row.
pub fn rlif_step(
    state: &mut NeuronState,
    input_current: &Tensor,
    prev_spikes: &SpikeTensor,
    recurrent_w: &Tensor,
    params: &LifParams,
) -> Result<SpikeTensor> {
    if state.mode == SpikeMode::Relaxed {
        return Err(Error::State("rlif_step returns binary spikes; state is in relaxed mode".into()));
    }
    let shape = state.u.shape().to_vec();
    let n = *shape.last().unwrap_or(&0);
    if recurrent_w.shape() != [n, n] {
        return Err(Error::shape("rlif recurrent weights", &[n, n], recurrent_w.shape()));
    }
    if prev_spikes.shape() != shape.as_slice() {
        return Err(Error::shape("rlif previous spikes", &shape, prev_spikes.shape()));
    }
    let rows = if n == 0 { 0 } else { prev_spikes.data().len() / n };
    let prev: Vec<f64> = prev_spikes.data().iter().map(|&v| f64::from(v)).collect();
    let drive = crate::tensor::kernels::matmul(&prev, recurrent_w.data(), rows, n, n);
    let s = state.step(input_current, Some(&drive), params)?;
    SpikeTensor::from_real(&s)
}
