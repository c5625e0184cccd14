//! Visual-cued auditory attention.
//!
//! Visual cues form the query and audio features the key and value. Because
//! Q, K and V are spike tensors the score path is pure accumulation; a
//! learnable scalar replaces softmax, and a lower-triangular mask keeps every
//! row from seeing later timesteps. A spiking feedforward projects back to the
//! audio width and the result is added to the module input.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{spike_sequence, BatchNorm, Ctx, Linear};
use crate::neurons::LifParams;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{SpikeTensor, Tensor};

/// Initial value of the learnable attention scale.
pub const INITIAL_SCALE: f64 = 0.25;
/// Firing threshold of the neurons directly after the scaled attention product.
pub const ATTENTION_THRESHOLD: f64 = 0.5;

/// `T × T` lower-triangular 0/1 matrix (diagonal included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalMask {
    steps: usize,
    data: Arc<Vec<u8>>,
}

impl CausalMask {
    pub fn new(steps: usize) -> Self {
        let mut data = vec![0u8; steps * steps];
        for i in 0..steps {
            for j in 0..=i {
                data[i * steps + j] = 1;
            }
        }
        Self {
            steps,
            data: Arc::new(data),
        }
    }

    /// Validates an explicit matrix; anything but the lower-triangular
    /// pattern is a contract violation.
    pub fn from_matrix(rows: &[Vec<u8>]) -> Result<Self> {
        let steps = rows.len();
        for (i, row) in rows.iter().enumerate() {
            if row.len() != steps {
                return Err(Error::shape("causal mask", &[steps, steps], &[i, row.len()]));
            }
            for (j, &v) in row.iter().enumerate() {
                if v != u8::from(j <= i) {
                    return Err(Error::Contract(format!(
                        "mask entry ({i},{j}) = {v} breaks the lower-triangular pattern"
                    )));
                }
            }
        }
        Ok(Self::new(steps))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.data[i * self.steps + j]
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.data.chunks(self.steps.max(1)).map(<[u8]>::to_vec).collect()
    }

    pub(crate) fn shared(&self) -> Arc<Vec<u8>> {
        self.data.clone()
    }
}

/// Which mask the module applies. `Full` (no masking) lets every row attend
/// to the whole sequence and exists for ablations and causality checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    #[default]
    Causal,
    Full,
}

fn mask_matrix(kind: MaskKind, steps: usize) -> Arc<Vec<u8>> {
    match kind {
        MaskKind::Causal => CausalMask::new(steps).shared(),
        MaskKind::Full => Arc::new(vec![1; steps * steps]),
    }
}

/// Parameters and configuration of one cueing module.
#[derive(Clone, Debug)]
pub struct Vca2m {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub bn_q: BatchNorm,
    pub bn_k: BatchNorm,
    pub bn_v: BatchNorm,
    pub scale: ParamId,
    pub ff: Linear,
    pub bn_ff: BatchNorm,
    pub neuron: LifParams,
    pub attn_neuron: LifParams,
    pub mask: MaskKind,
    pub cue_dim: usize,
    pub audio_dim: usize,
    pub attn_dim: usize,
    pub name: String,
}

impl Vca2m {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cue_dim: usize,
        audio_dim: usize,
        attn_dim: usize,
        neuron: LifParams,
        rng: &mut R,
    ) -> Result<Self> {
        if cue_dim == 0 || audio_dim == 0 || attn_dim == 0 {
            return Err(Error::Config("cueing module dims must be > 0".into()));
        }
        Ok(Self {
            w_q: Linear::new(store, &format!("{name}.w_q"), cue_dim, attn_dim, false, rng),
            w_k: Linear::new(store, &format!("{name}.w_k"), audio_dim, attn_dim, false, rng),
            w_v: Linear::new(store, &format!("{name}.w_v"), audio_dim, attn_dim, false, rng),
            bn_q: BatchNorm::new(store, &format!("{name}.bn_q"), attn_dim),
            bn_k: BatchNorm::new(store, &format!("{name}.bn_k"), attn_dim),
            bn_v: BatchNorm::new(store, &format!("{name}.bn_v"), attn_dim),
            scale: store.add(format!("{name}.scale"), Tensor::scalar(INITIAL_SCALE), true),
            ff: Linear::new(store, &format!("{name}.ff"), attn_dim, audio_dim, false, rng),
            bn_ff: BatchNorm::new(store, &format!("{name}.bn_ff"), audio_dim),
            neuron,
            attn_neuron: neuron.with_threshold(ATTENTION_THRESHOLD),
            mask: MaskKind::Causal,
            cue_dim,
            audio_dim,
            attn_dim,
            name: name.to_string(),
        })
    }

    fn check_aligned(ctx: &Ctx<'_>, phi: Var, psi: Var) -> Result<()> {
        let (a, b) = (ctx.tape.shape(phi)[0], ctx.tape.shape(psi)[0]);
        if a != b {
            return Err(Error::Alignment { visual: a, audio: b });
        }
        Ok(())
    }

    /// `Q = SN(BN(φ W_Q))`, `K = SN(BN(ψ W_K))`, `V = SN(BN(ψ W_V))`.
    /// Inputs are `[T·B, C]` and `[T·B, L]`; outputs `[T·B, D]`.
    pub fn project_qkv(&self, ctx: &mut Ctx<'_>, phi: Var, psi: Var, steps: usize) -> Result<(Var, Var, Var)> {
        Self::check_aligned(ctx, phi, psi)?;
        ctx.tape.set_scope(&format!("{}.qkv", self.name));
        let mut project = |lin: &Linear, bn: &BatchNorm, x: Var| -> Result<Var> {
            let y = lin.forward(ctx, x)?;
            let y = bn.forward(ctx, y)?;
            spike_sequence(ctx, y, steps, &self.neuron)
        };
        let q = project(&self.w_q, &self.bn_q, phi)?;
        let k = project(&self.w_k, &self.bn_k, psi)?;
        let v = project(&self.w_v, &self.bn_v, psi)?;
        Ok((q, k, v))
    }

    /// `SN(mask ⊙ (Q Kᵀ) V · s)` with the attention-threshold neurons.
    pub fn masked_attention(&self, ctx: &mut Ctx<'_>, q: Var, k: Var, v: Var, steps: usize) -> Result<Var> {
        ctx.tape.set_scope(&format!("{}.attention", self.name));
        let rows = ctx.tape.shape(q)[0];
        let d = self.attn_dim;
        let shape3 = [steps, rows / steps, d];
        let q3 = ctx.tape.reshape(q, &shape3)?;
        let k3 = ctx.tape.reshape(k, &shape3)?;
        let v3 = ctx.tape.reshape(v, &shape3)?;
        let a = ctx.tape.causal_attention(q3, k3, v3, mask_matrix(self.mask, steps))?;
        let s = ctx.param(self.scale);
        let a = ctx.tape.scale_by(a, s)?;
        let a = ctx.tape.reshape(a, &[steps, rows / steps * d])?;
        let out = ctx.tape.neuron(a, None, &self.attn_neuron)?;
        ctx.tape.reshape(out, &[rows, d])
    }

    /// Full module: returns `ψ + SN(BN(Linear(SA')))`, values in `{0, 1, 2}`
    /// when `ψ` is binary.
    pub fn forward(&self, ctx: &mut Ctx<'_>, phi: Var, psi: Var, steps: usize) -> Result<Var> {
        let (q, k, v) = self.project_qkv(ctx, phi, psi, steps)?;
        let sa = self.masked_attention(ctx, q, k, v, steps)?;
        ctx.tape.set_scope(&format!("{}.ff", self.name));
        let y = self.ff.forward(ctx, sa)?;
        let y = self.bn_ff.forward(ctx, y)?;
        let y = spike_sequence(ctx, y, steps, &self.neuron)?;
        ctx.tape.set_scope(&format!("{}.residual", self.name));
        ctx.tape.add(psi, y)
    }

    /// Eager forward for single-sample spike inputs `φ: [T, C]`, `ψ: [T, L]`.
    pub fn run(&self, store: &mut ParamStore, phi: &SpikeTensor, psi: &SpikeTensor, train: bool) -> Result<Tensor> {
        let (steps, phi_v, psi_v) = self.eager_inputs(phi, psi)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, train);
        let a = ctx.tape.constant(phi_v);
        let b = ctx.tape.constant(psi_v);
        let out = self.forward(&mut ctx, a, b, steps)?;
        Ok(tape.value(out).clone())
    }

    /// Eager projection for single-sample spike inputs.
    pub fn run_qkv(
        &self,
        store: &mut ParamStore,
        phi: &SpikeTensor,
        psi: &SpikeTensor,
        train: bool,
    ) -> Result<(SpikeTensor, SpikeTensor, SpikeTensor)> {
        let (steps, phi_v, psi_v) = self.eager_inputs(phi, psi)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, store, train);
        let a = ctx.tape.constant(phi_v);
        let b = ctx.tape.constant(psi_v);
        let (q, k, v) = self.project_qkv(&mut ctx, a, b, steps)?;
        Ok((tape.spikes(q)?, tape.spikes(k)?, tape.spikes(v)?))
    }

    fn eager_inputs(&self, phi: &SpikeTensor, psi: &SpikeTensor) -> Result<(usize, Tensor, Tensor)> {
        if phi.timesteps() != psi.timesteps() {
            return Err(Error::Alignment {
                visual: phi.timesteps(),
                audio: psi.timesteps(),
            });
        }
        if phi.shape() != [phi.timesteps(), self.cue_dim] {
            return Err(Error::shape("cue input", phi.shape(), &[phi.timesteps(), self.cue_dim]));
        }
        if psi.shape() != [psi.timesteps(), self.audio_dim] {
            return Err(Error::shape("audio input", psi.shape(), &[psi.timesteps(), self.audio_dim]));
        }
        Ok((phi.timesteps(), phi.to_real(), psi.to_real()))
    }
}

/// Standalone masked spiking attention over single-sample `[T, D]` spike tensors.
pub fn masked_attention(
    q: &SpikeTensor,
    k: &SpikeTensor,
    v: &SpikeTensor,
    s: f64,
    mask: &CausalMask,
    neuron: &LifParams,
) -> Result<SpikeTensor> {
    if q.shape() != k.shape() || k.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape("masked_attention", q.shape(), k.shape()));
    }
    let steps = q.timesteps();
    if mask.steps() != steps {
        return Err(Error::shape("masked_attention mask", &[steps, steps], &[mask.steps(), mask.steps()]));
    }
    let d = q.shape()[1];
    let mut tape = Tape::new();
    let shape3 = [steps, 1, d];
    let qv = tape.constant(q.to_real().reshape(&shape3)?);
    let kv = tape.constant(k.to_real().reshape(&shape3)?);
    let vv = tape.constant(v.to_real().reshape(&shape3)?);
    let a = tape.causal_attention(qv, kv, vv, mask.shared())?;
    let a = tape.scale(a, s)?;
    let a = tape.reshape(a, &[steps, d])?;
    let out = tape.neuron(a, None, neuron)?;
    tape.spikes(out)
}
