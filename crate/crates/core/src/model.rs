//! Network assembly: visual cue extraction subnet (VCEN), speech processing
//! subnet (SPN), cue placement, and the unimodal / concatenation baselines.

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{EventVoxelGrid, FbankFeatures};
use crate::layers::{BatchNorm, Ctx, Linear, RlifLayer, SpeechBlock, SpeechBlockCfg, VisualBlock, VisualBlockCfg};
use crate::neurons::LifParams;
use crate::params::ParamStore;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{SpikeTensor, Tensor};
use crate::vca2m::{MaskKind, Vca2m};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Visual cues drive attention inside the speech subnet.
    #[default]
    HiAvsnn,
    /// Per-timestep concatenation of cue and audio features before the first
    /// speech block.
    ConcatBaseline,
    AudioOnly,
    VisualOnly,
}

impl FusionMode {
    pub fn uses_visual(self) -> bool {
        !matches!(self, FusionMode::AudioOnly)
    }

    pub fn uses_audio(self) -> bool {
        !matches!(self, FusionMode::VisualOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::HiAvsnn => "hi_avsnn",
            FusionMode::ConcatBaseline => "concat_baseline",
            FusionMode::AudioOnly => "audio_only",
            FusionMode::VisualOnly => "visual_only",
        }
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hi_avsnn" => Ok(FusionMode::HiAvsnn),
            "concat_baseline" => Ok(FusionMode::ConcatBaseline),
            "audio_only" => Ok(FusionMode::AudioOnly),
            "visual_only" => Ok(FusionMode::VisualOnly),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub timesteps: usize,
    pub num_classes: usize,
    /// Spatial size of the voxel grid fed to the first visual block.
    pub visual_height: usize,
    pub visual_width: usize,
    pub visual_blocks: Vec<VisualBlockCfg>,
    pub audio_features: usize,
    /// Width `L` of the audio encoder and speech blocks.
    pub audio_hidden: usize,
    /// Attention width `D` of every cueing module.
    pub attention_dim: usize,
    /// Attention speech blocks.
    pub n_as: usize,
    /// Plain speech blocks.
    pub n_s: usize,
    /// 1-based cue positions: `p ≤ n_as + n_s` cues speech block `p`,
    /// `p = n_as + n_s + 1` cues the readout input.
    pub cue_positions: BTreeSet<usize>,
    pub neuron: LifParams,
    pub fusion_mode: FusionMode,
}

/// Channel schedule 16→16→32→32→64→64→128→128 with stride 2 at blocks 3, 5, 7.
pub fn default_visual_stack() -> Vec<VisualBlockCfg> {
    let channels = [16, 16, 32, 32, 64, 64, 128, 128];
    let mut prev = 2;
    channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let b = VisualBlockCfg {
                in_channels: prev,
                out_channels: c,
                kernel: 3,
                stride: if matches!(i + 1, 3 | 5 | 7) { 2 } else { 1 },
            };
            prev = c;
            b
        })
        .collect()
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            timesteps: 28,
            num_classes: 10,
            visual_height: 44,
            visual_width: 44,
            visual_blocks: default_visual_stack(),
            audio_features: 40,
            audio_hidden: 256,
            attention_dim: 64,
            n_as: 3,
            n_s: 0,
            cue_positions: [1, 2, 3].into_iter().collect(),
            neuron: LifParams::default(),
            fusion_mode: FusionMode::HiAvsnn,
        }
    }
}

impl NetworkConfig {
    /// Small network that trains on one CPU core in minutes: two strided
    /// visual blocks, 64-wide speech blocks and 32-wide attention.
    pub fn desk() -> Self {
        let block = |i, o| VisualBlockCfg {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride: 2,
        };
        Self {
            visual_blocks: vec![block(2, 4), block(4, 8)],
            audio_hidden: 64,
            attention_dim: 32,
            ..Self::default()
        }
    }

    pub fn n_v(&self) -> usize {
        self.visual_blocks.len()
    }

    pub fn speech_blocks(&self) -> usize {
        self.n_as + self.n_s
    }

    /// Cue positions the current fusion mode actually uses.
    pub fn active_cues(&self) -> BTreeSet<usize> {
        match self.fusion_mode {
            FusionMode::HiAvsnn => self.cue_positions.clone(),
            _ => BTreeSet::new(),
        }
    }

    /// Replaces the cue set and rebalances `n_as` / `n_s` to keep the block count.
    pub fn set_cue_positions(&mut self, cues: BTreeSet<usize>) {
        let blocks = self.speech_blocks();
        self.n_as = cues.iter().filter(|&&p| p <= blocks).count();
        self.n_s = blocks - self.n_as.min(blocks);
        self.cue_positions = cues;
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.timesteps == 0 {
            return fail("timesteps must be >= 1".into());
        }
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2".into());
        }
        if self.audio_features == 0 || self.audio_hidden == 0 || self.attention_dim == 0 {
            return fail("audio_features, audio_hidden and attention_dim must be > 0".into());
        }
        self.neuron.validate()?;
        if self.fusion_mode.uses_visual() {
            if self.visual_blocks.is_empty() {
                return fail("at least one visual block is required".into());
            }
            let mut prev = 2;
            let (mut h, mut w) = (self.visual_height, self.visual_width);
            for (i, b) in self.visual_blocks.iter().enumerate() {
                b.validate()?;
                if b.in_channels != prev {
                    return fail(format!(
                        "visual block {} expects {} input channels, previous stage gives {prev}",
                        i + 1,
                        b.in_channels
                    ));
                }
                prev = b.out_channels;
                if h == 0 || w == 0 {
                    return fail(format!("visual block {} sees an empty spatial map", i + 1));
                }
                h = (h - 1) / b.stride + 1;
                w = (w - 1) / b.stride + 1;
            }
        }
        let blocks = self.speech_blocks();
        if self.fusion_mode == FusionMode::ConcatBaseline && blocks == 0 {
            return fail("concat baseline needs at least one speech block".into());
        }
        if let Some(&bad) = self.cue_positions.iter().find(|&&p| p == 0 || p > blocks + 1) {
            return fail(format!("cue position {bad} outside 1..={}", blocks + 1));
        }
        if self.fusion_mode == FusionMode::HiAvsnn {
            let cued = self.cue_positions.iter().filter(|&&p| p <= blocks).count();
            if cued != self.n_as {
                return fail(format!(
                    "{cued} cue positions fall on speech blocks but n_as = {}",
                    self.n_as
                ));
            }
        }
        Ok(())
    }
}

/// Visual embedding `φ: [T, C]` used as the cueing query.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCue {
    pub phi: SpikeTensor,
}

/// Batched, time-major model input.
#[derive(Clone, Debug, Default)]
pub struct ModelInput {
    /// `[T, B, 2, H, W]` event voxels.
    pub voxels: Option<Tensor>,
    /// `[T, B, F]` audio features.
    pub audio: Option<Tensor>,
}

impl ModelInput {
    pub fn steps(&self) -> Option<usize> {
        self.voxels
            .as_ref()
            .or(self.audio.as_ref())
            .map(|t| t.shape()[0])
    }

    pub fn batch(&self) -> Option<usize> {
        self.voxels
            .as_ref()
            .or(self.audio.as_ref())
            .map(|t| t.shape()[1])
    }

    /// Stacks single-sample voxel grids and feature matrices into a batch.
    pub fn stack(voxels: &[&EventVoxelGrid], audio: &[&FbankFeatures]) -> Result<Self> {
        let v = if voxels.is_empty() {
            None
        } else {
            Some(stack_time_major(voxels.iter().map(|g| g.grid.to_real()).collect())?)
        };
        let a = if audio.is_empty() {
            None
        } else {
            Some(stack_time_major(audio.iter().map(|f| f.frames.clone()).collect())?)
        };
        Ok(Self { voxels: v, audio: a })
    }
}

/// `B` tensors of shape `[T, ...]` → one `[T, B, ...]` tensor.
pub fn stack_time_major(items: Vec<Tensor>) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::EmptyInput("nothing to stack".into()))?
        .shape()
        .to_vec();
    let steps = first[0];
    let per: usize = first[1..].iter().product();
    let b = items.len();
    let mut data = vec![0.0; steps * b * per];
    for (bi, it) in items.iter().enumerate() {
        if it.shape() != first.as_slice() {
            return Err(Error::shape("stack", &first, it.shape()));
        }
        for t in 0..steps {
            data[(t * b + bi) * per..(t * b + bi + 1) * per]
                .copy_from_slice(&it.data()[t * per..(t + 1) * per]);
        }
    }
    let mut shape = vec![steps, b];
    shape.extend_from_slice(&first[1..]);
    Tensor::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct Vcen {
    pub blocks: Vec<VisualBlock>,
    pub fc: Linear,
    pub fc_bn: BatchNorm,
    pub neuron: LifParams,
}

impl Vcen {
    fn new(store: &mut ParamStore, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut blocks = Vec::new();
        for (i, b) in cfg.visual_blocks.iter().enumerate() {
            blocks.push(VisualBlock::new(store, &format!("vcen.block{i}"), *b, cfg.neuron, rng)?);
        }
        let last = cfg.visual_blocks.last().map_or(2, |b| b.out_channels);
        Ok(Self {
            blocks,
            fc: Linear::new(store, "vcen.fc", last, cfg.num_classes, true, rng),
            fc_bn: BatchNorm::new(store, "vcen.fc_bn", cfg.num_classes),
            neuron: cfg.neuron,
        })
    }

    /// `voxels: [T, B, 2, H, W]` → `φ: [T·B, C]` spikes.
    pub fn forward(&self, ctx: &mut Ctx<'_>, voxels: Var) -> Result<Var> {
        let s = ctx.tape.shape(voxels).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("vcen input [T,B,2,H,W]", &s, &[]));
        }
        let (steps, rows) = (s[0], s[0] * s[1]);
        let mut x = ctx.tape.reshape(voxels, &[rows, s[2], s[3], s[4]])?;
        for b in &self.blocks {
            x = b.forward(ctx, x, steps)?;
        }
        ctx.tape.set_scope("vcen.fc");
        let pooled = ctx.tape.avg_pool(x)?;
        let y = self.fc.forward(ctx, pooled)?;
        let y = self.fc_bn.forward(ctx, y)?;
        crate::layers::spike_sequence(ctx, y, steps, &self.neuron)
    }
}

#[derive(Clone, Debug)]
pub struct Spn {
    pub encoder: Vec<RlifLayer>,
    pub blocks: Vec<SpeechBlock>,
    /// Cueing modules keyed by 1-based position.
    pub cues: BTreeMap<usize, Vca2m>,
    /// Concat baseline: cue-to-block weights added to the first block's input projection.
    pub concat: Option<Linear>,
    pub readout: Linear,
    pub steps_hint: usize,
}

impl Spn {
    fn new(store: &mut ParamStore, cfg: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let l = cfg.audio_hidden;
        let encoder = vec![
            RlifLayer::new(store, "spn.encoder0", cfg.audio_features, l, cfg.neuron, rng),
            RlifLayer::new(store, "spn.encoder1", l, l, cfg.neuron, rng),
        ];
        let active = cfg.active_cues();
        let mut blocks = Vec::new();
        for i in 0..cfg.speech_blocks() {
            let bc = SpeechBlockCfg {
                in_dim: l,
                out_dim: l,
                has_attention: active.contains(&(i + 1)),
            };
            blocks.push(SpeechBlock::new(store, &format!("spn.block{i}"), bc, cfg.neuron, rng)?);
        }
        let mut cues = BTreeMap::new();
        for &p in &active {
            cues.insert(
                p,
                Vca2m::new(store, &format!("spn.cue{p}"), cfg.num_classes, l, cfg.attention_dim, cfg.neuron, rng)?,
            );
        }
        let concat = (cfg.fusion_mode == FusionMode::ConcatBaseline)
            .then(|| Linear::new(store, "spn.block0.linear_cue", cfg.num_classes, l, false, rng));
        Ok(Self {
            encoder,
            blocks,
            cues,
            concat,
            readout: Linear::new(store, "spn.readout", l, cfg.num_classes, true, rng),
            steps_hint: cfg.timesteps,
        })
    }

    /// Two recurrent spiking layers: `[T, B, F]` features → `ψ: [T·B, L]` spikes.
    pub fn encode(&self, ctx: &mut Ctx<'_>, audio: Var) -> Result<Var> {
        let s = ctx.tape.shape(audio).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("spn input [T,B,F]", &s, &[]));
        }
        let steps = s[0];
        let mut x = ctx.tape.reshape(audio, &[s[0] * s[1], s[2]])?;
        for layer in &self.encoder {
            x = layer.forward(ctx, x, steps)?;
        }
        Ok(x)
    }

    /// Speech blocks (with cueing where configured) and the non-spiking readout.
    /// Returns logits `[T, B, C]`.
    pub fn process(&self, ctx: &mut Ctx<'_>, psi: Var, phi: Option<Var>, steps: usize) -> Result<Var> {
        let needs_cue = !self.cues.is_empty() || self.concat.is_some();
        if needs_cue && phi.is_none() {
            return Err(Error::Contract("this configuration requires a visual cue".into()));
        }
        if let Some(phi) = phi {
            let (a, b) = (ctx.tape.shape(phi)[0], ctx.tape.shape(psi)[0]);
            if a != b {
                return Err(Error::Alignment {
                    visual: a / (b / steps).max(1),
                    audio: steps,
                });
            }
        }
        let mut x = psi;
        for (i, block) in self.blocks.iter().enumerate() {
            if let Some(m) = self.cues.get(&(i + 1)) {
                x = m.forward(ctx, phi.expect("checked"), x, steps)?;
            }
            x = match (&self.concat, i) {
                (Some(lin), 0) => {
                    ctx.tape.set_scope(&block.name);
                    let extra = lin.forward(ctx, phi.expect("checked"))?;
                    let y = block.preactivation(ctx, x, Some(extra))?;
                    crate::layers::spike_sequence(ctx, y, steps, &block.neuron)?
                }
                _ => block.forward(ctx, x, steps)?,
            };
        }
        if let Some(m) = self.cues.get(&(self.blocks.len() + 1)) {
            x = m.forward(ctx, phi.expect("checked"), x, steps)?;
        }
        ctx.tape.set_scope("spn.readout");
        let logits = self.readout.forward(ctx, x)?;
        let rows = ctx.tape.shape(logits)[0];
        let c = ctx.tape.shape(logits)[1];
        ctx.tape.reshape(logits, &[steps, rows / steps, c])
    }
}

/// Result of one recorded forward.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[T, B, C]` per-timestep logits.
    pub logits: Var,
    /// `[T·B, C]` visual cue spikes, when the visual subnet ran.
    pub phi: Option<Var>,
    /// `[T·B, L]` audio encoder spikes, when the audio subnet ran.
    pub psi: Option<Var>,
}

/// A complete network: configuration, parameters and layer structure.
#[derive(Clone, Debug)]
pub struct AvModel {
    pub cfg: NetworkConfig,
    pub store: ParamStore,
    pub vcen: Option<Vcen>,
    /// Temporary readout used when the visual subnet is trained or evaluated alone.
    pub visual_head: Option<Linear>,
    pub spn: Option<Spn>,
}

impl AvModel {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vcen = if cfg.fusion_mode.uses_visual() {
            Some(Vcen::new(&mut store, &cfg, &mut rng)?)
        } else {
            None
        };
        let visual_head = (cfg.fusion_mode == FusionMode::VisualOnly)
            .then(|| Linear::new(&mut store, "vcen.head", cfg.num_classes, cfg.num_classes, true, &mut rng));
        let spn = if cfg.fusion_mode.uses_audio() {
            Some(Spn::new(&mut store, &cfg, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            vcen,
            visual_head,
            spn,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    /// Switches every cueing module between the causal and the unmasked pattern.
    pub fn set_attention_mask(&mut self, kind: MaskKind) {
        if let Some(spn) = self.spn.as_mut() {
            for m in spn.cues.values_mut() {
                m.mask = kind;
            }
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<(usize, usize)> {
        let mode = self.cfg.fusion_mode;
        if mode.uses_visual() && input.voxels.is_none() {
            return Err(Error::Contract(format!("{} needs voxel input", mode.as_str())));
        }
        if mode.uses_audio() && input.audio.is_none() {
            return Err(Error::Contract(format!("{} needs audio input", mode.as_str())));
        }
        if let (Some(v), Some(a)) = (&input.voxels, &input.audio) {
            if mode.uses_visual() && mode.uses_audio() && v.shape()[0] != a.shape()[0] {
                return Err(Error::Alignment {
                    visual: v.shape()[0],
                    audio: a.shape()[0],
                });
            }
        }
        if let Some(v) = input.voxels.as_ref().filter(|_| mode.uses_visual()) {
            let s = v.shape();
            if s.len() != 5 || s[2] != 2 || s[3] != self.cfg.visual_height || s[4] != self.cfg.visual_width {
                return Err(Error::Config(format!(
                    "voxel input {s:?} does not match [T, B, 2, {}, {}]",
                    self.cfg.visual_height, self.cfg.visual_width
                )));
            }
        }
        if let Some(a) = input.audio.as_ref().filter(|_| mode.uses_audio()) {
            let s = a.shape();
            if s.len() != 3 || s[2] != self.cfg.audio_features {
                return Err(Error::Config(format!(
                    "audio input {s:?} does not match [T, B, {}]",
                    self.cfg.audio_features
                )));
            }
        }
        let steps = input.steps().ok_or_else(|| Error::EmptyInput("model input".into()))?;
        let batch = input.batch().unwrap_or(0);
        if steps == 0 || batch == 0 {
            return Err(Error::EmptyInput("model input has no timesteps or samples".into()));
        }
        Ok((steps, batch))
    }

    /// Records a forward pass on `tape`.
    pub fn forward(&mut self, tape: &mut Tape, input: &ModelInput, train: bool) -> Result<ForwardOutput> {
        self.forward_with(tape, input, train, crate::layers::BN_MOMENTUM)
    }

    pub(crate) fn forward_with(
        &mut self,
        tape: &mut Tape,
        input: &ModelInput,
        train: bool,
        bn_momentum: f64,
    ) -> Result<ForwardOutput> {
        let (steps, batch) = self.check_input(input)?;
        let AvModel {
            cfg,
            store,
            vcen,
            visual_head,
            spn,
        } = self;
        let mut ctx = Ctx::new(tape, store, train);
        ctx.bn_momentum = bn_momentum;
        let phi = match vcen {
            Some(v) => {
                let x = ctx.tape.constant(input.voxels.clone().expect("checked"));
                Some(v.forward(&mut ctx, x)?)
            }
            None => None,
        };
        let (logits, psi) = match (spn, visual_head) {
            (Some(spn), _) => {
                let a = ctx.tape.constant(input.audio.clone().expect("checked"));
                let psi = spn.encode(&mut ctx, a)?;
                let cue = if cfg.fusion_mode == FusionMode::AudioOnly { None } else { phi };
                (spn.process(&mut ctx, psi, cue, steps)?, Some(psi))
            }
            (None, Some(head)) => {
                ctx.tape.set_scope("vcen.head");
                let y = head.forward(&mut ctx, phi.expect("visual-only runs the vcen"))?;
                (ctx.tape.reshape(y, &[steps, batch, cfg.num_classes])?, None)
            }
            (None, None) => return Err(Error::Config("model has no readout".into())),
        };
        Ok(ForwardOutput { logits, phi, psi })
    }

    /// Eval-mode logits `[T, B, C]`.
    pub fn infer(&mut self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Eval-mode visual cue for a single voxel grid.
    pub fn vcen_forward(&mut self, voxels: &EventVoxelGrid) -> Result<VisualCue> {
        let steps = voxels.grid.timesteps();
        let vcen = self
            .vcen
            .as_ref()
            .ok_or_else(|| Error::Config("model has no visual subnet".into()))?;
        let s = voxels.grid.shape();
        if s.len() != 4 || s[1] != 2 || s[2] != self.cfg.visual_height || s[3] != self.cfg.visual_width {
            return Err(Error::Config(format!(
                "voxel grid {s:?} does not match [T, 2, {}, {}]",
                self.cfg.visual_height, self.cfg.visual_width
            )));
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut self.store, false);
        let x = voxels.grid.to_real().reshape(&[steps, 1, s[1], s[2], s[3]])?;
        let x = ctx.tape.constant(x);
        let phi = vcen.forward(&mut ctx, x)?;
        Ok(VisualCue { phi: tape.spikes(phi)? })
    }

    /// Eval-mode audio encoder spikes `ψ: [T, L]` for one utterance.
    pub fn encode_audio(&mut self, fbank: &FbankFeatures) -> Result<SpikeTensor> {
        let spn = self
            .spn
            .as_ref()
            .ok_or_else(|| Error::Config("model has no speech subnet".into()))?;
        let s = fbank.frames.shape().to_vec();
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut self.store, false);
        let a = ctx.tape.constant(fbank.frames.clone().reshape(&[s[0], 1, s[1]])?);
        let psi = spn.encode(&mut ctx, a)?;
        tape.spikes(psi)
    }

    /// Eval-mode speech subnet on encoded audio spikes `[T, L]`, returning
    /// logits `[T, C]`. A cue must be given exactly when the configuration
    /// fuses the visual stream.
    pub fn spn_forward(&mut self, audio_spikes: &SpikeTensor, cue: Option<&VisualCue>) -> Result<Tensor> {
        let mode = self.cfg.fusion_mode;
        let wants_cue = matches!(mode, FusionMode::HiAvsnn | FusionMode::ConcatBaseline);
        match (wants_cue, cue) {
            (true, None) => {
                return Err(Error::Contract(format!("{} requires a visual cue", mode.as_str())));
            }
            (false, Some(_)) => {
                return Err(Error::Contract(format!("{} takes no visual cue", mode.as_str())));
            }
            _ => {}
        }
        let spn = self
            .spn
            .as_ref()
            .ok_or_else(|| Error::Config("model has no speech subnet".into()))?;
        let steps = audio_spikes.timesteps();
        if let Some(c) = cue {
            if c.phi.timesteps() != steps {
                return Err(Error::Alignment {
                    visual: c.phi.timesteps(),
                    audio: steps,
                });
            }
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx::new(&mut tape, &mut self.store, false);
        let psi = ctx.tape.constant(audio_spikes.to_real());
        let phi = cue.map(|c| ctx.tape.constant(c.phi.to_real()));
        let logits = spn.process(&mut ctx, psi, phi, steps)?;
        let c = self.cfg.num_classes;
        tape.value(logits).clone().reshape(&[steps, c])
    }

    /// Concat-baseline speech subnet on `[T, L]` audio spikes and `[T, C]` visual features.
    pub fn concat_baseline_forward(&mut self, audio_spikes: &SpikeTensor, visual: &VisualCue) -> Result<Tensor> {
        if self.cfg.fusion_mode != FusionMode::ConcatBaseline {
            return Err(Error::Config("model is not a concat baseline".into()));
        }
        self.spn_forward(audio_spikes, Some(visual))
    }

    /// Calibrates batch-norm running statistics to one batch, without
    /// touching any trainable parameter.
    pub fn calibrate_batch_norm(&mut self, input: &ModelInput) -> Result<()> {
        let mut tape = Tape::new();
        self.forward_with(&mut tape, input, true, 1.0)?;
        Ok(())
    }
}

/// Class index maximizing the mean of logits over the first `upto_t` steps of
/// `o: [T, C]`. Ties go to the lowest index.
pub fn predict(o: &Tensor, upto_t: Option<usize>) -> Result<usize> {
    let s = o.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("predict [T, C]", s, &[]));
    }
    let upto = upto_t.unwrap_or(s[0]);
    if upto == 0 || upto > s[0] {
        return Err(Error::Contract(format!("upto_t = {upto} outside 1..={}", s[0])));
    }
    let c = s[1];
    let mut mean = vec![0.0; c];
    for t in 0..upto {
        mean.iter_mut().zip(o.row(t)).for_each(|(m, v)| *m += v);
    }
    Ok(argmax(&mean))
}

/// Per-sample predictions for batched logits `[T, B, C]`.
pub fn predict_batch(o: &Tensor, upto_t: Option<usize>) -> Result<Vec<usize>> {
    let s = o.shape();
    if s.len() != 3 {
        return Err(Error::shape("predict_batch [T, B, C]", s, &[]));
    }
    let (steps, b, c) = (s[0], s[1], s[2]);
    (0..b)
        .map(|bi| {
            let mut rows = Vec::with_capacity(steps * c);
            for t in 0..steps {
                rows.extend_from_slice(&o.data()[(t * b + bi) * c..(t * b + bi + 1) * c]);
            }
            predict(&Tensor::new(vec![steps, c], rows)?, upto_t)
        })
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean firing rate per scope over every neuron node recorded on `tape`.
pub fn spike_rates(tape: &Tape) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for n in tape.nodes().filter(|n| n.kind == OpKind::Neuron) {
        let e = acc.entry(n.scope.to_string()).or_default();
        e.0 += n.value.data().iter().sum::<f64>();
        e.1 += n.value.numel();
    }
    acc.into_iter()
        .map(|(k, (s, c))| (k, if c == 0 { 0.0 } else { s / c as f64 }))
        .collect()
}
