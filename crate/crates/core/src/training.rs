//! Loss, Adam, cosine schedule, feature loading and the two-phase driver.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState, Section};
use crate::error::{Error, Result};
use crate::frontend::dataset::{prepare, Dataset};
use crate::model::{predict_batch, spike_rates, AvModel, FusionMode, ModelInput, NetworkConfig};
use crate::neurons::SpikeMode;
use crate::params::ParamStore;
use crate::tape::{Gradients, Tape};
use crate::tensor::{SpikeTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Train the fused model from scratch instead of from unimodal pretraining.
    pub skip_pretrain: bool,
    /// Re-draw crops, flips and audio perturbations every epoch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_pretrain: 1e-3,
            lr_finetune: 5e-4,
            epochs_pretrain: 150,
            epochs_finetune: 50,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(5.0),
            skip_pretrain: false,
            augment: true,
        }
    }
}

impl TrainConfig {
    /// Short schedule on fixed features, paired with [`NetworkConfig::desk`].
    pub fn desk() -> Self {
        Self {
            epochs_pretrain: 5,
            epochs_finetune: 5,
            augment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr_pretrain > 0.0
            && self.lr_finetune > 0.0
            && self.epochs_pretrain > 0
            && self.epochs_finetune > 0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config("training config needs positive rates, epochs and batch size".into()))
        }
    }
}

/// Cross-entropy of the time-averaged logits `o: [T, C]` against class `y`.
pub fn loss(o: &Tensor, y: usize) -> Result<f64> {
    let s = o.shape();
    if s.len() != 2 || y >= s[1] {
        return Err(Error::Contract(format!("label {y} for logits {s:?}")));
    }
    let mut tape = Tape::new();
    let x = tape.constant(o.clone().reshape(&[s[0], 1, s[1]])?);
    let m = tape.time_mean(x)?;
    let l = tape.cross_entropy(m, &[y])?;
    Ok(tape.value(l).item())
}

/// `lr(e) = η_min + ½(η_max − η_min)(1 + cos(πe/E))`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    let frac = epoch as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store
            .iter()
            .map(|(_, p)| if p.trainable { vec![0.0; p.value.numel()] } else { Vec::new() })
            .collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in grads.param_ids() {
            if !store.param(id).trainable {
                continue;
            }
            let g = grads.param(id).expect("listed").data();
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    fn export(&self, store: &ParamStore) -> Vec<(Section, String, Tensor)> {
        let mut out = Vec::new();
        for (id, p) in store.iter() {
            if p.trainable {
                let i = id.index();
                let shape = p.value.shape().to_vec();
                out.push((Section::AdamM, p.name.clone(), Tensor::new(shape.clone(), self.m[i].clone()).expect("shape")));
                out.push((Section::AdamV, p.name.clone(), Tensor::new(shape, self.v[i].clone()).expect("shape")));
            }
        }
        out
    }

    fn import(&mut self, store: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
        for (sec, name, t) in &ckpt.tensors {
            let buf = match sec {
                Section::AdamM => &mut self.m,
                Section::AdamV => &mut self.v,
                Section::Param => continue,
            };
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown tensor {name}")))?;
            if buf[id.index()].len() != t.numel() {
                return Err(Error::Checkpoint(format!("optimizer state size mismatch for {name}")));
            }
            buf[id.index()] = t.data().to_vec();
        }
        self.step = ckpt.adam_step;
        Ok(())
    }
}

/// Network-ready features for a whole split.
#[derive(Clone, Debug, Default)]
pub struct Features {
    /// `[T, 2, H, W]` per sample; empty when the model ignores vision.
    pub voxels: Vec<SpikeTensor>,
    /// `[T, F]` per sample; empty when the model ignores audio.
    pub audio: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Loads and preprocesses every sample. `train` enables augmentation.
    pub fn load(
        ds: &dyn Dataset,
        steps: usize,
        mode: FusionMode,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut f = Features::default();
        for i in 0..ds.len() {
            let raw = ds.raw(i)?;
            let (v, a) = prepare(&raw, steps, train, rng)?;
            if mode.uses_visual() {
                f.voxels.push(v.grid);
            }
            if mode.uses_audio() {
                f.audio.push(a.frames);
            }
            f.labels.push(raw.label);
        }
        Ok(f)
    }

    /// Batched model input for `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<ModelInput> {
        self.batch_for(idx, FusionMode::HiAvsnn)
    }

    /// Like [`Features::batch`] but leaves out modalities `mode` ignores.
    pub fn batch_for(&self, idx: &[usize], mode: FusionMode) -> Result<ModelInput> {
        let stack = |items: Vec<Tensor>| crate::model::stack_time_major(items);
        Ok(ModelInput {
            voxels: if self.voxels.is_empty() || !mode.uses_visual() {
                None
            } else {
                Some(stack(idx.iter().map(|&i| self.voxels[i].to_real()).collect())?)
            },
            audio: if self.audio.is_empty() || !mode.uses_audio() {
                None
            } else {
                Some(stack(idx.iter().map(|&i| self.audio[i].clone()).collect())?)
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub spike_rates: BTreeMap<String, f64>,
}

/// One STBP update on a batch: forward, loss, backward, clip, Adam.
pub fn train_step(
    model: &mut AvModel,
    input: &ModelInput,
    labels: &[usize],
    adam: &mut Adam,
    lr: f64,
    grad_clip: Option<f64>,
    mode: SpikeMode,
) -> Result<StepMetrics> {
    let mut tape = Tape::with_mode(mode);
    let out = model.forward(&mut tape, input, true)?;
    let preds = predict_batch(tape.value(out.logits), None)?;
    let mean = tape.time_mean(out.logits)?;
    let loss = tape.cross_entropy(mean, labels)?;
    let loss_value = tape.value(loss).item();
    let rates = spike_rates(&tape);
    let mut grads = tape.backward(loss)?;
    let bad: Vec<&str> = grads
        .param_ids()
        .into_iter()
        .filter(|&id| !grads.param(id).expect("listed").all_finite())
        .map(|id| model.store.param(id).name.as_str())
        .collect();
    if !bad.is_empty() {
        return Err(Error::Numeric(format!("non-finite gradient in {}", bad.join(", "))));
    }
    let norm = grads.global_norm();
    if let Some(c) = grad_clip {
        if norm > c {
            grads.scale(c / norm);
        }
    }
    adam.update(&mut model.store, &grads, lr);
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(StepMetrics {
        loss: loss_value,
        accuracy: correct as f64 / labels.len() as f64,
        grad_norm: norm,
        spike_rates: rates,
    })
}

/// Eval-mode logits for every sample, `[T, C]` each.
pub fn infer_all(model: &mut AvModel, data: &Features, batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let logits = model.infer(&data.batch_for(chunk, model.cfg.fusion_mode)?)?;
        let (steps, b, c) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
        for bi in 0..b {
            let mut rows = Vec::with_capacity(steps * c);
            for t in 0..steps {
                rows.extend_from_slice(&logits.data()[(t * b + bi) * c..(t * b + bi + 1) * c]);
            }
            out.push(Tensor::new(vec![steps, c], rows)?);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &mut AvModel, data: &Features, batch: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation set is empty".into()));
    }
    let logits = infer_all(model, data, batch)?;
    let mut correct = 0;
    for (o, &y) in logits.iter().zip(&data.labels) {
        if crate::model::predict(o, None)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// One line of the JSON training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub lr: f64,
    pub spike_rates: BTreeMap<String, f64>,
    pub wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_acc: Option<f64>,
    pub seed: u64,
}

/// Single-phase training state: model, optimizer, RNG and progress.
pub struct Trainer {
    pub model: AvModel,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub phase: String,
    pub epoch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub cfg: TrainConfig,
    pub seed: u64,
    pub mode: SpikeMode,
}

impl Trainer {
    pub fn new(model: AvModel, cfg: &TrainConfig, phase: &str, lr: f64, epochs: usize, seed: u64) -> Self {
        let adam = Adam::new(&model.store, cfg.beta1, cfg.beta2, cfg.eps);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(phase.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b))));
        Self {
            model,
            adam,
            rng,
            phase: phase.to_string(),
            epoch: 0,
            epochs,
            lr,
            cfg: cfg.clone(),
            seed,
            mode: SpikeMode::Spiking,
        }
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.epochs
    }

    /// Runs one epoch over `train`, or over a fresh augmented draw of `source`
    /// when augmentation is on.
    pub fn run_epoch(&mut self, train: &Features, source: Option<&dyn Dataset>) -> Result<EpochLog> {
        let start = Instant::now();
        let lr = cosine_lr(self.epoch, self.epochs, self.lr, 0.0);
        let fresh;
        let data = match source.filter(|_| self.cfg.augment) {
            Some(ds) => {
                fresh = Features::load(ds, self.model.cfg.timesteps, self.model.cfg.fusion_mode, true, &mut self.rng)?;
                &fresh
            }
            None => train,
        };
        if data.is_empty() {
            return Err(Error::EmptyInput("training set is empty".into()));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
        let mut rates: BTreeMap<String, f64> = BTreeMap::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let input = data.batch_for(chunk, self.model.cfg.fusion_mode)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let m = train_step(&mut self.model, &input, &labels, &mut self.adam, lr, self.cfg.grad_clip, self.mode)
                .map_err(|e| match e {
                    Error::Numeric(msg) => Error::Numeric(format!("{} epoch {}: {msg}", self.phase, self.epoch)),
                    other => other,
                })?;
            let w = chunk.len() as f64;
            loss += m.loss * w;
            acc += m.accuracy * w;
            for (k, v) in m.spike_rates {
                *rates.entry(k).or_default() += v * w;
            }
            n += chunk.len();
        }
        let n = n as f64;
        rates.values_mut().for_each(|v| *v /= n);
        self.epoch += 1;
        Ok(EpochLog {
            phase: self.phase.clone(),
            epoch: self.epoch,
            loss: loss / n,
            acc: acc / n,
            lr,
            spike_rates: rates,
            wall_time_s: start.elapsed().as_secs_f64(),
            test_acc: None,
            seed: self.seed,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::from_model(&self.model);
        c.phase = self.phase.clone();
        c.epoch = self.epoch as u64;
        c.adam_step = self.adam.step;
        c.rng = Some(RngState::capture(&self.rng));
        c.tensors.extend(self.adam.export(&self.model.store));
        c
    }

    /// Restores model, optimizer and RNG state from a mid-phase checkpoint.
    pub fn resume(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.phase != self.phase {
            return Err(Error::Checkpoint(format!(
                "checkpoint is from phase {:?}, expected {:?}",
                ckpt.phase, self.phase
            )));
        }
        ckpt.load_into(&mut self.model)?;
        self.adam.import(&self.model.store, ckpt)?;
        self.rng = ckpt
            .rng
            .ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state".into()))?
            .restore();
        self.epoch = ckpt.epoch as usize;
        Ok(())
    }
}

/// Where the pipeline writes logs and checkpoints.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

impl RunOutput {
    fn log(&self, entry: &EpochLog) -> Result<()> {
        info!(
            "{} epoch {}: loss {:.4} acc {:.3} lr {:.2e}{}",
            entry.phase,
            entry.epoch,
            entry.loss,
            entry.acc,
            entry.lr,
            entry.test_acc.map(|a| format!(" test {a:.3}")).unwrap_or_default()
        );
        if let Some(dir) = &self.dir {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.jsonl"))?;
            writeln!(f, "{}", serde_json::to_string(entry)?)?;
        }
        Ok(())
    }

    fn ckpt_path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{name}.ckpt")))
    }
}

/// Train/test splits. `prepared` holds features computed once up front, so
/// several phases or runs can share them.
pub struct Splits<'a> {
    pub train: &'a dyn Dataset,
    pub test: Option<&'a dyn Dataset>,
    pub prepared: Option<&'a Prepared>,
}

/// Eval-mode features of both modalities for a train and an optional test split.
#[derive(Clone, Debug, Default)]
pub struct Prepared {
    pub train: Features,
    pub test: Option<Features>,
}

impl Prepared {
    pub fn load(train: &dyn Dataset, test: Option<&dyn Dataset>, steps: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let train = Features::load(train, steps, FusionMode::HiAvsnn, false, &mut rng)?;
        let test = match test {
            Some(t) => Some(Features::load(t, steps, FusionMode::HiAvsnn, false, &mut rng)?),
            None => None,
        };
        Ok(Self { train, test })
    }
}

/// Trains one model for one phase, resuming from `<phase>.resume.ckpt` when present.
pub fn train_phase(
    model: AvModel,
    cfg: &TrainConfig,
    phase: &str,
    lr: f64,
    epochs: usize,
    seed: u64,
    splits: &Splits<'_>,
    out: &RunOutput,
) -> Result<(AvModel, Vec<EpochLog>)> {
    let mode = model.cfg.fusion_mode;
    let steps = model.cfg.timesteps;
    let mut trainer = Trainer::new(model, cfg, phase, lr, epochs, seed);
    if let Some(p) = out.ckpt_path(&format!("{phase}.resume")).filter(|p| p.exists()) {
        trainer.resume(&Checkpoint::load(&p)?)?;
        info!("resumed {phase} at epoch {}", trainer.epoch);
    }
    let loaded;
    let (train, test) = match splits.prepared {
        Some(p) => (&p.train, p.test.as_ref()),
        None => {
            let mut feat_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let train = if cfg.augment {
                Features::default()
            } else {
                Features::load(splits.train, steps, mode, false, &mut feat_rng)?
            };
            let test = match splits.test {
                Some(t) => Some(Features::load(t, steps, mode, false, &mut feat_rng)?),
                None => None,
            };
            loaded = (train, test);
            (&loaded.0, loaded.1.as_ref())
        }
    };
    let mut logs = Vec::new();
    while !trainer.done() {
        let mut entry = trainer.run_epoch(train, Some(splits.train))?;
        if let Some(t) = test {
            entry.test_acc = Some(evaluate(&mut trainer.model, t, cfg.batch_size)?);
        }
        out.log(&entry)?;
        logs.push(entry);
        if let Some(p) = out.ckpt_path(&format!("{phase}.resume")) {
            trainer.checkpoint().save(&p)?;
        }
    }
    if let Some(p) = out.ckpt_path(phase) {
        trainer.checkpoint().save(&p)?;
    }
    Ok((trainer.model, logs))
}

/// Builds a fused model whose visual and audio paths start from pretrained
/// unimodal models. Cueing modules and cross-modal weights stay freshly initialized.
pub fn init_from_pretrained(cfg: &NetworkConfig, seed: u64, visual: &AvModel, audio: &AvModel) -> Result<AvModel> {
    let mut m = AvModel::new(cfg.clone(), seed)?;
    m.store.copy_matching_from(&visual.store);
    m.store.copy_matching_from(&audio.store);
    Ok(m)
}

/// Models produced by a full pipeline run.
pub struct PipelineResult {
    pub model: AvModel,
    pub visual: Option<AvModel>,
    pub audio: Option<AvModel>,
    pub logs: Vec<EpochLog>,
}

/// Unimodal configs are trained in one phase. Fused configs pretrain the
/// visual subnet (with a temporary head) and the audio-only network, then
/// finetune everything jointly at the lower rate.
pub fn run_pipeline(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
    splits: &Splits<'_>,
    out: &RunOutput,
) -> Result<PipelineResult> {
    net.validate()?;
    cfg.validate()?;
    if let Some(d) = &out.dir {
        std::fs::create_dir_all(d)?;
    }
    let fused = matches!(net.fusion_mode, FusionMode::HiAvsnn | FusionMode::ConcatBaseline);
    if !fused {
        let (model, logs) = train_phase(
            AvModel::new(net.clone(), seed)?,
            cfg,
            net.fusion_mode.as_str(),
            cfg.lr_pretrain,
            cfg.epochs_pretrain,
            seed,
            splits,
            out,
        )?;
        return Ok(PipelineResult {
            model,
            visual: None,
            audio: None,
            logs,
        });
    }
    if cfg.skip_pretrain {
        log::warn!("pretraining skipped: fused model trained from scratch");
        let (model, logs) = train_phase(
            AvModel::new(net.clone(), seed)?,
            cfg,
            "finetune",
            cfg.lr_finetune,
            cfg.epochs_finetune,
            seed,
            splits,
            out,
        )?;
        return Ok(PipelineResult {
            model,
            visual: None,
            audio: None,
            logs,
        });
    }
    let (visual, audio, mut logs) = pretrain(net, cfg, seed, splits, out)?;
    let (model, l) = finetune(net, cfg, seed, &visual, &audio, splits, out)?;
    logs.extend(l);
    Ok(PipelineResult {
        model,
        visual: Some(visual),
        audio: Some(audio),
        logs,
    })
}

/// Phase 1: visual-only and audio-only networks sharing the fused config's sizes.
pub fn pretrain(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
    splits: &Splits<'_>,
    out: &RunOutput,
) -> Result<(AvModel, AvModel, Vec<EpochLog>)> {
    let unimodal = |mode| NetworkConfig {
        fusion_mode: mode,
        ..net.clone()
    };
    let (visual, mut logs) = train_phase(
        AvModel::new(unimodal(FusionMode::VisualOnly), seed)?,
        cfg,
        "pretrain_visual",
        cfg.lr_pretrain,
        cfg.epochs_pretrain,
        seed,
        splits,
        out,
    )?;
    let (audio, l) = train_phase(
        AvModel::new(unimodal(FusionMode::AudioOnly), seed)?,
        cfg,
        "pretrain_audio",
        cfg.lr_pretrain,
        cfg.epochs_pretrain,
        seed,
        splits,
        out,
    )?;
    logs.extend(l);
    Ok((visual, audio, logs))
}

/// Phase 2: joint finetuning of a fused model initialized from phase 1.
pub fn finetune(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    seed: u64,
    visual: &AvModel,
    audio: &AvModel,
    splits: &Splits<'_>,
    out: &RunOutput,
) -> Result<(AvModel, Vec<EpochLog>)> {
    let model = init_from_pretrained(net, seed, visual, audio)?;
    train_phase(model, cfg, "finetune", cfg.lr_finetune, cfg.epochs_finetune, seed, splits, out)
}

/// Reads a JSON file into `T`, reporting line and column on failure.
pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Config(format!(
            "{}:{}:{}: {e}",
            path.display(),
            e.line(),
            e.column()
        ))
    })
}
