//! Energy accounting, the causality harness, accuracy-over-time curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::audio::{fbank, AudioWave, FRAME_LEN, HOP_LEN};
use crate::frontend::dataset::{sensor_voxels, RawSample};
use crate::frontend::events::{augment_visual, Event, EventStream, EventVoxelGrid};
use crate::model::{predict, spike_rates, AvModel, ModelInput};
use crate::tape::{NodeView, OpKind, Tape};
use crate::tensor::{ConvGeom, Tensor};
use crate::training::{infer_all, Features};

/// Energy per addition in picojoules (45 nm).
pub const E_ADD_PJ: f64 = 0.9;
/// Energy per multiplication in picojoules (45 nm).
pub const E_MULT_PJ: f64 = 3.7;

/// Millijoules for the given operation counts.
pub fn energy_from_counts(mult: f64, add: f64) -> f64 {
    (E_MULT_PJ * mult + E_ADD_PJ * add) * 1e-9
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub mult: u64,
    pub add: u64,
}

impl OpCounts {
    fn plus(&mut self, o: OpCounts) {
        self.mult += o.mult;
        self.add += o.add;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub mult_count: u64,
    pub add_count: u64,
    pub energy_mj: f64,
    pub layers: BTreeMap<String, OpCounts>,
    pub spike_rates: BTreeMap<String, f64>,
}

impl EnergyReport {
    pub fn from_counts(layers: BTreeMap<String, OpCounts>, spike_rates: BTreeMap<String, f64>) -> Self {
        let mut total = OpCounts::default();
        layers.values().for_each(|c| total.plus(*c));
        Self {
            mult_count: total.mult,
            add_count: total.add,
            energy_mj: energy_from_counts(total.mult as f64, total.add as f64),
            layers,
            spike_rates,
        }
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let w = self.layers.keys().map(String::len).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>14}  {:>14}  {:>10}\n", "layer", "mult", "add", "rate");
        for (k, c) in &self.layers {
            let rate = self
                .spike_rates
                .get(k)
                .map(|r| format!("{r:.4}"))
                .unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{k:<w$}  {:>14}  {:>14}  {rate:>10}", c.mult, c.add);
        }
        let _ = writeln!(s, "{:<w$}  {:>14}  {:>14}", "total", self.mult_count, self.add_count);
        let _ = writeln!(s, "energy_mj {:.6}", self.energy_mj);
        s
    }
}

/// True when every value is a small non-negative integer (spikes or spike sums).
fn spike_valued(x: &[f64]) -> bool {
    x.iter().all(|&v| v >= 0.0 && v <= 4.0 && v.fract() == 0.0)
}

fn spike_sum(x: &[f64]) -> u64 {
    x.iter().map(|&v| v as u64).sum()
}

/// Output positions each input row (or column) feeds, along one axis.
fn conv_fan(len: usize, out: usize, g: &ConvGeom) -> Vec<u64> {
    (0..len)
        .map(|y| {
            (0..g.kernel)
                .filter(|&k| {
                    let p = y + g.pad;
                    p >= k && (p - k) % g.stride == 0 && (p - k) / g.stride < out
                })
                .count() as u64
        })
        .collect()
}

fn node_ops(tape: &Tape, n: &NodeView<'_>) -> Result<OpCounts> {
    let input = |i: usize| tape.value(n.inputs[i].expect("op input"));
    let numel = n.value.numel() as u64;
    let mut c = OpCounts::default();
    match n.kind {
        OpKind::MatMul => {
            let (a, b) = (input(0), input(1));
            let (m, k) = (a.shape()[0] as u64, a.shape()[1] as u64);
            let out = b.shape()[1] as u64;
            if spike_valued(a.data()) {
                c.add = spike_sum(a.data()) * out;
            } else {
                c.mult = m * k * out;
                c.add = m * k * out;
            }
        }
        OpKind::Conv2d => {
            let g = n.conv.expect("conv geometry");
            let x = input(0);
            let fy = conv_fan(g.height, g.out_height(), &g);
            let fx = conv_fan(g.width, g.out_width(), &g);
            if spike_valued(x.data()) {
                let plane = g.height * g.width;
                for (i, &v) in x.data().iter().enumerate() {
                    if v != 0.0 {
                        let (y, xx) = ((i % plane) / g.width, i % g.width);
                        c.add += v as u64 * fy[y] * fx[xx] * g.out_channels as u64;
                    }
                }
            } else {
                let taps: u64 = fy.iter().sum::<u64>() * fx.iter().sum::<u64>();
                let macs = (g.batch * g.in_channels) as u64 * taps * g.out_channels as u64;
                c.mult = macs;
                c.add = macs;
            }
        }
        OpKind::AddBias | OpKind::Add => c.add = numel,
        OpKind::Mul | OpKind::ScaleBy | OpKind::ScaleConst => c.mult = numel,
        OpKind::BatchNorm => {
            if n.bn_train {
                return Err(Error::Contract(
                    "energy is only defined in eval mode (batch statistics would be counted)".into(),
                ));
            }
        }
        OpKind::Neuron => {
            let p = n.neuron.expect("neuron params");
            c.add = numel;
            if p.tau != 0.0 {
                c.mult = numel;
            }
            if n.inputs[1].is_some() {
                let s = n.value;
                let steps = s.shape()[0];
                let per = s.numel() / steps;
                let width = *s.shape().last().expect("rank >= 2") as u64;
                for t in 1..steps {
                    c.add += spike_sum(&s.data()[(t - 1) * per..t * per]) * width;
                }
            }
        }
        OpKind::CausalAttention => {
            let (q, k, v) = (input(0), input(1), input(2));
            let s = q.shape();
            let (steps, b, d) = (s[0], s[1], s[2]);
            let mask = n.mask.expect("attention mask");
            fn row(x: &Tensor, t: usize, bi: usize, b: usize, d: usize) -> &[f64] {
                &x.data()[(t * b + bi) * d..(t * b + bi + 1) * d]
            }
            for bi in 0..b {
                for i in 0..steps {
                    for j in 0..steps {
                        if mask[i * steps + j] == 0 {
                            continue;
                        }
                        let score: u64 = row(q, i, bi, b, d)
                            .iter()
                            .zip(row(k, j, bi, b, d))
                            .filter(|(a, b)| **a != 0.0 && **b != 0.0)
                            .count() as u64;
                        c.add += score;
                        if score != 0 {
                            c.add += spike_sum(row(v, j, bi, b, d));
                        }
                    }
                }
            }
        }
        OpKind::AvgPool => {
            c.add = input(0).numel() as u64;
            c.mult = numel;
        }
        OpKind::Leaf | OpKind::Reshape | OpKind::Sum | OpKind::TimeMean | OpKind::CrossEntropy => {}
    }
    Ok(c)
}

/// Counts the operations recorded on an eval-mode tape, grouped by scope.
pub fn count_ops(tape: &Tape) -> Result<BTreeMap<String, OpCounts>> {
    let mut layers: BTreeMap<String, OpCounts> = BTreeMap::new();
    for n in tape.nodes() {
        let c = node_ops(tape, &n)?;
        if c != OpCounts::default() {
            layers.entry(n.scope.to_string()).or_default().plus(c);
        }
    }
    Ok(layers)
}

/// Operation counts and energy of one eval-mode forward on a single sample.
/// Batch norm is treated as folded into the preceding affine layer.
pub fn estimate_energy(model: &mut AvModel, sample: &ModelInput) -> Result<EnergyReport> {
    if sample.batch() != Some(1) {
        return Err(Error::Contract("energy is estimated per single sample".into()));
    }
    let mut tape = Tape::new();
    model.forward(&mut tape, sample, false)?;
    Ok(EnergyReport::from_counts(count_ops(&tape)?, spike_rates(&tape)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Probe timestep `t`: inputs after `t` were replaced.
    pub timestep: usize,
    /// First recorded tensor whose first `t` steps changed.
    pub tensor: String,
    pub max_abs_diff: f64,
    pub trial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalityVerdict {
    pub pass: bool,
    pub first_violation: Option<Violation>,
    pub probes: usize,
    pub trials: usize,
}

fn record(model: &mut AvModel, input: &ModelInput) -> Result<Tape> {
    let mut tape = Tape::new();
    model.forward(&mut tape, input, false)?;
    Ok(tape)
}

/// First node whose first `t` time slices differ between the two tapes.
fn first_prefix_diff(reference: &Tape, probe: &Tape, steps: usize, t: usize) -> Option<(String, f64)> {
    for (a, b) in reference.nodes().zip(probe.nodes()) {
        if a.param.is_some() || a.value.shape().first() != Some(&steps) || a.value.shape() != b.value.shape() {
            continue;
        }
        let per = a.value.numel() / steps;
        let n = t * per;
        let pa = &a.value.data()[..n];
        let pb = &b.value.data()[..n];
        if pa.iter().zip(pb).any(|(x, y)| x.to_bits() != y.to_bits()) {
            let diff = pa.iter().zip(pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            return Some((format!("node {} ({:?} in {})", a.var.index(), a.kind, a.scope), diff));
        }
    }
    None
}

fn run_probes<F, R>(model: &mut AvModel, input: &ModelInput, trials: usize, rng: &mut R, mut perturb: F) -> Result<CausalityVerdict>
where
    F: FnMut(usize, &mut R) -> Result<ModelInput>,
    R: Rng + ?Sized,
{
    let steps = input.steps().ok_or_else(|| Error::EmptyInput("causality probe input".into()))?;
    let reference = record(model, input)?;
    let mut verdict = CausalityVerdict {
        pass: true,
        first_violation: None,
        probes: steps.saturating_sub(1),
        trials,
    };
    for t in 1..steps {
        for trial in 0..trials {
            let probe = record(model, &perturb(t, rng)?)?;
            if let Some((tensor, max_abs_diff)) = first_prefix_diff(&reference, &probe, steps, t) {
                verdict.pass = false;
                verdict.first_violation = Some(Violation {
                    timestep: t,
                    tensor,
                    max_abs_diff,
                    trial,
                });
                return Ok(verdict);
            }
        }
    }
    Ok(verdict)
}

/// Feature-level harness on a single-sample input: for each probe `t`, every
/// voxel bin and audio frame after `t` is replaced with random content and
/// every recorded tensor's first `t` steps must stay bitwise identical.
pub fn verify_causality<R: Rng + ?Sized>(
    model: &mut AvModel,
    input: &ModelInput,
    trials: usize,
    rng: &mut R,
) -> Result<CausalityVerdict> {
    if input.batch() != Some(1) {
        return Err(Error::Contract("causality is probed on a single sample".into()));
    }
    let audio_scale = input.audio.as_ref().map(|a| {
        let d = a.data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        (mean, sd.max(1.0))
    });
    let base = input.clone();
    run_probes(model, input, trials, rng, |t, rng| {
        let mut p = base.clone();
        if let Some(v) = p.voxels.as_mut() {
            let per = v.numel() / v.shape()[0];
            v.data_mut()[t * per..]
                .iter_mut()
                .for_each(|x| *x = f64::from(u8::from(rng.gen_bool(0.1))));
        }
        if let (Some(a), Some((mean, sd))) = (p.audio.as_mut(), audio_scale) {
            let per = a.numel() / a.shape()[0];
            for x in &mut a.data_mut()[t * per..] {
                let z: f64 = rng.sample(StandardNormal);
                *x = mean + sd * z;
            }
        }
        Ok(p)
    })
}

/// Maps a raw sample to a voxel grid at sensor resolution.
pub type Voxelizer<'a> = dyn Fn(&RawSample, usize) -> Result<EventVoxelGrid> + 'a;

/// Eval-mode network input for a raw sample using the given voxelizer.
pub fn raw_input(raw: &RawSample, steps: usize, voxelizer: &Voxelizer<'_>) -> Result<ModelInput> {
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let v = augment_visual(&voxelizer(raw, steps)?, &mut unused, false)?;
    let a = fbank(&raw.audio, steps)?;
    ModelInput::stack(&[&v], &[&a])
}

/// Raw-level harness: events falling in segments after `t` and audio samples
/// only covered by frames after `t` are replaced with random content, then the
/// sample goes through voxelization and feature extraction again. Segments
/// come from the sample's fixed window, or its first and last event when it
/// has none.
pub fn verify_causality_raw<R: Rng + ?Sized>(
    model: &mut AvModel,
    raw: &RawSample,
    trials: usize,
    rng: &mut R,
    voxelizer: &Voxelizer<'_>,
) -> Result<CausalityVerdict> {
    let steps = model.cfg.timesteps;
    let input = raw_input(raw, steps, voxelizer)?;
    let (t0, t1) = match raw.window {
        Some(w) => w,
        None => raw
            .events
            .span()
            .ok_or_else(|| Error::EmptyInput("event stream has no events".into()))?,
    };
    let span = u128::from(t1 - t0);
    let bin_of = |t: u64| {
        if span == 0 {
            0
        } else {
            ((u128::from(t - t0) * steps as u128 / span) as usize).min(steps - 1)
        }
    };
    // first timestamp of segment `b`
    let seg_start = |b: usize| t0 + (span * b as u128).div_ceil(steps as u128) as u64;
    let (w, h) = (raw.events.width(), raw.events.height());
    run_probes(model, &input, trials, rng, |t, rng| {
        let mut events: Vec<Event> = raw
            .events
            .events()
            .iter()
            .copied()
            .filter(|e| e.t < t0 || e.t > t1 || bin_of(e.t) < t)
            .collect();
        let replaced = raw.events.len() - events.len();
        let lo = seg_start(t);
        for _ in 0..replaced.max(16) {
            events.push(Event {
                t: rng.gen_range(lo..=t1.max(lo)),
                x: rng.gen_range(0..w) as u16,
                y: rng.gen_range(0..h) as u16,
                p: u8::from(rng.gen_bool(0.5)),
            });
        }
        events.sort_by_key(|e| e.t);
        let mut audio = raw.audio.samples.clone();
        let keep = (t - 1) * HOP_LEN + FRAME_LEN;
        for s in audio.iter_mut().skip(keep) {
            *s = rng.gen_range(-0.5..0.5);
        }
        let probe = RawSample {
            events: EventStream::new(events, w, h)?,
            audio: AudioWave::new(audio, raw.audio.sample_rate)?,
            label: raw.label,
            window: raw.window,
        };
        raw_input(&probe, steps, voxelizer)
    })
}

/// The standard voxelizer used by the preprocessing pipeline.
pub fn default_voxelizer(raw: &RawSample, steps: usize) -> Result<EventVoxelGrid> {
    sensor_voxels(raw, steps)
}

/// Accuracy of `predict(·, upto_t = t)` for `t = 1..=T`, from full-length logits.
pub fn accuracy_over_time(model: &mut AvModel, data: &Features, batch: usize) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    let logits = infer_all(model, data, batch)?;
    let steps = logits[0].shape()[0];
    (1..=steps)
        .map(|t| {
            let mut ok = 0;
            for (o, &y) in logits.iter().zip(&data.labels) {
                ok += usize::from(predict(o, Some(t))? == y);
            }
            Ok(ok as f64 / data.len() as f64)
        })
        .collect()
}

/// Same curve, but each point feeds only the first `t` input steps.
pub fn accuracy_over_time_truncated(model: &mut AvModel, data: &Features, batch: usize) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyInput("test set is empty".into()));
    }
    let steps = model.cfg.timesteps;
    (1..=steps)
        .map(|t| {
            let cut = truncate(data, t);
            let logits = infer_all(model, &cut, batch)?;
            let mut ok = 0;
            for (o, &y) in logits.iter().zip(&data.labels) {
                ok += usize::from(predict(o, None)? == y);
            }
            Ok(ok as f64 / data.len() as f64)
        })
        .collect()
}

fn truncate(data: &Features, t: usize) -> Features {
    let cut_spikes = |s: &crate::tensor::SpikeTensor| {
        let mut shape = s.shape().to_vec();
        shape[0] = t;
        crate::tensor::SpikeTensor::new(shape, s.data()[..t * s.step_len()].to_vec()).expect("prefix")
    };
    let cut_real = |x: &Tensor| {
        let per = x.numel() / x.shape()[0];
        let mut shape = x.shape().to_vec();
        shape[0] = t;
        Tensor::new(shape, x.data()[..t * per].to_vec()).expect("prefix")
    };
    Features {
        voxels: data.voxels.iter().map(cut_spikes).collect(),
        audio: data.audio.iter().map(cut_real).collect(),
        labels: data.labels.clone(),
    }
}

/// `t,accuracy` rows with `t` starting at 1.
pub fn curve_csv(curve: &[f64]) -> String {
    let mut s = String::from("t,accuracy\n");
    for (i, a) in curve.iter().enumerate() {
        let _ = writeln!(s, "{},{a}", i + 1);
    }
    s
}
