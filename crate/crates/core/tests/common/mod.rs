#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use avsnn::layers::VisualBlockCfg;
use avsnn::model::{AvModel, FusionMode, ModelInput, NetworkConfig};
use avsnn::tape::BnStats;
use avsnn::{LifParams, SpikeMode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEPS: usize = 3;
pub const BATCH: usize = 2;

/// Three timesteps, two strided visual blocks, one cued speech block plus a
/// cue on the readout input. Every width is at most 8.
pub fn tiny_config(mode: FusionMode) -> NetworkConfig {
    let block = |i, o| VisualBlockCfg {
        in_channels: i,
        out_channels: o,
        kernel: 3,
        stride: 2,
    };
    let cues: BTreeSet<usize> = match mode {
        FusionMode::HiAvsnn => [1, 2].into_iter().collect(),
        _ => BTreeSet::new(),
    };
    NetworkConfig {
        timesteps: STEPS,
        num_classes: 3,
        visual_height: 6,
        visual_width: 6,
        visual_blocks: vec![block(2, 4), block(4, 8)],
        audio_features: 5,
        audio_hidden: 8,
        attention_dim: 4,
        n_as: usize::from(mode == FusionMode::HiAvsnn),
        n_s: usize::from(mode != FusionMode::HiAvsnn),
        cue_positions: cues,
        neuron: LifParams::default(),
        fusion_mode: mode,
    }
}

pub fn tiny_input(cfg: &NetworkConfig, seed: u64) -> (ModelInput, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, b) = (STEPS, BATCH);
    let nv = t * b * 2 * cfg.visual_height * cfg.visual_width;
    let vox: Vec<f64> = (0..nv).map(|_| f64::from(rng.gen_range(0u8..3))).collect();
    let na = t * b * cfg.audio_features;
    let audio: Vec<f64> = (0..na).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let input = ModelInput {
        voxels: Some(Tensor::new(vec![t, b, 2, cfg.visual_height, cfg.visual_width], vox).unwrap()),
        audio: Some(Tensor::new(vec![t, b, cfg.audio_features], audio).unwrap()),
    };
    let labels = (0..b).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
    (input, labels)
}

/// Train-mode loss through the library tape; the model is cloned so the
/// caller's running statistics stay untouched.
pub fn tape_loss(model: &AvModel, input: &ModelInput, labels: &[usize], mode: SpikeMode) -> f64 {
    let mut m = model.clone();
    let mut tape = Tape::with_mode(mode);
    let out = m.forward(&mut tape, input, true).unwrap();
    let mean = tape.time_mean(out.logits).unwrap();
    let l = tape.cross_entropy(mean, labels).unwrap();
    tape.value(l).item()
}

/// Loss and gradients for every trainable parameter, keyed by name.
pub fn tape_grads(model: &AvModel, input: &ModelInput, labels: &[usize], mode: SpikeMode) -> (f64, HashMap<String, Vec<f64>>) {
    let mut m = model.clone();
    let mut tape = Tape::with_mode(mode);
    let out = m.forward(&mut tape, input, true).unwrap();
    let mean = tape.time_mean(out.logits).unwrap();
    let l = tape.cross_entropy(mean, labels).unwrap();
    let loss = tape.value(l).item();
    let grads = tape.backward(l).unwrap();
    let mut map = HashMap::new();
    for id in model.store.trainable_ids() {
        let p = model.store.param(id);
        let g = grads
            .param(id)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; p.value.numel()]);
        map.insert(p.name.clone(), g);
    }
    (loss, map)
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub struct FdReport {
    pub checked: usize,
    pub passed: usize,
    pub worst: Vec<(String, usize, f64, f64)>,
}

impl FdReport {
    pub fn fraction(&self) -> f64 {
        self.passed as f64 / self.checked.max(1) as f64
    }
}

/// Central differences of the relaxed-mode loss against the relaxed-mode
/// backward for every trainable scalar.
pub fn relaxed_fd(model: &AvModel, input: &ModelInput, labels: &[usize], h: f64, tol: f64) -> FdReport {
    let (_, grads) = tape_grads(model, input, labels, SpikeMode::Relaxed);
    let mut report = FdReport {
        checked: 0,
        passed: 0,
        worst: Vec::new(),
    };
    for id in model.store.trainable_ids() {
        let name = model.store.param(id).name.clone();
        let n = model.store.get(id).numel();
        for i in 0..n {
            let mut m = model.clone();
            m.store.get_mut(id).data_mut()[i] += h;
            let lp = tape_loss(&m, input, labels, SpikeMode::Relaxed);
            m.store.get_mut(id).data_mut()[i] -= 2.0 * h;
            let lm = tape_loss(&m, input, labels, SpikeMode::Relaxed);
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[&name][i];
            report.checked += 1;
            if rel_err(an, fd, 1e-6) <= tol {
                report.passed += 1;
            } else {
                report.worst.push((name.clone(), i, an, fd));
            }
        }
    }
    report
}

pub struct OracleReport {
    pub max_dev: f64,
    pub loss_dev: f64,
    pub margin: f64,
    pub scalars: usize,
    pub nonzero: usize,
}

/// Spiking-mode backward against the scalar STBP graph.
pub fn oracle_compare(model: &AvModel, input: &ModelInput, labels: &[usize]) -> OracleReport {
    let (loss, grads) = tape_grads(model, input, labels, SpikeMode::Spiking);
    let o = oracle::run(model, input, labels, false, true);
    let mut max_dev: f64 = 0.0;
    let (mut scalars, mut nonzero) = (0, 0);
    for (name, g) in &grads {
        let og = &o.grads[name];
        for (a, b) in g.iter().zip(og) {
            max_dev = max_dev.max((a - b).abs() / b.abs().max(1.0));
            scalars += 1;
            nonzero += usize::from(*b != 0.0);
        }
    }
    OracleReport {
        max_dev,
        loss_dev: (loss - o.loss).abs(),
        margin: o.min_margin,
        scalars,
        nonzero,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = dyn Fn(&mut Tape, &[avsnn::tape::Var]) -> avsnn::tape::Var;

/// Finite-difference check of one op: `loss = Σ out ⊙ R` for a fixed random `R`.
/// Returns the worst relative error over all input scalars.
pub fn primitive_fd(inputs: &[Tensor], mode: SpikeMode, build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[Tensor], r: Option<&Tensor>| -> (f64, Vec<Vec<f64>>, Tensor) {
        let mut tape = Tape::with_mode(mode);
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone().with_requires_grad(true))).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out).to_vec();
        let r = r.cloned().unwrap_or_else(|| Tensor::full(&shape, 1.0));
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        let l = tape.sum(prod).unwrap();
        let lv = tape.value(l).item();
        let g = tape.backward(l).unwrap();
        let grads = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| g.leaf(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]))
            .collect();
        (lv, grads, r)
    };
    let (_, _, ones) = eval(inputs, None);
    let r = rand_tensor(&mut rng, ones.shape(), -1.0, 1.0);
    let (_, grads, _) = eval(inputs, Some(&r));
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.numel() {
            let mut xp = inputs.to_vec();
            xp[k].data_mut()[i] += h;
            let lp = eval(&xp, Some(&r)).0;
            xp[k].data_mut()[i] -= 2.0 * h;
            let lm = eval(&xp, Some(&r)).0;
            let fd = (lp - lm) / (2.0 * h);
            worst = worst.max(rel_err(grads[k][i], fd, 1e-6));
        }
    }
    worst
}

/// Worst relative error for each primitive, by name.
pub fn primitive_suite() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |s: &[usize], lo: f64, hi: f64| rand_tensor(&mut rng, s, lo, hi);
    let p = LifParams::default();
    let mut out = Vec::new();
    let relaxed = SpikeMode::Relaxed;
    let spiking = SpikeMode::Spiking;

    out.push(("matmul", primitive_fd(&[r(&[3, 4], -1.0, 1.0), r(&[4, 2], -1.0, 1.0)], spiking, &|t, v| t.matmul(v[0], v[1]).unwrap(), 1)));
    out.push(("add_bias", primitive_fd(&[r(&[3, 4], -1.0, 1.0), r(&[4], -1.0, 1.0)], spiking, &|t, v| t.add_bias(v[0], v[1]).unwrap(), 2)));
    out.push(("add", primitive_fd(&[r(&[5], -1.0, 1.0), r(&[5], -1.0, 1.0)], spiking, &|t, v| t.add(v[0], v[1]).unwrap(), 3)));
    out.push(("scale_by", primitive_fd(&[r(&[2, 3], -1.0, 1.0), Tensor::scalar(0.7)], spiking, &|t, v| t.scale_by(v[0], v[1]).unwrap(), 4)));
    out.push((
        "conv2d",
        primitive_fd(&[r(&[2, 2, 5, 5], -1.0, 1.0), r(&[3, 2, 3, 3], -1.0, 1.0), r(&[3], -1.0, 1.0)], spiking, &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap(), 5),
    ));
    out.push((
        "batch_norm",
        primitive_fd(
            &[r(&[4, 3, 2, 2], -2.0, 2.0), r(&[3], 0.5, 1.5), r(&[3], -0.5, 0.5)],
            spiking,
            &|t, v| t.batch_norm(v[0], v[1], v[2], BnStats::Batch { eps: 1e-5 }).unwrap().0,
            6,
        ),
    ));
    out.push((
        "batch_norm_running",
        primitive_fd(
            &[r(&[5, 3], -2.0, 2.0), r(&[3], 0.5, 1.5), r(&[3], -0.5, 0.5)],
            spiking,
            &|t, v| {
                t.batch_norm(v[0], v[1], v[2], BnStats::Running { mean: &[0.1, -0.2, 0.3], var: &[0.5, 1.5, 2.0], eps: 1e-5 })
                    .unwrap()
                    .0
            },
            7,
        ),
    ));
    out.push(("avg_pool", primitive_fd(&[r(&[2, 3, 2, 2], -1.0, 1.0)], spiking, &|t, v| t.avg_pool(v[0]).unwrap(), 8)));
    out.push(("time_mean", primitive_fd(&[r(&[4, 2, 3], -1.0, 1.0)], spiking, &|t, v| t.time_mean(v[0]).unwrap(), 9)));
    out.push((
        "cross_entropy",
        primitive_fd(&[r(&[3, 4], -2.0, 2.0)], spiking, &|t, v| t.cross_entropy(v[0], &[0, 3, 1]).unwrap(), 10),
    ));
    let mask: Arc<Vec<u8>> = Arc::new(vec![1, 0, 0, 1, 1, 0, 1, 1, 1]);
    out.push((
        "causal_attention",
        primitive_fd(
            &[r(&[3, 2, 2], -1.0, 1.0), r(&[3, 2, 2], -1.0, 1.0), r(&[3, 2, 2], -1.0, 1.0)],
            spiking,
            &move |t, v| t.causal_attention(v[0], v[1], v[2], mask.clone()).unwrap(),
            11,
        ),
    ));
    out.push(("lif_relaxed", primitive_fd(&[r(&[4, 6], 0.0, 1.6)], relaxed, &move |t, v| t.neuron(v[0], None, &p).unwrap(), 12)));
    out.push((
        "rlif_relaxed",
        primitive_fd(&[r(&[4, 2, 3], 0.0, 1.6), r(&[3, 3], -0.4, 0.4)], relaxed, &move |t, v| t.neuron(v[0], Some(v[1]), &p).unwrap(), 13),
    ));
    out
}
