//! Criterion-level checks shared by the focused test files and the
//! acceptance target. Each returns a one-line summary or the failure reason.

use avsnn::analysis::energy_from_counts;
use avsnn::frontend::audio::{fbank, raw_fbank, standardize_frames, AudioWave};
use avsnn::model::{AvModel, FusionMode};
use avsnn::neurons::{lif_step, rlif_step, surrogate_grad};
use avsnn::tape::OpKind;
use avsnn::{LifParams, NeuronState, SpikeTensor, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{oracle_compare, relaxed_fd, tiny_config, tiny_input};

pub type Check = Result<String, String>;

pub const TABLE_ROWS: [(f64, f64, f64); 6] = [
    (707.5, 707.5, 3.25),
    (36.7, 1076.2, 1.10),
    (31.5, 1048.3, 1.06),
    (31.5, 1116.0, 1.12),
    (31.5, 1143.6, 1.15),
    (31.5, 1105.7, 1.11),
];

pub fn energy_rows() -> Check {
    let mut worst: f64 = 0.0;
    for (m, a, e) in TABLE_ROWS {
        let got = energy_from_counts(m * 1e6, a * 1e6);
        let d = (got - e).abs();
        if d > 0.005 {
            return Err(format!("{m}M mult / {a}M add gives {got:.4} mJ, expected {e}"));
        }
        worst = worst.max(d);
    }
    Ok(format!("6 rows within {worst:.4} mJ"))
}

pub fn gradients() -> Check {
    let model = AvModel::new(tiny_config(FusionMode::HiAvsnn), 3).map_err(|e| e.to_string())?;
    let (input, labels) = tiny_input(&model.cfg, 11);
    let fd = relaxed_fd(&model, &input, &labels, 1e-4, 1e-3);
    if fd.fraction() < 0.99 {
        return Err(format!("relaxed: {} of {} scalars within 1e-3", fd.passed, fd.checked));
    }
    let o = oracle_compare(&model, &input, &labels);
    if o.margin <= 1e-9 || o.max_dev > 1e-10 || o.loss_dev > 1e-12 {
        return Err(format!("spiking oracle deviation {:e} (margin {:e})", o.max_dev, o.margin));
    }
    Ok(format!(
        "relaxed {}/{} within 1e-3, spiking max deviation {:.1e} over {} scalars",
        fd.passed, fd.checked, o.max_dev, o.scalars
    ))
}

fn random_params(rng: &mut ChaCha8Rng) -> LifParams {
    LifParams::new(rng.gen_range(0.0..0.99), rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0)).unwrap()
}

fn closed_form(u: f64, p: &LifParams) -> f64 {
    (p.gamma - (u - p.v_th).abs()).max(0.0) / (p.gamma * p.gamma)
}

/// Random LIF/RLIF sequences and full model forwards: spikes binary, fired
/// neurons reset to exactly zero, surrogate equals its closed form.
pub fn spiking_invariants(forwards: usize, points: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut spikes = 0u64;
    for f in 0..forwards {
        let p = random_params(&mut rng);
        let (b, n) = (rng.gen_range(1..4), rng.gen_range(1..9));
        let steps = rng.gen_range(1..12);
        let recurrent = f % 2 == 1;
        let w = Tensor::new(vec![n, n], (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut st = NeuronState::new(&[b, n]);
        let mut prev = SpikeTensor::zeros(&[b, n]);
        for _ in 0..steps {
            let cur = Tensor::new(vec![b, n], (0..b * n).map(|_| rng.gen_range(-1.0..3.0)).collect()).unwrap();
            let s = if recurrent {
                rlif_step(&mut st, &cur, &prev, &w, &p)
            } else {
                lif_step(&mut st, &cur, &p)
            }
            .map_err(|e| e.to_string())?;
            for (i, &x) in s.data().iter().enumerate() {
                if x > 1 {
                    return Err(format!("forward {f}: spike value {x}"));
                }
                if x == 1 && st.u.data()[i].to_bits() != 0.0f64.to_bits() {
                    return Err(format!("forward {f}: post-spike potential {}", st.u.data()[i]));
                }
                spikes += u64::from(x);
            }
            prev = s;
        }
    }
    let mut model = AvModel::new(tiny_config(FusionMode::HiAvsnn), 1).map_err(|e| e.to_string())?;
    for f in 0..forwards / 10 {
        let (input, _) = tiny_input(&model.cfg, 100 + f as u64);
        let mut tape = Tape::new();
        model.forward(&mut tape, &input, true).map_err(|e| e.to_string())?;
        for n in tape.nodes().filter(|n| n.kind == OpKind::Neuron) {
            if let Some(v) = n.value.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(format!("model forward {f}: neuron output {v} in {}", n.scope));
            }
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p = random_params(&mut rng);
        let u = rng.gen_range(-3.0..5.0);
        worst = worst.max((surrogate_grad(u, &p) - closed_form(u, &p)).abs());
    }
    if worst > 1e-12 {
        return Err(format!("surrogate deviates by {worst:e}"));
    }
    Ok(format!(
        "{forwards} neuron runs ({spikes} spikes) and {} model forwards binary with exact reset; surrogate worst {worst:e} over {points} points",
        forwards / 10
    ))
}

fn linspace_rows(n: usize, steps: usize) -> Vec<usize> {
    (0..steps)
        .map(|i| (i as f64 * (n - 1) as f64 / (steps - 1) as f64).round() as usize)
        .collect()
}

pub fn frame_standardization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let wave = AudioWave::new((0..44_100).map(|_| rng.gen_range(-0.3..0.3)).collect(), 44_100).map_err(|e| e.to_string())?;
    let raw = raw_fbank(&wave).map_err(|e| e.to_string())?;
    if raw.shape()[0] != 12 {
        return Err(format!("1 s of audio gives {} raw frames", raw.shape()[0]));
    }
    let f = fbank(&wave, 28).map_err(|e| e.to_string())?;
    if f.frames.shape()[0] != 28 {
        return Err(format!("{} output frames", f.frames.shape()[0]));
    }
    if (0..12).any(|r| f.frames.row(r) != raw.row(r)) {
        return Err("leading rows differ from the raw frames".into());
    }
    if (12..28).any(|r| f.frames.row(r).iter().any(|&v| v != 0.0)) {
        return Err("rows 12..27 are not all zero".into());
    }
    let d = 3;
    let long = Tensor::new(vec![55, d], (0..55 * d).map(|i| (i / d) as f64).collect()).unwrap();
    let out = standardize_frames(&long, 28).map_err(|e| e.to_string())?;
    let want = linspace_rows(55, 28);
    let got: Vec<usize> = (0..28).map(|r| out.row(r)[0] as usize).collect();
    if got != want {
        return Err(format!("55 frames select {got:?}, expected {want:?}"));
    }
    Ok(format!("12 raw frames padded to 28; 55 frames select {:?}..{:?}", &got[..3], &got[25..]))
}
