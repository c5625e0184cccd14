//! Scalar reverse-mode reimplementation of the network, one graph node per
//! arithmetic operation. Shares nothing with the library's tape.

use std::collections::HashMap;

use avsnn::model::{AvModel, FusionMode, ModelInput, NetworkConfig};
use avsnn::LifParams;

const EPS: f64 = 1e-5;

#[derive(Clone, Copy)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Exp(usize),
    Ln(usize),
    Pow(usize, f64),
    Spike(usize, LifParams),
}

fn ramp_grad(u: f64, p: &LifParams) -> f64 {
    let d = (u - p.v_th).abs();
    if d >= p.gamma {
        0.0
    } else {
        (p.gamma - d) / (p.gamma * p.gamma)
    }
}

fn ramp(u: f64, p: &LifParams) -> f64 {
    let d = u - p.v_th;
    let g = p.gamma;
    if d <= -g {
        0.0
    } else if d >= g {
        1.0
    } else if d < 0.0 {
        0.5 * (d + g) * (d + g) / (g * g)
    } else {
        1.0 - 0.5 * (g - d) * (g - d) / (g * g)
    }
}

pub struct Graph {
    val: Vec<f64>,
    op: Vec<Op>,
    relaxed: bool,
    /// Smallest `|u − v_th|` seen by any hard spike.
    pub min_margin: f64,
}

impl Graph {
    fn new(relaxed: bool) -> Self {
        Self {
            val: Vec::new(),
            op: Vec::new(),
            relaxed,
            min_margin: f64::INFINITY,
        }
    }

    fn push(&mut self, v: f64, op: Op) -> usize {
        self.val.push(v);
        self.op.push(op);
        self.val.len() - 1
    }

    fn leaf(&mut self, v: f64) -> usize {
        self.push(v, Op::Leaf)
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        self.push(self.val[a] + self.val[b], Op::Add(a, b))
    }

    fn sub(&mut self, a: usize, b: usize) -> usize {
        self.push(self.val[a] - self.val[b], Op::Sub(a, b))
    }

    fn mul(&mut self, a: usize, b: usize) -> usize {
        self.push(self.val[a] * self.val[b], Op::Mul(a, b))
    }

    fn mulc(&mut self, a: usize, c: f64) -> usize {
        let k = self.leaf(c);
        self.mul(a, k)
    }

    fn exp(&mut self, a: usize) -> usize {
        self.push(self.val[a].exp(), Op::Exp(a))
    }

    fn ln(&mut self, a: usize) -> usize {
        self.push(self.val[a].ln(), Op::Ln(a))
    }

    fn pow(&mut self, a: usize, e: f64) -> usize {
        self.push(self.val[a].powf(e), Op::Pow(a, e))
    }

    fn sum(&mut self, xs: &[usize]) -> usize {
        let mut acc = xs[0];
        for &x in &xs[1..] {
            acc = self.add(acc, x);
        }
        acc
    }

    fn spike(&mut self, u: usize, p: LifParams) -> usize {
        let uv = self.val[u];
        let s = if self.relaxed {
            ramp(uv, &p)
        } else {
            self.min_margin = self.min_margin.min((uv - p.v_th).abs());
            if uv >= p.v_th {
                1.0
            } else {
                0.0
            }
        };
        self.push(s, Op::Spike(u, p))
    }

    fn value(&self, a: usize) -> f64 {
        self.val[a]
    }

    fn backward(&self, root: usize) -> Vec<f64> {
        let mut g = vec![0.0; self.val.len()];
        g[root] = 1.0;
        for i in (0..=root).rev() {
            let gi = g[i];
            if gi == 0.0 {
                continue;
            }
            match self.op[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    g[a] += gi;
                    g[b] += gi;
                }
                Op::Sub(a, b) => {
                    g[a] += gi;
                    g[b] -= gi;
                }
                Op::Mul(a, b) => {
                    g[a] += gi * self.val[b];
                    g[b] += gi * self.val[a];
                }
                Op::Exp(a) => g[a] += gi * self.val[i],
                Op::Ln(a) => g[a] += gi / self.val[a],
                Op::Pow(a, e) => g[a] += gi * e * self.val[a].powf(e - 1.0),
                Op::Spike(u, p) => g[u] += gi * ramp_grad(self.val[u], &p),
            }
        }
        g
    }
}

/// Scalar model: parameter leaves by name plus the graph built on them.
pub struct Oracle {
    pub g: Graph,
    params: HashMap<String, Vec<usize>>,
    steps: usize,
    batch: usize,
}

impl Oracle {
    fn p(&self, name: &str) -> Vec<usize> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .clone()
    }

    fn linear(&mut self, x: &[usize], rows: usize, din: usize, dout: usize, name: &str, bias: bool) -> Vec<usize> {
        let w = self.p(&format!("{name}.weight"));
        let b = bias.then(|| self.p(&format!("{name}.bias")));
        let mut out = Vec::with_capacity(rows * dout);
        for r in 0..rows {
            for o in 0..dout {
                let terms: Vec<usize> = (0..din).map(|i| self.g.mul(x[r * din + i], w[i * dout + o])).collect();
                let mut y = self.g.sum(&terms);
                if let Some(b) = &b {
                    y = self.g.add(y, b[o]);
                }
                out.push(y);
            }
        }
        out
    }

    fn bn(&mut self, x: &[usize], outer: usize, c: usize, inner: usize, name: &str) -> Vec<usize> {
        let gamma = self.p(&format!("{name}.gamma"));
        let beta = self.p(&format!("{name}.beta"));
        let n = (outer * inner) as f64;
        let mut out = x.to_vec();
        for ch in 0..c {
            let idx: Vec<usize> = (0..outer)
                .flat_map(|o| (0..inner).map(move |i| (o * c + ch) * inner + i))
                .collect();
            let xs: Vec<usize> = idx.iter().map(|&i| x[i]).collect();
            let s = self.g.sum(&xs);
            let mean = self.g.mulc(s, 1.0 / n);
            let d: Vec<usize> = xs.iter().map(|&v| self.g.sub(v, mean)).collect();
            let sq: Vec<usize> = d.iter().map(|&v| self.g.mul(v, v)).collect();
            let ss = self.g.sum(&sq);
            let var = self.g.mulc(ss, 1.0 / n);
            let eps = self.g.leaf(EPS);
            let ve = self.g.add(var, eps);
            let inv = self.g.pow(ve, -0.5);
            for (k, &i) in idx.iter().enumerate() {
                let h = self.g.mul(d[k], inv);
                let y = self.g.mul(h, gamma[ch]);
                out[i] = self.g.add(y, beta[ch]);
            }
        }
        out
    }

    /// LIF over `[T, width]`; with `rec = (V, n)` each row of `n` neurons is
    /// driven by its own previous spikes through `V`.
    fn lif(&mut self, x: &[usize], width: usize, p: LifParams, rec: Option<(&[usize], usize)>) -> Vec<usize> {
        let steps = x.len() / width;
        let mut post: Vec<Option<usize>> = vec![None; width];
        let mut out: Vec<usize> = Vec::with_capacity(x.len());
        for t in 0..steps {
            let mut us = Vec::with_capacity(width);
            for j in 0..width {
                let mut u = x[t * width + j];
                if let Some(pj) = post[j] {
                    let decayed = self.g.mulc(pj, p.tau);
                    u = self.g.add(decayed, u);
                }
                if let (Some((v, n)), true) = (rec, t > 0) {
                    let (row, col) = (j / n, j % n);
                    let terms: Vec<usize> = (0..n)
                        .map(|i| self.g.mul(out[(t - 1) * width + row * n + i], v[i * n + col]))
                        .collect();
                    let drive = self.g.sum(&terms);
                    u = self.g.add(u, drive);
                }
                us.push(u);
            }
            for (j, &u) in us.iter().enumerate() {
                let s = self.g.spike(u, p);
                out.push(s);
                let keep = if self.g.relaxed {
                    let one = self.g.leaf(1.0);
                    self.g.sub(one, s)
                } else {
                    let sv = self.g.value(s);
                    self.g.leaf(1.0 - sv)
                };
                post[j] = Some(self.g.mul(u, keep));
            }
        }
        out
    }

    fn conv(&mut self, x: &[usize], n: usize, c: usize, h: usize, w: usize, name: &str, o: usize, k: usize, stride: usize) -> (Vec<usize>, usize, usize) {
        let wt = self.p(&format!("{name}.weight"));
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = Vec::with_capacity(n * o * ho * wo);
        for img in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut terms = Vec::new();
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((img * c + ic) * h + iy as usize) * w + ix as usize;
                                    let wi = ((oc * c + ic) * k + ky) * k + kx;
                                    terms.push(self.g.mul(x[xi], wt[wi]));
                                }
                            }
                        }
                        out.push(self.g.sum(&terms));
                    }
                }
            }
        }
        (out, ho, wo)
    }

    fn visual(&mut self, cfg: &NetworkConfig, vox: &[usize]) -> Vec<usize> {
        let (t, b) = (self.steps, self.batch);
        let rows = t * b;
        let (mut x, mut c, mut h, mut w) = (vox.to_vec(), 2, cfg.visual_height, cfg.visual_width);
        for (i, blk) in cfg.visual_blocks.iter().enumerate() {
            let (y, ho, wo) = self.conv(&x, rows, c, h, w, &format!("vcen.block{i}.conv"), blk.out_channels, blk.kernel, blk.stride);
            let y = self.bn(&y, rows, blk.out_channels, ho * wo, &format!("vcen.block{i}.bn"));
            x = self.lif(&y, b * blk.out_channels * ho * wo, cfg.neuron, None);
            c = blk.out_channels;
            h = ho;
            w = wo;
        }
        let inner = h * w;
        let mut pooled = Vec::with_capacity(rows * c);
        for r in 0..rows {
            for ch in 0..c {
                let s = self.g.sum(&x[(r * c + ch) * inner..(r * c + ch + 1) * inner]);
                pooled.push(self.g.mulc(s, 1.0 / inner as f64));
            }
        }
        let k = cfg.num_classes;
        let y = self.linear(&pooled, rows, c, k, "vcen.fc", true);
        let y = self.bn(&y, rows, k, 1, "vcen.fc_bn");
        self.lif(&y, b * k, cfg.neuron, None)
    }

    fn encode(&mut self, cfg: &NetworkConfig, audio: &[usize]) -> Vec<usize> {
        let rows = self.steps * self.batch;
        let l = cfg.audio_hidden;
        let mut x = audio.to_vec();
        let mut din = cfg.audio_features;
        for e in 0..2 {
            let name = format!("spn.encoder{e}");
            let y = self.linear(&x, rows, din, l, &format!("{name}.linear"), true);
            let y = self.bn(&y, rows, l, 1, &format!("{name}.bn"));
            let v = self.p(&format!("{name}.recurrent"));
            x = self.lif(&y, self.batch * l, cfg.neuron, Some((&v, l)));
            din = l;
        }
        x
    }

    fn cue(&mut self, cfg: &NetworkConfig, name: &str, phi: &[usize], psi: &[usize], causal: bool) -> Vec<usize> {
        let (t, b) = (self.steps, self.batch);
        let rows = t * b;
        let (c, l, d) = (cfg.num_classes, cfg.audio_hidden, cfg.attention_dim);
        let proj = |me: &mut Self, x: &[usize], din: usize, w: &str, bn: &str| {
            let y = me.linear(x, rows, din, d, &format!("{name}.{w}"), false);
            let y = me.bn(&y, rows, d, 1, &format!("{name}.{bn}"));
            me.lif(&y, b * d, cfg.neuron, None)
        };
        let q = proj(self, phi, c, "w_q", "bn_q");
        let k = proj(self, psi, l, "w_k", "bn_k");
        let v = proj(self, psi, l, "w_v", "bn_v");
        let scale = self.p(&format!("{name}.scale"))[0];
        let at = |ti: usize, bi: usize| (ti * b + bi) * d;
        let mut sa = vec![0; rows * d];
        for bi in 0..b {
            for i in 0..t {
                let scores: Vec<(usize, usize)> = (0..t)
                    .filter(|&j| !causal || j <= i)
                    .map(|j| {
                        let prods: Vec<usize> = (0..d).map(|e| self.g.mul(q[at(i, bi) + e], k[at(j, bi) + e])).collect();
                        (j, self.g.sum(&prods))
                    })
                    .collect();
                for e in 0..d {
                    let terms: Vec<usize> = scores.iter().map(|&(j, s)| self.g.mul(s, v[at(j, bi) + e])).collect();
                    let a = self.g.sum(&terms);
                    sa[at(i, bi) + e] = self.g.mul(a, scale);
                }
            }
        }
        let attn = cfg.neuron.with_threshold(0.5);
        let sa = self.lif(&sa, b * d, attn, None);
        let y = self.linear(&sa, rows, d, l, &format!("{name}.ff"), false);
        let y = self.bn(&y, rows, l, 1, &format!("{name}.bn_ff"));
        let y = self.lif(&y, b * l, cfg.neuron, None);
        psi.iter().zip(&y).map(|(&a, &z)| self.g.add(a, z)).collect()
    }

    fn process(&mut self, cfg: &NetworkConfig, psi: Vec<usize>, phi: Option<&[usize]>, causal: bool) -> Vec<usize> {
        let rows = self.steps * self.batch;
        let l = cfg.audio_hidden;
        let cues = cfg.active_cues();
        let blocks = cfg.speech_blocks();
        let mut x = psi;
        for i in 0..blocks {
            if cues.contains(&(i + 1)) {
                x = self.cue(cfg, &format!("spn.cue{}", i + 1), phi.unwrap(), &x, causal);
            }
            let name = format!("spn.block{i}");
            let mut y = self.linear(&x, rows, l, l, &format!("{name}.linear"), true);
            if cfg.fusion_mode == FusionMode::ConcatBaseline && i == 0 {
                let e = self.linear(phi.unwrap(), rows, cfg.num_classes, l, &format!("{name}.linear_cue"), false);
                y = y.iter().zip(&e).map(|(&a, &z)| self.g.add(a, z)).collect();
            }
            let y = self.bn(&y, rows, l, 1, &format!("{name}.bn"));
            x = self.lif(&y, self.batch * l, cfg.neuron, None);
        }
        if cues.contains(&(blocks + 1)) {
            x = self.cue(cfg, &format!("spn.cue{}", blocks + 1), phi.unwrap(), &x, causal);
        }
        self.linear(&x, rows, l, cfg.num_classes, "spn.readout", true)
    }

    fn loss(&mut self, logits: &[usize], c: usize, labels: &[usize]) -> usize {
        let (t, b) = (self.steps, self.batch);
        let mut per = Vec::new();
        for (bi, &y) in labels.iter().enumerate() {
            let m: Vec<usize> = (0..c)
                .map(|k| {
                    let xs: Vec<usize> = (0..t).map(|ti| logits[(ti * b + bi) * c + k]).collect();
                    let s = self.g.sum(&xs);
                    self.g.mulc(s, 1.0 / t as f64)
                })
                .collect();
            let max = m.iter().map(|&i| self.g.value(i)).fold(f64::NEG_INFINITY, f64::max);
            let mx = self.g.leaf(max);
            let ex: Vec<usize> = m
                .iter()
                .map(|&i| {
                    let d = self.g.sub(i, mx);
                    self.g.exp(d)
                })
                .collect();
            let z = self.g.sum(&ex);
            let lse = self.g.ln(z);
            let zy = self.g.sub(m[y], mx);
            per.push(self.g.sub(lse, zy));
        }
        let s = self.g.sum(&per);
        self.g.mulc(s, 1.0 / b as f64)
    }
}

/// Loss and per-parameter gradients computed by the scalar graph, keyed by
/// parameter name.
pub struct OracleResult {
    pub loss: f64,
    pub grads: HashMap<String, Vec<f64>>,
    pub min_margin: f64,
    pub nodes: usize,
}

/// Train-mode loss of `model` on `input` and its gradients. `relaxed`
/// replaces the hard spike with its smooth ramp and keeps the reset path.
pub fn run(model: &AvModel, input: &ModelInput, labels: &[usize], relaxed: bool, causal: bool) -> OracleResult {
    let cfg = &model.cfg;
    let mut g = Graph::new(relaxed);
    let mut params = HashMap::new();
    for (_, p) in model.store.iter() {
        let ids: Vec<usize> = p.value.data().iter().map(|&v| g.leaf(v)).collect();
        params.insert(p.name.clone(), ids);
    }
    let src = input.voxels.as_ref().or(input.audio.as_ref()).unwrap();
    let mut o = Oracle {
        g,
        params,
        steps: src.shape()[0],
        batch: src.shape()[1],
    };
    let phi = cfg.fusion_mode.uses_visual().then(|| {
        let vox: Vec<usize> = input.voxels.as_ref().unwrap().data().iter().map(|&v| o.g.leaf(v)).collect();
        o.visual(cfg, &vox)
    });
    let logits = if cfg.fusion_mode.uses_audio() {
        let a: Vec<usize> = input.audio.as_ref().unwrap().data().iter().map(|&v| o.g.leaf(v)).collect();
        let psi = o.encode(cfg, &a);
        let cue = if cfg.fusion_mode == FusionMode::AudioOnly { None } else { phi.as_deref() };
        o.process(cfg, psi, cue, causal)
    } else {
        let rows = o.steps * o.batch;
        let c = cfg.num_classes;
        o.linear(phi.as_ref().unwrap(), rows, c, c, "vcen.head", true)
    };
    let loss = o.loss(&logits, cfg.num_classes, labels);
    let grad = o.g.backward(loss);
    let grads = o
        .params
        .iter()
        .map(|(k, ids)| (k.clone(), ids.iter().map(|&i| grad[i]).collect()))
        .collect();
    OracleResult {
        loss: o.g.value(loss),
        grads,
        min_margin: o.g.min_margin,
        nodes: o.g.val.len(),
    }
}
