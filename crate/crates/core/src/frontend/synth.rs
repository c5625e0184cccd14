//! Synthetic audio-visual word task.
//!
//! Each class has a visual blob whose size and motion direction are shared by
//! the class pair `{2j, 2j+1}`, and an audio signature of two tones unique to
//! the class. Babble built from other classes masks the audio, so neither
//! modality alone identifies the class reliably. Class evidence only appears
//! after a shared lead-in, so early predictions sit at chance.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use super::audio::{mix_at_snr, AudioWave, SAMPLE_RATE};
use super::dataset::{Dataset, RawSample};
use super::events::{Event, EventStream};
use crate::error::{Error, Result};

/// Duration of one synthetic utterance in microseconds.
pub const DURATION_US: u64 = 1_000_000;
/// Fraction of the utterance before the visual blob starts moving.
pub const VISUAL_ONSET: f64 = 0.3;
/// Time in seconds at which the class tones start.
pub const AUDIO_ONSET: f64 = 0.6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub timesteps: usize,
    pub grid: usize,
    pub audio_seconds: f64,
    /// Babble SNR in dB; `None` leaves the audio clean.
    pub snr_db: Option<f64>,
    pub babble_min: usize,
    pub babble_max: usize,
    /// Uniform background events per timestep.
    pub noise_events: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 50,
            timesteps: 28,
            grid: 96,
            audio_seconds: 1.0,
            snr_db: Some(0.0),
            babble_min: 1,
            babble_max: 2,
            noise_events: 12,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synth spec: {m}")));
        if self.num_classes < 2 {
            return fail("num_classes must be >= 2");
        }
        if self.train_per_class == 0 && self.test_per_class == 0 {
            return fail("no samples requested");
        }
        if self.timesteps == 0 {
            return fail("timesteps must be >= 1");
        }
        if self.grid < 32 || self.grid > usize::from(u16::MAX) {
            return fail("grid must be in 32..=65535");
        }
        if !(self.audio_seconds > AUDIO_ONSET) || !self.audio_seconds.is_finite() {
            return fail("audio_seconds must exceed the tone onset");
        }
        if self.snr_db.is_some_and(|s| !s.is_finite()) {
            return fail("snr_db must be finite");
        }
        if self.snr_db.is_some() && (self.babble_min == 0 || self.babble_min > self.babble_max) {
            return fail("need 1 <= babble_min <= babble_max");
        }
        if self.snr_db.is_some() && self.babble_max >= self.num_classes {
            return fail("babble_max must be below num_classes");
        }
        Ok(())
    }

    /// Number of distinct visual prototypes.
    pub fn groups(&self) -> usize {
        self.num_classes.div_ceil(2)
    }

    /// The class's two tone frequencies in Hz.
    pub fn tones(&self, class: usize) -> (f64, f64) {
        let n = 2 * self.num_classes;
        let f = |i: usize| 350.0 * (7000.0f64 / 350.0).powf(i as f64 / (n - 1) as f64);
        (f(class), f(class + self.num_classes))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Lazily generated split; sample `i` is a pure function of spec, seed and `i`.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub spec: SynthSpec,
    pub seed: u64,
    pub split: Split,
}

impl SynthSet {
    fn rng(&self, i: usize) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(match self.split {
            Split::Train => 1,
            Split::Test => 2,
        });
        r.set_word_pos(u128::from(i as u64) << 40);
        r
    }

    fn per_class(&self) -> usize {
        match self.split {
            Split::Train => self.spec.train_per_class,
            Split::Test => self.spec.test_per_class,
        }
    }
}

impl Dataset for SynthSet {
    fn len(&self) -> usize {
        self.per_class() * self.spec.num_classes
    }

    fn label(&self, i: usize) -> usize {
        i % self.spec.num_classes
    }

    fn raw(&self, i: usize) -> Result<RawSample> {
        if i >= self.len() {
            return Err(Error::Config(format!("sample {i} out of {}", self.len())));
        }
        let mut rng = self.rng(i);
        let label = self.label(i);
        let events = synth_events(&self.spec, label, &mut rng)?;
        let audio = synth_audio(&self.spec, label, &mut rng)?;
        Ok(RawSample {
            events,
            audio,
            label,
            window: Some((0, DURATION_US)),
        })
    }
}

pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<(SynthSet, SynthSet)> {
    spec.validate()?;
    let mk = |split| SynthSet {
        spec: spec.clone(),
        seed,
        split,
    };
    Ok((mk(Split::Train), mk(Split::Test)))
}

fn synth_events<R: Rng>(spec: &SynthSpec, class: usize, rng: &mut R) -> Result<EventStream> {
    let side = spec.grid as f64;
    let steps = spec.timesteps;
    let group = class / 2;
    let theta = 2.0 * PI * group as f64 / spec.groups() as f64;
    let dir = (theta.cos(), theta.sin());
    let scale = side / 96.0;
    let radius = scale * (5.0 + 3.0 * group as f64 * 5.0 / spec.groups().max(1) as f64);
    let speed = scale * rng.gen_range(1.2..1.6);
    let mut c = (
        side / 2.0 + rng.gen_range(-4.0..4.0) * scale,
        side / 2.0 + rng.gen_range(-4.0..4.0) * scale,
    );
    let onset = (VISUAL_ONSET * steps as f64).round() as usize;
    let bin_us = DURATION_US / steps as u64;
    let mut events = Vec::new();
    let push = |events: &mut Vec<Event>, rng: &mut R, b: usize, x: f64, y: f64, p: u8| {
        if x >= 0.0 && y >= 0.0 && x < side && y < side {
            let t = b as u64 * bin_us + rng.gen_range(0..bin_us);
            events.push(Event {
                t,
                x: x as u16,
                y: y as u16,
                p,
            });
        }
    };
    for b in 0..steps {
        let moving = b >= onset;
        let (r, density) = if moving { (radius, 0.5) } else { (6.0 * scale, 0.25) };
        if moving {
            c.0 = (c.0 + speed * dir.0).clamp(r, side - 1.0 - r);
            c.1 = (c.1 + speed * dir.1).clamp(r, side - 1.0 - r);
        }
        let (x0, x1) = ((c.0 - r - 2.0).max(0.0) as usize, (c.0 + r + 2.0).min(side - 1.0) as usize);
        let (y0, y1) = ((c.1 - r - 2.0).max(0.0) as usize, (c.1 + r + 2.0).min(side - 1.0) as usize);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dx, dy) = (x as f64 + 0.5 - c.0, y as f64 + 0.5 - c.1);
                if ((dx * dx + dy * dy).sqrt() - r).abs() > 1.0 || !rng.gen_bool(density) {
                    continue;
                }
                let p = if moving {
                    u8::from(dx * dir.0 + dy * dir.1 > 0.0)
                } else {
                    u8::from(rng.gen_bool(0.5))
                };
                push(&mut events, rng, b, x as f64, y as f64, p);
            }
        }
        for _ in 0..spec.noise_events {
            let (x, y) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
            let p = u8::from(rng.gen_bool(0.5));
            push(&mut events, rng, b, x, y, p);
        }
    }
    events.sort_by_key(|e| e.t);
    EventStream::new(events, spec.grid, spec.grid)
}

fn clean_audio<R: Rng>(spec: &SynthSpec, class: usize, rng: &mut R) -> Vec<f64> {
    let sr = f64::from(SAMPLE_RATE);
    let n = (spec.audio_seconds * sr).round() as usize;
    let (f1, f2) = spec.tones(class);
    let jitter = |rng: &mut R| rng.gen_range(0.99..1.01);
    let (f1, f2) = (f1 * jitter(rng), f2 * jitter(rng));
    let (a1, a2) = (0.2 * rng.gen_range(0.8..1.2), 0.2 * rng.gen_range(0.8..1.2));
    let (p1, p2, p0) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI));
    let onset = AUDIO_ONSET + rng.gen_range(0.0..0.03);
    let carrier = 180.0 * jitter(rng);
    (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            if t < onset {
                0.15 * (2.0 * PI * carrier * t + p0).sin()
            } else {
                a1 * (2.0 * PI * f1 * t + p1).sin() + a2 * (2.0 * PI * f2 * t + p2).sin()
            }
        })
        .collect()
}

fn synth_audio<R: Rng>(spec: &SynthSpec, class: usize, rng: &mut R) -> Result<AudioWave> {
    let clean = AudioWave::new(clean_audio(spec, class, rng), SAMPLE_RATE)?;
    let Some(snr) = spec.snr_db else {
        return Ok(clean);
    };
    let k = rng.gen_range(spec.babble_min..=spec.babble_max);
    let mut others: Vec<usize> = (0..spec.num_classes).filter(|&c| c != class).collect();
    others.shuffle(rng);
    let mut babble = vec![0.0; clean.len()];
    for &o in &others[..k] {
        for (b, s) in babble.iter_mut().zip(clean_audio(spec, o, rng)) {
            *b += s;
        }
    }
    mix_at_snr(&clean, &AudioWave::new(babble, SAMPLE_RATE)?, snr)
}
