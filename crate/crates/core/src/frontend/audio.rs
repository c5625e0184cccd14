//! Waveforms, log mel filterbank features and audio augmentation.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 44_100;
/// 120 ms at 44.1 kHz.
pub const FRAME_LEN: usize = 5292;
/// 80 ms at 44.1 kHz.
pub const HOP_LEN: usize = 3528;
pub const MEL_BINS: usize = 40;
pub const LOG_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioWave {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioWave {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Format("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64
    }

    pub fn rms(&self) -> f64 {
        self.power().sqrt()
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, rate: u32) -> Result<Self> {
        if rate == 0 {
            return Err(Error::Format("target rate must be positive".into()));
        }
        if rate == self.sample_rate || self.samples.is_empty() {
            return Self::new(self.samples.clone(), rate);
        }
        let n_out = ((self.samples.len() as u64 * u64::from(rate)) / u64::from(self.sample_rate)).max(1) as usize;
        let ratio = f64::from(self.sample_rate) / f64::from(rate);
        let last = self.samples.len() - 1;
        let out = (0..n_out)
            .map(|i| {
                let pos = i as f64 * ratio;
                let j = (pos.floor() as usize).min(last);
                let frac = pos - j as f64;
                let next = self.samples[(j + 1).min(last)];
                self.samples[j] * (1.0 - frac) + next * frac
            })
            .collect();
        Self::new(out, rate)
    }

    /// Reads a WAV file, mixing channels down to mono and resampling to 44.1 kHz.
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        let ch = usize::from(spec.channels.max(1));
        let raw: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Int => {
                let scale = f64::from(1u32 << (spec.bits_per_sample - 1).min(31));
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| f64::from(v) / scale))
                    .collect::<std::result::Result<_, _>>()?
            }
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<std::result::Result<_, _>>()?,
        };
        let mono = raw.chunks(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
        Self::new(mono, spec.sample_rate)?.resample(SAMPLE_RATE)
    }

    /// Writes 16-bit PCM mono. Samples are clipped to [-1, 1].
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            w.write_sample((s.clamp(-1.0, 1.0) * f64::from(i16::MAX)).round() as i16)?;
        }
        w.finalize()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FbankFeatures {
    /// `[T, 40]` log mel energies.
    pub frames: Tensor,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies of the `n_mels` triangular filters spanning 0 Hz to Nyquist.
pub fn mel_centers(sample_rate: u32, n_mels: usize) -> Vec<f64> {
    let top = hz_to_mel(f64::from(sample_rate) / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular filters over the `frame_len / 2 + 1` non-negative DFT bins.
pub fn mel_filterbank(frame_len: usize, sample_rate: u32, n_mels: usize) -> Vec<Vec<f64>> {
    let top = hz_to_mel(f64::from(sample_rate) / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bins = frame_len / 2 + 1;
    let df = f64::from(sample_rate) / frame_len as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * df;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Number of full frames in `len` samples; inputs shorter than one frame are
/// padded to a single frame.
pub fn frame_count(len: usize) -> usize {
    if len <= FRAME_LEN {
        1
    } else {
        (len - FRAME_LEN) / HOP_LEN + 1
    }
}

/// Unstandardized features `[N, 40]`.
pub fn raw_fbank(w: &AudioWave) -> Result<Tensor> {
    if w.is_empty() {
        return Err(Error::EmptyInput("audio has no samples".into()));
    }
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::Config(format!(
            "fbank expects {SAMPLE_RATE} Hz audio, got {}",
            w.sample_rate
        )));
    }
    let n = frame_count(w.len());
    let window: Vec<f64> = (0..FRAME_LEN)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (FRAME_LEN - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(FRAME_LEN, SAMPLE_RATE, MEL_BINS);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FRAME_LEN);
    let mut buf = vec![Complex::new(0.0, 0.0); FRAME_LEN];
    let mut out = Vec::with_capacity(n * MEL_BINS);
    for f in 0..n {
        let start = f * HOP_LEN;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = w.samples.get(start + i).copied().unwrap_or(0.0);
            *c = Complex::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        let power: Vec<f64> = buf[..FRAME_LEN / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / FRAME_LEN as f64)
            .collect();
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(a, b)| a * b).sum();
            out.push((e + LOG_EPS).ln());
        }
    }
    Tensor::new(vec![n, MEL_BINS], out)
}

/// Log mel features standardized to `steps` frames.
pub fn fbank(w: &AudioWave, steps: usize) -> Result<FbankFeatures> {
    Ok(FbankFeatures {
        frames: standardize_frames(&raw_fbank(w)?, steps)?,
    })
}

/// More than `steps` frames: keep rows `round(linspace(0, N-1, steps))`.
/// Otherwise: zero-pad at the end.
pub fn standardize_frames(frames: &Tensor, steps: usize) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::EmptyInput(format!("frame matrix {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    let mut out = vec![0.0; steps * d];
    if n > steps {
        for (i, dst) in out.chunks_exact_mut(d).enumerate() {
            let src = if steps == 1 {
                0
            } else {
                (i as f64 * (n - 1) as f64 / (steps - 1) as f64).round() as usize
            };
            dst.copy_from_slice(frames.row(src));
        }
    } else {
        out[..n * d].copy_from_slice(frames.data());
    }
    Tensor::new(vec![steps, d], out)
}

/// Per-transform probabilities for training-time audio augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AudioAugment {
    pub polarity_p: f64,
    pub noise_p: f64,
    pub noise_snr_db: f64,
    pub volume_p: f64,
    pub volume_range: (f64, f64),
}

impl Default for AudioAugment {
    fn default() -> Self {
        Self {
            polarity_p: 0.8,
            noise_p: 0.1,
            noise_snr_db: 30.0,
            volume_p: 0.3,
            volume_range: (0.7, 1.3),
        }
    }
}

impl AudioAugment {
    pub fn none() -> Self {
        Self {
            polarity_p: 0.0,
            noise_p: 0.0,
            volume_p: 0.0,
            ..Self::default()
        }
    }
}

pub fn augment_audio<R: Rng + ?Sized>(w: &AudioWave, rng: &mut R) -> AudioWave {
    augment_audio_with(w, &AudioAugment::default(), rng)
}

pub fn augment_audio_with<R: Rng + ?Sized>(w: &AudioWave, aug: &AudioAugment, rng: &mut R) -> AudioWave {
    let mut out = w.clone();
    if rng.gen::<f64>() < aug.polarity_p {
        out.samples.iter_mut().for_each(|s| *s = -*s);
    }
    if rng.gen::<f64>() < aug.noise_p {
        let sigma = (out.power() / 10f64.powf(aug.noise_snr_db / 10.0)).sqrt();
        for s in &mut out.samples {
            let z: f64 = StandardNormal.sample(rng);
            *s += sigma * z;
        }
    }
    if rng.gen::<f64>() < aug.volume_p {
        let g = rng.gen_range(aug.volume_range.0..=aug.volume_range.1);
        out.samples.iter_mut().for_each(|s| *s *= g);
    }
    out
}

/// `clean + k·noise` with `k` chosen so the clean-to-noise power ratio is
/// `snr_db`. The noise is looped or truncated to the clean length.
pub fn mix_at_snr(clean: &AudioWave, noise: &AudioWave, snr_db: f64) -> Result<AudioWave> {
    if clean.sample_rate != noise.sample_rate {
        return Err(Error::Config(format!(
            "sample rates differ: {} vs {}",
            clean.sample_rate, noise.sample_rate
        )));
    }
    if noise.is_empty() || clean.is_empty() {
        return Err(Error::Degenerate("empty clean or noise signal".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Config(format!("snr_db must be finite, got {snr_db}")));
    }
    let fitted: Vec<f64> = (0..clean.len()).map(|i| noise.samples[i % noise.len()]).collect();
    let pn = fitted.iter().map(|s| s * s).sum::<f64>() / fitted.len() as f64;
    let pc = clean.power();
    if pc == 0.0 || pn == 0.0 {
        return Err(Error::Degenerate("zero-power clean or noise signal".into()));
    }
    let k = (pc / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = clean.samples.iter().zip(&fitted).map(|(c, n)| c + k * n).collect();
    AudioWave::new(samples, clean.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tone(freq: f64, secs: f64) -> AudioWave {
        let n = (secs * f64::from(SAMPLE_RATE)) as usize;
        let s = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / f64::from(SAMPLE_RATE)).sin())
            .collect();
        AudioWave::new(s, SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_twelve_frames_padded() {
        let raw = raw_fbank(&tone(440.0, 1.0)).unwrap();
        assert_eq!(raw.shape(), &[12, 40]);
        let f = fbank(&tone(440.0, 1.0), 28).unwrap();
        assert_eq!(f.frames.shape(), &[28, 40]);
        assert!(f.frames.data()[12 * 40..].iter().all(|&v| v == 0.0));
        assert_eq!(&f.frames.data()[..12 * 40], raw.data());
    }

    #[test]
    fn silence_is_constant_log_eps() {
        let w = AudioWave::new(vec![0.0; 10_000], SAMPLE_RATE).unwrap();
        let raw = raw_fbank(&w).unwrap();
        assert!(raw.data().iter().all(|&v| v == LOG_EPS.ln()));
    }

    #[test]
    fn tone_peaks_in_nearest_mel_bin() {
        let raw = raw_fbank(&tone(1000.0, 0.5)).unwrap();
        let row = raw.row(1);
        let arg = (0..40).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let centers = mel_centers(SAMPLE_RATE, 40);
        let nearest = (0..40)
            .min_by(|&a, &b| (centers[a] - 1000.0).abs().total_cmp(&(centers[b] - 1000.0).abs()))
            .unwrap();
        assert_eq!(arg, nearest);
    }

    #[test]
    fn frame_count_formula() {
        for len in [FRAME_LEN, FRAME_LEN + 1, 44_100, 100_000] {
            assert_eq!(frame_count(len), (len - FRAME_LEN) / HOP_LEN + 1);
        }
        assert!(raw_fbank(&AudioWave::new(vec![], SAMPLE_RATE).unwrap()).is_err());
    }

    #[test]
    fn standardize_examples() {
        let x = Tensor::new(vec![28, 1], (0..28).map(f64::from).collect()).unwrap();
        assert_eq!(standardize_frames(&x, 28).unwrap(), x);
        let x = Tensor::new(vec![55, 1], (0..55).map(f64::from).collect()).unwrap();
        let y = standardize_frames(&x, 28).unwrap();
        let want: Vec<f64> = (0..28).map(|i| f64::from(2 * i)).collect();
        assert_eq!(y.data(), want.as_slice());
    }

    #[test]
    fn mixing_hits_target_snr() {
        let c = tone(300.0, 0.2);
        let n = tone(1234.0, 0.05);
        for snr in [-5.0, 0.0, 5.0, 10.0] {
            let m = mix_at_snr(&c, &n, snr).unwrap();
            let noise: Vec<f64> = m.samples.iter().zip(&c.samples).map(|(a, b)| a - b).collect();
            let pn = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
            assert!((10.0 * (c.power() / pn).log10() - snr).abs() < 0.01);
        }
        let quiet = mix_at_snr(&c, &n, 60.0).unwrap();
        let diff = quiet.samples.iter().zip(&c.samples).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let crest = n.samples.iter().map(|v| v.abs()).fold(0.0, f64::max) / n.rms();
        assert!(diff <= 1e-3 * c.rms() * crest * (1.0 + 1e-6));
        let silent = AudioWave::new(vec![0.0; 10], SAMPLE_RATE).unwrap();
        assert!(matches!(mix_at_snr(&silent, &n, 0.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn augmentation_identities() {
        let w = tone(500.0, 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment_audio_with(&w, &AudioAugment::none(), &mut rng), w);
        let flip = AudioAugment {
            polarity_p: 1.0,
            ..AudioAugment::none()
        };
        let twice = augment_audio_with(&augment_audio_with(&w, &flip, &mut rng), &flip, &mut rng);
        assert_eq!(twice, w);
        let a = augment_audio(&w, &mut ChaCha8Rng::seed_from_u64(4));
        let b = augment_audio(&w, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn resample_length() {
        let w = AudioWave::new(vec![0.25; 48_000], 48_000).unwrap();
        let r = w.resample(SAMPLE_RATE).unwrap();
        assert_eq!(r.len(), 44_100);
        assert!(r.samples.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
