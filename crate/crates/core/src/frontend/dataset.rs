//! Sample sources and the per-sample preprocessing pipeline.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::audio::{augment_audio, fbank, AudioWave, FbankFeatures};
use super::events::{augment_visual, crop_flip_pool, voxelize, voxelize_window, EventStream, EventVoxelGrid, SENSOR_CROP};
use crate::error::{Error, Result};

/// One utterance before any feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub events: EventStream,
    pub audio: AudioWave,
    pub label: usize,
    /// Fixed voxelization window. When absent the stream's own first and last
    /// timestamps are used.
    pub window: Option<(u64, u64)>,
}

pub trait Dataset {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn raw(&self, i: usize) -> Result<RawSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Voxel grid at the sensor resolution, center-cropped to the sensor crop
/// when the sensor is larger.
pub fn sensor_voxels(raw: &RawSample, steps: usize) -> Result<EventVoxelGrid> {
    let ev = &raw.events;
    let g = match raw.window {
        Some((t0, t1)) => voxelize_window(ev, steps, ev.height(), ev.width(), t0, t1)?,
        None => voxelize(ev, steps, ev.height(), ev.width())?,
    };
    if g.height() > SENSOR_CROP && g.width() > SENSOR_CROP {
        let top = (g.height() - SENSOR_CROP) / 2;
        let left = (g.width() - SENSOR_CROP) / 2;
        crop_flip_pool(&g, top, left, SENSOR_CROP, false, SENSOR_CROP)
    } else {
        Ok(g)
    }
}

/// Network-ready voxels `[T, 2, 44, 44]` and features `[T, 40]`.
pub fn prepare<R: Rng + ?Sized>(
    raw: &RawSample,
    steps: usize,
    train: bool,
    rng: &mut R,
) -> Result<(EventVoxelGrid, FbankFeatures)> {
    let voxels = augment_visual(&sensor_voxels(raw, steps)?, rng, train)?;
    let audio = if train {
        augment_audio(&raw.audio, rng)
    } else {
        raw.audio.clone()
    };
    Ok((voxels, fbank(&audio, steps)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub event_path: String,
    pub audio_path: String,
    pub label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration_us: Option<u64>,
}

/// Samples listed in a `manifest.jsonl`; paths are relative to its directory.
#[derive(Clone, Debug)]
pub struct ManifestDataset {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl ManifestDataset {
    pub fn open(path: &Path) -> Result<Self> {
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("{}:{}: {err}", path.display(), i + 1)))?;
            entries.push(e);
        }
        Ok(Self { root, entries })
    }

    /// Opens `dir/manifest.jsonl` and keeps entries of one split.
    pub fn open_split(dir: &Path, split: &str) -> Result<Self> {
        let mut d = Self::open(&dir.join("manifest.jsonl"))?;
        d.entries.retain(|e| e.split.as_deref() == Some(split));
        Ok(d)
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }
}

impl Dataset for ManifestDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, i: usize) -> usize {
        self.entries[i].label
    }

    fn raw(&self, i: usize) -> Result<RawSample> {
        let e = &self.entries[i];
        Ok(RawSample {
            events: EventStream::read(&self.root.join(&e.event_path))?,
            audio: AudioWave::read_wav(&self.root.join(&e.audio_path))?,
            label: e.label,
            window: e.duration_us.map(|d| (0, d)),
        })
    }
}

/// Writes every sample of `splits` under `dir` plus `dir/manifest.jsonl`.
pub fn write_dataset(dir: &Path, splits: &[(&str, &dyn Dataset)]) -> Result<usize> {
    std::fs::create_dir_all(dir.join("events"))?;
    std::fs::create_dir_all(dir.join("audio"))?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.jsonl"))?);
    let mut n = 0;
    for (split, ds) in splits {
        for i in 0..ds.len() {
            let raw = ds.raw(i)?;
            let entry = ManifestEntry {
                event_path: format!("events/{split}_{i:05}.aev"),
                audio_path: format!("audio/{split}_{i:05}.wav"),
                label: raw.label,
                split: Some((*split).to_string()),
                duration_us: raw.window.map(|w| w.1),
            };
            raw.events.write(&dir.join(&entry.event_path))?;
            raw.audio.write_wav(&dir.join(&entry.audio_path))?;
            writeln!(manifest, "{}", serde_json::to_string(&entry)?)?;
            n += 1;
        }
    }
    manifest.flush()?;
    Ok(n)
}
