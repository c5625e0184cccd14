//! Versioned binary container for parameters, optimizer state and RNG state.
//!
//! Layout (little-endian):
//! `"AVSNNCKP"`, `u32` version, `u32` header length, header JSON,
//! 32-byte config hash, `u32` tensor count, tensor records, 32-byte SHA-256 of
//! everything before it. A tensor record is `u8` section, `u16` name length,
//! name, `u8` rank, `u64` dims, `f64` data.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{AvModel, NetworkConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 8] = *b"AVSNNCKP";
pub const VERSION: u32 = 1;

/// Snapshot of a ChaCha generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetworkConfig,
    phase: String,
    epoch: u64,
    adam_step: u64,
    rng: Option<RngJson>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngJson {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Section {
    Param = 0,
    AdamM = 1,
    AdamV = 2,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    /// Training phase the snapshot belongs to.
    pub phase: String,
    /// Completed epochs within the phase.
    pub epoch: u64,
    pub adam_step: u64,
    pub rng: Option<RngState>,
    pub tensors: Vec<(Section, String, Tensor)>,
}

/// SHA-256 of the canonical JSON form of a network configuration.
pub fn config_hash(cfg: &NetworkConfig) -> [u8; 32] {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    sha256(&json)
}

fn sha256(bytes: &[u8]) -> [u8; 32] {
    let d = Sha256::digest(bytes);
    let mut out = [0u8; 32];
    out.copy_from_slice(&d);
    out
}

impl Checkpoint {
    /// Parameters only, no optimizer or RNG state.
    pub fn from_model(model: &AvModel) -> Self {
        Self {
            config: model.cfg.clone(),
            phase: String::from("model"),
            epoch: 0,
            adam_step: 0,
            rng: None,
            tensors: model
                .store
                .iter()
                .map(|(_, p)| (Section::Param, p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.section(Section::Param)
    }

    pub fn section(&self, s: Section) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(move |(sec, _, _)| *sec == s)
            .map(|(_, n, t)| (n.as_str(), t))
    }

    /// Copies parameters into `model`, which must have been built from an
    /// identical configuration.
    pub fn load_into(&self, model: &mut AvModel) -> Result<()> {
        if config_hash(&model.cfg) != config_hash(&self.config) {
            return Err(Error::Checkpoint(
                "checkpoint was written for a different network configuration".into(),
            ));
        }
        let mut seen = 0;
        for (name, t) in self.params() {
            model.store.set_by_name(name, t.clone())?;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} parameters, model has {}",
                model.store.len()
            )));
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<AvModel> {
        let mut m = AvModel::new(self.config.clone(), 0)?;
        self.load_into(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            phase: self.phase.clone(),
            epoch: self.epoch,
            adam_step: self.adam_step,
            rng: self.rng.map(|r| RngJson {
                seed: r.seed.to_vec(),
                stream: r.stream,
                word_pos: r.word_pos.to_string(),
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&config_hash(&self.config));
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (sec, name, t) in &self.tensors {
            out.push(*sec as u8);
            let nb = name.as_bytes();
            if nb.len() > usize::from(u16::MAX) || t.shape().len() > 255 {
                return Err(Error::Checkpoint(format!("tensor {name} cannot be encoded")));
            }
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = sha256(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 40 || bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if sha256(body) != digest {
            return Err(bad("checksum mismatch (file truncated or corrupted)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let stored_hash = r.take(32)?;
        if stored_hash != config_hash(&header.config) {
            return Err(bad("config hash does not match the stored configuration"));
        }
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let sec = match r.take(1)?[0] {
                0 => Section::Param,
                1 => Section::AdamM,
                2 => Section::AdamV,
                s => return Err(Error::Checkpoint(format!("unknown section {s}"))),
            };
            let nlen = usize::from(u16::from_le_bytes(r.take(2)?.try_into().expect("2")));
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            let rank = usize::from(r.take(1)?[0]);
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take(8)?.try_into().expect("8")) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                .collect();
            tensors.push((sec, name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after tensor records"));
        }
        let rng = match header.rng {
            Some(j) => Some(RngState {
                seed: j.seed.try_into().map_err(|_| bad("rng seed must be 32 bytes"))?,
                stream: j.stream,
                word_pos: j.word_pos.parse().map_err(|_| bad("rng word position"))?,
            }),
            None => None,
        };
        Ok(Self {
            config: header.config,
            phase: header.phase,
            epoch: header.epoch,
            adam_step: header.adam_step,
            rng,
            tensors,
        })
    }

    /// Writes via a temporary file and rename so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
}
