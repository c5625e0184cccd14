//! Event streams, voxelization and visual augmentation.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::SpikeTensor;

pub const EVENT_MAGIC: [u8; 4] = *b"AVEV";
pub const EVENT_VERSION: u16 = 1;
const RECORD_LEN: usize = 13;

/// Side of the centered square the raw sensor frame is cropped to.
pub const SENSOR_CROP: usize = 96;
/// Side of the (random or centered) training crop.
pub const TRAIN_CROP: usize = 88;
/// Side of the grid fed to the network.
pub const NETWORK_SIDE: usize = 44;
pub const FLIP_PROB: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 1 = ON, 0 = OFF.
    pub p: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: usize,
    height: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 || width > usize::from(u16::MAX) || height > usize::from(u16::MAX) {
            return Err(Error::Format(format!("bad sensor size {width}x{height}")));
        }
        for (i, e) in events.iter().enumerate() {
            if usize::from(e.x) >= width || usize::from(e.y) >= height {
                return Err(Error::Format(format!(
                    "event {i} at ({}, {}) outside {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.p > 1 {
                return Err(Error::Format(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && events[i - 1].t > e.t {
                return Err(Error::Format(format!("event {i} has a decreasing timestamp")));
            }
        }
        Ok(Self { events, width, height })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// First and last timestamps.
    pub fn span(&self) -> Option<(u64, u64)> {
        Some((self.events.first()?.t, self.events.last()?.t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + RECORD_LEN * self.events.len());
        out.extend_from_slice(&EVENT_MAGIC);
        out.extend_from_slice(&EVENT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.events.len() as u32).to_le_bytes());
        for e in &self.events {
            out.extend_from_slice(&e.t.to_le_bytes());
            out.extend_from_slice(&e.x.to_le_bytes());
            out.extend_from_slice(&e.y.to_le_bytes());
            out.push(e.p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != EVENT_MAGIC {
            return Err(Error::Format("missing event file header".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let version = u16_at(4);
        if version != EVENT_VERSION {
            return Err(Error::Format(format!("unsupported event file version {version}")));
        }
        let width = usize::from(u16_at(6));
        let height = usize::from(u16_at(8));
        let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() != count * RECORD_LEN {
            return Err(Error::Format(format!(
                "header announces {count} events, body holds {} bytes",
                body.len()
            )));
        }
        let events = body
            .chunks_exact(RECORD_LEN)
            .map(|r| Event {
                t: u64::from_le_bytes(r[..8].try_into().expect("8 bytes")),
                x: u16::from_le_bytes([r[8], r[9]]),
                y: u16::from_le_bytes([r[10], r[11]]),
                p: r[12],
            })
            .collect();
        Self::new(events, width, height)
    }

    /// CSV form: a `# width=W height=H` line, a column header, then one event per line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# width={} height={}\ntimestamp_us,x,y,polarity\n", self.width, self.height);
        for e in &self.events {
            s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
        }
        s
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::Format("empty CSV".into()))??;
        let mut dims = (None, None);
        for tok in head.trim_start_matches('#').split_whitespace() {
            if let Some(v) = tok.strip_prefix("width=") {
                dims.0 = v.parse::<usize>().ok();
            } else if let Some(v) = tok.strip_prefix("height=") {
                dims.1 = v.parse::<usize>().ok();
            }
        }
        let (Some(width), Some(height)) = dims else {
            return Err(Error::Format("CSV line 1 must be `# width=W height=H`".into()));
        };
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with("timestamp") {
                continue;
            }
            let bad = || Error::Format(format!("CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad());
            }
            events.push(Event {
                t: f[0].parse().map_err(|_| bad())?,
                x: f[1].parse().map_err(|_| bad())?,
                y: f[2].parse().map_err(|_| bad())?,
                p: f[3].parse().map_err(|_| bad())?,
            });
        }
        Self::new(events, width, height)
    }

    /// Reads the binary format, or CSV when the file has a `.csv` extension.
    pub fn read(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            Self::from_csv(std::fs::File::open(path)?)
        } else {
            Self::from_bytes(&std::fs::read(path)?)
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            f.write_all(self.to_csv().as_bytes())?;
        } else {
            f.write_all(&self.to_bytes())?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Binary occupancy grid `[T, 2, H, W]`, channel 0 = OFF, channel 1 = ON.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventVoxelGrid {
    pub grid: SpikeTensor,
}

impl EventVoxelGrid {
    pub fn steps(&self) -> usize {
        self.grid.timesteps()
    }

    pub fn height(&self) -> usize {
        self.grid.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.grid.shape()[3]
    }
}

/// Bins `ev` into `steps` equal slices of `[t_first, t_last]`.
pub fn voxelize(ev: &EventStream, steps: usize, height: usize, width: usize) -> Result<EventVoxelGrid> {
    let (t0, t1) = ev
        .span()
        .ok_or_else(|| Error::EmptyInput("event stream has no events".into()))?;
    voxelize_window(ev, steps, height, width, t0, t1)
}

/// Bins `ev` into `steps` equal slices of the fixed window `[t0, t1]`.
/// Events outside the window are dropped. The sensor frame is max-pooled down
/// to `height × width`, which must divide it.
pub fn voxelize_window(
    ev: &EventStream,
    steps: usize,
    height: usize,
    width: usize,
    t0: u64,
    t1: u64,
) -> Result<EventVoxelGrid> {
    if ev.is_empty() {
        return Err(Error::EmptyInput("event stream has no events".into()));
    }
    if steps == 0 || t1 < t0 {
        return Err(Error::Config(format!("bad voxel window: {steps} bins over [{t0}, {t1}]")));
    }
    if height == 0 || width == 0 || ev.height % height != 0 || ev.width % width != 0 {
        return Err(Error::shape(
            "voxelize target must divide sensor",
            &[ev.height, ev.width],
            &[height, width],
        ));
    }
    let (fy, fx) = (ev.height / height, ev.width / width);
    let mut grid = SpikeTensor::zeros(&[steps, 2, height, width]);
    let span = u128::from(t1 - t0);
    for e in ev.events.iter().filter(|e| e.t >= t0 && e.t <= t1) {
        let bin = if span == 0 {
            0
        } else {
            ((u128::from(e.t - t0) * steps as u128 / span) as usize).min(steps - 1)
        };
        let idx = ((bin * 2 + usize::from(e.p)) * height + usize::from(e.y) / fy) * width + usize::from(e.x) / fx;
        grid.set(idx, true);
    }
    Ok(EventVoxelGrid { grid })
}

/// Crops `side × side` at `(top, left)`, optionally mirrors horizontally, then
/// max-pools to `out × out`.
pub fn crop_flip_pool(
    g: &EventVoxelGrid,
    top: usize,
    left: usize,
    side: usize,
    flip: bool,
    out: usize,
) -> Result<EventVoxelGrid> {
    let (h, w) = (g.height(), g.width());
    if top + side > h || left + side > w {
        return Err(Error::shape("crop exceeds grid", &[h, w], &[top + side, left + side]));
    }
    if out == 0 || side % out != 0 {
        return Err(Error::shape("pool target must divide crop", &[side], &[out]));
    }
    let f = side / out;
    let planes = g.steps() * 2;
    let mut res = SpikeTensor::zeros(&[g.steps(), 2, out, out]);
    let src = g.grid.data();
    for plane in 0..planes {
        for y in 0..side {
            let row = &src[(plane * h + top + y) * w + left..][..side];
            for (x, &v) in row.iter().enumerate() {
                if v == 1 {
                    let xx = if flip { side - 1 - x } else { x };
                    res.set((plane * out + y / f) * out + xx / f, true);
                }
            }
        }
    }
    Ok(EventVoxelGrid { grid: res })
}

/// Train: random crop plus horizontal flip with probability one half.
/// Eval: centered crop. Both then pool to the network resolution.
pub fn augment_visual<R: Rng + ?Sized>(g: &EventVoxelGrid, rng: &mut R, train: bool) -> Result<EventVoxelGrid> {
    let (h, w) = (g.height(), g.width());
    if h < TRAIN_CROP || w < TRAIN_CROP {
        return Err(Error::shape("augment_visual input smaller than crop", &[h, w], &[TRAIN_CROP, TRAIN_CROP]));
    }
    let (top, left, flip) = if train {
        (
            rng.gen_range(0..=h - TRAIN_CROP),
            rng.gen_range(0..=w - TRAIN_CROP),
            rng.gen_bool(FLIP_PROB),
        )
    } else {
        ((h - TRAIN_CROP) / 2, (w - TRAIN_CROP) / 2, false)
    };
    crop_flip_pool(g, top, left, TRAIN_CROP, flip, NETWORK_SIDE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ev(t: u64, x: u16, y: u16, p: u8) -> Event {
        Event { t, x, y, p }
    }

    #[test]
    fn binning_examples() {
        let s = EventStream::new(vec![ev(100, 0, 0, 1), ev(150, 1, 1, 0), ev(200, 1, 1, 1)], 2, 2).unwrap();
        let g = voxelize(&s, 28, 2, 2).unwrap();
        let on = |t: usize, c: usize, y: usize, x: usize| g.grid.data()[((t * 2 + c) * 2 + y) * 2 + x];
        assert_eq!(on(0, 1, 0, 0), 1);
        assert_eq!(on(14, 0, 1, 1), 1);
        assert_eq!(on(27, 1, 1, 1), 1);
        assert_eq!(g.grid.count_ones(), 3);
    }

    #[test]
    fn occupancy_is_binary() {
        let s = EventStream::new(vec![ev(0, 0, 0, 1), ev(0, 0, 0, 1), ev(5, 0, 0, 1)], 1, 1).unwrap();
        let g = voxelize_window(&s, 1, 1, 1, 0, 10).unwrap();
        assert_eq!(g.grid.data(), &[0, 1]);
    }

    #[test]
    fn empty_stream_rejected() {
        let s = EventStream::new(vec![], 4, 4).unwrap();
        assert!(matches!(voxelize(&s, 4, 4, 4), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn stream_invariants() {
        assert!(EventStream::new(vec![ev(0, 4, 0, 0)], 4, 4).is_err());
        assert!(EventStream::new(vec![ev(5, 0, 0, 0), ev(4, 0, 0, 0)], 4, 4).is_err());
        assert!(EventStream::new(vec![ev(5, 0, 0, 2)], 4, 4).is_err());
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let s = EventStream::new(vec![ev(1, 3, 2, 1), ev(7, 0, 0, 0)], 4, 3).unwrap();
        let b = s.to_bytes();
        assert_eq!(b.len(), 16 + 2 * 13);
        assert_eq!(&b[..4], b"AVEV");
        assert_eq!(EventStream::from_bytes(&b).unwrap(), s);
        assert_eq!(EventStream::from_csv(s.to_csv().as_bytes()).unwrap(), s);
        assert!(EventStream::from_bytes(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn spatial_pooling_is_max() {
        let s = EventStream::new(vec![ev(0, 3, 3, 1)], 4, 4).unwrap();
        let g = voxelize_window(&s, 1, 2, 2, 0, 1).unwrap();
        assert_eq!(g.grid.data(), &[0, 0, 0, 0, 0, 0, 0, 1]);
        assert!(voxelize_window(&s, 1, 3, 3, 0, 1).is_err());
    }

    fn random_grid(seed: u64) -> EventVoxelGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = SpikeTensor::zeros(&[2, 2, 96, 96]);
        for i in 0..g.data().len() {
            if rng.gen_bool(0.05) {
                g.set(i, true);
            }
        }
        EventVoxelGrid { grid: g }
    }

    #[test]
    fn eval_augmentation_is_deterministic() {
        let g = random_grid(1);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        let a = augment_visual(&g, &mut r1, false).unwrap();
        assert_eq!(a, augment_visual(&g, &mut r2, false).unwrap());
        assert_eq!(a.grid.shape(), &[2, 2, 44, 44]);
    }

    #[test]
    fn double_flip_is_identity() {
        let g = random_grid(2);
        let once = crop_flip_pool(&g, 0, 0, 96, true, 96).unwrap();
        assert_ne!(once, g);
        assert_eq!(crop_flip_pool(&once, 0, 0, 96, true, 96).unwrap(), g);
    }

    #[test]
    fn seeded_train_crops_reproduce() {
        let g = random_grid(3);
        let a = augment_visual(&g, &mut ChaCha8Rng::seed_from_u64(5), true).unwrap();
        let b = augment_visual(&g, &mut ChaCha8Rng::seed_from_u64(5), true).unwrap();
        assert_eq!(a, b);
        let small = EventVoxelGrid {
            grid: SpikeTensor::zeros(&[1, 2, 80, 80]),
        };
        assert!(augment_visual(&small, &mut ChaCha8Rng::seed_from_u64(0), false).is_err());
    }
}
