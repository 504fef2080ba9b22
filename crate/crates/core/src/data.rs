//! Dataset ingestion: static-frame replication, event binning, synthetic
//! pattern generation, and the on-disk container format.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "LSDS" | u32 version | u32 sample count | u8 rank | rank x u32 dims
//! | u8 dtype (0 = f32, 1 = u8 binary) | u32 metadata length | metadata UTF-8
//! | samples: payload then u32 label, in order
//! ```
//!
//! Synthesis is driven entirely by the xorshift64* generator, so a seed
//! reproduces container bytes exactly on any platform.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::XorShift64;
use crate::shape_err;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSDS";
pub const VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// static frames
// ---------------------------------------------------------------------------

/// Repeat a `[C,H,W]` image along a new leading timestep axis.
pub fn replicate_static(image: &Tensor, timesteps: usize) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(shape_err!(
            "replicate: expected [C,H,W], got {:?}",
            image.shape()
        ));
    }
    if timesteps == 0 {
        return Err(shape_err!("replicate: timesteps must be >= 1"));
    }
    let mut data = Vec::with_capacity(image.len() * timesteps);
    for _ in 0..timesteps {
        data.extend_from_slice(image.data());
    }
    let mut shape = vec![timesteps];
    shape.extend_from_slice(image.shape());
    Tensor::new(&shape, data)
}

// ---------------------------------------------------------------------------
// event streams
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    /// 0 = OFF, 1 = ON.
    pub polarity: u8,
}

#[derive(Debug, Clone)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub height: usize,
    pub width: usize,
}

impl EventStream {
    pub fn new(mut events: Vec<Event>, height: usize, width: usize) -> Result<Self> {
        for e in &events {
            if (e.x as usize) >= width || (e.y as usize) >= height {
                return Err(Error::Format(format!(
                    "event at ({}, {}) outside sensor {width}x{height}",
                    e.x, e.y
                )));
            }
            if e.polarity > 1 {
                return Err(Error::Format(format!("bad polarity {}", e.polarity)));
            }
        }
        events.sort_by_key(|e| e.t_us);
        Ok(Self {
            events,
            height,
            width,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinMode {
    /// Per-bin per-polarity event counts.
    Count,
    /// Counts clamped to {0, 1}.
    Binary,
}

/// Accumulate an event stream into `[T, 2, H, W]` frames over T
/// equal-duration bins. Bin assignment depends only on the offset from the
/// first event, so shifting every timestamp leaves it unchanged.
pub fn bin_events(stream: &EventStream, timesteps: usize, mode: BinMode) -> Result<Tensor> {
    if stream.events.is_empty() {
        return Err(Error::Format("bin_events: empty event stream".into()));
    }
    if timesteps == 0 {
        return Err(shape_err!("bin_events: timesteps must be >= 1"));
    }
    let t0 = stream.events.first().unwrap().t_us;
    let t1 = stream.events.last().unwrap().t_us;
    let span = t1 - t0 + 1; // half-open bins over [t0, t1]
    let (h, w) = (stream.height, stream.width);
    let mut data = vec![0.0f32; timesteps * 2 * h * w];
    for e in &stream.events {
        let offset = e.t_us - t0;
        let bin = ((offset as u128 * timesteps as u128) / span as u128) as usize;
        let bin = bin.min(timesteps - 1);
        let idx = ((bin * 2 + e.polarity as usize) * h + e.y as usize) * w + e.x as usize;
        match mode {
            BinMode::Count => data[idx] += 1.0,
            BinMode::Binary => data[idx] = 1.0,
        }
    }
    Tensor::new(&[timesteps, 2, h, w], data)
}

// ---------------------------------------------------------------------------
// synthetic datasets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Classes are bar orientations: horizontal, vertical, and the two
    /// diagonals. Exercises the directional attention windows.
    OrientedBars,
    /// Classes are blob sizes at random positions. Exercises the
    /// multi-scale dilation groups.
    MultiScaleBlobs,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "oriented-bars" => Ok(Self::OrientedBars),
            "multi-scale-blobs" => Ok(Self::MultiScaleBlobs),
            _ => Err(Error::Format(format!("unknown synthetic kind `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8Binary,
}

impl Dtype {
    fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8Binary => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8Binary),
            _ => Err(Error::Format(format!("unknown dtype tag {tag}"))),
        }
    }
}

/// In-memory dataset: every sample shares one shape and carries an
/// integer label.
#[derive(Debug)]
pub struct DatasetContainer {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub metadata: String,
    pub samples: Vec<(Vec<f32>, u32)>,
}

impl DatasetContainer {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|(_, l)| *l as usize + 1).max().unwrap_or(0)
    }

    pub fn sample_tensor(&self, i: usize) -> Tensor {
        Tensor::new(&self.shape, self.samples[i].0.clone()).expect("stored samples are valid")
    }

    pub fn label(&self, i: usize) -> usize {
        self.samples[i].1 as usize
    }

    fn validate(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        for (i, (data, _)) in self.samples.iter().enumerate() {
            if data.len() != n {
                return Err(Error::Format(format!(
                    "sample {i} has {} values, shape {:?} needs {n}",
                    data.len(),
                    self.shape
                )));
            }
            if self.dtype == Dtype::U8Binary && data.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Format(format!("sample {i} is not binary")));
            }
        }
        Ok(())
    }
}

fn draw_hbar(img: &mut [f32], size: usize, rng: &mut XorShift64, len: usize, thick: usize) {
    let r0 = rng.below(size - thick + 1);
    let c0 = rng.below(size - len + 1);
    for t in 0..thick {
        for c in 0..len {
            img[(r0 + t) * size + c0 + c] = 1.0;
        }
    }
}

fn draw_vbar(img: &mut [f32], size: usize, rng: &mut XorShift64, len: usize, thick: usize) {
    let r0 = rng.below(size - len + 1);
    let c0 = rng.below(size - thick + 1);
    for r in 0..len {
        for t in 0..thick {
            img[(r0 + r) * size + c0 + t] = 1.0;
        }
    }
}

fn draw_diag(img: &mut [f32], size: usize, rng: &mut XorShift64, len: usize, thick: usize, down: bool) {
    let r0 = rng.below(size - len - thick + 2);
    let c0 = rng.below(size - len + 1);
    for i in 0..len {
        let c = if down { c0 + i } else { c0 + len - 1 - i };
        for t in 0..thick {
            img[(r0 + i + t) * size + c] = 1.0;
        }
    }
}

fn draw_blob(img: &mut [f32], size: usize, rng: &mut XorShift64, side: usize) {
    let r0 = rng.below(size - side + 1);
    let c0 = rng.below(size - side + 1);
    for r in 0..side {
        for c in 0..side {
            img[(r0 + r) * size + c0 + c] = 1.0;
        }
    }
}

/// Deterministic synthetic dataset of binary `[1, size, size]` images.
pub fn synth_dataset(
    kind: SynthKind,
    n_per_class: usize,
    classes: usize,
    size: usize,
    seed: u64,
) -> Result<DatasetContainer> {
    if classes == 0 || n_per_class == 0 {
        return Err(Error::Config("synth: classes and n-per-class must be >= 1".into()));
    }
    if kind == SynthKind::OrientedBars && classes > 4 {
        return Err(Error::Config(
            "synth: oriented-bars supports at most 4 classes (orientations)".into(),
        ));
    }
    if size < 12 {
        return Err(Error::Config("synth: size must be >= 12".into()));
    }
    let mut rng = XorShift64::new(seed);
    let mut samples = Vec::with_capacity(classes * n_per_class);
    for class in 0..classes {
        for _ in 0..n_per_class {
            let mut img = vec![0.0f32; size * size];
            match kind {
                SynthKind::OrientedBars => {
                    // Bar lengths keep the max row/column sum well above
                    // any cross sum plus noise.
                    let len = 12 + rng.below(size.min(16) - 11);
                    let thick = 1 + rng.below(2);
                    match class {
                        0 => draw_hbar(&mut img, size, &mut rng, len, thick),
                        1 => draw_vbar(&mut img, size, &mut rng, len, thick),
                        2 => draw_diag(&mut img, size, &mut rng, len.min(size - thick), thick, true),
                        _ => draw_diag(&mut img, size, &mut rng, len.min(size - thick), thick, false),
                    }
                    // Up to two stray noise pixels.
                    for _ in 0..rng.below(3) {
                        let p = rng.below(size * size);
                        img[p] = 1.0;
                    }
                }
                SynthKind::MultiScaleBlobs => {
                    let side = 2 * (class + 1);
                    draw_blob(&mut img, size, &mut rng, side.min(size));
                    for _ in 0..rng.below(3) {
                        let p = rng.below(size * size);
                        img[p] = 1.0;
                    }
                }
            }
            samples.push((img, class as u32));
        }
    }
    let container = DatasetContainer {
        shape: vec![1, size, size],
        dtype: Dtype::U8Binary,
        metadata: format!(
            "kind={} classes={classes} n_per_class={n_per_class} size={size} seed={seed}",
            match kind {
                SynthKind::OrientedBars => "oriented-bars",
                SynthKind::MultiScaleBlobs => "multi-scale-blobs",
            }
        ),
        samples,
    };
    container.validate()?;
    Ok(container)
}

// ---------------------------------------------------------------------------
// IDX import
// ---------------------------------------------------------------------------

/// Parse an IDX image file (magic 0x00000803, big-endian dims, u8 pixels)
/// and its label companion (magic 0x00000801) into a container with
/// `[1, H, W]` float samples scaled to [0, 1].
pub fn idx_to_container(images: &[u8], labels: &[u8]) -> Result<DatasetContainer> {
    let be32 = |buf: &[u8], off: usize| -> Result<u32> {
        buf.get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format(format!("idx: truncated header at offset {off}")))
    };
    if be32(images, 0)? != 0x0000_0803 {
        return Err(Error::Format("idx: image magic must be 0x00000803".into()));
    }
    if be32(labels, 0)? != 0x0000_0801 {
        return Err(Error::Format("idx: label magic must be 0x00000801".into()));
    }
    let n = be32(images, 4)? as usize;
    let h = be32(images, 8)? as usize;
    let w = be32(images, 12)? as usize;
    if be32(labels, 4)? as usize != n {
        return Err(Error::Format(format!(
            "idx: {} labels for {n} images",
            be32(labels, 4)?
        )));
    }
    let pixels = &images[16..];
    if pixels.len() != n * h * w {
        return Err(Error::Format(format!(
            "idx: expected {} pixel bytes, found {}",
            n * h * w,
            pixels.len()
        )));
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() != n {
        return Err(Error::Format("idx: label payload truncated".into()));
    }
    let samples = (0..n)
        .map(|i| {
            let img = pixels[i * h * w..(i + 1) * h * w]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect();
            (img, label_bytes[i] as u32)
        })
        .collect();
    Ok(DatasetContainer {
        shape: vec![1, h, w],
        dtype: Dtype::F32,
        metadata: format!("source=idx n={n} h={h} w={w}"),
        samples,
    })
}

// ---------------------------------------------------------------------------
// container serialization
// ---------------------------------------------------------------------------

pub fn save_container(data: &DatasetContainer, path: &Path) -> Result<()> {
    data.validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(data.samples.len() as u32).to_le_bytes());
    buf.push(data.shape.len() as u8);
    for &d in &data.shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(data.dtype.tag());
    buf.extend_from_slice(&(data.metadata.len() as u32).to_le_bytes());
    buf.extend_from_slice(data.metadata.as_bytes());
    for (payload, label) in &data.samples {
        match data.dtype {
            Dtype::F32 => {
                for &v in payload {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            Dtype::U8Binary => {
                buf.extend(payload.iter().map(|&v| v as u8));
            }
        }
        buf.extend_from_slice(&label.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_container(path: &Path) -> Result<DatasetContainer> {
    let buf = fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::Format(format!(
                "truncated container: wanted {n} bytes at offset {pos}, have {}",
                buf.len() - *pos
            )));
        }
        let out = &buf[*pos..*pos + n];
        *pos += n;
        Ok(out)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::Format("bad container magic, expected LSDS".into()));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let rank = take(&mut pos, 1)?[0] as usize;
    if rank == 0 || rank > 4 {
        return Err(Error::Format(format!("container rank {rank} outside 1..=4")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
    }
    let dtype = Dtype::from_tag(take(&mut pos, 1)?[0])?;
    let meta_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let metadata = std::str::from_utf8(take(&mut pos, meta_len)?)
        .map_err(|_| Error::Format("container metadata is not UTF-8".into()))?
        .to_string();
    let elems: usize = shape.iter().product();
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let payload: Vec<f32> = match dtype {
            Dtype::F32 => take(&mut pos, 4 * elems)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::U8Binary => {
                let bytes = take(&mut pos, elems)?;
                if let Some(&bad) = bytes.iter().find(|&&b| b > 1) {
                    return Err(Error::Format(format!("non-binary byte {bad} in sample")));
                }
                bytes.iter().map(|&b| b as f32).collect()
            }
        };
        let label = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        samples.push((payload, label));
    }
    if pos != buf.len() {
        return Err(Error::Format(format!(
            "trailing garbage: {} bytes after the last sample",
            buf.len() - pos
        )));
    }
    let container = DatasetContainer {
        shape,
        dtype,
        metadata,
        samples,
    };
    container.validate()?;
    Ok(container)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replicate_frames_are_identical() {
        let img = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let rep = replicate_static(&img, 3).unwrap();
        assert_eq!(rep.shape(), &[3, 1, 2, 2]);
        for t in 0..3 {
            for i in 0..4 {
                assert_eq!(rep.data()[t * 4 + i], img.data()[i]);
            }
        }
        // T=1 is just an unsqueeze.
        let one = replicate_static(&img, 1).unwrap();
        assert_eq!(one.shape(), &[1, 1, 2, 2]);
        assert_eq!(&one.data()[..], img.data());
    }

    #[test]
    fn bin_single_event() {
        let s = EventStream::new(
            vec![Event { t_us: 0, x: 1, y: 2, polarity: 1 }],
            4,
            4,
        )
        .unwrap();
        let t = bin_events(&s, 3, BinMode::Count).unwrap();
        assert_eq!(t.shape(), &[3, 2, 4, 4]);
        assert_eq!(t.at(&[0, 1, 2, 1]), 1.0);
        let total: f32 = t.data().iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn count_mode_conserves_events() {
        let mut rng = XorShift64::new(5);
        let events: Vec<Event> = (0..500)
            .map(|_| Event {
                t_us: rng.below(100_000) as u64,
                x: rng.below(8) as u16,
                y: rng.below(8) as u16,
                polarity: rng.below(2) as u8,
            })
            .collect();
        let s = EventStream::new(events, 8, 8).unwrap();
        let t = bin_events(&s, 7, BinMode::Count).unwrap();
        let total: f32 = t.data().iter().sum();
        assert_eq!(total, 500.0);
    }

    #[test]
    fn binary_mode_clamps_duplicates() {
        let s = EventStream::new(
            vec![
                Event { t_us: 10, x: 0, y: 0, polarity: 0 },
                Event { t_us: 11, x: 0, y: 0, polarity: 0 },
            ],
            2,
            2,
        )
        .unwrap();
        let t = bin_events(&s, 1, BinMode::Binary).unwrap();
        assert_eq!(t.at(&[0, 0, 0, 0]), 1.0);
        assert!(t.is_binary());
    }

    #[test]
    fn binning_is_shift_invariant() {
        let mut rng = XorShift64::new(6);
        let base: Vec<Event> = (0..200)
            .map(|_| Event {
                t_us: rng.below(50_000) as u64,
                x: rng.below(4) as u16,
                y: rng.below(4) as u16,
                polarity: rng.below(2) as u8,
            })
            .collect();
        let shifted: Vec<Event> = base
            .iter()
            .map(|e| Event { t_us: e.t_us + 1_000_000, ..*e })
            .collect();
        let a = bin_events(&EventStream::new(base, 4, 4).unwrap(), 5, BinMode::Count).unwrap();
        let b = bin_events(&EventStream::new(shifted, 4, 4).unwrap(), 5, BinMode::Count).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn empty_stream_errors() {
        let s = EventStream::new(vec![], 2, 2).unwrap();
        assert!(bin_events(&s, 4, BinMode::Count).is_err());
    }

    #[test]
    fn more_bins_than_timestamps_is_fine() {
        let s = EventStream::new(
            vec![Event { t_us: 5, x: 0, y: 0, polarity: 1 }],
            1,
            1,
        )
        .unwrap();
        let t = bin_events(&s, 8, BinMode::Count).unwrap();
        let total: f32 = t.data().iter().sum();
        assert_eq!(total, 1.0);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(SynthKind::OrientedBars, 5, 4, 16, 42).unwrap();
        let b = synth_dataset(SynthKind::OrientedBars, 5, 4, 16, 42).unwrap();
        for ((pa, la), (pb, lb)) in a.samples.iter().zip(&b.samples) {
            assert_eq!(pa, pb);
            assert_eq!(la, lb);
        }
    }

    #[test]
    fn horizontal_bars_have_dominant_row_sums() {
        let ds = synth_dataset(SynthKind::OrientedBars, 50, 1, 16, 9).unwrap();
        for (img, _) in &ds.samples {
            let row_max: f32 = (0..16)
                .map(|r| img[r * 16..(r + 1) * 16].iter().sum::<f32>())
                .fold(0.0, f32::max);
            let col_max: f32 = (0..16)
                .map(|c| (0..16).map(|r| img[r * 16 + c]).sum::<f32>())
                .fold(0.0, f32::max);
            assert!(
                row_max >= 3.0 * col_max,
                "row {row_max} vs col {col_max}"
            );
        }
    }

    #[test]
    fn sample_count_and_labels() {
        let ds = synth_dataset(SynthKind::MultiScaleBlobs, 7, 3, 16, 1).unwrap();
        assert_eq!(ds.len(), 21);
        assert_eq!(ds.num_classes(), 3);
        assert!(ds.samples.iter().all(|(img, _)| img.iter().all(|&v| v == 0.0 || v == 1.0)));
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("lsds-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn idx_conversion_round_trip() {
        // Two 2x3 images with labels 1 and 0, in IDX framing.
        let mut images = Vec::new();
        images.extend_from_slice(&0x0000_0803u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&2u32.to_be_bytes());
        images.extend_from_slice(&3u32.to_be_bytes());
        images.extend_from_slice(&[0, 255, 128, 64, 32, 16, 255, 0, 0, 0, 0, 255]);
        let mut labels = Vec::new();
        labels.extend_from_slice(&0x0000_0801u32.to_be_bytes());
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 0]);
        let ds = idx_to_container(&images, &labels).unwrap();
        assert_eq!(ds.shape, vec![1, 2, 3]);
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.label(1), 0);
        assert!((ds.samples[0].0[1] - 1.0).abs() < 1e-6);
        assert!((ds.samples[0].0[2] - 128.0 / 255.0).abs() < 1e-6);
        // Wrong magic is rejected.
        let mut bad = images.clone();
        bad[3] = 0x04;
        assert!(idx_to_container(&bad, &labels).is_err());
    }

    #[test]
    fn container_round_trip_is_byte_identical() {
        let ds = synth_dataset(SynthKind::OrientedBars, 3, 4, 16, 7).unwrap();
        let p1 = tmp("a.lsds");
        let p2 = tmp("b.lsds");
        save_container(&ds, &p1).unwrap();
        let loaded = load_container(&p1).unwrap();
        save_container(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let p = tmp("c.lsds");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(load_container(&p), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_offset() {
        let ds = synth_dataset(SynthKind::OrientedBars, 3, 2, 16, 7).unwrap();
        let p = tmp("d.lsds");
        save_container(&ds, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
        let err = load_container(&p).unwrap_err();
        assert!(err.to_string().contains("offset"), "{err}");
    }
}
