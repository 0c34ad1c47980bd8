//! Synthetic bouncing-square sequences, the WSFT tensor file format, and
//! deterministic batching.
//!
//! WSFT layout (all integers little-endian):
//!
//! ```text
//! "WSFT" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | rank u8 | rank x u32 dims | payload
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::take_frames;
use crate::tensor::{DType, Element, Tensor};

pub const WSFT_MAGIC: [u8; 4] = *b"WSFT";
pub const WSFT_VERSION: u8 = 1;

/// Where sequences come from: a directory with `train.wsft`, `val.wsft`
/// and `test.wsft`, or the synthetic generator.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seq_len: usize,
    pub n_objects: usize,
    /// Square side in pixels; 0 picks `max(2, min(H, W) / 4)`.
    pub object_size: usize,
    pub seed: u64,
}

impl DataConfig {
    pub fn for_model(m: &ModelConfig) -> Self {
        DataConfig {
            data_dir: None,
            n_train: 16,
            n_val: 8,
            n_test: 8,
            seq_len: m.t_in + m.t_out,
            n_objects: 2,
            object_size: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

/// Loads one split as `(N, T, C, H, W)`: from `<data_dir>/<split>.wsft`
/// when a directory is configured, otherwise generated.
pub fn load_split<T: Element>(data: &DataConfig, model: &ModelConfig, split: Split) -> Result<Tensor<T>> {
    if let Some(dir) = &data.data_dir {
        let t = load_tensor(&dir.join(format!("{}.wsft", split.name())))?.into_dtype::<T>();
        let s = t.shape();
        let want = [model.channels, model.height, model.width];
        if s.len() != 5 || s[2..] != want {
            return Err(Error::shape("dataset", s, &[&[0, data.seq_len][..], &want[..]].concat()));
        }
        return Ok(t);
    }
    if model.channels != 1 {
        return Err(Error::InvalidArgument(format!(
            "the synthetic generator produces 1 channel, the model expects {}",
            model.channels
        )));
    }
    let n = match split {
        Split::Train => data.n_train,
        Split::Val => data.n_val,
        Split::Test => data.n_test,
    };
    let size = if data.object_size == 0 {
        default_object_size(model.height, model.width)
    } else {
        data.object_size
    };
    MovingShapes {
        seed: data.seed.wrapping_mul(3).wrapping_add(split.index()),
        n_sequences: n,
        frames: data.seq_len,
        height: model.height,
        width: model.width,
        n_objects: data.n_objects,
        size,
    }
    .generate()
}

pub fn default_object_size(h: usize, w: usize) -> usize {
    (h.min(w) / 4).max(2)
}

/// An axis-aligned square moving with integer velocity and reflecting off
/// the frame borders.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MovingObject {
    /// Top-left corner.
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub size: usize,
}

fn reflect(pos: i64, vel: i64, bound: i64) -> (i64, i64) {
    let next = pos + vel;
    if next < 0 {
        ((-next).min(bound), -vel)
    } else if next > bound {
        ((2 * bound - next).max(0), -vel)
    } else {
        (next, vel)
    }
}

impl MovingObject {
    /// Advances one frame inside an `h x w` canvas.
    pub fn step(&mut self, h: usize, w: usize) {
        let (bx, by) = ((w - self.size) as i64, (h - self.size) as i64);
        (self.x, self.vx) = reflect(self.x, self.vx, bx);
        (self.y, self.vy) = reflect(self.y, self.vy, by);
    }

    fn draw<T: Element>(&self, frame: &mut [T], w: usize) {
        for i in 0..self.size {
            let row = (self.y as usize + i) * w + self.x as usize;
            frame[row..row + self.size].iter_mut().for_each(|v| *v = T::one());
        }
    }
}

/// Generator of `(N, T, 1, H, W)` sequences of bouncing bright squares.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MovingShapes {
    pub seed: u64,
    pub n_sequences: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_objects: usize,
    pub size: usize,
}

impl MovingShapes {
    pub fn generate<T: Element>(&self) -> Result<Tensor<T>> {
        let (h, w, size) = (self.height, self.width, self.size);
        if size == 0 || size >= h.min(w) {
            return Err(Error::InvalidArgument(format!(
                "object size {size} must be in 1..{} for a {h}x{w} frame",
                h.min(w)
            )));
        }
        if self.frames < 2 || self.n_sequences == 0 {
            return Err(Error::InvalidArgument(format!(
                "need at least one sequence of two frames, got {} x {}",
                self.n_sequences, self.frames
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let plane = h * w;
        let mut data = vec![T::zero(); self.n_sequences * self.frames * plane];
        for seq in data.chunks_mut(self.frames * plane) {
            let mut objects: Vec<MovingObject> = (0..self.n_objects)
                .map(|_| {
                    let (vx, vy) = loop {
                        let v = (rng.random_range(-2..=2), rng.random_range(-2..=2));
                        if v != (0, 0) {
                            break v;
                        }
                    };
                    MovingObject {
                        x: rng.random_range(0..=(w - size) as i64),
                        y: rng.random_range(0..=(h - size) as i64),
                        vx,
                        vy,
                        size,
                    }
                })
                .collect();
            for frame in seq.chunks_mut(plane) {
                for o in &mut objects {
                    o.draw(frame, w);
                    o.step(h, w);
                }
            }
        }
        Tensor::from_vec(&[self.n_sequences, self.frames, 1, h, w], data)
    }
}

/// Convenience wrapper with the default square size.
pub fn generate_moving_shapes<T: Element>(
    seed: u64,
    n_sequences: usize,
    frames: usize,
    height: usize,
    width: usize,
    n_objects: usize,
) -> Result<Tensor<T>> {
    MovingShapes {
        seed,
        n_sequences,
        frames,
        height,
        width,
        n_objects,
        size: default_object_size(height, width),
    }
    .generate()
}

/// A tensor of either supported dtype, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding if the stored dtype is wider.
    pub fn into_dtype<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Serializes a tensor in WSFT layout.
pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + t.len() * T::DTYPE.size());
    out.extend_from_slice(&WSFT_MAGIC);
    out.push(WSFT_VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn need(bytes: &[u8], n: usize) -> Result<()> {
    if bytes.len() < n {
        return Err(Error::Truncated {
            expected: n,
            got: bytes.len(),
        });
    }
    Ok(())
}

fn decode_as<T: Element>(shape: &[usize], payload: &[u8]) -> Result<Tensor<T>> {
    let data = payload.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

/// Parses one WSFT record from the front of `bytes`; returns the tensor and
/// the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != WSFT_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    need(bytes, 7)?;
    if bytes[4] != WSFT_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5]).ok_or(Error::UnsupportedDtype(bytes[5]))?;
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    need(bytes, header)?;
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let end = header + count * dtype.size();
    need(bytes, end)?;
    let payload = &bytes[header..end];
    let t = match dtype {
        DType::F32 => AnyTensor::F32(decode_as(&shape, payload)?),
        DType::F64 => AnyTensor::F64(decode_as(&shape, payload)?),
    };
    Ok((t, end))
}

pub fn save_tensor<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::InvalidArgument(format!(
            "{}: {} trailing bytes after the tensor",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

/// Input and target windows of `B` sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch<T: Element> {
    /// `(B, T_in, C, H, W)`
    pub inputs: Tensor<T>,
    /// `(B, T_out, C, H, W)`
    pub targets: Tensor<T>,
    /// Dataset rows in batch order.
    pub indices: Vec<usize>,
}

/// Sequence order for `epoch`; a pure function of `(shuffle_seed, epoch)`.
pub fn epoch_order(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let seed = shuffle_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Number of batches per epoch, counting a partial final batch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Gathers rows `indices` of an `(N, T, C, H, W)` dataset and splits them
/// into the first `t_in` and following `t_out` frames.
pub fn gather_batch<T: Element>(dataset: &Tensor<T>, indices: &[usize], t_in: usize, t_out: usize) -> Result<SequenceBatch<T>> {
    let s = dataset.shape();
    if s.len() != 5 {
        return Err(Error::InvalidArgument(format!("dataset must be (N, T, C, H, W), got {s:?}")));
    }
    if t_in + t_out > s[1] {
        return Err(Error::InvalidArgument(format!(
            "window {t_in} + {t_out} frames is longer than the {}-frame sequences",
            s[1]
        )));
    }
    let row = dataset.len() / s[0];
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        if i >= s[0] {
            return Err(Error::InvalidArgument(format!("sequence {i} out of range ({} stored)", s[0])));
        }
        data.extend_from_slice(&dataset.data()[i * row..(i + 1) * row]);
    }
    let mut shape = s.to_vec();
    shape[0] = indices.len();
    let picked = Tensor::from_vec(&shape, data)?;
    Ok(SequenceBatch {
        inputs: take_frames(&picked, 0, t_in)?,
        targets: take_frames(&picked, t_in, t_out)?,
        indices: indices.to_vec(),
    })
}

/// All batches of one epoch in delivery order; the partial final batch is
/// kept.
pub fn make_batches<T: Element>(
    dataset: &Tensor<T>,
    batch_size: usize,
    t_in: usize,
    t_out: usize,
    shuffle_seed: Option<u64>,
    epoch: usize,
) -> Result<Vec<SequenceBatch<T>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let n = dataset.shape().first().copied().unwrap_or(0);
    let order = match shuffle_seed {
        Some(seed) => epoch_order(n, seed, epoch),
        None => (0..n).collect(),
    };
    order
        .chunks(batch_size)
        .map(|idx| gather_batch(dataset, idx, t_in, t_out))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_binary() {
        let a = generate_moving_shapes::<f32>(5, 3, 6, 16, 16, 2).unwrap();
        let b = generate_moving_shapes::<f32>(5, 3, 6, 16, 16, 2).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v == 0.0 || v == 1.0));
        for frame in a.data().chunks(256) {
            assert_eq!(frame.iter().cloned().fold(f32::MIN, f32::max), 1.0);
            assert_eq!(frame.iter().cloned().fold(f32::MAX, f32::min), 0.0);
        }
        assert_ne!(a, generate_moving_shapes::<f32>(6, 3, 6, 16, 16, 2).unwrap());
    }

    #[test]
    fn bounce_at_right_wall() {
        let mut o = MovingObject {
            x: 12,
            y: 5,
            vx: 1,
            vy: 0,
            size: 4,
        };
        o.step(16, 16);
        assert_eq!((o.x, o.y, o.vx, o.vy), (11, 5, -1, 0));
        let mut o = MovingObject { x: 0, y: 0, vx: -2, vy: 2, size: 4 };
        o.step(16, 16);
        assert_eq!((o.x, o.y, o.vx, o.vy), (2, 2, 2, 2));
    }

    #[test]
    fn degenerate_geometry_rejected() {
        let g = MovingShapes {
            seed: 0,
            n_sequences: 1,
            frames: 4,
            height: 8,
            width: 8,
            n_objects: 1,
            size: 8,
        };
        assert!(g.generate::<f32>().is_err());
        assert!(generate_moving_shapes::<f32>(0, 1, 1, 8, 8, 1).is_err());
    }

    #[test]
    fn header_bytes() {
        let t = Tensor::<f32>::zeros(&[2, 3]);
        let bytes = encode_tensor(&t);
        assert_eq!(
            &bytes[..15],
            &[0x57, 0x53, 0x46, 0x54, 1, 1, 2, 2, 0, 0, 0, 3, 0, 0, 0]
        );
        assert_eq!(bytes.len(), 15 + 24);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let t = Tensor::<f64>::normal(&[2, 2], 0.0, 1.0, 0).unwrap();
        let good = encode_tensor(&t);
        let (back, used) = decode_tensor(&good).unwrap();
        assert_eq!(back, AnyTensor::F64(t));
        assert_eq!(used, good.len());

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_tensor(&bad), Err(Error::BadMagic(_))));
        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnsupportedVersion(9))));
        let mut bad = good.clone();
        bad[5] = 3;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnsupportedDtype(3))));
        assert!(matches!(decode_tensor(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode_tensor(&good[..9]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn batch_counts_and_windows() {
        let ds = Tensor::<f32>::from_vec(&[100, 20, 1, 1, 1], (0..2000).map(|v| v as f32).collect()).unwrap();
        let batches = make_batches(&ds, 16, 10, 10, Some(1), 0).unwrap();
        assert_eq!(batches.len(), 7);
        assert_eq!(batches[6].inputs.shape()[0], 4);
        let again = make_batches(&ds, 16, 10, 10, Some(1), 0).unwrap();
        assert_eq!(batches, again);

        let b = &make_batches(&ds, 1, 10, 10, None, 0).unwrap()[3];
        let base = 3.0 * 20.0;
        assert_eq!(b.inputs.data(), (0..10).map(|i| base + i as f32).collect::<Vec<_>>());
        assert_eq!(b.targets.data(), (10..20).map(|i| base + i as f32).collect::<Vec<_>>());
        assert!(make_batches(&ds, 4, 15, 10, None, 0).is_err());
    }
}
