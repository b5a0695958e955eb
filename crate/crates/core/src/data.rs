//! Seeded samplers, minibatch iteration and IDX ingestion.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SwissRollVariant {
    Planar,
    Ambient3d,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetKind {
    SwissRoll(SwissRollVariant),
    /// `components` isotropic Gaussians with equal weights, means evenly spaced on
    /// a circle of radius `radius`; the per-component std is the dataset noise.
    GaussianMixture { components: usize, radius: f64 },
    /// One-dimensional uniform distribution on `[0, 1]`.
    Uniform1d,
    Idx(String),
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::SwissRoll(SwissRollVariant::Planar) => "swiss-roll-2d",
            DatasetKind::SwissRoll(SwissRollVariant::Ambient3d) => "swiss-roll-3d",
            DatasetKind::GaussianMixture { .. } => "gaussian-mixture",
            DatasetKind::Uniform1d => "uniform-1d",
            DatasetKind::Idx(_) => "idx-file",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    /// Rescale so the largest absolute coordinate is 1.
    pub normalize: bool,
}

impl DatasetSpec {
    pub fn swiss_roll_3d(n: usize, seed: u64) -> Self {
        DatasetSpec {
            kind: DatasetKind::SwissRoll(SwissRollVariant::Ambient3d),
            n,
            noise: 0.0,
            seed,
            normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Invalid("dataset sample count must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Invalid(format!("dataset noise must be ≥ 0, got {}", self.noise)));
        }
        if let DatasetKind::GaussianMixture { components, .. } = self.kind {
            if components == 0 {
                return Err(Error::Invalid("mixture needs at least one component".into()));
            }
        }
        Ok(())
    }

    /// Draws the dataset. IDX files ignore `n`, `noise` and `seed` except that `n`
    /// caps the number of rows read.
    pub fn generate<T: Scalar>(&self) -> Result<Tensor<T>> {
        self.validate()?;
        let data = match &self.kind {
            DatasetKind::SwissRoll(v) => sample_swiss_roll(self.n, *v, self.noise, self.seed),
            DatasetKind::GaussianMixture { components, radius } => {
                sample_gaussian_mixture(self.n, *components, *radius, self.noise, self.seed).0
            }
            DatasetKind::Uniform1d => sample_uniform_1d(self.n, self.seed),
            DatasetKind::Idx(path) => {
                let t = load_idx::<T>(path)?;
                let n = self.n.min(t.rows());
                return Ok(maybe_normalize(t.slice_rows(0, n), self.normalize));
            }
        };
        Ok(maybe_normalize(data, self.normalize))
    }

    /// Ambient dimension of generated samples, when knowable without I/O.
    pub fn dim(&self) -> Option<usize> {
        match self.kind {
            DatasetKind::SwissRoll(SwissRollVariant::Planar) => Some(2),
            DatasetKind::SwissRoll(SwissRollVariant::Ambient3d) => Some(3),
            DatasetKind::GaussianMixture { .. } => Some(2),
            DatasetKind::Uniform1d => Some(1),
            DatasetKind::Idx(_) => None,
        }
    }
}

fn maybe_normalize<T: Scalar>(t: Tensor<T>, on: bool) -> Tensor<T> {
    if !on {
        return t;
    }
    let m = t.data().iter().fold(T::zero(), |a, &v| a.max(v.abs()));
    if m > T::zero() {
        t.map(|v| v / m)
    } else {
        t
    }
}

/// Swiss-roll point for curve parameter `u ∈ [0,1]` and height `h`.
///
/// `t = 1.5π(1 + 2u)`, planar point `(t cos t, t sin t) / 4.5π`; the 3-D variant
/// inserts `h` as the middle coordinate.
pub fn swiss_roll_point(u: f64, h: f64, variant: SwissRollVariant) -> Vec<f64> {
    let t = 1.5 * PI * (1.0 + 2.0 * u);
    let s = 4.5 * PI;
    let (a, b) = (t * t.cos() / s, t * t.sin() / s);
    match variant {
        SwissRollVariant::Planar => vec![a, b],
        SwissRollVariant::Ambient3d => vec![a, h, b],
    }
}

pub fn sample_swiss_roll<T: Scalar>(
    n: usize,
    variant: SwissRollVariant,
    noise: f64,
    seed: u64,
) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = if variant == SwissRollVariant::Planar { 2 } else { 3 };
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let u: f64 = rng.random();
        let h: f64 = if variant == SwissRollVariant::Ambient3d {
            rng.random_range(-1.0..=1.0)
        } else {
            0.0
        };
        for c in swiss_roll_point(u, h, variant) {
            let e = if noise > 0.0 { noise * standard_normal(&mut rng) } else { 0.0 };
            data.push(T::from_f64(c + e));
        }
    }
    Tensor::new(vec![n, dim], data).expect("sized")
}

pub fn sample_uniform_1d<T: Scalar>(n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n).map(|_| T::from_f64(rng.random())).collect();
    Tensor::new(vec![n, 1], data).expect("sized")
}

/// Returns the samples and the component index of each sample.
pub fn sample_gaussian_mixture<T: Scalar>(
    n: usize,
    components: usize,
    radius: f64,
    std: f64,
    seed: u64,
) -> (Tensor<T>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..components);
        let angle = 2.0 * PI * k as f64 / components as f64;
        data.push(T::from_f64(radius * angle.cos() + std * standard_normal(&mut rng)));
        data.push(T::from_f64(radius * angle.sin() + std * standard_normal(&mut rng)));
        labels.push(k);
    }
    (Tensor::new(vec![n, 2], data).expect("sized"), labels)
}

/// One standard-normal draw by the Box–Muller transform (cosine branch only).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 1 − U keeps the log argument in (0, 1]
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub fn normal_tensor<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    let data = (0..rows * cols)
        .map(|_| T::from_f64(standard_normal(rng)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("sized")
}

/// `n × dim` i.i.d. standard-normal prior samples.
pub fn sample_prior<T: Scalar>(n: usize, dim: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_tensor(&mut rng, n, dim)
}

const IDX_UBYTE: u8 = 0x08;

/// Parses an unsigned-byte IDX image or label file; bytes are scaled into `[0,1]`.
///
/// Rank-3 files `[n, rows, cols]` become `[n × rows·cols]`; rank-1 files `[n]` become `[n × 1]`.
pub fn parse_idx<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 4 {
        return Err(Error::IdxMagic {
            offset: bytes.len(),
            detail: format!("file is {} bytes, shorter than the 4-byte magic", bytes.len()),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        let offset = if bytes[0] != 0 { 0 } else { 1 };
        return Err(Error::IdxMagic {
            offset,
            detail: format!("expected 0x00, found 0x{:02x}", bytes[offset]),
        });
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::IdxMagic {
            offset: 2,
            detail: format!("data type 0x{:02x} unsupported, only unsigned byte (0x08)", bytes[2]),
        });
    }
    let rank = bytes[3];
    if rank != 1 && rank != 3 {
        return Err(Error::IdxRank { rank });
    }
    let header_len = 4 + 4 * rank as usize;
    if bytes.len() < header_len {
        return Err(Error::IdxTruncated {
            offset: 4,
            expected: 4 * rank as usize,
            actual: bytes.len() - 4,
        });
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    if payload.len() < count {
        return Err(Error::IdxTruncated {
            offset: header_len,
            expected: count,
            actual: payload.len(),
        });
    }
    let n = dims[0];
    let width = if rank == 3 { dims[1] * dims[2] } else { 1 };
    let data = payload[..count]
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0))
        .collect();
    Tensor::new(vec![n, width], data)
}

pub fn load_idx<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes)
}

/// Serializes raw bytes as an unsigned-byte IDX file with the given dimensions.
pub fn encode_idx(dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = vec![0, 0, IDX_UBYTE, dims.len() as u8];
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

/// Epoch-wise shuffled minibatch indices with drop-last semantics.
///
/// The permutation for epoch `e` depends only on `(seed, e)`, so the iterator
/// state is fully described by [`BatchIterator::position`].
#[derive(Clone, Debug)]
pub struct BatchIterator {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    perm: Vec<usize>,
}

impl BatchIterator {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 || batch > n {
            return Err(Error::Invalid(format!(
                "batch size {batch} must be in 1..={n} (dataset size)"
            )));
        }
        let mut it = BatchIterator {
            n,
            batch,
            seed,
            epoch: 0,
            cursor: 0,
            perm: Vec::new(),
        };
        it.perm = it.permutation(0);
        Ok(it)
    }

    fn permutation(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut p: Vec<usize> = (0..self.n).collect();
        p.shuffle(&mut rng);
        p
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    /// `(epoch, index of next sample within the epoch permutation)`.
    pub fn position(&self) -> (u64, usize) {
        (self.epoch, self.cursor)
    }

    pub fn seek(&mut self, epoch: u64, cursor: usize) {
        self.epoch = epoch;
        self.cursor = cursor;
        self.perm = self.permutation(epoch);
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor + self.batch > self.n {
            self.seek(self.epoch + 1, 0);
        }
        let out = self.perm[self.cursor..self.cursor + self.batch].to_vec();
        self.cursor += self.batch;
        out
    }

    pub fn next_batch<T: Scalar>(&mut self, data: &Tensor<T>) -> Tensor<T> {
        data.select_rows(&self.next_indices())
    }
}
