//! k-means codebooks over frame features and nearest-centroid quantization.
//!
//! Fitting is Lloyd's algorithm from a seeded k-means++ start. The inertia
//! (sum of squared distances to the assigned centroid) is recorded after
//! every assignment step and never increases; clusters that lose all their
//! points are re-seeded at the point farthest from its centroid.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

pub const FEATURE_MAGIC: &[u8; 4] = b"USDF";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"USDC";

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("need at least k={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("k must be at least 1")]
    ZeroClusters,
    #[error("feature dimension must be at least 1")]
    ZeroDim,
    #[error("non-finite feature at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("fewer than k={k} distinct points; cannot place distinct centroids")]
    Degenerate { k: usize },
    #[error("feature dimension {got} does not match codebook dimension {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("matrix data has {got} values, expected {n} x {dim}")]
    Shape { n: usize, dim: usize, got: usize },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    Magic { expected: String, found: String },
    #[error("file truncated or has trailing bytes: {0}")]
    Length(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major `n x dim` matrix of frame features (one row per 20 ms frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n: usize, dim: usize, data: Vec<f32>) -> Result<Self, QuantizerError> {
        if dim == 0 {
            return Err(QuantizerError::ZeroDim);
        }
        if data.len() != n * dim {
            return Err(QuantizerError::Shape { n, dim, got: data.len() });
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, QuantizerError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(QuantizerError::DimMismatch { expected: dim, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Rows `[lo, hi)` as a new matrix.
    pub fn slice_rows(&self, lo: usize, hi: usize) -> FeatureMatrix {
        FeatureMatrix { n: hi - lo, dim: self.dim, data: self.data[lo * self.dim..hi * self.dim].to_vec() }
    }

    fn check_finite(&self) -> Result<(), QuantizerError> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(p) => Err(QuantizerError::NonFinite { row: p / self.dim, col: p % self.dim }),
            None => Ok(()),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), QuantizerError> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&(self.n as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for x in &self.data {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, QuantizerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        cur.magic(FEATURE_MAGIC)?;
        let n = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let data = cur.f32s(n * dim)?;
        cur.finish()?;
        Self::new(n, dim, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), QuantizerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantizerError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// `k` centroids of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    dim: usize,
    centroids: Vec<f64>,
    seed: u64,
}

impl Codebook {
    pub fn new(k: usize, dim: usize, centroids: Vec<f64>, seed: u64) -> Result<Self, QuantizerError> {
        if k == 0 {
            return Err(QuantizerError::ZeroClusters);
        }
        if dim == 0 {
            return Err(QuantizerError::ZeroDim);
        }
        if centroids.len() != k * dim {
            return Err(QuantizerError::Shape { n: k, dim, got: centroids.len() });
        }
        if let Some(p) = centroids.iter().position(|x| !x.is_finite()) {
            return Err(QuantizerError::NonFinite { row: p / dim, col: p % dim });
        }
        Ok(Self { k, dim, centroids, seed })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    /// Nearest centroid by squared Euclidean distance; ties go to the lowest
    /// index.
    pub fn nearest(&self, x: &[f32]) -> (usize, f64) {
        nearest(&self.centroids, self.dim, x)
    }

    /// Centroids rounded to `f32`, one row per centroid.
    pub fn to_features(&self) -> FeatureMatrix {
        let data = self.centroids.iter().map(|&c| c as f32).collect();
        FeatureMatrix { n: self.k, dim: self.dim, data }
    }

    /// Binary layout: `USDC`, u32 k, u32 dim, u64 seed, then `k * dim`
    /// little-endian f32 values.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), QuantizerError> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.centroids.len() * 4);
        for &c in &self.centroids {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, QuantizerError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        cur.magic(CODEBOOK_MAGIC)?;
        let k = cur.u32()? as usize;
        let dim = cur.u32()? as usize;
        let seed = cur.u64()?;
        let data = cur.f32s(k * dim)?;
        cur.finish()?;
        Self::new(k, dim, data.into_iter().map(f64::from).collect(), seed)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), QuantizerError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, QuantizerError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn sq_dist(c: &[f64], x: &[f32]) -> f64 {
    c.iter()
        .zip(x)
        .map(|(&a, &b)| {
            let d = a - f64::from(b);
            d * d
        })
        .sum()
}

fn nearest(centroids: &[f64], dim: usize, x: &[f32]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, c) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Outcome of [`fit_kmeans`].
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub codebook: Codebook,
    pub assignments: Vec<u32>,
    /// Inertia after the initial assignment and after every Lloyd iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("history is never empty")
    }
}

struct Assignment {
    labels: Vec<u32>,
    dists: Vec<f64>,
}

fn assign(features: &FeatureMatrix, centroids: &[f64]) -> Assignment {
    let dim = features.dim;
    let (labels, dists) = (0..features.n)
        .into_par_iter()
        .map(|i| {
            let (j, d) = nearest(centroids, dim, features.row(i));
            (j as u32, d)
        })
        .unzip();
    Assignment { labels, dists }
}

/// Moves the farthest point of a multi-point cluster into every empty
/// cluster, centring the empty cluster on it.
fn reseed_empty(features: &FeatureMatrix, centroids: &mut [f64], k: usize, a: &mut Assignment) {
    let dim = features.dim;
    let mut counts = vec![0usize; k];
    for &l in &a.labels {
        counts[l as usize] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let mut far: Option<(usize, f64)> = None;
        for (i, &d) in a.dists.iter().enumerate() {
            if counts[a.labels[i] as usize] > 1 && far.is_none_or(|(_, fd)| d > fd) {
                far = Some((i, d));
            }
        }
        let Some((p, _)) = far else { break };
        counts[a.labels[p] as usize] -= 1;
        counts[j] = 1;
        a.labels[p] = j as u32;
        a.dists[p] = 0.0;
        for (c, &x) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(features.row(p)) {
            *c = f64::from(x);
        }
    }
}

fn kmeans_pp_init(features: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, QuantizerError> {
    let dim = features.dim;
    let n = features.n;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(features.row(first).iter().map(|&x| f64::from(x)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&centroids[..dim], features.row(i))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(QuantizerError::Degenerate { k });
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d <= 0.0 {
                continue;
            }
            acc += d;
            pick = Some(i);
            if acc > target {
                break;
            }
        }
        let pick = pick.expect("positive total has a positive entry");
        let start = centroids.len();
        centroids.extend(features.row(pick).iter().map(|&x| f64::from(x)));
        let c = &centroids[start..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(c, features.row(i)));
        }
    }
    Ok(centroids)
}

/// Fits a `k`-cluster codebook. Runs at most `max_iters` Lloyd iterations
/// and stops early once assignments no longer change.
pub fn fit_kmeans(
    features: &FeatureMatrix,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansFit, QuantizerError> {
    if k == 0 {
        return Err(QuantizerError::ZeroClusters);
    }
    if features.n < k {
        return Err(QuantizerError::TooFewPoints { n: features.n, k });
    }
    features.check_finite()?;
    let dim = features.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(features, k, &mut rng)?;

    let mut current = assign(features, &centroids);
    reseed_empty(features, &mut centroids, k, &mut current);
    let mut history = vec![current.dists.iter().sum::<f64>()];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iters {
        iterations += 1;
        let mut sums = vec![0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &l) in current.labels.iter().enumerate() {
            let l = l as usize;
            counts[l] += 1;
            for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(features.row(i)) {
                *s += f64::from(x);
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(&sums[j * dim..(j + 1) * dim]) {
                    *c = s * inv;
                }
            }
        }
        let mut next = assign(features, &centroids);
        reseed_empty(features, &mut centroids, k, &mut next);
        history.push(next.dists.iter().sum());
        let unchanged = next.labels == current.labels;
        current = next;
        if unchanged {
            converged = true;
            break;
        }
    }

    Ok(KMeansFit {
        codebook: Codebook::new(k, dim, centroids, seed)?,
        assignments: current.labels,
        inertia_history: history,
        iterations,
        converged,
    })
}

/// Maps every frame to its nearest centroid.
pub fn quantize(features: &FeatureMatrix, codebook: &Codebook) -> Result<Vec<u32>, QuantizerError> {
    if features.dim != codebook.dim {
        return Err(QuantizerError::DimMismatch { expected: codebook.dim, got: features.dim });
    }
    Ok((0..features.n).into_par_iter().map(|i| codebook.nearest(features.row(i)).0 as u32).collect())
}

/// Collapses runs of repeated units. Not part of the default pipeline: the
/// interval arithmetic downstream assumes one unit per frame.
pub fn dedup_consecutive(units: &[u32]) -> Vec<u32> {
    let mut out = units.to_vec();
    out.dedup();
    out
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], QuantizerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            QuantizerError::Length(format!("need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<(), QuantizerError> {
        let found = self.take(4)?;
        if found != expected {
            return Err(QuantizerError::Magic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    fn u32(&mut self) -> Result<u32, QuantizerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, QuantizerError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, QuantizerError> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| QuantizerError::Length("size overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn finish(&self) -> Result<(), QuantizerError> {
        if self.pos != self.bytes.len() {
            return Err(QuantizerError::Length(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
