//! Stratification geometry.
//!
//! A [`GridSpec`] with dimension `s`, resolution `k` and margin `m` describes
//! the `(k + 2m)^s` axis-aligned cubes of side `1/k` whose union is
//! `[-m/k, 1 + m/k]^s`. Cube `j` (a signed integer vector with components in
//! `-m..k+m`) is centred at `(2 j_i + 1) / (2k)` on every axis.
//!
//! Random offsets inside a cube come from a counter-based stream keyed by
//! `(seed, replicate, j)`, so the offset drawn for a given cube never depends
//! on evaluation order, thread count or on the margin of the grid it was
//! enumerated from.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridSpec {
    dim: usize,
    k: usize,
    margin: usize,
}

impl GridSpec {
    pub fn new(dim: usize, k: usize, margin: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidGrid("dimension must be positive".into()));
        }
        if k == 0 {
            return Err(Error::InvalidGrid("k must be positive".into()));
        }
        let side = k + 2 * margin;
        if (side as u128).checked_pow(dim as u32).is_none_or(|n| n > usize::MAX as u128) {
            return Err(Error::InvalidGrid(format!("(k+2m)^s overflows for k={k}, m={margin}, s={dim}")));
        }
        Ok(Self { dim, k, margin })
    }

    /// Grid without margin layers, the plain stratification of `[0,1]^s`.
    pub fn unit(dim: usize, k: usize) -> Result<Self> {
        Self::new(dim, k, 0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn margin(&self) -> usize {
        self.margin
    }

    /// Number of cubes along one axis, `k + 2m`.
    pub fn side(&self) -> usize {
        self.k + 2 * self.margin
    }

    pub fn num_centres(&self) -> usize {
        self.side().pow(self.dim as u32)
    }

    /// Number of cubes inside `[0,1]^s`, `k^s`.
    pub fn num_inner(&self) -> usize {
        self.k.pow(self.dim as u32)
    }

    pub fn cell_volume(&self) -> f64 {
        (self.k as f64).powi(-(self.dim as i32))
    }

    /// Smallest and largest admissible index component.
    pub fn index_range(&self) -> (i64, i64) {
        let m = self.margin as i64;
        (-m, self.k as i64 + m - 1)
    }

    pub fn contains(&self, idx: &CentreIndex) -> bool {
        let (lo, hi) = self.index_range();
        idx.0.len() == self.dim && idx.0.iter().all(|&j| (lo..=hi).contains(&j))
    }

    pub fn coordinate(&self, j: i64) -> f64 {
        (2 * j + 1) as f64 / (2 * self.k) as f64
    }

    pub fn centre_point(&self, idx: &CentreIndex) -> Vec<f64> {
        idx.0.iter().map(|&j| self.coordinate(j)).collect()
    }

    /// Position of `idx` in the lexicographic enumeration (first axis slowest).
    pub fn flat_index(&self, idx: &CentreIndex) -> Option<usize> {
        if !self.contains(idx) {
            return None;
        }
        Some(self.flat_index_unchecked(&idx.0))
    }

    pub(crate) fn flat_index_unchecked(&self, j: &[i64]) -> usize {
        let m = self.margin as i64;
        let side = self.side();
        j.iter().fold(0usize, |acc, &ji| acc * side + (ji + m) as usize)
    }

    pub fn index_at(&self, flat: usize) -> CentreIndex {
        let mut j = vec![0i64; self.dim];
        self.write_index(flat, &mut j);
        CentreIndex(j)
    }

    pub(crate) fn write_index(&self, mut flat: usize, out: &mut [i64]) {
        let side = self.side();
        let m = self.margin as i64;
        for slot in out.iter_mut().rev() {
            *slot = (flat % side) as i64 - m;
            flat /= side;
        }
    }

    /// Lazy lexicographic enumeration of every cube index.
    pub fn indices(&self) -> Indices {
        Indices { grid: *self, next: 0, len: self.num_centres() }
    }

    /// Lazy enumeration of centre points in the same order as [`indices`](Self::indices).
    pub fn centres(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.indices().map(move |idx| self.centre_point(&idx))
    }

    /// Index of the closed cube containing `point`; ties on a shared face go
    /// to the lower index.
    pub fn containing_centre(&self, point: &[f64]) -> Result<CentreIndex> {
        if point.len() != self.dim {
            return Err(Error::InvalidGrid(format!(
                "point has dimension {}, grid has {}",
                point.len(),
                self.dim
            )));
        }
        let (lo, hi) = self.index_range();
        let k = self.k as f64;
        let mut j = Vec::with_capacity(self.dim);
        for &x in point {
            let lower = lo as f64 / k;
            let upper = (hi + 1) as f64 / k;
            if !(x >= lower && x <= upper) {
                return Err(Error::OutOfDomain { point: point.to_vec() });
            }
            // Cube j covers [j/k, (j+1)/k]; a point on j/k belongs to j-1.
            let t = x * k;
            let mut ji = t.ceil() as i64 - 1;
            if ji < lo {
                ji = lo;
            }
            if ji > hi {
                ji = hi;
            }
            j.push(ji);
        }
        Ok(CentreIndex(j))
    }

    pub fn sample_offset(&self, idx: &CentreIndex, key: &StreamKey) -> StratumSample {
        let mut out = vec![0.0; self.dim];
        self.fill_offset(&idx.0, key, &mut out);
        StratumSample(out)
    }

    pub(crate) fn fill_offset(&self, j: &[i64], key: &StreamKey, out: &mut [f64]) {
        let mut rng = key.stratum_rng(j);
        let k = self.k as f64;
        for u in out.iter_mut() {
            let x: f64 = rng.random();
            *u = (x - 0.5) / k;
        }
    }
}

/// Signed per-axis cube index `j`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CentreIndex(pub Vec<i64>);

impl CentreIndex {
    pub fn as_slice(&self) -> &[i64] {
        &self.0
    }
}

impl From<Vec<i64>> for CentreIndex {
    fn from(v: Vec<i64>) -> Self {
        Self(v)
    }
}

/// Offset `U_c` from a cube centre; every component lies in `[-1/2k, 1/2k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumSample(pub Vec<f64>);

impl StratumSample {
    pub fn max_norm(&self) -> f64 {
        self.0.iter().fold(0.0f64, |a, &x| a.max(x.abs()))
    }
}

pub struct Indices {
    grid: GridSpec,
    next: usize,
    len: usize,
}

impl Iterator for Indices {
    type Item = CentreIndex;

    fn next(&mut self) -> Option<CentreIndex> {
        if self.next >= self.len {
            return None;
        }
        let idx = self.grid.index_at(self.next);
        self.next += 1;
        Some(idx)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let rest = self.len - self.next;
        (rest, Some(rest))
    }
}

impl ExactSizeIterator for Indices {}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Identifies one independent realisation: a master seed plus a replicate id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    replicate: u64,
    key: [u8; 32],
}

/// Stream reserved for draws that are not tied to a cube (crude Monte Carlo).
const GLOBAL_STREAM: u64 = u64::MAX;

impl StreamKey {
    pub fn new(seed: u64, replicate: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = splitmix64(seed) ^ replicate.rotate_left(17);
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            state = splitmix64(state ^ (i as u64).wrapping_mul(GOLDEN) ^ replicate);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self { seed, replicate, key }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replicate(&self) -> u64 {
        self.replicate
    }

    /// Same seed, different replicate.
    pub fn with_replicate(&self, replicate: u64) -> Self {
        Self::new(self.seed, replicate)
    }

    pub fn stratum_rng(&self, j: &[i64]) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(stream_id(j));
        rng
    }

    pub fn global_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream(GLOBAL_STREAM);
        rng
    }
}

fn stream_id(j: &[i64]) -> u64 {
    let mut h = splitmix64(j.len() as u64);
    for &ji in j {
        let zz = ((ji << 1) ^ (ji >> 63)) as u64;
        h = splitmix64(h ^ zz);
    }
    if h == GLOBAL_STREAM {
        h ^ 1
    } else {
        h
    }
}
