//! Empirical delay samples and the packet-fragmentation model for large
//! messages.
//!
//! A large message is modelled as `k` small packets that must all arrive;
//! its delay is the maximum of `k` independent draws (with replacement) from
//! the small-message sample set. Bounds use nearest-rank percentiles.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::scalar::DelayScalar;

/// Default fragmentation factor: 128 KB messages split into 2 KB packets.
pub const DEFAULT_FRAGMENTS: usize = 64;
/// Synthetic draws used when deriving the large-message bound.
pub const DEFAULT_DRAWS: usize = 100_000;
pub const SMALL_BOUND_PERCENTILE: f64 = 99.99;
pub const LARGE_BOUND_PERCENTILE: f64 = 99.0;

#[derive(Debug, Error)]
pub enum LatModelError {
    #[error("sample set is empty")]
    Empty,
    #[error("line {line}: not a number: {text:?}")]
    Parse { line: usize, text: String },
    #[error("line {line}: delay must be positive and finite, got {text}")]
    NonPositive { line: usize, text: String },
    #[error("percentile must be in (0, 100], got {0}")]
    InvalidPercentile(f64),
    #[error("fragment count must be at least 1")]
    InvalidFragments,
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// 1-based nearest rank `ceil(p/100 * len)`, tolerant of float noise in `p`.
pub fn nearest_rank(len: usize, p: f64) -> Result<usize, LatModelError> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(LatModelError::InvalidPercentile(p));
    }
    if len == 0 {
        return Err(LatModelError::Empty);
    }
    let exact = p * len as f64 / 100.0;
    let rounded = exact.round();
    let rank = if (exact - rounded).abs() < 1e-9 { rounded } else { exact.ceil() };
    Ok((rank as usize).clamp(1, len))
}

/// Nearest-rank percentile over an already sorted slice.
pub fn percentile_sorted<T: Copy>(sorted: &[T], p: f64) -> Result<T, LatModelError> {
    let rank = nearest_rank(sorted.len(), p)?;
    Ok(sorted[rank - 1])
}

#[derive(Debug, Clone)]
pub struct DelaySampleSet<T> {
    sorted: Vec<T>,
    label: String,
}

impl<T: DelayScalar> DelaySampleSet<T> {
    pub fn new(samples: Vec<T>, label: impl Into<String>) -> Result<Self, LatModelError> {
        if samples.is_empty() {
            return Err(LatModelError::Empty);
        }
        if let Some(pos) = samples.iter().position(|s| !(s.is_finite() && *s > T::zero())) {
            return Err(LatModelError::NonPositive { line: pos + 1, text: samples[pos].to_string() });
        }
        let mut sorted = samples;
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        Ok(Self { sorted, label: label.into() })
    }

    /// Parses one millisecond value per line. A non-numeric first line is
    /// treated as a header; blank lines are skipped.
    pub fn parse(text: &str, label: impl Into<String>) -> Result<Self, LatModelError> {
        let mut samples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            match line.parse::<T>() {
                Ok(v) if v.is_finite() && v > T::zero() => samples.push(v),
                Ok(_) => return Err(LatModelError::NonPositive { line: i + 1, text: line.to_string() }),
                Err(_) if i == 0 => continue,
                Err(_) => return Err(LatModelError::Parse { line: i + 1, text: line.to_string() }),
            }
        }
        Self::new(samples, label)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LatModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| LatModelError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text, path.display().to_string())
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn samples(&self) -> &[T] {
        &self.sorted
    }

    pub fn max(&self) -> T {
        *self.sorted.last().expect("non-empty")
    }

    pub fn percentile(&self, p: f64) -> Result<T, LatModelError> {
        percentile_sorted(&self.sorted, p)
    }

    /// Delay of one large message fragmented into `k` packets.
    pub fn synth_large_delay<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<T, LatModelError> {
        if k == 0 {
            return Err(LatModelError::InvalidFragments);
        }
        let n = self.sorted.len();
        let mut worst = T::neg_infinity();
        for _ in 0..k {
            worst = worst.max(self.sorted[rng.random_range(0..n)]);
        }
        Ok(worst)
    }

    /// `draws` independent synthetic large-message delays as a sample set.
    pub fn synthetic<R: Rng + ?Sized>(&self, k: usize, draws: usize, rng: &mut R) -> Result<Self, LatModelError> {
        let samples = (0..draws).map(|_| self.synth_large_delay(k, rng)).collect::<Result<Vec<_>, _>>()?;
        Self::new(samples, format!("synthetic(k={k}) of {}", self.label))
    }

    /// Conservative bounds: Δ_S at the 99.99th percentile of the small set,
    /// Δ_L at the 99th percentile of `draws` seeded synthetic delays.
    pub fn derive_bounds(&self, k: usize, draws: usize, seed: u64) -> Result<Bounds<T>, LatModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let synth = self.synthetic(k, draws, &mut rng)?;
        Ok(Bounds {
            delta_s: self.percentile(SMALL_BOUND_PERCENTILE)?,
            delta_l: synth.percentile(LARGE_BOUND_PERCENTILE)?,
            samples: self.len(),
            fragments: k,
            draws,
            seed,
        })
    }
}

/// Bound report. `delta_s`/`delta_l` are milliseconds and use the same keys
/// as the scenario config, so the serialized record can be merged into one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Bounds<T> {
    pub delta_s: T,
    pub delta_l: T,
    pub samples: usize,
    pub fragments: usize,
    pub draws: usize,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    type Set = DelaySampleSet<f64>;

    #[test]
    fn parse_three_lines() {
        let s = Set::parse("1.0\n2.0\n3.0\n", "t").unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn parse_empty_is_error() {
        assert!(matches!(Set::parse("", "t"), Err(LatModelError::Empty)));
        assert!(matches!(Set::parse("delay_ms\n", "t"), Err(LatModelError::Empty)));
    }

    #[test]
    fn header_skipped_but_later_garbage_rejected() {
        let s = Set::parse("delay_ms\n4\n5\n", "t").unwrap();
        assert_eq!(s.samples(), &[4.0, 5.0]);
        match Set::parse("4\nabc\n", "t") {
            Err(LatModelError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Set::parse("1\n-2\n", "t"), Err(LatModelError::NonPositive { line: 2, .. })));
    }

    #[test]
    fn nearest_rank_percentiles() {
        let s = Set::new(vec![4.0, 1.0, 3.0, 2.0], "t").unwrap();
        assert_eq!(s.percentile(50.0).unwrap(), 2.0);
        assert_eq!(s.percentile(100.0).unwrap(), 4.0);
        assert_eq!(s.percentile(0.1).unwrap(), 1.0);
        let one = Set::new(vec![7.0], "t").unwrap();
        for p in [0.01, 50.0, 99.99, 100.0] {
            assert_eq!(one.percentile(p).unwrap(), 7.0);
        }
        assert!(s.percentile(0.0).is_err());
        assert!(s.percentile(100.5).is_err());
    }

    #[test]
    fn rank_is_exact_at_float_boundaries() {
        // 99.99% of 10_000 is exactly rank 9_999
        assert_eq!(nearest_rank(10_000, 99.99).unwrap(), 9_999);
        assert_eq!(nearest_rank(3, 100.0 / 3.0).unwrap(), 1);
        assert!(percentile_sorted::<f64>(&[], 50.0).is_err());
    }

    #[test]
    fn constant_set_gives_constant_delay_and_bounds() {
        let s = Set::new(vec![3.5; 10], "c").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for k in [1, 2, 64] {
            assert_eq!(s.synth_large_delay(k, &mut rng).unwrap(), 3.5);
        }
        let b = s.derive_bounds(64, 1000, 9).unwrap();
        assert_eq!((b.delta_s, b.delta_l), (3.5, 3.5));
    }

    #[test]
    fn zero_fragments_rejected() {
        let s = Set::new(vec![1.0], "c").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(s.synth_large_delay(0, &mut rng).is_err());
    }

    #[test]
    fn derive_bounds_is_seed_deterministic() {
        let s = Set::new(vec![1.0, 5.0], "two").unwrap();
        let a = s.derive_bounds(2, 5000, 42).unwrap();
        let b = s.derive_bounds(2, 5000, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn works_over_f32() {
        let s = DelaySampleSet::<f32>::parse("2\n1\n", "f32").unwrap();
        assert_eq!(s.percentile(50.0).unwrap(), 1.0f32);
    }
}
