//! Reproducible Monte Carlo plumbing: per-sample random streams, ordered
//! parallel evaluation, compensated sums and batch-means standard errors.
//!
//! Sample `i` of a run seeded with `seed` always draws from ChaCha8 stream
//! `i` of key `seed`, and reductions run sequentially over the ordered
//! per-sample values, so results do not depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 32;

/// The generator for sample `index` of a run seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Evaluate `f` on samples `0..n` in parallel; output is in sample order.
pub fn par_samples<T, F>(n: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> T + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| f(&mut sample_rng(seed, i as u64)))
        .collect()
}

/// Neumaier's compensated summation.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        for x in iter {
            s.add(x);
        }
        s
    }
}

pub fn sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values.iter().copied()) / values.len() as f64
}

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

/// Mean and batch-means standard error over [`BATCHES`] contiguous batches.
///
/// With fewer values than batches the naive i.i.d. standard error is used.
pub fn batch_means(values: &[f64]) -> Estimate {
    let n = values.len();
    let m = mean(values);
    if n < 2 {
        return Estimate {
            mean: m,
            stderr: f64::NAN,
        };
    }
    if n < BATCHES * 2 {
        let var = sum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1) as f64;
        return Estimate {
            mean: m,
            stderr: (var / n as f64).sqrt(),
        };
    }
    let size = n / BATCHES;
    let batch: Vec<f64> = (0..BATCHES)
        .map(|b| {
            let end = if b + 1 == BATCHES { n } else { (b + 1) * size };
            mean(&values[b * size..end])
        })
        .collect();
    let bm = mean(&batch);
    let var = sum(batch.iter().map(|v| (v - bm) * (v - bm))) / (BATCHES - 1) as f64;
    Estimate {
        mean: m,
        stderr: (var / BATCHES as f64).sqrt(),
    }
}

/// Empirical variance (denominator `n − 1`).
pub fn variance(values: &[f64]) -> f64 {
    let m = mean(values);
    sum(values.iter().map(|v| (v - m) * (v - m))) / (values.len() as f64 - 1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
