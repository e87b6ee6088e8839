//! Estimates with standard errors, streaming moments and seeded RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A Monte Carlo value with its standard error.
///
/// `std_error` is the sample standard deviation over `sqrt(n_samples)`.
/// Exact evaluations carry `std_error == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateWithError {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: u64,
}

impl EstimateWithError {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0, n_samples: 1 }
    }

    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = RunningStats::new();
        for &v in samples {
            s.push(v);
        }
        s.estimate()
    }

    /// Standard error of `self - other` when the two are independent.
    pub fn combined_se(&self, other: &Self) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    /// `(self - target) / std_error`; zero when both the gap and the error vanish.
    pub fn z_against(&self, target: f64) -> f64 {
        z_score(self.value - target, self.std_error)
    }
}

/// Gap divided by its standard error, with 0/0 read as 0 and gap/0 as infinite.
pub fn z_score(gap: f64, se: f64) -> f64 {
    if se > 0.0 {
        gap / se
    } else if gap.abs() <= 1e-12 * (1.0 + gap.abs()) {
        0.0
    } else {
        gap.signum() * f64::INFINITY
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    pub fn merge(&mut self, other: &RunningStats) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (0 for fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        }
    }

    pub fn std_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn estimate(&self) -> EstimateWithError {
        EstimateWithError { value: self.mean, std_error: self.std_error(), n_samples: self.n }
    }
}

/// Deterministic, splittable seed. Each `(seed, stream)` pair maps to an
/// independent ChaCha stream, so work split by index gives the same
/// numbers regardless of how it is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    pub seed: u64,
    pub stream: u64,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// A child stream, distinct for every `(self, k)`.
    pub fn substream(&self, k: u64) -> SeedStream {
        let seed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(0x9e37_79b9)));
        SeedStream { seed, stream: k }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.stream);
        r
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Numerically stable `log(sum(exp(a)))`.
pub fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + a.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let mean = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        let e = EstimateWithError::from_samples(&xs);
        assert!((e.value - mean).abs() < 1e-14);
        assert!((e.std_error - (var / 5.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn merge_equals_sequential() {
        let mut a = RunningStats::new();
        let mut b = RunningStats::new();
        let mut all = RunningStats::new();
        for i in 0..50 {
            let v = (i as f64 * 0.37).sin();
            all.push(v);
            if i < 20 {
                a.push(v)
            } else {
                b.push(v)
            }
        }
        a.merge(&b);
        assert!((a.mean() - all.mean()).abs() < 1e-14);
        assert!((a.variance() - all.variance()).abs() < 1e-13);
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let s = SeedStream::new(7);
        let a: u64 = s.substream(3).rng().gen();
        let b: u64 = s.substream(3).rng().gen();
        let c: u64 = s.substream(4).rng().gen();
        let d: u64 = s.substream(3).substream(0).rng().gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn lse_handles_large_arguments() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
