//! Per-message transfer-time sampling.
//!
//! Each message gets its own ChaCha stream keyed by where it goes and which
//! micro-batch it carries, so samples do not depend on event order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::calibration::TransferTime;
use crate::units::Micros;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Direction {
    Activation = 0,
    Gradient = 1,
}

pub(crate) fn stream_id(replica: usize, stage: usize, dir: Direction, micro_batch: usize) -> u64 {
    ((replica as u64) << 44) | ((stage as u64) << 24) | ((dir as u64) << 23) | micro_batch as u64
}

/// Shortest time a sample of `t` can take.
pub(crate) fn floor(t: TransferTime) -> Micros {
    t.mean.saturating_sub(t.stddev * 2)
}

/// Draws from a normal with the given mean and deviation truncated to two
/// deviations either side and to non-negative values.
pub(crate) fn sample(seed: u64, stream: u64, t: TransferTime) -> Micros {
    if t.stddev.is_zero() {
        return t.mean;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let lo = floor(t).0 as f64;
    let hi = (t.mean + t.stddev * 2).0 as f64;
    let normal = Normal::new(t.mean.0 as f64, t.stddev.0 as f64).expect("finite parameters");
    for _ in 0..64 {
        let x: f64 = normal.sample(&mut rng);
        if (lo..=hi).contains(&x) {
            return Micros(x.round() as u64);
        }
    }
    // Only reachable when the mean sits many deviations below zero.
    Micros(rng.random_range(floor(t).0..=hi as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sample() {
        let t = TransferTime { mean: Micros(1000), stddev: Micros(300) };
        let a = sample(9, stream_id(1, 2, Direction::Gradient, 3), t);
        let b = sample(9, stream_id(1, 2, Direction::Gradient, 3), t);
        let c = sample(9, stream_id(1, 2, Direction::Activation, 3), t);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn truncated_at_zero() {
        let t = TransferTime { mean: Micros(1), stddev: Micros(1000) };
        for mb in 0..200 {
            let x = sample(1, stream_id(0, 0, Direction::Activation, mb), t);
            assert!(x.0 < 10_000);
        }
    }

    #[test]
    fn sample_mean_is_close() {
        let t = TransferTime { mean: Micros(5000), stddev: Micros(500) };
        let n = 2000;
        let total: u64 = (0..n).map(|mb| sample(4, stream_id(0, 1, Direction::Activation, mb), t).0).sum();
        let mean = total as f64 / n as f64;
        assert!((mean - 5000.0).abs() < 50.0, "{mean}");
    }
}
