//! Reproducible random streams.
//!
//! Every stochastic computation draws from a stream derived from a root seed
//! and a task id. Streams for distinct task ids are independent ChaCha
//! streams of the same key, so results never depend on scheduling order.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type Stream = ChaCha20Rng;

pub fn derive_stream(root_seed: u64, task_id: u64) -> Stream {
    let mut rng = ChaCha20Rng::seed_from_u64(root_seed);
    rng.set_stream(task_id);
    rng
}

/// Task id for a sub-task of `parent`, so nested experiments never collide.
pub fn child_task(parent: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut x = parent
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_add(1));
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draws(seed: u64, task: u64, n: usize) -> Vec<f64> {
        let mut rng = derive_stream(seed, task);
        (0..n).map(|_| standard_normal(&mut rng)).collect()
    }

    #[test]
    fn same_pair_same_stream() {
        assert_eq!(draws(42, 0, 100), draws(42, 0, 100));
    }

    #[test]
    fn distinct_tasks_differ() {
        let a = draws(42, 0, 100);
        let b = draws(42, 1, 100);
        assert!(a.iter().zip(&b).all(|(x, y)| x != y));
    }

    #[test]
    fn moments_of_standard_normal() {
        let xs = draws(42, 7, 100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn child_tasks_are_distinct() {
        let ids: std::collections::HashSet<u64> =
            (0..1000).map(|i| child_task(3, i)).collect();
        assert_eq!(ids.len(), 1000);
        assert_ne!(child_task(1, 0), child_task(0, 1));
    }
}
