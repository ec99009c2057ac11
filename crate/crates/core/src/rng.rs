//! Seeded randomness with a frozen algorithm.
//!
//! Everything here is built on the ChaCha8 keystream, whose output is fixed
//! by the cipher definition, plus hand-written rejection sampling and
//! Fisher-Yates. Sampling results for a given seed therefore do not change
//! when dependency versions move.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids keep independent consumers of the same seed decorrelated.
pub mod stream {
    pub const TEST_SPLIT: u64 = 1;
    pub const SELECTION: u64 = 2;
    pub const ARRANGEMENT: u64 = 3;
    pub const INDUCTION_ANCHOR: u64 = 4;
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..bound`. Panics if `bound == 0`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        let bound = bound as u64;
        // reject the tail so every residue is equally likely
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % bound) as usize;
            }
        }
    }

    /// Fisher-Yates, last index first.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `amount` distinct indices from `0..len`, in draw order.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        assert!(amount <= len, "sample larger than population");
        let mut pool: Vec<usize> = (0..len).collect();
        for i in 0..amount {
            let j = i + self.below(len - i);
            pool.swap(i, j);
        }
        pool.truncate(amount);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream_is_reproducible() {
        let mut a = SeededRng::new(42, stream::SELECTION);
        let mut b = SeededRng::new(42, stream::SELECTION);
        for _ in 0..32 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_are_independent() {
        let mut a = SeededRng::new(42, stream::SELECTION);
        let mut b = SeededRng::new(42, stream::ARRANGEMENT);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn frozen_first_draws() {
        // Pinned so that a change of sampling algorithm is noticed.
        let mut rng = SeededRng::new(0, stream::TEST_SPLIT);
        let idx = rng.sample_indices(10, 10);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        let again = SeededRng::new(0, stream::TEST_SPLIT).sample_indices(10, 10);
        assert_eq!(idx, again);
        assert_eq!(idx, [1, 7, 9, 8, 2, 4, 0, 6, 5, 3]);
        assert_eq!(SeededRng::new(0, stream::SELECTION).next_u64(), 6128383831660698443);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = SeededRng::new(1, 0);
        for bound in 1..50 {
            for _ in 0..20 {
                assert!(rng.below(bound) < bound);
            }
        }
    }

    #[test]
    fn sample_indices_distinct() {
        let mut rng = SeededRng::new(9, 0);
        let idx = rng.sample_indices(100, 40);
        let mut dedup = idx.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 40);
    }
}
