//! The triplet sampler's random stream.
//!
//! Each benchmark draws from its own ChaCha20 stream keyed by
//! `SHA-256("diffsim/triplets/v1" || benchmark name || seed as u64 LE)`.
//! Integers in `[0, n)` come from one 64-bit word `w` as `(w * n) >> 64`,
//! fair coins from the top bit of one word. Nothing else consumes the
//! stream, so a port that follows this description reproduces every
//! sample.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use super::manifest::Benchmark;

pub const STREAM_DOMAIN: &[u8] = b"diffsim/triplets/v1";

pub struct TripletRng(ChaCha20Rng);

impl TripletRng {
    pub fn new(benchmark: Benchmark, seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update(STREAM_DOMAIN);
        h.update(benchmark.as_str().as_bytes());
        h.update(seed.to_le_bytes());
        TripletRng(ChaCha20Rng::from_seed(h.finalize().into()))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "empty range");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    pub fn coin(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }

    /// Two distinct indices in `[0, n)`, in draw order; `n >= 2`.
    pub fn two_distinct(&mut self, n: usize) -> (usize, usize) {
        let a = self.below(n);
        let mut b = self.below(n - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_depend_on_benchmark_and_seed() {
        let first = |b, s| TripletRng::new(b, s).next_u64();
        assert_eq!(first(Benchmark::Sref, 7), first(Benchmark::Sref, 7));
        assert_ne!(first(Benchmark::Sref, 7), first(Benchmark::Sref, 8));
        assert_ne!(first(Benchmark::Sref, 7), first(Benchmark::Instantstyle, 7));
    }

    #[test]
    fn below_stays_in_range_and_covers_it() {
        let mut r = TripletRng::new(Benchmark::Cute, 0);
        let mut seen = [0usize; 5];
        for _ in 0..5000 {
            seen[r.below(5)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 850 && c < 1150), "{seen:?}");
        for n in 2..10 {
            let (a, b) = r.two_distinct(n);
            assert!(a != b && a < n && b < n);
        }
    }
}
