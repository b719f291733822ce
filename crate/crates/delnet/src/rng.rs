//! Counter-based deterministic pseudo-random generator.
//!
//! Every random draw in the crate comes from a `CounterRng` keyed by
//! `(seed, stream words...)`, so a sample, an init, or a shuffle can be
//! regenerated in isolation without replaying any global state. Two runs
//! with the same seed produce bit-identical streams on any platform.

/// SplitMix64 finalizer; full-period bijection on u64.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Stateless-derivable generator: `key` identifies the stream, `counter`
/// the position within it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Derive a stream key by folding `stream` words into `seed`.
    /// The fold is order-sensitive: `[a, b]` and `[b, a]` give distinct keys.
    pub fn keyed(seed: u64, stream: &[u64]) -> CounterRng {
        let mut key = mix(seed ^ 0xD6E8_FEB8_6659_FD93);
        for &w in stream {
            key = mix(key.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ mix(w));
        }
        CounterRng { key, counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform draw in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi);
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_u32(&mut self, lo: u32, hi: u32) -> u32 {
        debug_assert!(lo <= hi);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as u32
    }

    /// Uniform index below `n`. Modulo bias is ~n/2^64, irrelevant here.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_keys_identical_streams() {
        let mut a = CounterRng::keyed(42, &[1, 2, 3]);
        let mut b = CounterRng::keyed(42, &[1, 2, 3]);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn stream_words_and_order_matter() {
        let a: Vec<u64> = {
            let mut r = CounterRng::keyed(7, &[1, 2]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = CounterRng::keyed(7, &[2, 1]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        let c: Vec<u64> = {
            let mut r = CounterRng::keyed(8, &[1, 2]);
            (0..8).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn f64_draws_live_in_unit_interval_and_look_uniform() {
        let mut r = CounterRng::keyed(123, &[9]);
        let mut sum = 0.0;
        for _ in 0..10_000 {
            let v = r.next_f64();
            assert!((0.0..1.0).contains(&v));
            sum += v;
        }
        let mean = sum / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean} too far from 0.5");
    }

    #[test]
    fn range_u32_hits_both_endpoints() {
        let mut r = CounterRng::keyed(5, &[4]);
        let mut seen_lo = false;
        let mut seen_hi = false;
        for _ in 0..1000 {
            match r.range_u32(3, 6) {
                3 => seen_lo = true,
                6 => seen_hi = true,
                4 | 5 => {}
                other => panic!("out of range: {other}"),
            }
        }
        assert!(seen_lo && seen_hi);
    }
}
