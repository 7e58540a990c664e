//! Seeded pseudo-random number generation.
//!
//! The generator is pinned to xoshiro256** (Blackman & Vigna) over four
//! 64-bit state words, seeded by expanding a single `u64` seed through
//! SplitMix64. Both algorithms are fixed here, byte for byte, so a given
//! seed yields the same stream on every platform and in every build.
//! Nothing in this crate draws randomness from any other source.
//!
//! Independent streams are derived with [`SeededRng::stream`], which mixes
//! a seed with a list of labels (epoch number, image id, purpose tag)
//! through SplitMix64. Deriving streams by label rather than by consuming a
//! shared generator is what makes interrupted runs resumable: the stream
//! for epoch `t` depends only on the seed and `t`.

/// SplitMix64 step: advances `state` and returns the next output word.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministic xoshiro256** generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    state: [u64; 4],
}

impl SeededRng {
    /// Creates a generator from a single seed word.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Self { state }
    }

    /// Derives an independent stream from `seed` and a label path.
    ///
    /// Labels are folded into the SplitMix64 state one at a time, so
    /// `stream(s, &[a, b])` and `stream(s, &[b, a])` are unrelated streams.
    pub fn stream(seed: u64, labels: &[u64]) -> Self {
        let mut sm = seed;
        let mut acc = splitmix64(&mut sm);
        for &label in labels {
            sm = acc ^ label;
            acc = splitmix64(&mut sm);
        }
        Self::new(acc)
    }

    /// Raw state words, for checkpointing.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    /// Restores a generator from checkpointed state words.
    pub fn from_state(state: [u64; 4]) -> Self {
        Self { state }
    }

    /// Next 64-bit word of the stream.
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform f32 in [0, 1), from the top 24 bits.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform f64 in [0, 1), from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Uses bitmask rejection so the result is
    /// exactly uniform, not merely unbiased in expectation.
    pub fn next_below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "next_below(0)");
        if n == 1 {
            return 0;
        }
        let mask = u64::MAX >> (n - 1).leading_zeros();
        loop {
            let v = self.next_u64() & mask;
            if v < n {
                return v;
            }
        }
    }

    /// Uniform f64 in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw via Box-Muller. Each call consumes two uniform
    /// draws; the second Box-Muller output is discarded to keep the stream
    /// position a pure function of the call count.
    pub fn normal(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Samples `k` distinct indices from [0, n), in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "sample_distinct: k > n");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.next_below((n - i) as u64) as usize;
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}
