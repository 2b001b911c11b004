//! Counter-based deterministic random stream.
//!
//! Every stochastic choice in the system (weight init, dropout, augmentation,
//! pair sampling, splits, synthetic data) draws from an [`RngStream`].  A
//! stream is fully described by `(seed, counter)`: the same pair produces the
//! same draw sequence on every platform, which is what makes training runs
//! bit-reproducible.

/// SplitMix64 output function (Steele et al.), used as a counter-based
/// generator: draw i of stream s is `mix(s ^ golden * i)`.
#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, counter: 0 }
    }

    /// Restore a stream at an exact position.
    pub fn at(seed: u64, counter: u64) -> Self {
        RngStream { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derive an independent stream for a named purpose. Forking depends only
    /// on the parent seed and the label, not the parent's position, so the
    /// same purpose always gets the same child stream.
    pub fn fork(&self, label: &str) -> RngStream {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        RngStream::new(splitmix64(self.seed ^ splitmix64(h)))
    }

    /// Numbered variant of [`fork`](Self::fork) for per-item streams.
    pub fn fork_indexed(&self, label: &str, index: u64) -> RngStream {
        let mut child = self.fork(label);
        child.seed = splitmix64(child.seed ^ splitmix64(index.wrapping_add(0x51ed_2701)));
        child
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = splitmix64(self.seed.wrapping_add(self.counter.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
        self.counter += 1;
        z
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n), rejection-sampled so every value is equally
    /// likely. n must be > 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "RngStream::below requires n > 0");
        if n.is_power_of_two() {
            return self.next_u64() & (n - 1);
        }
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
