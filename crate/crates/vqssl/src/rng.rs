//! Deterministic pseudo-random number generation.
//!
//! Every source of randomness in the crate is a [`Rng`] derived from a
//! 64-bit seed plus a named stream tag, so any component can be reproduced
//! in isolation. The generator is SplitMix64; statistically adequate for
//! data synthesis and initialization, and fully portable.

/// Stream tags. Keeping them in one place avoids accidental collisions.
pub mod stream {
    pub const DATA: u64 = 0x01;
    pub const AUGMENT: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const PROBE: u64 = 0x04;
    pub const SHUFFLE: u64 = 0x05;
    pub const CODEBOOK: u64 = 0x06;
    pub const SERF: u64 = 0x07;
    pub const REINIT: u64 = 0x08;
}

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 generator with a cached Gaussian spare for Box-Muller.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    gauss_spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, gauss_spare: None }
    }

    /// Derive an independent generator from (seed, stream tag, extra tags).
    /// The derivation is a pure function, so e.g. the augmentation stream of
    /// sample 17 in epoch 3 can be re-created without replaying anything.
    pub fn derived(seed: u64, tags: &[u64]) -> Self {
        let mut s = mix(seed ^ GAMMA);
        for &t in tags {
            s = mix(s.wrapping_add(GAMMA).wrapping_mul(t | 1) ^ t);
        }
        Rng::new(s)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    #[inline]
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [lo, hi] (inclusive).
    pub fn range_u64(&mut self, lo: u64, hi: u64) -> u64 {
        debug_assert!(lo <= hi);
        let span = hi - lo + 1;
        // Modulo bias is negligible for the small spans used here.
        lo + self.next_u64() % span
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(g) = self.gauss_spare.take() {
            return g;
        }
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        if items.is_empty() {
            return;
        }
        for i in (1..items.len()).rev() {
            let j = self.range_u64(0, i as u64) as usize;
            items.swap(i, j);
        }
    }
}

/// FNV-1a 64-bit hash, used for content hashes in manifests and checkpoints.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
