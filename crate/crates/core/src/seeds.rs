//! Reproducible seed derivation.
//!
//! Child seeds are SplitMix64 finalizers of `(parent, index)`, so every
//! stream in a run is a pure function of the master seed.

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `hash(seed, index)`
pub fn derive(seed: u64, index: u64) -> u64 {
    mix(mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedStream(u64);

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        Self(seed)
    }

    pub fn seed(&self) -> u64 {
        self.0
    }

    pub fn derive(&self, index: u64) -> u64 {
        derive(self.0, index)
    }

    pub fn child(&self, index: u64) -> Self {
        Self(self.derive(index))
    }
}
