//! Counter-based random numbers: the value for a given counter depends only
//! on the key and the counter, never on evaluation order.

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the UTF-8 bytes; stable stream id for a tensor name.
pub fn name_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: &[u64]) -> Self {
        let key = stream
            .iter()
            .fold(splitmix64(seed), |k, &s| splitmix64(k ^ splitmix64(s)));
        Self { key }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(counter.wrapping_add(0x632B_E59B_D9B4_E019)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn unit_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
