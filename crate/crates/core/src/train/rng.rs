use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream purposes. Every stream is a pure function of
/// `(seed, purpose, a, b)`, so no generator state needs to be saved.
pub(crate) const SHUFFLE: u64 = 1;
pub(crate) const ITM: u64 = 2;
pub(crate) const EXAMPLE: u64 = 3;
pub(crate) const INIT: u64 = 4;
pub(crate) const PROBE: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(seed: u64, purpose: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(splitmix(seed) ^ purpose) ^ a) ^ b)
}

pub(crate) fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose, a, b))
}
