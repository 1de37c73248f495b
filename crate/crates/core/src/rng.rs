//! Seeded random streams. Every realisation draws from a substream derived
//! from `(seed, tag, index)`, so parallel and serial runs see the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub mod tag {
    pub const GEOMETRY: u64 = 1;
    pub const BLOCH: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const MISALIGN: u64 = 4;
    pub const READOUT: u64 = 5;
    pub const SYNTHETIC: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, tag, index)`.
pub fn substream(seed: u64, tag: u64, index: u64) -> Stream {
    let mut r = ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)));
    r.set_stream(index);
    r
}
