//! Seed derivation. Every stochastic component draws from its own
//! ChaCha stream keyed by `(master seed, stream id)`, so results do not
//! depend on scheduling order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream identifiers used across the crate.
pub mod stream {
    pub const INIT_DISCRIMINATOR: u64 = 0x02;
    pub const INIT_GATE: u64 = 0x03;
    /// Expert `j` initialises from `INIT_EXPERT + j`.
    pub const INIT_EXPERT: u64 = 0x10;
    pub const EXPERT_DROPOUT: u64 = 0x100;
    pub const GATE_DROPOUT: u64 = 0x200;
    pub const WALKS: u64 = 0x300;
    pub const EVAL_WALKS: u64 = 0x301;
    pub const SPLIT: u64 = 0x400;
    pub const SUBSAMPLE: u64 = 0x500;
    pub const CSBM: u64 = 0x600;
    pub const RUN: u64 = 0x700;
    pub const SYNTHETIC: u64 = 0x800;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a stream id into an independent seed.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(master) ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(master: u64, stream: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(master, stream))
}
