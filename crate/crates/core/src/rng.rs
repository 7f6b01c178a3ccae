//! Counter-based random streams keyed by `(master seed, replicate, stage)`.
//!
//! Every replicate and every stage inside a replicate draws from its own
//! ChaCha stream, so results never depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type StreamRng = ChaCha12Rng;

/// Pipeline stages that consume randomness within one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    CrossFit,
    Impute(u32),
    LassoCv(u32),
    Integration,
    Truth,
    Custom(u32),
}

impl Stage {
    fn code(self) -> u64 {
        match self {
            Stage::Data => 1,
            Stage::CrossFit => 2,
            Stage::Impute(k) => 0x100 | u64::from(k),
            Stage::LassoCv(k) => 0x1_0000 | u64::from(k),
            Stage::Integration => 3,
            Stage::Truth => 4,
            Stage::Custom(k) => 0x1_0000_0000 | u64::from(k),
        }
    }
}

#[inline]
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a parent key with a child index into a new 64-bit key.
#[inline]
pub fn derive_key(parent: u64, child: u64) -> u64 {
    splitmix64(parent ^ splitmix64(child.wrapping_add(0x632B_E59B_D9B4_E019)))
}

/// Independent stream for `(master, replicate, stage)`.
pub fn stream(master: u64, replicate: u64, stage: Stage) -> StreamRng {
    let mut rng = ChaCha12Rng::seed_from_u64(master);
    rng.set_stream(derive_key(replicate, stage.code()));
    rng
}

/// Stream keyed directly by a 64-bit seed (used below the replicate level).
pub fn from_key(key: u64) -> StreamRng {
    ChaCha12Rng::seed_from_u64(key)
}
