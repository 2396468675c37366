//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! seeded from a tuple of integers, so any sample or training example can be
//! reconstructed from `(global_seed, stream tag, index...)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// Stream tags.
pub const TAG_CODEBOOK: u64 = 0xC0DE;
pub const TAG_TRAIN_DATA: u64 = 0x7A1;
pub const TAG_EVAL_DATA: u64 = 0xE7A1;
pub const TAG_WORD_PICK: u64 = 0x3D;
pub const TAG_EXAMPLE: u64 = 0xE8;
pub const TAG_INIT: u64 = 0x1417;
pub const TAG_PROBE: u64 = 0x960BE;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes an ordered tuple of integers into one 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6D64_6966_6634_7374, |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(parts: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parts))
}

/// FNV-1a, used to fold strings into seed tuples.
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}
