//! Seeded random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from a base seed
//! and a purpose tag plus optional indices, so streams never share state and
//! adding a new consumer does not perturb existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags. The numeric values are part of the determinism contract:
/// changing one changes every dataset generated under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Prototypes = 1,
    Records = 2,
    Operator = 3,
    Corruption = 4,
    Init = 5,
    Shuffle = 6,
    Split = 7,
    SiteShift = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed, a purpose and any number of indices into one 64-bit key.
pub fn derive_key(seed: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5745_5354_4552_4941);
    h = splitmix64(h ^ (purpose as u64));
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

/// An independent stream keyed by `(seed, purpose, indices)`.
pub fn stream(seed: u64, purpose: Purpose, indices: &[u64]) -> StreamRng {
    let key = derive_key(seed, purpose, indices);
    let mut bytes = [0u8; 32];
    let mut k = key;
    for chunk in bytes.chunks_mut(8) {
        k = splitmix64(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
