//! Seed derivation.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by the run seed
//! plus a purpose tag and up to two integer coordinates (epoch, step, sample
//! index ...). Streams are therefore reproducible from the step counter alone,
//! which is what makes checkpoint resume bit-exact without persisting RNG state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Shuffle = 2,
    Mask = 3,
    Synthetic = 4,
    Permutation = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes the coordinates into a 64-bit key.
pub fn derive_key(seed: u64, stream: Stream, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ stream as u64);
    h = splitmix(h ^ a);
    splitmix(h ^ b.rotate_left(17))
}

pub fn derive_rng(seed: u64, stream: Stream, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, stream, a, b))
}
