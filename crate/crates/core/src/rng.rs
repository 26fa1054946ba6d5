//! Counter-based keyed random streams.
//!
//! Every random draw in the crate comes from a stream keyed on
//! `(seed, a, b)`, so results do not depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a root seed with any number of key words.
pub fn mix(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix(seed), |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// A ChaCha stream selected by `(seed, a)` with stream id `b`.
pub fn keyed(seed: u64, a: u64, b: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[a]));
    rng.set_stream(b);
    rng
}
