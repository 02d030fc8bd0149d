//! Counter-based random streams.
//!
//! Every random draw in the engine comes from a ChaCha20 generator addressed by
//! `(seed, stream, index)`. The stream tag names the consumer (trajectory, GPS
//! noise, pilot noise, ...) and the index separates instances (episode number,
//! slot, probe batch). Regenerating any one quantity never depends on how many
//! draws other consumers made, so datasets are reproducible bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scene = 1,
    Trajectory = 2,
    GpsNoise = 3,
    Sensor = 4,
    Pilot = 5,
    Init = 6,
    Shuffle = 7,
    Episode = 8,
    TieBreak = 9,
    Split = 10,
    Modality = 11,
    Test = 99,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generator for draw-sequence `index` of `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64((stream as u64) << 48 ^ splitmix64(index)));
    rng
}

/// Derive a child seed, e.g. a per-episode seed from a dataset seed.
pub fn derive_seed(seed: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64((stream as u64).wrapping_mul(0x100_0000_01B3) ^ index))
}
