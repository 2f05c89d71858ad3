//! Seeded random streams.
//!
//! Every random decision is drawn from a ChaCha8 stream keyed by
//! `(run seed, iteration)` and selected by a 64-bit stream id:
//!
//! * stream `0` shuffles the visitation order of an iteration,
//! * stream `u + 1` serves all draws made while resampling user `u`,
//! * streams at and above [`AUX_STREAM_BASE`] are reserved for one-off uses
//!   (initialization, holdout splits, the generator).
//!
//! Draws therefore depend only on the seed, the iteration number and the
//! user, never on thread scheduling, and a checkpoint needs to store only the
//! seed and the iteration counter to resume exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const ORDER_STREAM: u64 = 0;
pub const AUX_STREAM_BASE: u64 = 1 << 62;
pub const INIT_STREAM: u64 = AUX_STREAM_BASE;
pub const SPLIT_STREAM: u64 = AUX_STREAM_BASE + 1;
pub const GENERATOR_STREAM: u64 = AUX_STREAM_BASE + 2;
pub const PLAN_STREAM: u64 = AUX_STREAM_BASE + 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for `(seed, iteration, stream)`.
pub fn stream(seed: u64, iteration: u64, stream: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = seed ^ splitmix64(iteration);
    for chunk in key.chunks_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}

/// Stream used for everything drawn while resampling `user`.
pub fn user_stream(seed: u64, iteration: u64, user: usize) -> StreamRng {
    stream(seed, iteration, user as u64 + 1)
}

/// Seed-shuffled `0..n`, the per-iteration visitation order.
pub fn visitation_order(seed: u64, iteration: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, iteration, ORDER_STREAM));
    order
}
