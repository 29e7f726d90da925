//! Counter-based random streams.
//!
//! Every random draw in a forest fit comes from a ChaCha stream keyed by
//! `(master seed, bag, tree, stage)`, so results do not depend on the order
//! in which trees are fit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stage {
    BagDraw = 1,
    SubsetDraw = 2,
    SplitNoise = 3,
    Integration = 4,
    Simulation = 5,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `(seed, r, b, stage)`.
pub fn stream(seed: u64, r: u64, b: u64, stage: Stage) -> ChaCha8Rng {
    let mut state = seed ^ (stage as u64).wrapping_mul(0xd6e8_feb8_6659_fd93);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream((r << 32) ^ b);
    rng
}
