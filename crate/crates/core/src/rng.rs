//! Seed derivation.
//!
//! Every random quantity is drawn from a ChaCha8 stream identified by a
//! master seed and a 64-bit stream id, so draws for one purpose never shift
//! when another purpose draws more or fewer numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which parameter block of a node a stream feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Internal = 1,
    Input = 2,
    Bias = 3,
    Prediction = 4,
}

/// The generator for `stream` under `master`.
pub fn stream(master: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(stream);
    rng
}

/// Stream for one parameter matrix: the node's position in evaluation order
/// and the matrix role select the stream.
pub fn param_stream(master: u64, node: usize, role: ParamRole) -> ChaCha8Rng {
    stream(master, ((node as u64) << 4) | role as u64)
}

/// SplitMix64 finalizer; derives independent child seeds from `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
