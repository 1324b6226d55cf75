//! Stateless seed derivation.
//!
//! Every random draw in the pipeline (masks, pseudo-sample coin flips,
//! shuffles, synthetic clips) gets its own seed computed from the global seed
//! and a structured key. Keys are packed injectively and pushed through a
//! bijective mixer, so two distinct keys never share a seed within one run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent random streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Stream {
    Mask = 1,
    PseudoCoin = 2,
    Shuffle = 3,
    Init = 4,
    Background = 5,
    TrainClip = 6,
    TestClip = 7,
}

/// splitmix64 finalizer; a bijection on u64.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `(stream, epoch, index)` under `global`.
///
/// Injective as long as `epoch < 2^24` and `index < 2^32`.
pub fn derive(global: u64, stream: Stream, epoch: u64, index: u64) -> u64 {
    debug_assert!(epoch < (1 << 24) && index < (1 << 32));
    let key = ((stream as u64) << 56) | ((epoch & 0xff_ffff) << 32) | (index & 0xffff_ffff);
    mix64(key ^ mix64(global))
}

pub fn rng(global: u64, stream: Stream, epoch: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(global, stream, epoch, index))
}
