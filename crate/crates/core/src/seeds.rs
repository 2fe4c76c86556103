//! Deterministic sub-seed derivation.
//!
//! Every random decision in the crate flows from a single user-facing
//! `u64` seed. Components that need their own RNG stream (shuffling,
//! noise injection, weight init, sampling) derive a sub-seed from the
//! base seed plus a fixed salt, so streams never alias each other and
//! runs replay bit-identically.

/// Fixed salts for the independent RNG streams. Values are arbitrary but
/// must never change once checkpoints/tests depend on them.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Stream {
    DatasetSample = 1,
    BatchShuffle = 2,
    Noise = 3,
    WeightInit = 4,
    EvalSample = 5,
    GradProbe = 6,
}

/// Mix `base`, a stream salt, and an index (e.g. epoch or pool number)
/// into a well-spread 64-bit sub-seed (splitmix64 finalizer).
pub(crate) fn derive(base: u64, stream: Stream, index: u64) -> u64 {
    let mut z = base
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
