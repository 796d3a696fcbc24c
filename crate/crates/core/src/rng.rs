//! Seeded random number helpers.
//!
//! Every stochastic stage (dataset synthesis, task sampling, ray sampling,
//! weight init) derives its generator from a user seed plus a fixed stream
//! label, so independent stages never share a stream and whole runs replay
//! bit-exactly from one `--seed`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit hash of a label (FNV-1a).
fn label_hash(label: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer, used to decorrelate seed/label/index mixtures.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a generator for `label` from the run seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed ^ label_hash(label)))
}

/// Derive a generator for the `index`-th item of a labelled stream.
///
/// Used where work items must be reproducible independently of processing
/// order (per-frame synthesis, per-outer-step task draws, per-ray jitter).
pub fn stream_indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ label_hash(label)) ^ index))
}
