//! Named random streams derived from a single experiment seed.
//!
//! Every consumer of randomness asks for a stream by label (`"init"`, `"batch"`,
//! `"augment"`, `"interp"`, optionally with a `/suffix`). The label is hashed into
//! the ChaCha stream id, so streams are independent of one another and adding a new
//! consumer never perturbs the draws of an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// FNV-1a, 64 bit.
fn label_hash(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Random stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_hash(label));
    rng
}

/// Stream for the `index`-th run of a grid, keyed by (seed, run index).
pub fn run_stream(seed: u64, run_index: u64, label: &str) -> StreamRng {
    stream(seed, &format!("run{run_index}/{label}"))
}
