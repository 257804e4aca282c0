//! Deterministic 64-bit seed derivation.
//!
//! Every random stream in the simulator is derived from a single master seed
//! by mixing in a stream tag plus the coordinates that identify the consumer
//! (model index, client id, round number, grid cell). Two consumers never
//! share a stream, so results are independent of execution order and of
//! which other streams exist.

/// Stream tags. Each independent consumer of randomness mixes its tag (and
/// its coordinates) into the seed it was handed.
pub mod stream {
    /// Dataset generation, derived from the experiment master seed.
    pub const DATASET: u64 = 1;
    /// Policy randomness (client sampling, model assignment).
    pub const POLICY: u64 = 2;
    /// Base for per-(round, client) local-training shuffles.
    pub const TRAIN: u64 = 3;
    /// Per-model sub-seed inside dataset generation.
    pub const MODEL: u64 = 4;
    /// Per-client sub-seed inside one model's dataset.
    pub const CLIENT: u64 = 5;
    /// Shared ground-truth generator used by all clients in IID mode.
    pub const SHARED_TRUTH: u64 = 6;
    /// Train/test split of one client's examples.
    pub const SPLIT: u64 = 7;
    /// Grid cell master seeds, mixed from (master, policy index, K).
    pub const GRID: u64 = 8;
    /// Per-model single-model baseline sub-runs.
    pub const BASELINE: u64 = 9;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` by folding in `parts`, one splitmix64
/// round per part plus a final round. `mix(s, &[a, b])` and `mix(s, &[b, a])`
/// differ, as do `mix(s, &[])` and `s` itself.
pub fn mix(base: u64, parts: &[u64]) -> u64 {
    let mut state = base;
    for &part in parts {
        state = splitmix64(state ^ part.wrapping_mul(GOLDEN));
    }
    splitmix64(state)
}
