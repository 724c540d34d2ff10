//! Seeded random streams.
//!
//! Every chain owns a private [`ChainRng`]. Independent streams are derived
//! from one 64-bit master seed with a counter: the generator is keyed by
//! `seed_from_u64(master)` and the ChaCha stream id is set to the counter.
//! Stream ids are assigned by role so that no two consumers share one:
//!
//! | role                                  | stream id             |
//! |---------------------------------------|-----------------------|
//! | hierarchy-level updates, simulation   | `0`                   |
//! | stage-one chain of individual `j`     | `STAGE1_BASE + j`     |
//! | per-individual updates in a hierarchy | `INDIVIDUAL_BASE + j` |
//! | path imputation for individual `j`    | `IMPUTE_BASE + j`     |
//!
//! Results therefore depend only on the master seed and the individual's
//! position in the input list, never on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ChainRng = ChaCha8Rng;

/// First stream id used for stage-one chains.
pub const STAGE1_BASE: u64 = 1;

/// First stream id used for per-individual updates inside a hierarchical chain.
pub const INDIVIDUAL_BASE: u64 = 1 << 32;

/// First stream id used for path imputation.
pub const IMPUTE_BASE: u64 = 1 << 40;

/// Stream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Convenience for the master stream (stream 0) of a seed.
pub fn master(seed: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(seed)
}
