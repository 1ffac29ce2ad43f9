//! Hierarchical seed derivation.
//!
//! Every random draw in a rollout tree comes from a stream keyed by the
//! path to the node: `seed(child k of n) = derive_seed(seed(n), k)`. A node's
//! content is therefore a function of its path alone, which makes expansion
//! order (sequential, parallel, reused or fresh) unobservable.

use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

/// Per-node random stream. Cheap to construct, one per created node.
pub type NodeRng = SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Salt for the trajectory-selection stream of a tree.
pub(crate) const SELECT_SALT: u64 = 0x5E1E_C7ED_0000_0001;
/// Salt for evaluation-episode streams.
pub(crate) const EVAL_SALT: u64 = 0xE7A1_0000_0000_0002;

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of child stream `index` from `parent`.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    finalize(parent ^ finalize(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

/// Seed of the tree built at training step `step` of a run seeded with `run_seed`.
pub fn tree_seed(run_seed: u64, step: u64) -> u64 {
    derive_seed(finalize(run_seed), step)
}

pub fn node_rng(seed: u64) -> NodeRng {
    NodeRng::seed_from_u64(seed)
}
