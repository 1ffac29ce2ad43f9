//! Shared fixtures for the benchmarks.

use atgrpo_core::rng::derive_seed;
use atgrpo_core::trainer::{build_tree, initial_contexts, initial_policy};
use atgrpo_core::{EnvConfig, Environment, Group, Hyperparams, PolicyParams, TopicEnv};

/// Topic environment at its preset, the widest built-in action space.
pub fn topics() -> TopicEnv {
    TopicEnv::new(EnvConfig::topics_preset()).expect("preset is valid")
}

/// Policy with small deterministic weights so rollouts are not uniform.
pub fn warm_policy(env: &dyn Environment, max_depth: usize) -> PolicyParams {
    let mut p = initial_policy(env, max_depth);
    for (k, w) in p.weights_mut().iter_mut().enumerate() {
        *w = ((derive_seed(7, k as u64) % 2001) as f64 - 1000.0) / 2000.0;
    }
    p
}

/// Groups of one default-shaped tree.
pub fn groups(env: &dyn Environment, h: &Hyperparams, policy: &PolicyParams) -> Vec<Group> {
    let contexts = initial_contexts(env, h.group_size, 1.0);
    build_tree(contexts, policy, env, h, 11, 0)
        .expect("tree builds")
        .1
}
