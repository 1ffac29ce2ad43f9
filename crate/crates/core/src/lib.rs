//! Tree-structured group-relative policy optimization for multi-turn
//! dialogue against a simulated user.
//!
//! The crate is organized bottom-up:
//!
//! * [`rng`], [`tree`], [`hparams`]: deterministic randomness, the arena
//!   rollout tree and tunables.
//! * [`env`]: user agents that answer each action with a termination
//!   probability.
//! * [`policy`]: linear-softmax policy with analytic gradients.
//! * [`trainer`]: the adaptive look-ahead tree builder and update rule.
//! * [`baselines`]: chain GRPO and full-expansion TreeRPO.
//! * [`budget`]: closed-form budgets, the polynomial bound and metrics.
//! * [`experiment`]: configs, presets and the multi-seed runner.

pub mod baselines;
pub mod budget;
pub mod env;
pub mod error;
pub mod experiment;
pub mod hparams;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod tree;

pub use baselines::{chain_grpo_step, full_treerpo_step, TreeAggregation};
pub use budget::{avg_metrics, budget_bound, predicted_budget, scaling_fit};
pub use env::{
    alpha_schedule, termination_probability, ContextEncoder, EnvConfig, EnvState, Environment,
    RemoteEnv, TerminationMode, TopicEnv, TrapConfig, TrapEnv, TurnRecord,
};
pub use error::{Error, Result};
pub use experiment::{compare_methods, load_config, run_experiment, ExperimentConfig, Preset};
pub use hparams::{GroupWeighting, Hyperparams};
pub use policy::{Gradient, PolicyParams, Snapshot};
pub use trainer::{
    build_tree, group_advantages, observation_length, train_run, train_step, Group, Method,
    RunOptions, RunReport, StepMetrics,
};
pub use tree::{BudgetCounters, DialogueTree, NodeId, NodeRole, TreeNode};
