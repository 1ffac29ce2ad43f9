use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How per-group gradients are combined into one update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GroupWeighting {
    /// Mean over members inside a group, plain sum over groups.
    #[default]
    Equal,
    /// Each group additionally weighted by its member count.
    MemberCount,
}

/// Tunables of the tree-based trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Group size `W`: siblings normalized together.
    pub group_size: usize,
    /// Observation-subtree width `w`.
    pub adaptive_width: usize,
    /// Observation-range scale `γ`.
    pub gamma: f64,
    /// Immediate-vs-long-term weight `ω`.
    pub omega: f64,
    /// Maximum dialogue exchanges `L`.
    pub max_depth: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    /// Strictness growth rate `λ` of the termination threshold.
    pub threshold_lambda: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub group_weighting: GroupWeighting,
    /// Expand the observation subtrees of a group on the rayon pool.
    pub parallel: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            group_size: 8,
            adaptive_width: 2,
            gamma: 2.0,
            omega: 0.3,
            max_depth: 10,
            clip_epsilon: 0.2,
            kl_beta: 0.01,
            threshold_lambda: 0.02,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            group_weighting: GroupWeighting::Equal,
            parallel: false,
        }
    }
}

/// Step size for the linear-softmax policy. The LLM-scale rate (1e-5) would
/// not move a policy with a handful of parameters within a few hundred
/// steps; much above 0.05 the trap preset locks into short dialogues on some
/// seeds before the look-ahead signal has separated the two actions.
pub const DEFAULT_LEARNING_RATE: f64 = 0.02;

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size", "must be at least 2"));
        }
        if self.adaptive_width < 2 {
            return Err(Error::config("adaptive_width", "must be at least 2"));
        }
        if self.adaptive_width > self.group_size {
            return Err(Error::config(
                "adaptive_width",
                format!("must not exceed group_size ({})", self.group_size),
            ));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::config("gamma", "must be a positive real"));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config("omega", "must lie in [0, 1]"));
        }
        if self.max_depth < 1 {
            return Err(Error::config("max_depth", "must be at least 1"));
        }
        if !(self.clip_epsilon.is_finite() && self.clip_epsilon > 0.0) {
            return Err(Error::config("clip_epsilon", "must be a positive real"));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(Error::config("kl_beta", "must be nonnegative"));
        }
        if !(self.threshold_lambda.is_finite() && self.threshold_lambda >= 0.0) {
            return Err(Error::config("threshold_lambda", "must be nonnegative"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("learning_rate", "must be nonnegative"));
        }
        Ok(())
    }
}
