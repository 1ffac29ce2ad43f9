//! The frozen user-agent environment.
//!
//! A user agent answers every dialogue-agent action with a termination
//! probability `p = min(α · 2 · P(terminate), 1)`; the agent's immediate reward
//! is `1 − p`. The strictness `α` grows with the training step and is frozen
//! for a whole rollout tree. The previous turn's `p` travels with the state and
//! is part of the context encoding seen by the policy.

mod remote;
mod topics;
mod trap;

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::NodeRng;

pub use remote::{serve, EnvRequest, EnvResponse, RemoteEnv};
pub use topics::{EnvConfig, TopicEnv};
pub use trap::{TrapConfig, TrapEnv};

pub const CONTINUE: &str = "[Continue]";
pub const TERMINATE: &str = "[Terminate]";

/// One dialogue exchange: the agent's action and the user's reaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub action: usize,
    pub signal: Cow<'static, str>,
    #[serde(rename = "p")]
    pub p_term: f64,
    pub reward: f64,
    pub terminated: bool,
}

impl TurnRecord {
    /// Builds a record with `reward = 1 − p`. A probability of one always
    /// terminates, whatever `terminated` says.
    pub fn new(action: usize, signal: Cow<'static, str>, p_term: f64, terminated: bool) -> Self {
        Self {
            action,
            signal,
            p_term,
            reward: 1.0 - p_term,
            terminated: terminated || p_term >= 1.0,
        }
    }
}

/// Per-branch environment state. Value-like: copied at every branch point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub engagement: f64,
    pub turn_index: usize,
    /// Propagated termination probability of the previous turn (`p_init = 0`).
    pub last_p: f64,
    /// Strictness multiplier, frozen per tree.
    pub alpha: f64,
    pub last_action: Option<usize>,
    pub trap_uses: u32,
    pub explore_uses: u32,
    /// Bitmask of topics already visited (topic environment).
    pub visited: u64,
    pub terminated: bool,
}

impl EnvState {
    pub fn initial(alpha: f64) -> Self {
        Self {
            engagement: 0.0,
            turn_index: 0,
            last_p: 0.0,
            alpha,
            last_action: None,
            trap_uses: 0,
            explore_uses: 0,
            visited: 0,
            terminated: false,
        }
    }

    /// Common bookkeeping after a turn with action `action` and probability `p`.
    pub(crate) fn advance(&self, action: usize, p: f64, terminated: bool) -> Self {
        Self {
            turn_index: self.turn_index + 1,
            last_p: p,
            last_action: Some(action),
            terminated,
            ..self.clone()
        }
    }
}

/// Below `p = 1` the user either always continues or terminates with probability `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationMode {
    #[default]
    Threshold,
    Bernoulli,
}

impl TerminationMode {
    pub fn decide(self, p: f64, rng: &mut NodeRng) -> bool {
        match self {
            TerminationMode::Threshold => p >= 1.0,
            TerminationMode::Bernoulli => p >= 1.0 || rng.random::<f64>() < p,
        }
    }
}

/// `α = 1 + λ · ⌊step / 10⌋`.
pub fn alpha_schedule(step: u64, lambda: f64) -> f64 {
    1.0 + lambda * (step / 10) as f64
}

/// `p = min(α · 2 · P(terminate), 1)`.
pub fn termination_probability(base_p: f64, alpha: f64) -> f64 {
    (alpha * 2.0 * base_p).min(1.0)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A user agent the dialogue agent can talk to.
///
/// Implementations must be pure given `(history, state, action, step, rng)`:
/// the tree relies on it to make expansion order irrelevant.
pub trait Environment: Sync {
    fn num_actions(&self) -> usize;

    fn initial_state(&self, alpha: f64) -> EnvState {
        EnvState::initial(alpha)
    }

    /// Whether `step` reads `history`. Local environments keep everything
    /// they need in [`EnvState`] and skip the history walk.
    fn needs_history(&self) -> bool {
        false
    }

    fn step(
        &self,
        history: &[TurnRecord],
        state: &EnvState,
        action: usize,
        step: u64,
        rng: &mut NodeRng,
    ) -> Result<(TurnRecord, EnvState)>;

    fn reset(&self) -> Result<()> {
        Ok(())
    }
}

pub(crate) fn check_step(state: &EnvState, action: usize, num_actions: usize) -> Result<()> {
    if state.terminated {
        return Err(Error::Usage("step on a terminated dialogue".into()));
    }
    if action >= num_actions {
        return Err(Error::Domain(format!(
            "action {action} out of range for {num_actions} actions"
        )));
    }
    Ok(())
}

/// Fixed-layout context features:
/// `[one-hot(last action) | turn / horizon | engagement | last p]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContextEncoder {
    pub num_actions: usize,
    pub horizon: usize,
}

impl ContextEncoder {
    pub fn new(num_actions: usize, horizon: usize) -> Self {
        Self {
            num_actions,
            horizon: horizon.max(1),
        }
    }

    pub fn len(&self) -> usize {
        self.num_actions + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn last_p_index(&self) -> usize {
        self.num_actions + 2
    }

    pub fn encode(&self, state: &EnvState) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.encode_into(state, &mut out);
        out
    }

    pub fn encode_into(&self, state: &EnvState, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.len());
        out.fill(0.0);
        if let Some(a) = state.last_action {
            out[a] = 1.0;
        }
        out[self.num_actions] = state.turn_index as f64 / self.horizon as f64;
        out[self.num_actions + 1] = state.engagement;
        out[self.num_actions + 2] = state.last_p;
    }
}

/// Emits the same termination probability for every action. With `p < 1`
/// and threshold termination no dialogue ever ends, which is what budget
/// audits need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantEnv {
    pub num_actions: usize,
    pub p: f64,
}

impl ConstantEnv {
    pub fn never_terminating(num_actions: usize) -> Self {
        Self {
            num_actions,
            p: 0.0,
        }
    }
}

impl Environment for ConstantEnv {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn step(
        &self,
        _history: &[TurnRecord],
        state: &EnvState,
        action: usize,
        _step: u64,
        _rng: &mut NodeRng,
    ) -> Result<(TurnRecord, EnvState)> {
        check_step(state, action, self.num_actions)?;
        let terminated = self.p >= 1.0;
        let signal = if terminated { TERMINATE } else { CONTINUE };
        let turn = TurnRecord::new(action, Cow::Borrowed(signal), self.p, terminated);
        let next = state.advance(action, self.p, terminated);
        Ok((turn, next))
    }
}
