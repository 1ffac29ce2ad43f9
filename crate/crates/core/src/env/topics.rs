use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::{
    check_step, logistic, termination_probability, EnvState, Environment, TerminationMode,
    TurnRecord, CONTINUE, TERMINATE,
};
use crate::error::{Error, Result};
use crate::rng::NodeRng;

/// Interest threshold above which a first visit unlocks extra engagement.
pub const UNLOCK_INTEREST: f64 = 0.8;

/// Synthetic user with a hidden per-topic interest profile.
///
/// Base termination probability of action `a` from state `s`:
///
/// ```text
/// e'     = s.engagement · decay + interest[a]
/// base_p = logistic(base_logit − k_e · e' + k_t · trap_uses − trap_bonus · [a = trap])
/// ```
///
/// The first visit to a topic with interest ≥ 0.8 adds `exploration_unlock`
/// to the engagement carried into later turns, not to the current one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub num_topics: usize,
    pub interest_profile: Vec<f64>,
    pub engagement_decay: f64,
    /// `k_e`.
    pub engagement_weight: f64,
    pub trap_action: Option<usize>,
    pub trap_bonus: f64,
    /// `k_t`.
    pub trap_penalty_rate: f64,
    pub exploration_unlock: f64,
    pub base_logit: f64,
    pub termination: TerminationMode,
}

impl EnvConfig {
    /// Several topics, one high-interest topic whose value only shows after
    /// the first visit, and a trap topic with immediate appeal.
    pub fn topics_preset() -> Self {
        Self {
            num_topics: 4,
            interest_profile: vec![0.5, 0.4, 0.8, 0.0],
            engagement_decay: 0.6,
            engagement_weight: 1.5,
            trap_action: Some(3),
            trap_bonus: 1.5,
            trap_penalty_rate: 0.8,
            exploration_unlock: 2.0,
            base_logit: 0.5,
            termination: TerminationMode::Threshold,
        }
    }

    /// Rewards depend on the current action only.
    pub fn flat_preset() -> Self {
        Self {
            num_topics: 4,
            interest_profile: vec![0.2, 0.5, 0.8, 0.35],
            engagement_decay: 0.01,
            engagement_weight: 2.0,
            trap_action: None,
            trap_bonus: 0.0,
            trap_penalty_rate: 0.0,
            exploration_unlock: 0.0,
            base_logit: 0.5,
            termination: TerminationMode::Threshold,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_topics == 0 || self.num_topics > 64 {
            return Err(Error::config("num_topics", "must lie in 1..=64"));
        }
        if self.interest_profile.len() != self.num_topics {
            return Err(Error::config(
                "interest_profile",
                format!(
                    "has {} entries, expected num_topics = {}",
                    self.interest_profile.len(),
                    self.num_topics
                ),
            ));
        }
        if self
            .interest_profile
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::config(
                "interest_profile",
                "entries must lie in [0, 1]",
            ));
        }
        if !(self.engagement_decay > 0.0 && self.engagement_decay < 1.0) {
            return Err(Error::config("engagement_decay", "must lie in (0, 1)"));
        }
        for (key, v) in [
            ("engagement_weight", self.engagement_weight),
            ("trap_bonus", self.trap_bonus),
            ("trap_penalty_rate", self.trap_penalty_rate),
            ("exploration_unlock", self.exploration_unlock),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, "must be a nonnegative real"));
            }
        }
        if !self.base_logit.is_finite() {
            return Err(Error::config("base_logit", "must be finite"));
        }
        if let Some(t) = self.trap_action {
            if t >= self.num_topics {
                return Err(Error::config("trap_action", "must be a valid topic index"));
            }
        }
        Ok(())
    }

    fn immediate_engagement(&self, state: &EnvState, action: usize) -> f64 {
        state.engagement * self.engagement_decay + self.interest_profile[action]
    }

    /// Synthetic `P(terminate | history, action)` before strictness scaling.
    pub fn base_terminate_prob(&self, state: &EnvState, action: usize) -> Result<f64> {
        if action >= self.num_topics {
            return Err(Error::Domain(format!(
                "action {action} out of range for {} topics",
                self.num_topics
            )));
        }
        let is_trap = self.trap_action == Some(action);
        let x = self.base_logit - self.engagement_weight * self.immediate_engagement(state, action)
            + self.trap_penalty_rate * state.trap_uses as f64
            - if is_trap { self.trap_bonus } else { 0.0 };
        Ok(logistic(x))
    }
}

#[derive(Debug, Clone)]
pub struct TopicEnv {
    config: EnvConfig,
}

impl TopicEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }
}

impl Environment for TopicEnv {
    fn num_actions(&self) -> usize {
        self.config.num_topics
    }

    fn step(
        &self,
        _history: &[TurnRecord],
        state: &EnvState,
        action: usize,
        _step: u64,
        rng: &mut NodeRng,
    ) -> Result<(TurnRecord, EnvState)> {
        check_step(state, action, self.config.num_topics)?;
        let cfg = &self.config;
        let base = cfg.base_terminate_prob(state, action)?;
        let p = termination_probability(base, state.alpha);
        let terminated = cfg.termination.decide(p, rng);

        let mut next = state.advance(action, p, terminated);
        let bit = 1u64 << action;
        let mut engagement = cfg.immediate_engagement(state, action);
        if cfg.interest_profile[action] >= UNLOCK_INTEREST && state.visited & bit == 0 {
            engagement += cfg.exploration_unlock;
        }
        next.engagement = engagement;
        next.visited |= bit;
        if cfg.trap_action == Some(action) {
            next.trap_uses += 1;
        }

        let signal = if terminated { TERMINATE } else { CONTINUE };
        Ok((
            TurnRecord::new(action, Cow::Borrowed(signal), p, terminated),
            next,
        ))
    }
}
