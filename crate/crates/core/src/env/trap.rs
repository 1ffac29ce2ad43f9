use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::{
    check_step, termination_probability, EnvState, Environment, TerminationMode, TurnRecord,
    CONTINUE, TERMINATE,
};
use crate::error::{Error, Result};
use crate::rng::NodeRng;

/// Two-action immediate-reward trap.
///
/// The trap action is cheap now and expensive later: every prior use adds
/// `trap_step` to the base termination probability of *every* action. The
/// explore action is costly for its first `settle_after` uses and cheap from
/// then on.
///
/// ```text
/// base_p(trap)    = trap_base + trap_step · trap_uses
/// base_p(explore) = (explore_uses < settle_after ? explore_base : explore_settled)
///                   + trap_step · trap_uses
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrapConfig {
    pub trap_base: f64,
    pub trap_step: f64,
    pub explore_base: f64,
    pub explore_settled: f64,
    pub settle_after: u32,
    pub termination: TerminationMode,
}

pub const TRAP_ACTION: usize = 0;
pub const EXPLORE_ACTION: usize = 1;

impl Default for TrapConfig {
    fn default() -> Self {
        Self {
            trap_base: 0.05,
            trap_step: 0.12,
            explore_base: 0.35,
            explore_settled: 0.05,
            settle_after: 2,
            termination: TerminationMode::Threshold,
        }
    }
}

impl TrapConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("trap_base", self.trap_base),
            ("trap_step", self.trap_step),
            ("explore_base", self.explore_base),
            ("explore_settled", self.explore_settled),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn base_terminate_prob(&self, state: &EnvState, action: usize) -> Result<f64> {
        let penalty = self.trap_step * state.trap_uses as f64;
        let base = match action {
            TRAP_ACTION => self.trap_base,
            EXPLORE_ACTION if state.explore_uses < self.settle_after => self.explore_base,
            EXPLORE_ACTION => self.explore_settled,
            _ => {
                return Err(Error::Domain(format!(
                    "action {action} out of range for the trap environment"
                )))
            }
        };
        Ok((base + penalty).min(1.0))
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrapEnv {
    config: TrapConfig,
}

impl TrapEnv {
    pub fn new(config: TrapConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &TrapConfig {
        &self.config
    }
}

impl Environment for TrapEnv {
    fn num_actions(&self) -> usize {
        2
    }

    fn step(
        &self,
        _history: &[TurnRecord],
        state: &EnvState,
        action: usize,
        _step: u64,
        rng: &mut NodeRng,
    ) -> Result<(TurnRecord, EnvState)> {
        check_step(state, action, 2)?;
        let base = self.config.base_terminate_prob(state, action)?;
        let p = termination_probability(base, state.alpha);
        let terminated = self.config.termination.decide(p, rng);

        let mut next = state.advance(action, p, terminated);
        if action == TRAP_ACTION {
            next.trap_uses += 1;
        } else {
            next.explore_uses += 1;
        }
        // Engagement reports how far exploration has settled.
        let settle = self.config.settle_after.max(1);
        next.engagement = next.explore_uses.min(settle) as f64 / settle as f64;

        let signal = if terminated { TERMINATE } else { CONTINUE };
        Ok((
            TurnRecord::new(action, Cow::Borrowed(signal), p, terminated),
            next,
        ))
    }
}
