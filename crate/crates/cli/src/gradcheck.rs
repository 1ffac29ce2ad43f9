//! Finite-difference check of the policy gradients on groups drawn from real trees.

use atgrpo_core::rng::{derive_seed, node_rng, tree_seed};
use atgrpo_core::trainer::{
    build_tree, group_objective, group_objective_grad, initial_contexts, initial_policy,
};
use atgrpo_core::{Environment, ExperimentConfig, PolicyParams, Result};
use rand::Rng;

const STEP: f64 = 1e-6;
pub const LOG_PROB_TOLERANCE: f64 = 1e-5;
pub const OBJECTIVE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub instances: usize,
    pub groups: usize,
    pub worst_log_prob: f64,
    pub worst_objective: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_log_prob <= LOG_PROB_TOLERANCE && self.worst_objective <= OBJECTIVE_TOLERANCE
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-6)
}

fn central_difference(
    policy: &PolicyParams,
    mut f: impl FnMut(&PolicyParams) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(policy.weights().len());
    for k in 0..policy.weights().len() {
        let mut plus = policy.clone();
        plus.weights_mut()[k] += STEP;
        let mut minus = policy.clone();
        minus.weights_mut()[k] -= STEP;
        out.push((f(&plus)? - f(&minus)?) / (2.0 * STEP));
    }
    Ok(out)
}

fn perturbed(policy: &PolicyParams, scale: f64, rng: &mut impl Rng) -> PolicyParams {
    let mut p = policy.clone();
    for w in p.weights_mut() {
        *w += rng.random_range(-scale..scale);
    }
    p
}

/// Builds `instances` trees under random old policies and compares every
/// group's analytic gradients against central differences.
pub fn run(
    config: &ExperimentConfig,
    env: &dyn Environment,
    instances: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut report = GradCheck {
        instances,
        groups: 0,
        worst_log_prob: 0.0,
        worst_objective: 0.0,
    };
    for i in 0..instances {
        let h = config.hyperparams(seed);
        let mut rng = node_rng(derive_seed(seed, i as u64));
        let reference = initial_policy(env, h.max_depth);
        let old = perturbed(&reference, 1.0, &mut rng);
        // Even instances sit on-policy; odd ones move far enough for the clip to bind.
        let live = if i % 2 == 0 {
            old.clone()
        } else {
            perturbed(&old, 0.3, &mut rng)
        };
        let contexts = initial_contexts(env, h.group_size, 1.0);
        let (_, groups) = build_tree(contexts, &old, env, &h, tree_seed(seed, i as u64), 0)?;
        for g in &groups {
            report.groups += 1;
            for (f, &a) in g.features.iter().zip(&g.actions) {
                let analytic = live.log_prob_grad(f, a)?;
                let numeric = central_difference(&live, |p| Ok(p.action_distribution(f)?[a].ln()))?;
                report.worst_log_prob = report
                    .worst_log_prob
                    .max(rel_err(analytic.values(), &numeric));
            }
            let (eps, beta) = (h.clip_epsilon, h.kl_beta);
            let analytic = group_objective_grad(g, &live, &old, &reference, eps, beta)?;
            let numeric = central_difference(&live, |p| {
                group_objective(g, p, &old, &reference, eps, beta)
            })?;
            report.worst_objective = report
                .worst_objective
                .max(rel_err(analytic.values(), &numeric));
        }
    }
    Ok(report)
}
