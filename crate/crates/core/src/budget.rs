//! Rollout budgets: closed forms, the polynomial bound, audits and metrics.

use serde::Serialize;

use crate::env::ConstantEnv;
use crate::error::{Error, Result};
use crate::trainer::{
    grow_tree_in, initial_contexts, initial_policy, observation_length, Lookahead, TreeShape,
};
use crate::tree::{BudgetCounters, Rollout, TreeNode};

fn pow_sat(base: usize, exp: usize) -> u128 {
    (base as u128).checked_pow(exp as u32).unwrap_or(u128::MAX)
}

/// `S = Σ_{i=1}^{L} W · Σ_{t=1}^{l_i} w^t`: observation-subtree nodes of one tree.
pub fn predicted_budget(group_size: usize, width: usize, gamma: f64, max_depth: usize) -> u128 {
    let mut total: u128 = 0;
    for i in 1..=max_depth {
        let l = observation_length(i, max_depth, gamma);
        let inner = (1..=l).fold(0u128, |acc, t| acc.saturating_add(pow_sat(width, t)));
        total = total.saturating_add(inner.saturating_mul(group_size as u128));
    }
    total
}

/// `W · Σ_i w^{l_i}`: observation leaves summed over all groups.
pub fn leaf_count(group_size: usize, width: usize, gamma: f64, max_depth: usize) -> u128 {
    (1..=max_depth)
        .map(|i| pow_sat(width, observation_length(i, max_depth, gamma)))
        .fold(0u128, |acc, v| acc.saturating_add(v))
        .saturating_mul(group_size as u128)
}

/// Exponent `C = 1 + γ · ln w` of the polynomial bound.
pub fn bound_exponent(width: usize, gamma: f64) -> f64 {
    1.0 + gamma * (width as f64).ln()
}

/// `(w / (w − 1)) · √w · W · L^(1 + γ ln w)`.
pub fn budget_bound(group_size: usize, width: usize, gamma: f64, max_depth: usize) -> Result<f64> {
    if width < 2 {
        return Err(Error::Domain(format!("bound needs width ≥ 2, got {width}")));
    }
    let w = width as f64;
    let b = w / (w - 1.0);
    Ok(b * w.sqrt() * group_size as f64 * (max_depth as f64).powf(bound_exponent(width, gamma)))
}

/// Chain rollouts: one group per turn.
pub fn chain_budget(group_size: usize, max_depth: usize) -> u128 {
    (group_size as u128) * (max_depth as u128)
}

/// Complete `W`-ary tree: `Σ_{t=1}^{L} W^t`.
pub fn treerpo_budget(group_size: usize, max_depth: usize) -> u128 {
    (1..=max_depth).fold(0u128, |acc, t| acc.saturating_add(pow_sat(group_size, t)))
}

/// Least-squares slope of `ln S` against `ln L`.
pub fn scaling_fit(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 4 {
        return Err(Error::Domain(format!(
            "scaling fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    if points
        .iter()
        .any(|&(l, s)| !(l > 0.0 && s > 0.0 && l.is_finite() && s.is_finite()))
    {
        return Err(Error::Domain(
            "scaling fit needs positive finite L and S".into(),
        ));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("scaling fit needs distinct L values".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

/// `(Avg.r, Avg.L)`: mean summed reward and mean length over episodes.
pub fn avg_metrics(episodes: &[Vec<f64>]) -> Result<(f64, f64)> {
    if episodes.is_empty() {
        return Err(Error::Domain("no episodes to average".into()));
    }
    let n = episodes.len() as f64;
    let r = episodes.iter().map(|e| e.iter().sum::<f64>()).sum::<f64>() / n;
    let l = episodes.iter().map(|e| e.len() as f64).sum::<f64>() / n;
    Ok((r, l))
}

/// Builds one AT-GRPO tree against a never-terminating user and returns
/// its counters.
pub fn observe_budget(
    group_size: usize,
    width: usize,
    gamma: f64,
    max_depth: usize,
) -> Result<BudgetCounters> {
    BudgetProbe::default().observe(group_size, width, gamma, max_depth)
}

/// Runs [`observe_budget`] repeatedly on one node arena. Sweeps over many
/// tree shapes spend most of their time faulting in fresh pages otherwise.
#[derive(Debug, Default)]
pub struct BudgetProbe {
    storage: Vec<TreeNode>,
}

impl BudgetProbe {
    pub fn observe(
        &mut self,
        group_size: usize,
        width: usize,
        gamma: f64,
        max_depth: usize,
    ) -> Result<BudgetCounters> {
        let env = ConstantEnv::never_terminating(2);
        let policy = initial_policy(&env, max_depth);
        let rollout = Rollout::new(&policy, &env, max_depth, 0)?;
        let shape = TreeShape {
            group_size,
            max_depth,
            omega: 0.3,
            lookahead: Lookahead::Adaptive { width, gamma },
        };
        let storage = std::mem::take(&mut self.storage);
        let contexts = initial_contexts(&env, group_size, 1.0);
        let (tree, _) = grow_tree_in(storage, contexts, &rollout, &shape, 0)?;
        let counters = tree.counters();
        self.storage = tree.into_storage();
        Ok(counters)
    }
}

/// One line of the budget report. Baseline rows leave the adaptive
/// columns empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetRow {
    pub method: &'static str,
    #[serde(rename = "W")]
    pub group_size: usize,
    pub w: Option<usize>,
    pub gamma: Option<f64>,
    #[serde(rename = "L")]
    pub max_depth: usize,
    pub predicted: u128,
    pub bound: Option<f64>,
    pub observed: Option<u64>,
    /// Fitted `ln S` vs `ln L` slope of the row's `(W, w, γ)` series.
    pub slope: Option<f64>,
    pub leaves: Option<u128>,
    pub population: Option<u64>,
    pub interactions: Option<u64>,
}

/// Grid of tree shapes to report on.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetGrid {
    pub group_sizes: Vec<usize>,
    pub widths: Vec<usize>,
    pub gammas: Vec<f64>,
    pub depths: Vec<usize>,
    /// Build every adaptive tree and fill the observed columns.
    pub observe: bool,
    /// Add chain GRPO and full TreeRPO rows.
    pub baselines: bool,
}

/// Predicted, bounded and (optionally) observed budgets over a grid.
/// Slopes are fitted on the depths with a nonzero budget and left empty
/// when fewer than four remain.
pub fn budget_report(grid: &BudgetGrid) -> Result<Vec<BudgetRow>> {
    let mut rows = Vec::new();
    let mut probe = BudgetProbe::default();
    for &big_w in &grid.group_sizes {
        for &w in &grid.widths {
            for &gamma in &grid.gammas {
                let points: Vec<(f64, f64)> = grid
                    .depths
                    .iter()
                    .map(|&l| (l as f64, predicted_budget(big_w, w, gamma, l) as f64))
                    .filter(|&(_, s)| s > 0.0)
                    .collect();
                let slope = scaling_fit(&points).ok();
                for &l in &grid.depths {
                    let observed = if grid.observe {
                        Some(probe.observe(big_w, w, gamma, l)?)
                    } else {
                        None
                    };
                    rows.push(BudgetRow {
                        method: "atgrpo",
                        group_size: big_w,
                        w: Some(w),
                        gamma: Some(gamma),
                        max_depth: l,
                        predicted: predicted_budget(big_w, w, gamma, l),
                        bound: budget_bound(big_w, w, gamma, l).ok(),
                        observed: observed.map(|c| c.observation_total()),
                        slope,
                        leaves: Some(leaf_count(big_w, w, gamma, l)),
                        population: observed.map(|c| c.population),
                        interactions: observed.map(|c| c.interactions()),
                    });
                }
            }
        }
        if grid.baselines {
            for &l in &grid.depths {
                let chain = chain_budget(big_w, l);
                let full = treerpo_budget(big_w, l);
                for (method, predicted) in [("chain_grpo", chain), ("full_treerpo", full)] {
                    if predicted == u128::MAX {
                        continue;
                    }
                    rows.push(BudgetRow {
                        method,
                        group_size: big_w,
                        w: None,
                        gamma: None,
                        max_depth: l,
                        predicted,
                        bound: None,
                        observed: None,
                        slope: None,
                        leaves: None,
                        population: None,
                        interactions: None,
                    });
                }
            }
        }
    }
    Ok(rows)
}
