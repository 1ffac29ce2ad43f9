//! Comparison methods sharing the policy, environment and update rule.
//!
//! * Chain GRPO: one group per turn, immediate rewards only, `W·L` interactions.
//! * Full TreeRPO: the complete `W`-ary tree, values aggregated bottom-up.

use serde::{Deserialize, Serialize};

use crate::budget::treerpo_budget;
use crate::env::{alpha_schedule, EnvState, Environment};
use crate::error::{Error, Result};
use crate::hparams::Hyperparams;
use crate::policy::PolicyParams;
use crate::rng::tree_seed;
use crate::trainer::{
    apply_update, expand_subtree, grow_tree, initial_contexts, summarize, Group, Lookahead, Method,
    StepMetrics, TreeShape,
};
use crate::tree::{DialogueTree, NodeId, NodeRole, Rollout};

/// Full expansion refuses deeper trees.
pub const TREERPO_MAX_DEPTH: usize = 5;

/// How a full tree turns rewards into node values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeAggregation {
    /// `ω·r + (1−ω)·mean(rewards of the leaves below)`; the look-ahead
    /// aggregation applied to the whole remaining tree.
    #[default]
    LeafMean,
    /// `ω·r + (1−ω)·mean(values of the children)`.
    RecursiveBlend,
}

/// One chain-rollout GRPO step.
pub fn chain_grpo_step(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    env: &dyn Environment,
    hparams: &Hyperparams,
    step: u64,
) -> Result<StepMetrics> {
    hparams.validate()?;
    let alpha = alpha_schedule(step, hparams.threshold_lambda);
    let old = policy.snapshot();
    let rollout = Rollout::new(&old, env, hparams.max_depth, step)?;
    let shape = TreeShape {
        group_size: hparams.group_size,
        max_depth: hparams.max_depth,
        omega: hparams.omega,
        lookahead: Lookahead::None,
    };
    let contexts = initial_contexts(env, hparams.group_size, alpha);
    let (tree, groups) = grow_tree(contexts, &rollout, &shape, tree_seed(hparams.seed, step))?;
    let update = apply_update(policy, reference, &groups, hparams)?;
    Ok(summarize(
        Method::ChainGrpo,
        step,
        alpha,
        &tree,
        &groups,
        update,
    ))
}

/// Samples the complete `W`-ary tree of depth `max_depth`.
pub fn expand_full_tree(
    contexts: Vec<EnvState>,
    rollout: &Rollout<'_>,
    group_size: usize,
    max_depth: usize,
    seed: u64,
) -> Result<DialogueTree> {
    if max_depth > TREERPO_MAX_DEPTH {
        return Err(Error::BudgetGuard {
            max_depth,
            guard: TREERPO_MAX_DEPTH,
            estimate: treerpo_budget(group_size, max_depth),
        });
    }
    let mut tree = DialogueTree::new(contexts, group_size, max_depth, seed, rollout)?;
    let roots = tree.roots().to_vec();
    for root in roots {
        expand_subtree(&mut tree, root, group_size, max_depth - 1, rollout)?;
    }
    Ok(tree)
}

/// Value of every node in a fully expanded tree, indexed by arena position.
pub fn bottom_up_values(
    tree: &DialogueTree,
    omega: f64,
    aggregation: TreeAggregation,
) -> Result<Vec<f64>> {
    let nodes = tree.nodes();
    let mut values = vec![0.0; nodes.len()];
    let mut leaf_sum = vec![0.0; nodes.len()];
    let mut leaf_count = vec![0u64; nodes.len()];
    // Children are always appended after their parent.
    for i in (0..nodes.len()).rev() {
        let n = &nodes[i];
        let r = n.turn.reward;
        if n.children.is_empty() {
            values[i] = r;
            leaf_sum[i] = r;
            leaf_count[i] = 1;
            continue;
        }
        let mut child_values = 0.0;
        for &c in &n.children {
            if c.index() <= i {
                return Err(Error::Internal(format!("child {c:?} precedes its parent")));
            }
            leaf_sum[i] += leaf_sum[c.index()];
            leaf_count[i] += leaf_count[c.index()];
            child_values += values[c.index()];
        }
        let tail = match aggregation {
            TreeAggregation::LeafMean => leaf_sum[i] / leaf_count[i] as f64,
            TreeAggregation::RecursiveBlend => child_values / n.children.len() as f64,
        };
        values[i] = omega * r + (1.0 - omega) * tail;
    }
    Ok(values)
}

/// Marks every node a group member, stores its value and collects one
/// group per sibling set (roots first, then in arena order).
fn sibling_groups(
    tree: &mut DialogueTree,
    values: &[f64],
    rollout: &Rollout<'_>,
) -> Result<Vec<Group>> {
    let ids: Vec<NodeId> = tree.ids().collect();
    for (&id, &v) in ids.iter().zip(values) {
        tree.set_role(id, NodeRole::GroupMember)?;
        tree.set_aggregated(id, v)?;
    }
    let mut groups = vec![Group::from_tree(
        tree,
        0,
        tree.roots().to_vec(),
        &rollout.encoder,
    )?];
    for &id in &ids {
        let n = tree.node(id)?;
        if !n.children.is_empty() {
            let members = n.children.to_vec();
            groups.push(Group::from_tree(
                tree,
                n.depth + 1,
                members,
                &rollout.encoder,
            )?);
        }
    }
    Ok(groups)
}

/// One full-expansion TreeRPO step.
pub fn full_treerpo_step(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    env: &dyn Environment,
    hparams: &Hyperparams,
    step: u64,
    aggregation: TreeAggregation,
) -> Result<StepMetrics> {
    hparams.validate()?;
    let alpha = alpha_schedule(step, hparams.threshold_lambda);
    let old = policy.snapshot();
    let rollout = Rollout::new(&old, env, hparams.max_depth, step)?.with_parallel(hparams.parallel);
    let contexts = initial_contexts(env, hparams.group_size, alpha);
    let mut tree = expand_full_tree(
        contexts,
        &rollout,
        hparams.group_size,
        hparams.max_depth,
        tree_seed(hparams.seed, step),
    )?;
    let values = bottom_up_values(&tree, hparams.omega, aggregation)?;
    let groups = sibling_groups(&mut tree, &values, &rollout)?;
    let update = apply_update(policy, reference, &groups, hparams)?;
    Ok(summarize(
        Method::FullTreeRpo,
        step,
        alpha,
        &tree,
        &groups,
        update,
    ))
}
