//! Adaptive tree-based group-relative policy optimization.
//!
//! One training step builds a rollout tree layer by layer. Each layer is a
//! group of `W` siblings; every member looks `l_i` layers ahead through a
//! width-`w` observation subtree, its reward is blended with the mean reward
//! of the subtree's leaves, and the blended rewards are normalized within the
//! group. One non-leaf member is then chosen at random and its children,
//! topped up to `W`, form the next group. All groups feed a single clipped,
//! KL-regularized policy-gradient update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::env::{alpha_schedule, ContextEncoder, EnvState, Environment};
use crate::error::{Error, Result};
use crate::hparams::{GroupWeighting, Hyperparams};
use crate::policy::{Buf, Gradient, PolicyParams, KL_FLOOR};
use crate::rng::{derive_seed, node_rng, tree_seed, EVAL_SALT, SELECT_SALT};
use crate::tree::{DialogueTree, NodeId, NodeRole, Rollout, TreeNode};

/// Population standard deviations below this count as zero.
pub const SIGMA_GUARD: f64 = 1e-12;

/// Training method. Names match the config and CLI spelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "atgrpo")]
    AtGrpo,
    #[serde(rename = "chain_grpo")]
    ChainGrpo,
    #[serde(rename = "full_treerpo")]
    FullTreeRpo,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::AtGrpo, Method::ChainGrpo, Method::FullTreeRpo];

    pub fn name(self) -> &'static str {
        match self {
            Method::AtGrpo => "atgrpo",
            Method::ChainGrpo => "chain_grpo",
            Method::FullTreeRpo => "full_treerpo",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "method",
                    format!("unknown method {s:?}; expected atgrpo, chain_grpo or full_treerpo"),
                )
            })
    }
}

/// `l_i = round(γ · ln(L − i + 1))`, ties away from zero.
///
/// # Panics
/// If `i` is outside `1..=max_depth`.
pub fn observation_length(i: usize, max_depth: usize, gamma: f64) -> usize {
    assert!(
        (1..=max_depth).contains(&i),
        "turn index {i} outside 1..={max_depth}"
    );
    (gamma * ((max_depth - i + 1) as f64).ln()).round() as usize
}

/// How far each group member looks ahead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lookahead {
    /// Width `w`, depth `observation_length(depth + 1, L, γ)`.
    Adaptive { width: usize, gamma: f64 },
    /// Immediate reward only.
    None,
    /// Width `width`, all the way to the maximum depth.
    Full { width: usize },
}

impl Lookahead {
    pub fn width(&self) -> usize {
        match *self {
            Lookahead::Adaptive { width, .. } | Lookahead::Full { width } => width,
            Lookahead::None => 0,
        }
    }

    pub fn length(&self, depth: usize, max_depth: usize) -> usize {
        match *self {
            Lookahead::Adaptive { gamma, .. } => observation_length(depth + 1, max_depth, gamma),
            Lookahead::None => 0,
            Lookahead::Full { .. } => max_depth - 1 - depth,
        }
    }
}

/// Expands the observation subtree of `node` and returns its leaves.
pub fn expand_subtree(
    tree: &mut DialogueTree,
    node: NodeId,
    width: usize,
    depth: usize,
    rollout: &Rollout<'_>,
) -> Result<Vec<NodeId>> {
    tree.expand_in_place(node, width, depth, rollout)
}

/// `r' = ω · r + (1 − ω) · mean(leaf rewards)`, stored on `node`.
pub fn aggregate_reward(
    tree: &mut DialogueTree,
    node: NodeId,
    leaves: &[NodeId],
    omega: f64,
) -> Result<f64> {
    if leaves.is_empty() {
        return Err(Error::Internal(format!(
            "{node:?} has no observation leaves"
        )));
    }
    let mut sum = 0.0;
    for &l in leaves {
        sum += tree.node(l)?.turn.reward;
    }
    let r = tree.node(node)?.turn.reward;
    let value = omega * r + (1.0 - omega) * sum / leaves.len() as f64;
    tree.set_aggregated(node, value)?;
    Ok(value)
}

/// Population mean and standard deviation.
pub fn population_stats(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(r'_j − μ) / σ`, all zero when `σ < 1e-12`.
pub fn group_advantages(aggregated: &[f64]) -> Vec<f64> {
    if aggregated.is_empty() {
        return Vec::new();
    }
    let (mean, std) = population_stats(aggregated);
    if std < SIGMA_GUARD {
        return vec![0.0; aggregated.len()];
    }
    aggregated.iter().map(|r| (r - mean) / std).collect()
}

/// Siblings normalized together, with everything the update needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Group {
    pub depth: usize,
    pub members: Vec<NodeId>,
    pub actions: Vec<usize>,
    /// Encoded context each member's action was chosen in.
    pub features: Vec<Vec<f64>>,
    /// Immediate rewards.
    pub rewards: Vec<f64>,
    /// Rewards after look-ahead aggregation.
    pub aggregated: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub advantages: Vec<f64>,
}

impl Group {
    /// Collects a group from tree nodes whose aggregated reward is already set.
    pub fn from_tree(
        tree: &DialogueTree,
        depth: usize,
        members: Vec<NodeId>,
        encoder: &ContextEncoder,
    ) -> Result<Self> {
        let mut actions = Vec::with_capacity(members.len());
        let mut features = Vec::with_capacity(members.len());
        let mut rewards = Vec::with_capacity(members.len());
        let mut aggregated = Vec::with_capacity(members.len());
        for &m in &members {
            let n = tree.node(m)?;
            actions.push(n.turn.action);
            rewards.push(n.turn.reward);
            aggregated.push(n.aggregated_reward.ok_or_else(|| {
                Error::Internal(format!("group member {m:?} has no aggregated reward"))
            })?);
            features.push(encoder.encode(tree.context_of(m)?));
        }
        let (mean, std) = population_stats(&aggregated);
        let advantages = group_advantages(&aggregated);
        Ok(Self {
            depth,
            members,
            actions,
            features,
            rewards,
            aggregated,
            mean,
            std,
            advantages,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Picks a non-leaf member uniformly and marks it. `None` means every
/// member is a leaf and tree construction stops.
pub fn select_trajectory_node(
    tree: &mut DialogueTree,
    group: &Group,
    rng: &mut impl Rng,
) -> Result<Option<NodeId>> {
    let mut candidates = Vec::with_capacity(group.len());
    for &m in &group.members {
        if !tree.is_leaf(m)? {
            candidates.push(m);
        }
    }
    if candidates.is_empty() {
        return Ok(None);
    }
    let chosen = candidates[rng.random_range(0..candidates.len())];
    tree.set_role(chosen, NodeRole::TrajectorySelected)?;
    tree.push_trajectory(chosen);
    Ok(Some(chosen))
}

/// Tops `node`'s children up to `group_size` and returns them as the next
/// group's members.
pub fn populate_group(
    tree: &mut DialogueTree,
    node: NodeId,
    group_size: usize,
    rollout: &Rollout<'_>,
) -> Result<Vec<NodeId>> {
    if tree.is_leaf(node)? {
        return Err(Error::Usage(format!(
            "{node:?} is a leaf and has no next turn"
        )));
    }
    tree.populate_children(node, group_size, group_size, rollout)
}

/// Shape of a layered rollout tree.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeShape {
    pub group_size: usize,
    pub max_depth: usize,
    pub omega: f64,
    pub lookahead: Lookahead,
}

impl TreeShape {
    pub fn adaptive(h: &Hyperparams) -> Self {
        Self {
            group_size: h.group_size,
            max_depth: h.max_depth,
            omega: h.omega,
            lookahead: Lookahead::Adaptive {
                width: h.adaptive_width,
                gamma: h.gamma,
            },
        }
    }
}

/// Layered construction: observe, aggregate, normalize, select, populate.
pub fn grow_tree(
    contexts: Vec<EnvState>,
    rollout: &Rollout<'_>,
    shape: &TreeShape,
    seed: u64,
) -> Result<(DialogueTree, Vec<Group>)> {
    grow_tree_in(Vec::new(), contexts, rollout, shape, seed)
}

/// [`grow_tree`] on the recycled arena of an earlier tree.
pub(crate) fn grow_tree_in(
    storage: Vec<TreeNode>,
    contexts: Vec<EnvState>,
    rollout: &Rollout<'_>,
    shape: &TreeShape,
    seed: u64,
) -> Result<(DialogueTree, Vec<Group>)> {
    let mut tree = DialogueTree::new_in(
        storage,
        contexts,
        shape.group_size,
        shape.max_depth,
        seed,
        rollout,
    )?;
    let mut members = tree.roots().to_vec();
    let mut groups = Vec::new();
    let width = shape.lookahead.width();

    for depth in 0..shape.max_depth {
        let l = shape.lookahead.length(depth, shape.max_depth);
        if rollout.parallel {
            let jobs: Vec<(NodeId, usize)> = members.iter().map(|&m| (m, l)).collect();
            let leaf_sets = tree.expand_many(&jobs, width, rollout)?;
            for (&m, leaves) in members.iter().zip(&leaf_sets) {
                aggregate_reward(&mut tree, m, leaves, shape.omega)?;
            }
        } else {
            // Aggregating while the subtree is still in cache.
            for &m in &members {
                let leaves = tree.expand_in_place(m, width, l, rollout)?;
                aggregate_reward(&mut tree, m, &leaves, shape.omega)?;
            }
        }
        let group = Group::from_tree(&tree, depth, members, &rollout.encoder)?;

        let mut rng = node_rng(derive_seed(seed ^ SELECT_SALT, depth as u64));
        let selected = if depth + 1 < shape.max_depth {
            select_trajectory_node(&mut tree, &group, &mut rng)?
        } else {
            None
        };
        groups.push(group);
        match selected {
            Some(node) => {
                members = tree.populate_children(node, shape.group_size, width, rollout)?
            }
            None => break,
        }
    }
    Ok((tree, groups))
}

/// Builds one AT-GRPO tree with the adaptive look-ahead of `hparams`.
pub fn build_tree(
    contexts: Vec<EnvState>,
    policy_old: &PolicyParams,
    env: &dyn Environment,
    hparams: &Hyperparams,
    seed: u64,
    step: u64,
) -> Result<(DialogueTree, Vec<Group>)> {
    let rollout =
        Rollout::new(policy_old, env, hparams.max_depth, step)?.with_parallel(hparams.parallel);
    grow_tree(contexts, &rollout, &TreeShape::adaptive(hparams), seed)
}

struct MemberTerms {
    /// Surrogate contribution `min(ρÂ, clip(ρ)Â)`.
    surrogate: f64,
    /// Coefficient on `∇ log π_θ(a)` (zero when the clipped branch wins).
    ratio_coeff: f64,
    kl: f64,
    probs: Buf,
    ref_log: Buf,
}

fn member_terms(
    group: &Group,
    j: usize,
    live: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    epsilon: f64,
) -> Result<MemberTerms> {
    let f = &group.features[j];
    let a = group.actions[j];
    let adv = group.advantages[j];
    let probs = live.probs_buf(f);
    let old_probs = old.probs_buf(f);
    let ratio = probs[a] / old_probs[a];
    if !ratio.is_finite() {
        return Err(Error::NonFiniteRatio {
            node: group.members[j],
            ratio,
        });
    }
    let unclipped = ratio * adv;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
    let (surrogate, ratio_coeff) = if unclipped <= clipped {
        (unclipped, unclipped)
    } else {
        (clipped, 0.0)
    };
    let ref_log: Buf = reference
        .probs_buf(f)
        .iter()
        .map(|q| q.max(KL_FLOOR).ln())
        .collect();
    let kl = probs
        .iter()
        .zip(&ref_log)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lq)| p * (p.ln() - lq))
        .sum::<f64>();
    Ok(MemberTerms {
        surrogate,
        ratio_coeff,
        kl,
        probs,
        ref_log,
    })
}

fn check_shapes(live: &PolicyParams, others: [&PolicyParams; 2]) -> Result<()> {
    for p in others {
        if p.num_actions() != live.num_actions() || p.feature_len() != live.feature_len() {
            return Err(Error::Domain(format!(
                "policy shape {}×{} differs from {}×{}",
                p.num_actions(),
                p.feature_len(),
                live.num_actions(),
                live.feature_len()
            )));
        }
    }
    Ok(())
}

/// `J = mean_j [min(ρ_j Â_j, clip(ρ_j, 1−ε, 1+ε) Â_j) − β · KL(π_θ ‖ π_ref)]`.
pub fn group_objective(
    group: &Group,
    live: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    epsilon: f64,
    beta: f64,
) -> Result<f64> {
    check_shapes(live, [old, reference])?;
    if group.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for j in 0..group.len() {
        let t = member_terms(group, j, live, old, reference, epsilon)?;
        total += t.surrogate - beta * t.kl;
    }
    Ok(total / group.len() as f64)
}

/// Gradient of [`group_objective`] with respect to the live weights. When
/// the constant clipped branch of the min is selected it contributes zero;
/// ties take the unclipped branch.
pub fn group_objective_grad(
    group: &Group,
    live: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    epsilon: f64,
    beta: f64,
) -> Result<Gradient> {
    check_shapes(live, [old, reference])?;
    let mut grad = Gradient::zeros(live.num_actions(), live.feature_len());
    if group.is_empty() {
        return Ok(grad);
    }
    let scale = 1.0 / group.len() as f64;
    let mut coeff: Buf = Buf::new();
    for j in 0..group.len() {
        let t = member_terms(group, j, live, old, reference, epsilon)?;
        coeff.clear();
        // ∂/∂z_b of ρÂ is ρÂ(δ_ab − π_b); of KL is π_b(log π_b − log q_b − KL).
        for (b, &p) in t.probs.iter().enumerate() {
            let onehot = if b == group.actions[j] { 1.0 } else { 0.0 };
            let kl_part = if p > 0.0 {
                p * (p.ln() - t.ref_log[b] - t.kl)
            } else {
                0.0
            };
            coeff.push(t.ratio_coeff * (onehot - p) - beta * kl_part);
        }
        grad.add_outer(&coeff, &group.features[j], scale);
    }
    Ok(grad)
}

/// Per-step record; one JSON object per line in the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub method: Method,
    pub step: u64,
    /// Greedy-evaluation Avg.r after the update; absent on non-evaluation steps.
    pub avg_reward: Option<f64>,
    /// Greedy-evaluation Avg.L (the terminating exchange counts).
    pub avg_length: Option<f64>,
    pub greedy_first_action: Option<usize>,
    /// Environment interactions spent on the step's rollouts.
    pub budget: u64,
    /// Observation-subtree positions, reused nodes included.
    pub observation_nodes: u64,
    /// Fresh samples drawn to fill groups.
    pub population: u64,
    /// Mean immediate reward over all group members.
    pub train_reward: f64,
    /// Exchanges on the sampled main trajectory.
    pub trajectory_length: usize,
    pub groups: usize,
    /// Mean `KL(π_θ ‖ π_ref)` over group contexts before the update.
    pub kl: f64,
    pub grad_norm: f64,
    pub alpha: f64,
}

/// Greedy-policy episode statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalStats {
    pub avg_reward: f64,
    pub avg_length: f64,
    pub first_action: usize,
}

/// Plays `episodes` dialogues with the greedy policy and no look-ahead.
pub fn evaluate(
    policy: &PolicyParams,
    env: &dyn Environment,
    alpha: f64,
    max_depth: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    let encoder = ContextEncoder::new(env.num_actions(), max_depth);
    let mut features = vec![0.0; encoder.len()];
    let mut runs = Vec::with_capacity(episodes.max(1));
    let mut first_action = 0;
    for e in 0..episodes.max(1) {
        let mut rng = node_rng(derive_seed(seed ^ EVAL_SALT, e as u64));
        let mut state = env.initial_state(alpha);
        let mut history = Vec::new();
        let mut rewards = Vec::new();
        for turn in 0..max_depth {
            encoder.encode_into(&state, &mut features);
            let action = policy.greedy_action(&features);
            if e == 0 && turn == 0 {
                first_action = action;
            }
            let (record, next) = env.step(&history, &state, action, 0, &mut rng)?;
            rewards.push(record.reward);
            let done = record.terminated;
            if env.needs_history() {
                history.push(record);
            }
            state = next;
            if done {
                break;
            }
        }
        runs.push(rewards);
    }
    let (avg_reward, avg_length) = crate::budget::avg_metrics(&runs)?;
    Ok(EvalStats {
        avg_reward,
        avg_length,
        first_action,
    })
}

/// Accumulates per-group gradients and applies one ascent step.
/// Returns the mean KL to the reference and the update norm.
pub(crate) fn apply_update(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    groups: &[Group],
    hparams: &Hyperparams,
) -> Result<(f64, f64)> {
    let old = policy.snapshot();
    let mut total = Gradient::zeros(policy.num_actions(), policy.feature_len());
    let mut kl_sum = 0.0;
    let mut kl_count = 0usize;
    for g in groups {
        let grad = group_objective_grad(
            g,
            policy,
            &old,
            reference,
            hparams.clip_epsilon,
            hparams.kl_beta,
        )?;
        let weight = match hparams.group_weighting {
            GroupWeighting::Equal => 1.0,
            GroupWeighting::MemberCount => g.len() as f64,
        };
        total.add_scaled(&grad, weight);
        for f in &g.features {
            kl_sum += policy.kl_divergence(reference, f)?.value;
            kl_count += 1;
        }
    }
    let norm = total.norm() * hparams.learning_rate;
    if hparams.learning_rate > 0.0 {
        policy.ascend(&total, hparams.learning_rate)?;
    }
    Ok((kl_sum / kl_count.max(1) as f64, norm))
}

pub(crate) fn summarize(
    method: Method,
    step: u64,
    alpha: f64,
    tree: &DialogueTree,
    groups: &[Group],
    update: (f64, f64),
) -> StepMetrics {
    let counters = tree.counters();
    let (sum, count) = groups
        .iter()
        .flat_map(|g| g.rewards.iter())
        .fold((0.0, 0usize), |(s, c), r| (s + r, c + 1));
    StepMetrics {
        method,
        step,
        avg_reward: None,
        avg_length: None,
        greedy_first_action: None,
        budget: tree.expansion_counter(),
        observation_nodes: counters.observation_total(),
        population: counters.population,
        train_reward: sum / count.max(1) as f64,
        trajectory_length: tree.trajectory().len() + 1,
        groups: groups.len(),
        kl: update.0,
        grad_norm: update.1,
        alpha,
    }
}

/// Identical opening contexts for every root.
pub fn initial_contexts(env: &dyn Environment, group_size: usize, alpha: f64) -> Vec<EnvState> {
    vec![env.initial_state(alpha); group_size]
}

/// One AT-GRPO step: snapshot `π_old`, build a tree, update once.
pub fn train_step(
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    env: &dyn Environment,
    hparams: &Hyperparams,
    step: u64,
) -> Result<StepMetrics> {
    hparams.validate()?;
    let alpha = alpha_schedule(step, hparams.threshold_lambda);
    let old = policy.snapshot();
    let contexts = initial_contexts(env, hparams.group_size, alpha);
    let seed = tree_seed(hparams.seed, step);
    let (tree, groups) = build_tree(contexts, &old, env, hparams, seed, step)?;
    let update = apply_update(policy, reference, &groups, hparams)?;
    Ok(summarize(
        Method::AtGrpo,
        step,
        alpha,
        &tree,
        &groups,
        update,
    ))
}

/// Dispatches one training step of `method`.
pub fn method_step(
    method: Method,
    policy: &mut PolicyParams,
    reference: &PolicyParams,
    env: &dyn Environment,
    hparams: &Hyperparams,
    step: u64,
) -> Result<StepMetrics> {
    match method {
        Method::AtGrpo => train_step(policy, reference, env, hparams, step),
        Method::ChainGrpo => baselines::chain_grpo_step(policy, reference, env, hparams, step),
        Method::FullTreeRpo => baselines::full_treerpo_step(
            policy,
            reference,
            env,
            hparams,
            step,
            baselines::TreeAggregation::default(),
        ),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    /// Greedy evaluation every this many steps (and always after the last).
    pub eval_every: u64,
    pub eval_episodes: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eval_every: 1,
            eval_episodes: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub method: Method,
    pub steps: Vec<StepMetrics>,
    pub final_policy: PolicyParams,
}

impl RunReport {
    /// The last evaluated step.
    pub fn final_eval(&self) -> Option<&StepMetrics> {
        self.steps.iter().rev().find(|m| m.avg_length.is_some())
    }
}

/// Runs `num_steps` training steps of `method` from `policy`, which also
/// serves as the frozen KL reference. `on_step` sees every record as it is
/// produced.
pub fn train_run(
    method: Method,
    policy: PolicyParams,
    env: &dyn Environment,
    hparams: &Hyperparams,
    num_steps: u64,
    options: RunOptions,
    mut on_step: impl FnMut(&StepMetrics) -> Result<()>,
) -> Result<RunReport> {
    if num_steps == 0 {
        return Err(Error::config("steps", "must be at least 1"));
    }
    hparams.validate()?;
    let reference = policy.snapshot();
    let mut policy = policy;
    let mut steps = Vec::with_capacity(num_steps as usize);
    for step in 0..num_steps {
        let mut m = method_step(method, &mut policy, &reference, env, hparams, step)?;
        let last = step + 1 == num_steps;
        if last || (options.eval_every > 0 && step % options.eval_every == 0) {
            let eval = evaluate(
                &policy,
                env,
                m.alpha,
                hparams.max_depth,
                options.eval_episodes,
                tree_seed(hparams.seed, step),
            )?;
            m.avg_reward = Some(eval.avg_reward);
            m.avg_length = Some(eval.avg_length);
            m.greedy_first_action = Some(eval.first_action);
        }
        log::debug!("{method} step {step}: {m:?}");
        on_step(&m)?;
        steps.push(m);
    }
    Ok(RunReport {
        method,
        steps,
        final_policy: policy,
    })
}

/// Fresh zero policy shaped for `env` at horizon `max_depth`.
pub fn initial_policy(env: &dyn Environment, max_depth: usize) -> PolicyParams {
    let enc = ContextEncoder::new(env.num_actions(), max_depth);
    PolicyParams::zeros(env.num_actions(), enc.len())
}
