//! Arena-backed dialogue rollout tree.
//!
//! Nodes are appended to a flat arena and addressed by [`NodeId`]. Each node
//! holds one exchange and the environment state after it. A node's seed is
//! derived from its parent's seed and its child position, so a node's content
//! depends only on its path.
//!
//! Depth convention: roots sit at depth 0 and a node is a leaf iff its user
//! terminated or `depth = max_depth − 1`. The turn index `i` of the
//! observation-length formula is `depth + 1`.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use smallvec::SmallVec;

use crate::env::{ContextEncoder, EnvState, Environment, TurnRecord};
use crate::error::{Error, Result};
use crate::policy::{Buf, PolicyParams};
use crate::rng::{derive_seed, node_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    /// Member of a normalized group; carries an aggregated reward.
    GroupMember,
    /// Created only to look ahead; never receives an advantage.
    ObservationOnly,
    /// Group member chosen to carry the dialogue one layer deeper.
    TrajectorySelected,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: SmallVec<[NodeId; 4]>,
    pub turn: TurnRecord,
    /// Environment state after this exchange.
    pub state: EnvState,
    pub seed: u64,
    pub aggregated_reward: Option<f64>,
    pub role: NodeRole,
}

/// Environment interactions spent on one tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BudgetCounters {
    /// Roots plus fresh children sampled to fill a group to full size.
    pub population: u64,
    /// Nodes created while expanding observation subtrees.
    pub observation_created: u64,
    /// Observation-subtree positions served by an already existing node.
    pub observation_reused: u64,
}

impl BudgetCounters {
    /// Observation-subtree size with reused nodes counted as if re-sampled.
    pub fn observation_total(&self) -> u64 {
        self.observation_created + self.observation_reused
    }

    /// Environment interactions actually performed.
    pub fn interactions(&self) -> u64 {
        self.population + self.observation_created
    }
}

/// Everything needed to sample one exchange: frozen policy, environment,
/// feature layout and the training step (for the remote protocol).
#[derive(Clone, Copy)]
pub struct Rollout<'a> {
    pub policy: &'a PolicyParams,
    pub env: &'a dyn Environment,
    pub encoder: ContextEncoder,
    pub step: u64,
    pub parallel: bool,
}

impl<'a> Rollout<'a> {
    pub fn new(
        policy: &'a PolicyParams,
        env: &'a dyn Environment,
        horizon: usize,
        step: u64,
    ) -> Result<Self> {
        let encoder = ContextEncoder::new(env.num_actions(), horizon);
        if policy.num_actions() != env.num_actions() || policy.feature_len() != encoder.len() {
            return Err(Error::Domain(format!(
                "policy shape {}×{} does not fit environment ({} actions, {} features)",
                policy.num_actions(),
                policy.feature_len(),
                env.num_actions(),
                encoder.len()
            )));
        }
        Ok(Self {
            policy,
            env,
            encoder,
            step,
            parallel: false,
        })
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    /// Samples an action from the policy at `context` and steps the environment.
    pub fn sample(
        &self,
        history: &[TurnRecord],
        context: &EnvState,
        seed: u64,
    ) -> Result<(TurnRecord, EnvState)> {
        let probs = self.distribution(context);
        self.sample_from(&probs, history, context, seed)
    }

    /// Action probabilities at `context`, shared by all of a node's children.
    pub(crate) fn distribution(&self, context: &EnvState) -> Buf {
        let mut probs = Buf::new();
        self.distribution_into(context, &mut probs);
        probs
    }

    pub(crate) fn distribution_into(&self, context: &EnvState, probs: &mut Buf) {
        let mut features = [0.0; 16];
        match features.get_mut(..self.encoder.len()) {
            Some(buf) => {
                self.encoder.encode_into(context, buf);
                self.policy.probs_into(buf, probs);
            }
            None => self.policy.probs_into(&self.encoder.encode(context), probs),
        }
    }

    pub(crate) fn sample_from(
        &self,
        probs: &[f64],
        history: &[TurnRecord],
        context: &EnvState,
        seed: u64,
    ) -> Result<(TurnRecord, EnvState)> {
        let mut rng = node_rng(seed);
        let u: f64 = rng.random();
        let mut action = probs.len() - 1;
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                action = a;
                break;
            }
        }
        self.env.step(history, context, action, self.step, &mut rng)
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    Existing(NodeId),
    Pending(usize),
}

struct Pending {
    parent: Slot,
    depth: usize,
    turn: TurnRecord,
    state: EnvState,
    seed: u64,
}

/// Nodes an observation expansion would add, computed against a read-only tree.
pub(crate) struct SubtreePlan {
    pending: Vec<Pending>,
    leaves: Vec<Slot>,
    reused: u64,
}

/// Where an observation expansion reads slots from and puts new nodes.
trait Stage {
    fn max_depth(&self) -> usize;
    /// `(state, seed, depth, terminated, existing children)` of a slot.
    fn view(&self, slot: Slot) -> (&EnvState, u64, usize, bool, usize);
    fn child(&self, slot: Slot, k: usize) -> Slot;
    fn history(&self, slot: Slot) -> Vec<TurnRecord>;
    fn add(&mut self, node: Pending) -> Slot;
    /// Node blamed for a failed step: nodes sampled by this expansion are
    /// reported as its root.
    fn blame(&self, slot: Slot, root: NodeId) -> NodeId;
}

struct Planner<'t> {
    tree: &'t DialogueTree,
    pending: Vec<Pending>,
}

impl Stage for Planner<'_> {
    fn max_depth(&self) -> usize {
        self.tree.max_depth
    }

    fn view(&self, slot: Slot) -> (&EnvState, u64, usize, bool, usize) {
        match slot {
            Slot::Existing(id) => {
                let n = &self.tree.nodes[id.index()];
                (
                    &n.state,
                    n.seed,
                    n.depth,
                    n.turn.terminated,
                    n.children.len(),
                )
            }
            Slot::Pending(i) => {
                let p = &self.pending[i];
                (&p.state, p.seed, p.depth, p.turn.terminated, 0)
            }
        }
    }

    fn child(&self, slot: Slot, k: usize) -> Slot {
        match slot {
            Slot::Existing(id) => Slot::Existing(self.tree.nodes[id.index()].children[k]),
            Slot::Pending(_) => unreachable!("staged nodes have no children yet"),
        }
    }

    fn history(&self, slot: Slot) -> Vec<TurnRecord> {
        let mut out = Vec::new();
        let mut cur = slot;
        loop {
            match cur {
                Slot::Pending(i) => {
                    out.push(self.pending[i].turn.clone());
                    cur = self.pending[i].parent;
                }
                Slot::Existing(id) => {
                    let mut h = self.tree.history_of(id).unwrap_or_default();
                    out.reverse();
                    h.extend(out);
                    return h;
                }
            }
        }
    }

    fn add(&mut self, node: Pending) -> Slot {
        self.pending.push(node);
        Slot::Pending(self.pending.len() - 1)
    }

    fn blame(&self, slot: Slot, root: NodeId) -> NodeId {
        match slot {
            Slot::Existing(id) => id,
            Slot::Pending(_) => root,
        }
    }
}

struct InPlace<'t> {
    tree: &'t mut DialogueTree,
    base: usize,
}

impl InPlace<'_> {
    fn id(slot: Slot) -> NodeId {
        match slot {
            Slot::Existing(id) => id,
            Slot::Pending(_) => unreachable!("in-place expansion stages no nodes"),
        }
    }
}

impl Stage for InPlace<'_> {
    fn max_depth(&self) -> usize {
        self.tree.max_depth
    }

    fn view(&self, slot: Slot) -> (&EnvState, u64, usize, bool, usize) {
        let n = &self.tree.nodes[Self::id(slot).index()];
        (
            &n.state,
            n.seed,
            n.depth,
            n.turn.terminated,
            n.children.len(),
        )
    }

    fn child(&self, slot: Slot, k: usize) -> Slot {
        Slot::Existing(self.tree.nodes[Self::id(slot).index()].children[k])
    }

    fn history(&self, slot: Slot) -> Vec<TurnRecord> {
        self.tree.history_of(Self::id(slot)).unwrap_or_default()
    }

    fn add(&mut self, node: Pending) -> Slot {
        let parent = Self::id(node.parent);
        Slot::Existing(self.tree.push_node(
            Some(parent),
            node.depth,
            node.turn,
            node.state,
            node.seed,
            NodeRole::ObservationOnly,
        ))
    }

    fn blame(&self, slot: Slot, root: NodeId) -> NodeId {
        let id = Self::id(slot);
        if id.index() >= self.base {
            root
        } else {
            id
        }
    }
}

/// Shared traversal of [`DialogueTree::plan_subtree`] and
/// [`DialogueTree::expand_in_place`]. Returns the number of reused children.
fn expand_bfs<S: Stage>(
    stage: &mut S,
    root: NodeId,
    width: usize,
    depth: usize,
    rollout: &Rollout<'_>,
    leaves: &mut Vec<Slot>,
) -> Result<u64> {
    let mut reused = 0u64;
    let mut frontier = vec![Slot::Existing(root)];
    let mut next = Vec::new();
    let needs_history = rollout.env.needs_history();
    let max_depth = stage.max_depth();
    let mut probs = Buf::new();

    for _ in 0..depth {
        next.clear();
        next.reserve(frontier.len() * width);
        for &slot in &frontier {
            let (state, seed, d, terminated, existing) = stage.view(slot);
            if terminated || d + 1 >= max_depth {
                leaves.push(slot);
                continue;
            }
            let state = state.clone();
            let fresh = existing < width;
            let history = if needs_history && fresh {
                stage.history(slot)
            } else {
                Vec::new()
            };
            if fresh {
                rollout.distribution_into(&state, &mut probs);
            }
            for k in 0..width {
                if k < existing {
                    next.push(stage.child(slot, k));
                    reused += 1;
                    continue;
                }
                let child_seed = derive_seed(seed, k as u64);
                let (turn, child_state) = rollout
                    .sample_from(&probs, &history, &state, child_seed)
                    .map_err(|e| e.at_node(stage.blame(slot, root)))?;
                next.push(stage.add(Pending {
                    parent: slot,
                    depth: d + 1,
                    turn,
                    state: child_state,
                    seed: child_seed,
                }));
            }
        }
        std::mem::swap(&mut frontier, &mut next);
    }
    leaves.extend(frontier);
    Ok(reused)
}

/// Node storage recycled across trees. Slots past `live` still hold nodes
/// of an earlier tree and are overwritten in place, so dropping them touches
/// memory that is about to be written anyway instead of costing a separate
/// pass over the whole arena.
#[derive(Default)]
struct Arena {
    slots: Vec<TreeNode>,
    live: usize,
}

impl Arena {
    fn recycle(slots: Vec<TreeNode>) -> Self {
        Self { slots, live: 0 }
    }

    #[inline]
    fn push(&mut self, node: TreeNode) {
        match self.slots.get_mut(self.live) {
            Some(slot) => *slot = node,
            None => self.slots.push(node),
        }
        self.live += 1;
    }

    fn reserve(&mut self, additional: usize) {
        let need = (self.live + additional).saturating_sub(self.slots.len());
        self.slots.reserve(need);
    }
}

impl Deref for Arena {
    type Target = [TreeNode];

    fn deref(&self) -> &[TreeNode] {
        &self.slots[..self.live]
    }
}

impl DerefMut for Arena {
    fn deref_mut(&mut self) -> &mut [TreeNode] {
        &mut self.slots[..self.live]
    }
}

impl Clone for Arena {
    fn clone(&self) -> Self {
        Self {
            slots: self.to_vec(),
            live: self.live,
        }
    }
}

impl std::fmt::Debug for Arena {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.iter()).finish()
    }
}

#[derive(Debug, Clone)]
pub struct DialogueTree {
    nodes: Arena,
    roots: Vec<NodeId>,
    contexts: Vec<EnvState>,
    trajectory: Vec<NodeId>,
    max_depth: usize,
    seed: u64,
    counters: BudgetCounters,
}

impl DialogueTree {
    /// Samples one root exchange per context. Roots occupy ids `0..W`.
    pub fn new(
        contexts: Vec<EnvState>,
        group_size: usize,
        max_depth: usize,
        seed: u64,
        rollout: &Rollout<'_>,
    ) -> Result<Self> {
        Self::new_in(Vec::new(), contexts, group_size, max_depth, seed, rollout)
    }

    /// [`Self::new`] reusing the node storage of a previous tree.
    pub(crate) fn new_in(
        storage: Vec<TreeNode>,
        contexts: Vec<EnvState>,
        group_size: usize,
        max_depth: usize,
        seed: u64,
        rollout: &Rollout<'_>,
    ) -> Result<Self> {
        if contexts.len() != group_size {
            return Err(Error::config(
                "contexts",
                format!(
                    "expected {group_size} initial contexts, got {}",
                    contexts.len()
                ),
            ));
        }
        if max_depth == 0 {
            return Err(Error::config("max_depth", "must be at least 1"));
        }
        let mut tree = Self {
            nodes: Arena::recycle(storage),
            roots: Vec::with_capacity(group_size),
            contexts,
            trajectory: Vec::new(),
            max_depth,
            seed,
            counters: BudgetCounters::default(),
        };
        for j in 0..group_size {
            let root_seed = derive_seed(seed, j as u64);
            let (turn, state) = rollout.sample(&[], &tree.contexts[j], root_seed)?;
            let id = tree.push_node(None, 0, turn, state, root_seed, NodeRole::GroupMember);
            tree.roots.push(id);
        }
        tree.counters.population += group_size as u64;
        Ok(tree)
    }

    /// Gives back the node arena for [`Self::new_in`].
    pub(crate) fn into_storage(self) -> Vec<TreeNode> {
        self.nodes.slots
    }

    #[inline]
    pub(crate) fn push_node(
        &mut self,
        parent: Option<NodeId>,
        depth: usize,
        turn: TurnRecord,
        state: EnvState,
        seed: u64,
        role: NodeRole,
    ) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(TreeNode {
            depth,
            parent,
            children: SmallVec::new(),
            turn,
            state,
            seed,
            aggregated_reward: None,
            role,
        });
        if let Some(p) = parent {
            self.nodes[p.index()].children.push(id);
        }
        id
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode> {
        self.nodes
            .get(id.index())
            .ok_or_else(|| Error::Internal(format!("dangling node handle {id:?}")))
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// All handles in arena order.
    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Environment steps taken so far; equals the arena size.
    pub fn expansion_counter(&self) -> u64 {
        self.nodes.len() as u64
    }

    pub fn counters(&self) -> BudgetCounters {
        self.counters
    }

    pub fn roots(&self) -> &[NodeId] {
        &self.roots
    }

    pub fn trajectory(&self) -> &[NodeId] {
        &self.trajectory
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_leaf(&self, id: NodeId) -> Result<bool> {
        let n = self.node(id)?;
        Ok(n.turn.terminated || n.depth + 1 >= self.max_depth)
    }

    /// The context the node's action was chosen in.
    pub fn context_of(&self, id: NodeId) -> Result<&EnvState> {
        let n = self.node(id)?;
        match n.parent {
            Some(p) => Ok(&self.node(p)?.state),
            None => self
                .contexts
                .get(id.index())
                .ok_or_else(|| Error::Internal(format!("root {id:?} has no context"))),
        }
    }

    /// Exchanges from the root down to and including `id`.
    pub fn history_of(&self, id: NodeId) -> Result<Vec<TurnRecord>> {
        let mut out = Vec::new();
        let mut cur = Some(id);
        while let Some(c) = cur {
            let n = self.node(c)?;
            out.push(n.turn.clone());
            cur = n.parent;
        }
        out.reverse();
        Ok(out)
    }

    /// Leaves of the subtree under `id` cut at relative depth `depth_limit`:
    /// nodes at exactly that depth plus shallower nodes with no expansion
    /// below them (terminated, at maximum depth, or not expanded).
    pub fn leaves_within(&self, id: NodeId, depth_limit: usize) -> Result<Vec<NodeId>> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack = vec![(id, 0usize)];
        while let Some((cur, rel)) = stack.pop() {
            let n = self.node(cur)?;
            if rel == depth_limit || n.children.is_empty() || self.is_leaf(cur)? {
                out.push(cur);
                continue;
            }
            for &c in n.children.iter().rev() {
                stack.push((c, rel + 1));
            }
        }
        Ok(out)
    }

    pub(crate) fn set_role(&mut self, id: NodeId, role: NodeRole) -> Result<()> {
        self.node(id)?;
        self.nodes[id.index()].role = role;
        Ok(())
    }

    pub(crate) fn set_aggregated(&mut self, id: NodeId, value: f64) -> Result<()> {
        let n = self.node(id)?;
        if n.aggregated_reward.is_some() {
            return Err(Error::Internal(format!(
                "aggregated reward of {id:?} set twice"
            )));
        }
        if n.role == NodeRole::ObservationOnly {
            return Err(Error::Internal(format!(
                "{id:?} is observation-only and cannot carry an aggregated reward"
            )));
        }
        self.nodes[id.index()].aggregated_reward = Some(value);
        Ok(())
    }

    pub(crate) fn push_trajectory(&mut self, id: NodeId) {
        self.trajectory.push(id);
    }

    /// Breadth-first expansion of `width` children per non-leaf node for
    /// `depth` levels below `root`. Existing children are reused in order;
    /// only missing positions are sampled.
    pub(crate) fn plan_subtree(
        &self,
        root: NodeId,
        width: usize,
        depth: usize,
        rollout: &Rollout<'_>,
    ) -> Result<SubtreePlan> {
        self.node(root)?;
        let mut stage = Planner {
            tree: self,
            pending: Vec::new(),
        };
        let mut leaves = Vec::new();
        let reused = expand_bfs(&mut stage, root, width, depth, rollout, &mut leaves)?;
        Ok(SubtreePlan {
            pending: stage.pending,
            leaves,
            reused,
        })
    }

    /// Appends a plan's nodes in plan order and returns the subtree's leaves.
    pub(crate) fn commit(&mut self, plan: SubtreePlan) -> Vec<NodeId> {
        let base = self.nodes.len();
        let resolve = |slot: Slot| match slot {
            Slot::Existing(id) => id,
            Slot::Pending(i) => NodeId((base + i) as u32),
        };
        self.counters.observation_created += plan.pending.len() as u64;
        self.counters.observation_reused += plan.reused;
        self.nodes.reserve(plan.pending.len());
        for p in plan.pending {
            let parent = resolve(p.parent);
            self.push_node(
                Some(parent),
                p.depth,
                p.turn,
                p.state,
                p.seed,
                NodeRole::ObservationOnly,
            );
        }
        plan.leaves.into_iter().map(resolve).collect()
    }

    /// Same traversal and arena order as [`Self::plan_subtree`] followed by
    /// [`Self::commit`], appending nodes as they are sampled.
    pub(crate) fn expand_in_place(
        &mut self,
        root: NodeId,
        width: usize,
        depth: usize,
        rollout: &Rollout<'_>,
    ) -> Result<Vec<NodeId>> {
        self.node(root)?;
        let base = self.nodes.len();
        let mut leaves = Vec::new();
        let mut stage = InPlace { tree: self, base };
        let reused = expand_bfs(&mut stage, root, width, depth, rollout, &mut leaves)?;
        self.counters.observation_created += (self.nodes.len() - base) as u64;
        self.counters.observation_reused += reused;
        Ok(leaves
            .into_iter()
            .map(|slot| match slot {
                Slot::Existing(id) => id,
                Slot::Pending(_) => unreachable!("in-place expansion stages no nodes"),
            })
            .collect())
    }

    /// Expands the observation subtrees of several nodes, returning each
    /// node's leaves. Plans are computed independently (on the rayon pool
    /// when the rollout is parallel) and committed in input order, so the
    /// result does not depend on scheduling.
    pub(crate) fn expand_many(
        &mut self,
        jobs: &[(NodeId, usize)],
        width: usize,
        rollout: &Rollout<'_>,
    ) -> Result<Vec<Vec<NodeId>>> {
        if rollout.parallel {
            let plans: Vec<SubtreePlan> = jobs
                .par_iter()
                .map(|&(id, depth)| self.plan_subtree(id, width, depth, rollout))
                .collect::<Result<_>>()?;
            return Ok(plans.into_iter().map(|p| self.commit(p)).collect());
        }
        // Subtrees of distinct jobs are disjoint, so expanding them one
        // after another yields the same arena.
        jobs.iter()
            .map(|&(id, depth)| self.expand_in_place(id, width, depth, rollout))
            .collect()
    }

    /// Tops `id`'s children up to `group_size`, sampling only the missing
    /// ones, and marks the first `group_size` of them group members.
    /// Surplus children up to `max_existing` (an observation subtree wider
    /// than the group) stay observation-only.
    pub(crate) fn populate_children(
        &mut self,
        id: NodeId,
        group_size: usize,
        max_existing: usize,
        rollout: &Rollout<'_>,
    ) -> Result<Vec<NodeId>> {
        let n = self.node(id)?;
        let existing = n.children.len();
        if existing > max_existing.max(group_size) {
            return Err(Error::Internal(format!(
                "{id:?} already has {existing} children, more than the group size {group_size}"
            )));
        }
        let (state, seed, depth) = (n.state.clone(), n.seed, n.depth);
        let history = if rollout.env.needs_history() && existing < group_size {
            self.history_of(id)?
        } else {
            Vec::new()
        };
        let probs = rollout.distribution(&state);
        for k in existing..group_size {
            let child_seed = derive_seed(seed, k as u64);
            let (turn, child_state) = rollout
                .sample_from(&probs, &history, &state, child_seed)
                .map_err(|e| e.at_node(id))?;
            self.push_node(
                Some(id),
                depth + 1,
                turn,
                child_state,
                child_seed,
                NodeRole::GroupMember,
            );
        }
        self.counters.population += group_size.saturating_sub(existing) as u64;
        let members: Vec<NodeId> = self.nodes[id.index()].children[..group_size].to_vec();
        for &c in &members {
            self.nodes[c.index()].role = NodeRole::GroupMember;
        }
        Ok(members)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::env::{ConstantEnv, TurnRecord, CONTINUE, TERMINATE};
    use std::borrow::Cow;

    pub(crate) fn turn(terminated: bool) -> TurnRecord {
        let sig = if terminated { TERMINATE } else { CONTINUE };
        TurnRecord::new(
            0,
            Cow::Borrowed(sig),
            if terminated { 1.0 } else { 0.5 },
            terminated,
        )
    }

    fn rollout_parts() -> (PolicyParams, ConstantEnv) {
        (PolicyParams::zeros(2, 5), ConstantEnv::never_terminating(2))
    }

    #[test]
    fn new_tree_has_w_roots() {
        let (policy, env) = rollout_parts();
        let r = Rollout::new(&policy, &env, 10, 0).unwrap();
        let tree = DialogueTree::new(vec![EnvState::initial(1.0); 8], 8, 10, 1, &r).unwrap();
        assert_eq!(tree.roots().len(), 8);
        assert_eq!(tree.expansion_counter(), 8);
        assert_eq!(tree.counters().population, 8);
        assert!(tree
            .nodes()
            .iter()
            .all(|n| n.depth == 0 && n.role == NodeRole::GroupMember));
    }

    #[test]
    fn identical_contexts_get_distinct_handles() {
        let (policy, env) = rollout_parts();
        let r = Rollout::new(&policy, &env, 10, 0).unwrap();
        let tree = DialogueTree::new(vec![EnvState::initial(1.0); 2], 2, 10, 1, &r).unwrap();
        assert_ne!(tree.roots()[0], tree.roots()[1]);
    }

    #[test]
    fn context_count_mismatch_is_a_config_error() {
        let (policy, env) = rollout_parts();
        let r = Rollout::new(&policy, &env, 10, 0).unwrap();
        let err = DialogueTree::new(vec![EnvState::initial(1.0); 3], 8, 10, 1, &r).unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn mismatched_policy_is_rejected() {
        let policy = PolicyParams::zeros(3, 6);
        let env = ConstantEnv::never_terminating(2);
        assert!(Rollout::new(&policy, &env, 10, 0).is_err());
    }

    fn bare_tree(max_depth: usize) -> DialogueTree {
        let mut t = DialogueTree {
            nodes: Arena::recycle(Vec::new()),
            roots: Vec::new(),
            contexts: vec![EnvState::initial(1.0)],
            trajectory: Vec::new(),
            max_depth,
            seed: 0,
            counters: BudgetCounters::default(),
        };
        let r = t.push_node(
            None,
            0,
            turn(false),
            EnvState::initial(1.0),
            0,
            NodeRole::GroupMember,
        );
        t.roots.push(r);
        t
    }

    #[test]
    fn leaves_within_zero_is_self() {
        let t = bare_tree(5);
        assert_eq!(t.leaves_within(NodeId(0), 0).unwrap(), vec![NodeId(0)]);
    }

    #[test]
    fn leaves_within_binary_depth_two() {
        let mut t = bare_tree(5);
        let s = EnvState::initial(1.0);
        for _ in 0..2 {
            let c = t.push_node(
                Some(NodeId(0)),
                1,
                turn(false),
                s.clone(),
                0,
                NodeRole::ObservationOnly,
            );
            for _ in 0..2 {
                t.push_node(
                    Some(c),
                    2,
                    turn(false),
                    s.clone(),
                    0,
                    NodeRole::ObservationOnly,
                );
            }
        }
        assert_eq!(t.leaves_within(NodeId(0), 2).unwrap().len(), 4);
    }

    #[test]
    fn leaves_within_with_terminated_child() {
        let mut t = bare_tree(5);
        let s = EnvState::initial(1.0);
        let dead = t.push_node(
            Some(NodeId(0)),
            1,
            turn(true),
            s.clone(),
            0,
            NodeRole::ObservationOnly,
        );
        let live = t.push_node(
            Some(NodeId(0)),
            1,
            turn(false),
            s.clone(),
            0,
            NodeRole::ObservationOnly,
        );
        let a = t.push_node(
            Some(live),
            2,
            turn(false),
            s.clone(),
            0,
            NodeRole::ObservationOnly,
        );
        let b = t.push_node(
            Some(live),
            2,
            turn(false),
            s.clone(),
            0,
            NodeRole::ObservationOnly,
        );
        let leaves = t.leaves_within(NodeId(0), 2).unwrap();
        assert_eq!(leaves, vec![dead, a, b]);
    }

    #[test]
    fn dangling_handle_is_internal_error() {
        let t = bare_tree(3);
        assert!(matches!(
            t.leaves_within(NodeId(99), 1),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn aggregated_reward_is_write_once() {
        let mut t = bare_tree(3);
        t.set_aggregated(NodeId(0), 0.5).unwrap();
        assert!(t.set_aggregated(NodeId(0), 0.6).is_err());
        let s = EnvState::initial(1.0);
        let obs = t.push_node(
            Some(NodeId(0)),
            1,
            turn(false),
            s,
            0,
            NodeRole::ObservationOnly,
        );
        assert!(t.set_aggregated(obs, 0.1).is_err());
    }

    #[test]
    fn populate_rejects_overfull_node() {
        let (policy, env) = rollout_parts();
        let r = Rollout::new(&policy, &env, 10, 0).unwrap();
        let mut t = bare_tree(10);
        let s = EnvState::initial(1.0);
        for _ in 0..3 {
            t.push_node(
                Some(NodeId(0)),
                1,
                turn(false),
                s.clone(),
                0,
                NodeRole::ObservationOnly,
            );
        }
        assert!(matches!(
            t.populate_children(NodeId(0), 2, 2, &r),
            Err(Error::Internal(_))
        ));
    }
}
