//! Uncertainty-gated tree expansion.
//!
//! Growth is breadth-first. At each frontier node `N` candidate turns are
//! sampled and scored with a one-step lookahead `Q = r + γ·V(next)`. The
//! Bellman gap `U1 = |V(x) − mean Q|` and the Q variance `U2` (z-scored
//! against the run's recent history) combine into `U = α·U1 + (1−α)·U2`.
//! Nodes with `U > τ` keep all candidates; the rest keep one at random,
//! unless a bypass coin keeps all. Once another expansion could push the leaf
//! count past the budget, every open leaf is rolled out as a single chain.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{DialogueState, Env, EnvError, MacroAction, Scenario, StepOutcome};
use crate::model::{Critic, Policy};
use crate::rng::{StreamKey, Tag};

pub const ZSCORE_WINDOW: usize = 256;
pub const ZSCORE_STD_FLOOR: f64 = 1e-4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TreeError {
    #[error("tree config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Candidates sampled per expanded node.
    pub n: usize,
    pub leaf_budget: usize,
    pub tau: f64,
    pub alpha: f64,
    pub bypass_p: f64,
    pub gamma: f64,
    /// Z-score U1 as well as U2.
    pub normalize_u1: bool,
    pub temperature: f64,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig { n: 4, leaf_budget: 16, tau: 1.5, alpha: 0.3, bypass_p: 0.1, gamma: 1.0, normalize_u1: false, temperature: 1.0 }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<(), TreeError> {
        if self.n == 0 {
            return Err(TreeError::Config("n must be >= 1".into()));
        }
        if self.leaf_budget == 0 {
            return Err(TreeError::Config("leaf_budget must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(TreeError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.bypass_p) {
            return Err(TreeError::Config(format!("bypass_p {} outside [0, 1]", self.bypass_p)));
        }
        if self.tau.is_nan() {
            return Err(TreeError::Config("tau is NaN".into()));
        }
        Ok(())
    }
}

/// Sliding window of raw samples used for z-scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    window: VecDeque<f64>,
    capacity: usize,
}

impl Default for UncertaintyStats {
    fn default() -> Self {
        Self::new(ZSCORE_WINDOW)
    }
}

impl UncertaintyStats {
    pub fn new(capacity: usize) -> Self {
        UncertaintyStats { window: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    /// Population mean and variance of the window.
    pub fn mean_var(&self) -> (f64, f64) {
        let n = self.window.len() as f64;
        if n == 0.0 {
            return (0.0, 0.0);
        }
        let mean = self.window.iter().sum::<f64>() / n;
        let var = self.window.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.max(0.0))
    }

    pub fn push(&mut self, raw: f64) {
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(raw);
    }

    /// Normalises `raw` against the history, then records it. Returns 0 until
    /// the history holds two samples.
    pub fn zscore(&mut self, raw: f64) -> f64 {
        let z = if self.window.len() < 2 {
            0.0
        } else {
            let (mean, var) = self.mean_var();
            (raw - mean) / var.sqrt().max(ZSCORE_STD_FLOOR)
        };
        self.push(raw);
        z
    }
}

/// Per-run normalisation state (U2 always, U1 when configured).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub u2: UncertaintyStats,
    pub u1: UncertaintyStats,
}

impl Normalizer {
    /// Replays raw samples recorded by a tree grown on a private copy.
    pub fn absorb(&mut self, tree: &DialogueTree) {
        for n in &tree.nodes {
            if let Some(raw) = n.u2_raw {
                self.u2.push(raw);
            }
        }
        if tree.config.normalize_u1 {
            for n in &tree.nodes {
                if let Some(raw) = n.u1 {
                    self.u1.push(raw);
                }
            }
        }
    }
}

/// Critic estimate, defined as 0 for terminal states (and without a critic).
pub fn state_value(critic: Option<&Critic>, state: &DialogueState) -> f64 {
    match critic {
        Some(c) if !state.is_terminal() => c.value(&state.tokens),
        _ => 0.0,
    }
}

pub fn q_lookahead(reward: f64, next_value: f64, gamma: f64) -> f64 {
    reward + gamma * next_value
}

pub fn u1(node_value: f64, q_values: &[f64]) -> f64 {
    (node_value - mean(q_values)).abs()
}

/// Population variance of the candidate Q values.
pub fn u2(q_values: &[f64]) -> f64 {
    let m = mean(q_values);
    q_values.iter().map(|q| (q - m).powi(2)).sum::<f64>() / q_values.len() as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn combined_uncertainty(u1: f64, u2_norm: f64, alpha: f64) -> Result<f64, TreeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TreeError::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(alpha * u1 + (1.0 - alpha) * u2_norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    /// U above threshold.
    Expand,
    /// Below threshold but the bypass coin kept every branch.
    Bypass,
    Prune,
    /// Would have expanded but the leaf budget did not allow it.
    ForcePrune,
    /// Single-sample continuation after the budget bound.
    Rollout,
}

/// Keep-all vs keep-one rule. Returns the retained candidate indices.
pub fn expand_or_prune(n: usize, u: f64, tau: f64, bypass_p: f64, rng: &mut impl Rng) -> (Vec<usize>, Decision) {
    if u > tau {
        return ((0..n).collect(), Decision::Expand);
    }
    if bypass_p > 0.0 && rng.random_bool(bypass_p.min(1.0)) {
        return ((0..n).collect(), Decision::Bypass);
    }
    (vec![rng.random_range(0..n)], Decision::Prune)
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub action: MacroAction,
    pub state: DialogueState,
    pub reward: f64,
    pub reply_effective: Option<bool>,
    /// V(next state); 0 for terminal states.
    pub next_value: f64,
    pub q: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Frontier,
    Expanded,
    PrunedSingle,
    TerminalLeaf,
}

#[derive(Debug, Clone)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub state: DialogueState,
    pub incoming_action: Option<MacroAction>,
    pub incoming_reward: f64,
    pub reply_effective: Option<bool>,
    pub cached_value: f64,
    pub candidates: Vec<Candidate>,
    /// (candidate index, child node id)
    pub retained: Vec<(usize, usize)>,
    pub u1: Option<f64>,
    pub u2_raw: Option<f64>,
    pub u2_norm: Option<f64>,
    pub u: Option<f64>,
    pub status: NodeStatus,
    pub decision: Option<Decision>,
    pub key: StreamKey,
}

impl TreeNode {
    pub fn branches(&self) -> usize {
        self.retained.len()
    }

    pub fn children(&self) -> impl Iterator<Item = usize> + '_ {
        self.retained.iter().map(|(_, c)| *c)
    }

    pub fn is_leaf(&self) -> bool {
        self.retained.is_empty()
    }
}

/// Counters for the compute accounting of one tree.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthCounters {
    /// Macro-actions sampled, pruned candidates included.
    pub generated_turns: u64,
    pub value_calls: u64,
}

#[derive(Debug, Clone)]
pub struct DialogueTree {
    pub root: usize,
    pub nodes: Vec<TreeNode>,
    pub leaf_budget: usize,
    pub seed: StreamKey,
    pub config: TreeConfig,
    pub counters: GrowthCounters,
}

/// Samples `n` candidates at `state`; candidate `i` uses stream `key.child(i)`.
pub fn propose_candidates(
    state: &DialogueState,
    n: usize,
    policy: &Policy,
    env: &Env,
    key: StreamKey,
    temperature: f64,
) -> Result<Vec<(MacroAction, StepOutcome)>, EnvError> {
    (0..n)
        .map(|i| {
            let mut rng = key.child(i as u64).rng();
            let action = policy.sample_macro_action(&env.vocab, state, &mut rng, env.config.max_macro_len, temperature);
            let out = env.step(state, &action)?;
            Ok((action, out))
        })
        .collect()
}

struct Proposal {
    candidates: Vec<Candidate>,
    value_calls: u64,
}

fn score(proposals: Vec<(MacroAction, StepOutcome)>, critic: Option<&Critic>, gamma: f64) -> Proposal {
    let mut value_calls = 0;
    let candidates = proposals
        .into_iter()
        .map(|(action, out)| {
            let next_value = state_value(critic, &out.state);
            value_calls += u64::from(critic.is_some() && !out.terminal);
            Candidate {
                q: q_lookahead(out.reward, next_value, gamma),
                action,
                reward: out.reward,
                reply_effective: out.reply.map(|r| r.effective),
                state: out.state,
                next_value,
            }
        })
        .collect();
    Proposal { candidates, value_calls }
}

/// Grows one tree from `scenario`. `stats` is read and updated in node order,
/// so callers running trees in parallel pass a private copy.
pub fn grow_tree(
    scenario: Arc<Scenario>,
    policy: &Policy,
    critic: Option<&Critic>,
    env: &Env,
    config: &TreeConfig,
    seed: StreamKey,
    stats: &mut Normalizer,
) -> Result<DialogueTree, TreeError> {
    config.validate()?;
    let root_state = env.reset(scenario)?;
    let mut counters = GrowthCounters::default();
    let root_value = state_value(critic, &root_state);
    counters.value_calls += u64::from(critic.is_some());
    let mut nodes = vec![TreeNode {
        id: 0,
        parent: None,
        depth: 0,
        state: root_state,
        incoming_action: None,
        incoming_reward: 0.0,
        reply_effective: None,
        cached_value: root_value,
        candidates: Vec::new(),
        retained: Vec::new(),
        u1: None,
        u2_raw: None,
        u2_norm: None,
        u: None,
        status: NodeStatus::Frontier,
        decision: None,
        key: seed,
    }];
    let n = config.n;
    let mut leaves = 1usize;
    let mut frontier = vec![0usize];

    while !frontier.is_empty() {
        let rollout = leaves - 1 + n > config.leaf_budget;
        let width = if rollout { 1 } else { n };
        let proposals: Vec<Result<Proposal, EnvError>> = frontier
            .par_iter()
            .map(|&id| {
                let node = &nodes[id];
                let raw = propose_candidates(&node.state, width, policy, env, node.key, config.temperature)?;
                Ok(score(raw, critic, config.gamma))
            })
            .collect();

        let mut next_frontier = Vec::new();
        for (&id, proposal) in frontier.iter().zip(proposals) {
            let Proposal { candidates, value_calls } = proposal?;
            counters.generated_turns += candidates.len() as u64;
            counters.value_calls += value_calls;
            let node_value = nodes[id].cached_value;
            let (retained, decision) = if rollout {
                (vec![0], Decision::Rollout)
            } else {
                let qs: Vec<f64> = candidates.iter().map(|c| c.q).collect();
                let raw1 = u1(node_value, &qs);
                let raw2 = u2(&qs);
                let u2n = stats.u2.zscore(raw2);
                let u1v = if config.normalize_u1 { stats.u1.zscore(raw1) } else { raw1 };
                let u = combined_uncertainty(u1v, u2n, config.alpha)?;
                let node = &mut nodes[id];
                node.u1 = Some(raw1);
                node.u2_raw = Some(raw2);
                node.u2_norm = Some(u2n);
                node.u = Some(u);
                let mut rng = node.key.tagged(Tag::Prune).rng();
                let (keep, decision) = expand_or_prune(n, u, config.tau, config.bypass_p, &mut rng);
                if keep.len() > 1 && leaves - 1 + keep.len() > config.leaf_budget {
                    (vec![rng.random_range(0..n)], Decision::ForcePrune)
                } else {
                    (keep, decision)
                }
            };
            leaves += retained.len() - 1;
            let depth = nodes[id].depth + 1;
            let parent_key = nodes[id].key;
            let mut links = Vec::with_capacity(retained.len());
            for &ci in &retained {
                let c = &candidates[ci];
                let child_id = nodes.len();
                let terminal = c.state.is_terminal();
                nodes.push(TreeNode {
                    id: child_id,
                    parent: Some(id),
                    depth,
                    state: c.state.clone(),
                    incoming_action: Some(c.action.clone()),
                    incoming_reward: c.reward,
                    reply_effective: c.reply_effective,
                    cached_value: c.next_value,
                    candidates: Vec::new(),
                    retained: Vec::new(),
                    u1: None,
                    u2_raw: None,
                    u2_norm: None,
                    u: None,
                    status: if terminal { NodeStatus::TerminalLeaf } else { NodeStatus::Frontier },
                    decision: None,
                    key: parent_key.child(ci as u64),
                });
                if !terminal {
                    next_frontier.push(child_id);
                }
                links.push((ci, child_id));
            }
            let node = &mut nodes[id];
            node.status = match decision {
                Decision::Expand | Decision::Bypass if links.len() > 1 || n == 1 => NodeStatus::Expanded,
                _ => NodeStatus::PrunedSingle,
            };
            node.decision = Some(decision);
            node.retained = links;
            node.candidates = candidates;
        }
        frontier = next_frontier;
    }

    Ok(DialogueTree { root: 0, nodes, leaf_budget: config.leaf_budget, seed, config: *config, counters })
}

/// Plain single-sample rollout stored as a chain-shaped tree. Turn `k` samples
/// from the same stream a budget-capped tree would use for its first candidate.
pub fn rollout_chain(
    scenario: Arc<Scenario>,
    policy: &Policy,
    critic: Option<&Critic>,
    env: &Env,
    config: &TreeConfig,
    seed: StreamKey,
) -> Result<DialogueTree, TreeError> {
    let state = env.reset(scenario)?;
    let mut counters = GrowthCounters { generated_turns: 0, value_calls: u64::from(critic.is_some()) };
    let mut nodes = vec![TreeNode {
        id: 0,
        parent: None,
        depth: 0,
        cached_value: state_value(critic, &state),
        state,
        incoming_action: None,
        incoming_reward: 0.0,
        reply_effective: None,
        candidates: Vec::new(),
        retained: Vec::new(),
        u1: None,
        u2_raw: None,
        u2_norm: None,
        u: None,
        status: NodeStatus::Frontier,
        decision: None,
        key: seed,
    }];
    let mut cur = 0;
    while !nodes[cur].state.is_terminal() {
        let key = nodes[cur].key;
        let mut rng = key.child(0).rng();
        let action = policy.sample_macro_action(&env.vocab, &nodes[cur].state, &mut rng, env.config.max_macro_len, config.temperature);
        let out = env.step(&nodes[cur].state, &action)?;
        counters.generated_turns += 1;
        let next_value = state_value(critic, &out.state);
        counters.value_calls += u64::from(critic.is_some() && !out.terminal);
        let id = nodes.len();
        let depth = nodes[cur].depth + 1;
        let candidate = Candidate {
            action: action.clone(),
            state: out.state.clone(),
            reward: out.reward,
            reply_effective: out.reply.as_ref().map(|r| r.effective),
            next_value,
            q: q_lookahead(out.reward, next_value, config.gamma),
        };
        let parent = &mut nodes[cur];
        parent.candidates = vec![candidate];
        parent.retained = vec![(0, id)];
        parent.status = NodeStatus::PrunedSingle;
        parent.decision = Some(Decision::Rollout);
        nodes.push(TreeNode {
            id,
            parent: Some(cur),
            depth,
            status: if out.terminal { NodeStatus::TerminalLeaf } else { NodeStatus::Frontier },
            state: out.state,
            incoming_action: Some(action),
            incoming_reward: out.reward,
            reply_effective: out.reply.map(|r| r.effective),
            cached_value: next_value,
            candidates: Vec::new(),
            retained: Vec::new(),
            u1: None,
            u2_raw: None,
            u2_norm: None,
            u: None,
            decision: None,
            key: key.child(0),
        });
        cur = id;
    }
    Ok(DialogueTree { root: 0, nodes, leaf_budget: 1, seed, config: *config, counters })
}

impl DialogueTree {
    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves().count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Node ids from the root down to `id`.
    pub fn path_to(&self, id: usize) -> Vec<usize> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Structural checks: budget, B ∈ {1, N}, threshold/bypass provenance,
    /// depth bookkeeping, reachability.
    pub fn check_invariants(&self) -> Result<(), String> {
        let n = self.config.n;
        if self.leaf_count() > self.leaf_budget {
            return Err(format!("{} leaves exceed budget {}", self.leaf_count(), self.leaf_budget));
        }
        for node in &self.nodes {
            let terminal = node.state.is_terminal();
            if (node.status == NodeStatus::TerminalLeaf) != terminal {
                return Err(format!("node {}: status {:?} vs terminal {}", node.id, node.status, terminal));
            }
            if terminal && !node.is_leaf() {
                return Err(format!("terminal node {} has children", node.id));
            }
            if !terminal {
                let b = node.branches();
                if b != 1 && b != n {
                    return Err(format!("node {} has B = {b} (N = {n})", node.id));
                }
                if b == n && n > 1 {
                    let ok = match node.decision {
                        Some(Decision::Expand) => node.u.is_some_and(|u| u > self.config.tau),
                        Some(Decision::Bypass) => true,
                        _ => false,
                    };
                    if !ok {
                        return Err(format!("node {} expanded without cause ({:?})", node.id, node.decision));
                    }
                }
            }
            for c in node.children() {
                let child = &self.nodes[c];
                if child.parent != Some(node.id) || child.depth != node.depth + 1 {
                    return Err(format!("edge {} -> {c} inconsistent", node.id));
                }
            }
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            if std::mem::replace(&mut seen[id], true) {
                return Err(format!("node {id} reached twice"));
            }
            stack.extend(self.nodes[id].children());
        }
        if let Some(id) = seen.iter().position(|s| !s) {
            return Err(format!("node {id} unreachable"));
        }
        Ok(())
    }

    /// JSON-friendly view for the `sample-tree` command and depth histograms.
    pub fn dump(&self) -> TreeDump {
        let nodes = self
            .nodes
            .iter()
            .map(|n| NodeDump {
                id: n.id,
                parent: n.parent,
                depth: n.depth,
                b: n.branches(),
                u1: n.u1,
                u2_raw: n.u2_raw,
                u2_norm: n.u2_norm,
                u: n.u,
                reward: n.incoming_reward,
                value: n.cached_value,
                status: n.status,
                decision: n.decision,
                action: n.incoming_action.as_ref().map(|a| a.tokens.clone()),
                candidates: n.candidates.len(),
            })
            .collect();
        let edges = self.nodes.iter().flat_map(|n| n.children().map(move |c| (n.id, c))).collect();
        TreeDump {
            scenario_id: self.nodes[self.root].state.scenario_id().to_string(),
            n: self.config.n,
            leaf_budget: self.leaf_budget,
            leaves: self.leaf_count(),
            counters: self.counters,
            nodes,
            edges,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NodeDump {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub u1: Option<f64>,
    pub u2_raw: Option<f64>,
    pub u2_norm: Option<f64>,
    pub u: Option<f64>,
    pub reward: f64,
    pub value: f64,
    pub status: NodeStatus,
    pub decision: Option<Decision>,
    pub action: Option<Vec<u32>>,
    pub candidates: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TreeDump {
    pub scenario_id: String,
    pub n: usize,
    pub leaf_budget: usize,
    pub leaves: usize,
    pub counters: GrowthCounters,
    pub nodes: Vec<NodeDump>,
    pub edges: Vec<(usize, usize)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_scenarios, EnvConfig, ScenarioParams};
    use crate::model::ModelDims;

    fn setup() -> (Env, Vec<Arc<Scenario>>, Policy, Critic) {
        let params = ScenarioParams { num_keys: 6, num_relevant: 3, num_options: 4, count: 8 };
        let vocab = params.vocabulary();
        let env = Env::new(vocab, EnvConfig::default());
        let sc = generate_scenarios(3, params).unwrap().into_iter().map(Arc::new).collect();
        let dims = ModelDims { embed_dim: 8, hidden: 8, ..Default::default() };
        let policy = Policy::new(&vocab, dims, StreamKey::new(1), 2.0);
        let mut critic = Critic::from_policy(&policy, 4);
        let l = critic.net.layout();
        for (i, w) in critic.net.params[l.w_out].iter_mut().enumerate() {
            *w = ((i * 7919) % 13) as f64 / 13.0 - 0.5;
        }
        (env, sc, policy, critic)
    }

    #[test]
    fn lookahead_and_uncertainties() {
        assert_eq!(q_lookahead(0.7, 5.0, 0.0), 0.7);
        assert_eq!(q_lookahead(3.0, 0.0, 1.0), 3.0);
        assert!((q_lookahead(0.0, 1.7, 1.0) - 1.7).abs() < 1e-15);
        assert_eq!(u1(2.0, &[1.0, 3.0]), 0.0);
        assert_eq!(u1(1.0, &[3.0, 3.0]), 2.0);
        assert_eq!(u1(5.0, &[3.0]), u1(1.0, &[3.0]));
        assert_eq!(u2(&[1.5, 1.5, 1.5]), 0.0);
        assert_eq!(u2(&[0.0, 2.0]), 1.0);
        assert!((u2(&[0.3, 1.1, -2.0]) - u2(&[10.3, 11.1, 8.0])).abs() < 1e-12);
    }

    #[test]
    fn combined() {
        assert_eq!(combined_uncertainty(0.8, 5.0, 1.0).unwrap(), 0.8);
        assert!((combined_uncertainty(1.0, 2.0, 0.3).unwrap() - 1.7).abs() < 1e-12);
        assert_eq!(combined_uncertainty(0.0, 0.0, 0.42).unwrap(), 0.0);
        assert!(combined_uncertainty(1.0, 1.0, 1.1).is_err());
        assert!(combined_uncertainty(1.0, 1.0, -0.1).is_err());
    }

    #[test]
    fn zscore_contract() {
        let mut s = UncertaintyStats::default();
        assert_eq!(s.zscore(5.0), 0.0);
        let mut s = UncertaintyStats::default();
        s.push(0.0);
        s.push(2.0);
        assert!((s.zscore(2.0) - 1.0).abs() < 1e-15);
        let mut s = UncertaintyStats::default();
        for x in [1.0, 2.0, 3.0] {
            s.push(x);
        }
        assert_eq!(s.zscore(2.0), 0.0);
        let mut s = UncertaintyStats::new(3);
        for x in 0..10 {
            s.push(x as f64);
        }
        assert_eq!(s.len(), 3);
        assert_eq!(s.mean_var().0, 8.0);
    }

    #[test]
    fn expansion_rule() {
        let mut rng = StreamKey::new(0).rng();
        assert_eq!(expand_or_prune(4, 2.0, 1.5, 0.0, &mut rng), (vec![0, 1, 2, 3], Decision::Expand));
        let (keep, d) = expand_or_prune(4, 0.1, 1.5, 0.0, &mut rng);
        assert_eq!((keep.len(), d), (1, Decision::Prune));
        assert_eq!(expand_or_prune(4, -3.0, 1.5, 1.0, &mut rng).1, Decision::Bypass);
        // equality prunes
        assert_eq!(expand_or_prune(3, 1.5, 1.5, 0.0, &mut rng).1, Decision::Prune);
    }

    #[test]
    fn candidates_replay_and_greedy_collapse() {
        let (env, sc, policy, _) = setup();
        let s = env.reset(sc[0].clone()).unwrap();
        let a = propose_candidates(&s, 4, &policy, &env, StreamKey::new(5), 1.0).unwrap();
        let b = propose_candidates(&s, 4, &policy, &env, StreamKey::new(5), 1.0).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1.reward == y.1.reward));
        assert_eq!(propose_candidates(&s, 1, &policy, &env, StreamKey::new(5), 1.0).unwrap().len(), 1);
        let g = propose_candidates(&s, 4, &policy, &env, StreamKey::new(5), 0.0).unwrap();
        assert!(g.iter().all(|c| c.0.tokens == g[0].0.tokens));
    }

    #[test]
    fn budget_one_is_a_chain() {
        let (env, sc, policy, critic) = setup();
        let cfg = TreeConfig { leaf_budget: 1, ..Default::default() };
        let t = grow_tree(sc[0].clone(), &policy, Some(&critic), &env, &cfg, StreamKey::new(2), &mut Normalizer::default()).unwrap();
        assert_eq!(t.leaf_count(), 1);
        assert!(t.nodes.iter().all(|n| n.branches() <= 1));
        assert!(t.nodes.iter().filter(|n| !n.is_leaf()).all(|n| n.decision == Some(Decision::Rollout)));
        assert_eq!(t.counters.generated_turns as usize, t.nodes.len() - 1);
        t.check_invariants().unwrap();
    }

    #[test]
    fn infinite_threshold_gives_chain_and_negative_gives_full_tree() {
        let (env, sc, policy, critic) = setup();
        let chain = TreeConfig { tau: f64::INFINITY, bypass_p: 0.0, ..Default::default() };
        let full = TreeConfig { n: 2, tau: f64::NEG_INFINITY, bypass_p: 0.0, leaf_budget: 16, ..Default::default() };
        for (i, s) in sc.iter().enumerate() {
            let t =
                grow_tree(s.clone(), &policy, Some(&critic), &env, &chain, StreamKey::new(i as u64), &mut Normalizer::default()).unwrap();
            assert_eq!(t.leaf_count(), 1);
            t.check_invariants().unwrap();
            let t = grow_tree(s.clone(), &policy, None, &env, &full, StreamKey::new(i as u64), &mut Normalizer::default()).unwrap();
            t.check_invariants().unwrap();
            assert!(t.leaf_count() <= 16);
            for node in t.nodes.iter().filter(|n| !n.is_leaf()) {
                if node.decision != Some(Decision::Rollout) && node.decision != Some(Decision::ForcePrune) {
                    assert_eq!(node.branches(), 2);
                }
            }
        }
    }

    #[test]
    fn growth_is_deterministic() {
        let (env, sc, policy, critic) = setup();
        let cfg = TreeConfig { tau: 0.0, ..Default::default() };
        let grow = || {
            let mut st = Normalizer::default();
            let t = grow_tree(sc[1].clone(), &policy, Some(&critic), &env, &cfg, StreamKey::new(9), &mut st).unwrap();
            serde_json::to_string(&t.dump()).unwrap()
        };
        assert_eq!(grow(), grow());
    }

    #[test]
    fn zero_budget_rejected() {
        let (env, sc, policy, _) = setup();
        let cfg = TreeConfig { leaf_budget: 0, ..Default::default() };
        let r = grow_tree(sc[0].clone(), &policy, None, &env, &cfg, StreamKey::new(0), &mut Normalizer::default());
        assert!(matches!(r, Err(TreeError::Config(_))));
    }
}
