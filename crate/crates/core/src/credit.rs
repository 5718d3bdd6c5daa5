//! Value traceback, turn advantages and root-to-leaf decomposition.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::env::{MacroAction, TerminalReason, REWARD_CORRECT};
use crate::tree::DialogueTree;
use crate::vocab::TokenId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CreditError {
    #[error("leaf node {0} is not terminal; grow the tree to completion first")]
    UnterminatedLeaf(usize),
    #[error("no visit count for node {0}")]
    MissingVisitCount(usize),
}

/// Shape of a tree as far as credit assignment cares.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Skeleton {
    pub children: Vec<Vec<usize>>,
    /// Reward on the edge into each node (0 for the root).
    pub reward: Vec<f64>,
    pub terminal: Vec<bool>,
}

impl Skeleton {
    pub fn of(tree: &DialogueTree) -> Self {
        Skeleton {
            children: tree.nodes.iter().map(|n| n.children().collect()).collect(),
            reward: tree.nodes.iter().map(|n| n.incoming_reward).collect(),
            terminal: tree.nodes.iter().map(|n| n.state.is_terminal()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    /// Children before parents, starting from node 0.
    fn post_order(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![(0usize, false)];
        while let Some((id, done)) = stack.pop() {
            if done {
                out.push(id);
            } else {
                stack.push((id, true));
                stack.extend(self.children[id].iter().map(|&c| (c, false)));
            }
        }
        out
    }
}

/// V̂ per node id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetValueMap(pub Vec<f64>);

impl TargetValueMap {
    pub fn get(&self, id: usize) -> f64 {
        self.0[id]
    }
}

pub fn traceback(tree: &DialogueTree, gamma: f64) -> Result<TargetValueMap, CreditError> {
    traceback_skeleton(&Skeleton::of(tree), gamma)
}

/// Leaves take their incoming reward. Internal nodes average
/// `r_i + γ·V̂(child_i)` over retained children, where a terminal child
/// contributes no continuation value.
pub fn traceback_skeleton(s: &Skeleton, gamma: f64) -> Result<TargetValueMap, CreditError> {
    let mut v = vec![0.0; s.len()];
    for id in s.post_order() {
        let kids = &s.children[id];
        if kids.is_empty() {
            if !s.terminal[id] {
                return Err(CreditError::UnterminatedLeaf(id));
            }
            v[id] = s.reward[id];
        } else {
            let sum: f64 = kids.iter().map(|&c| s.reward[c] + gamma * continuation(s, &v, c)).sum();
            v[id] = sum / kids.len() as f64;
        }
    }
    Ok(TargetValueMap(v))
}

fn continuation(s: &Skeleton, v: &[f64], id: usize) -> f64 {
    if s.terminal[id] {
        0.0
    } else {
        v[id]
    }
}

/// One-step TD advantage `r + γ·V(next) − V(state)`; pass 0 for a terminal next state.
pub fn advantage(reward: f64, next_value: f64, state_value: f64, gamma: f64) -> f64 {
    reward + gamma * next_value - state_value
}

/// Which value estimates feed the advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageSource {
    /// Critic values cached during growth.
    Critic,
    /// Traceback targets (critic-free).
    Targets,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    /// Node holding the pre-action state x_k.
    pub node: usize,
    /// Node reached by the action.
    pub child: usize,
    pub state_tokens: Vec<TokenId>,
    pub action: MacroAction,
    pub reward: f64,
    pub advantage: f64,
    /// V̂(x_k)
    pub target: f64,
    /// Critic estimate of x_k at growth time.
    pub value: f64,
    pub reply_effective: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub scenario_id: String,
    pub leaf: usize,
    pub turns: Vec<Turn>,
    pub terminal: Option<TerminalReason>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    /// Undiscounted sum of rewards.
    pub fn total_return(&self) -> f64 {
        self.turns.iter().map(|t| t.reward).sum()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.turns.iter().rev().fold(0.0, |acc, t| t.reward + gamma * acc)
    }

    pub fn correct(&self) -> bool {
        self.terminal == Some(TerminalReason::Answered) && self.turns.last().is_some_and(|t| t.reward == REWARD_CORRECT)
    }

    /// Root-to-leaf node ids.
    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns.iter().map(|t| t.node).chain(self.turns.last().map(|t| t.child))
    }
}

/// One trajectory per leaf, in leaf id order.
pub fn decompose(tree: &DialogueTree, targets: &TargetValueMap, source: AdvantageSource, gamma: f64) -> Vec<Trajectory> {
    let value_of = |id: usize| -> f64 {
        let n = &tree.nodes[id];
        if n.state.is_terminal() {
            return 0.0;
        }
        match source {
            AdvantageSource::Critic => n.cached_value,
            AdvantageSource::Targets => targets.get(id),
        }
    };
    tree.leaves()
        .map(|leaf| {
            let path = tree.path_to(leaf.id);
            let turns = path
                .windows(2)
                .map(|w| {
                    let (x, c) = (&tree.nodes[w[0]], &tree.nodes[w[1]]);
                    Turn {
                        node: x.id,
                        child: c.id,
                        state_tokens: x.state.tokens.clone(),
                        action: c.incoming_action.clone().expect("non-root node has an incoming action"),
                        reward: c.incoming_reward,
                        advantage: advantage(c.incoming_reward, value_of(c.id), value_of(x.id), gamma),
                        target: targets.get(x.id),
                        value: x.cached_value,
                        reply_effective: c.reply_effective,
                    }
                })
                .collect();
            Trajectory { scenario_id: leaf.state.scenario_id().to_string(), leaf: leaf.id, turns, terminal: leaf.state.terminal }
        })
        .collect()
}

/// Number of trajectories passing through each node.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VisitCountMap(pub BTreeMap<usize, u32>);

impl VisitCountMap {
    pub fn get(&self, id: usize) -> Result<u32, CreditError> {
        self.0.get(&id).copied().ok_or(CreditError::MissingVisitCount(id))
    }
}

pub fn visit_counts<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> VisitCountMap {
    let mut map = BTreeMap::new();
    for t in trajectories {
        for id in t.nodes() {
            *map.entry(id).or_insert(0) += 1;
        }
    }
    VisitCountMap(map)
}

/// Trajectories of one tree (or one GRPO group) with their visit counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryGroup {
    pub scenario_id: String,
    pub trajectories: Vec<Trajectory>,
    pub visits: VisitCountMap,
}

impl TrajectoryGroup {
    pub fn new(scenario_id: impl Into<String>, trajectories: Vec<Trajectory>) -> Self {
        let visits = visit_counts(&trajectories);
        TrajectoryGroup { scenario_id: scenario_id.into(), trajectories, visits }
    }

    /// Traceback + decomposition of a finished tree.
    pub fn from_tree(tree: &DialogueTree, source: AdvantageSource, gamma: f64) -> Result<Self, CreditError> {
        let targets = traceback(tree, gamma)?;
        let trajs = decompose(tree, &targets, source, gamma);
        Ok(Self::new(tree.nodes[tree.root].state.scenario_id(), trajs))
    }
}

/// JSON-lines export, one trajectory per line.
pub fn write_jsonl<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>, mut out: impl Write) -> std::io::Result<()> {
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `parents[i]` for i ≥ 1; rewards and terminal flags per node.
    fn skeleton(parents: &[usize], reward: &[f64], terminal: &[bool]) -> Skeleton {
        let mut children = vec![Vec::new(); reward.len()];
        for (i, &p) in parents.iter().enumerate() {
            children[p].push(i + 1);
        }
        Skeleton { children, reward: reward.to_vec(), terminal: terminal.to_vec() }
    }

    #[test]
    fn terminal_leaf_keeps_reward() {
        let s = skeleton(&[0], &[0.0, 3.0], &[false, true]);
        let v = traceback_skeleton(&s, 1.0).unwrap();
        assert_eq!(v.get(1), 3.0);
        assert_eq!(v.get(0), 3.0);
    }

    #[test]
    fn chain_of_two_asks_then_correct() {
        let s = skeleton(&[0, 1, 2], &[0.0, 0.0, 0.0, 3.0], &[false, false, false, true]);
        assert_eq!(traceback_skeleton(&s, 1.0).unwrap().get(0), 3.0);
    }

    #[test]
    fn four_way_average() {
        // root -> four non-terminal children, each with one terminal grandchild
        let parents = [0, 0, 0, 0, 1, 2, 3, 4];
        let reward = [0.0, 0.0, 0.0, 0.0, 0.0, 3.0, 0.0, 3.0, 3.0];
        let terminal = [false, false, false, false, false, true, true, true, true];
        let v = traceback_skeleton(&skeleton(&parents, &reward, &terminal), 1.0).unwrap();
        assert_eq!(&v.0[1..5], &[3.0, 0.0, 3.0, 3.0]);
        assert_eq!(v.get(0), 2.25);
    }

    #[test]
    fn open_leaf_is_an_error() {
        let s = skeleton(&[0], &[0.0, 0.0], &[false, false]);
        assert_eq!(traceback_skeleton(&s, 1.0), Err(CreditError::UnterminatedLeaf(1)));
    }

    #[test]
    fn advantage_examples() {
        assert_eq!(advantage(0.0, 2.0, 1.5, 1.0), 0.5);
        assert_eq!(advantage(3.0, 0.0, 2.0, 1.0), 1.0);
        // exact values on a deterministic chain
        assert_eq!(advantage(0.0, 3.0, 3.0, 1.0), 0.0);
    }

    #[test]
    fn permuting_children_changes_nothing() {
        let parents = [0, 0, 0, 1, 1, 3];
        let reward = [0.0, 0.0, -1.0, 0.0, 3.0, 0.0, 3.0];
        let terminal = [false, false, true, false, true, true, true];
        let s = skeleton(&parents, &reward, &terminal);
        let mut p = s.clone();
        for c in &mut p.children {
            c.reverse();
        }
        assert_eq!(traceback_skeleton(&s, 0.9).unwrap(), traceback_skeleton(&p, 0.9).unwrap());
    }
}
