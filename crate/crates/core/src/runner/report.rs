//! Per-depth branching and target-value summaries of grown trees.

use serde::{Deserialize, Serialize};

use crate::credit::TargetValueMap;
use crate::tree::DialogueTree;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TreeReport {
    /// Nodes keeping all `N` candidates (`N > 1`), per depth.
    pub branching_by_depth: Vec<usize>,
    /// Traceback targets of the nodes at each depth.
    pub returns_by_depth: Vec<DepthStats>,
}

pub fn emit_tree_report(tree: &DialogueTree, targets: &TargetValueMap) -> TreeReport {
    let depth = tree.max_depth() + 1;
    let mut branching = vec![0; depth];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); depth];
    for node in &tree.nodes {
        if tree.config.n > 1 && node.branches() == tree.config.n {
            branching[node.depth] += 1;
        }
        values[node.depth].push(targets.get(node.id));
    }
    TreeReport { branching_by_depth: branching, returns_by_depth: values.iter().map(|v| depth_stats(v)).collect() }
}

fn depth_stats(v: &[f64]) -> DepthStats {
    if v.is_empty() {
        return DepthStats::default();
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    DepthStats { count: v.len(), mean, variance }
}

impl TreeReport {
    /// Element-wise accumulation across trees (counts add, moments pool).
    pub fn merge(&mut self, other: &TreeReport) {
        if self.branching_by_depth.len() < other.branching_by_depth.len() {
            self.branching_by_depth.resize(other.branching_by_depth.len(), 0);
        }
        for (a, b) in self.branching_by_depth.iter_mut().zip(&other.branching_by_depth) {
            *a += b;
        }
        if self.returns_by_depth.len() < other.returns_by_depth.len() {
            self.returns_by_depth.resize(other.returns_by_depth.len(), DepthStats::default());
        }
        for (a, b) in self.returns_by_depth.iter_mut().zip(&other.returns_by_depth) {
            let n = a.count + b.count;
            if n == 0 {
                continue;
            }
            let (na, nb) = (a.count as f64, b.count as f64);
            let mean = (na * a.mean + nb * b.mean) / n as f64;
            let second = (na * (a.variance + a.mean * a.mean) + nb * (b.variance + b.mean * b.mean)) / n as f64;
            *a = DepthStats { count: n, mean, variance: (second - mean * mean).max(0.0) };
        }
    }
}
