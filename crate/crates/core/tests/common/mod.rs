#![allow(dead_code)]

use std::sync::Arc;

use atpo_core::credit::Skeleton;
use atpo_core::env::{generate_scenarios, Env, EnvConfig, Scenario, ScenarioParams};
use atpo_core::model::{Critic, ModelDims, Policy};
use atpo_core::rng::StreamKey;
use atpo_core::tree::TreeConfig;
use rand::Rng;

pub const REWARDS: [f64; 3] = [3.0, 0.0, -1.0];

pub struct Fixture {
    pub env: Env,
    pub scenarios: Vec<Arc<Scenario>>,
    pub policy: Policy,
    pub critic: Critic,
}

pub fn smoke_params(count: usize) -> ScenarioParams {
    ScenarioParams { num_keys: 6, num_relevant: 3, num_options: 4, count }
}

/// Small randomly initialised policy and an untrained critic whose head is
/// perturbed so that its values are generically nonzero.
pub fn fixture(seed: u64, dims: ModelDims) -> Fixture {
    let params = smoke_params(32);
    let vocab = params.vocabulary();
    let env = Env::new(vocab, EnvConfig::default());
    let scenarios = generate_scenarios(seed, params).unwrap().into_iter().map(Arc::new).collect();
    let policy = Policy::new(&vocab, dims, StreamKey::new(seed).child(1), 1.5);
    let mut critic = Critic::from_policy(&policy, 3);
    let layout = critic.net.layout();
    let mut rng = StreamKey::new(seed).child(2).rng();
    for w in &mut critic.net.params[layout.w_out] {
        *w = rng.random_range(-0.5..0.5);
    }
    for b in &mut critic.net.params[layout.b_out] {
        *b = rng.random_range(-0.5..0.5);
    }
    Fixture { env, scenarios, policy, critic }
}

pub fn small_dims() -> ModelDims {
    ModelDims { embed_dim: 6, hidden: 8, ..Default::default() }
}

pub fn tree_config(n: usize, leaf_budget: usize, tau: f64, bypass_p: f64) -> TreeConfig {
    TreeConfig { n, leaf_budget, tau, bypass_p, ..TreeConfig::default() }
}

/// Random tree shape: every internal node keeps 1 or `n` children, every
/// leaf is terminal, every edge carries a reward from {+3, 0, −1}.
pub fn random_skeleton(rng: &mut impl Rng, n: usize, max_nodes: usize) -> Skeleton {
    let mut s = Skeleton { children: vec![Vec::new()], reward: vec![0.0], terminal: vec![false] };
    let mut frontier = vec![0usize];
    while let Some(id) = frontier.pop() {
        let b = if rng.random_bool(0.5) { n } else { 1 };
        let room = s.len() + b <= max_nodes;
        let stop = id != 0 && (!room || rng.random_bool(0.3));
        if stop || !room {
            s.terminal[id] = true;
            continue;
        }
        for _ in 0..b {
            let c = s.len();
            s.children.push(Vec::new());
            s.reward.push(REWARDS[rng.random_range(0..3)]);
            s.terminal.push(false);
            s.children[id].push(c);
            frontier.push(c);
        }
    }
    s
}

/// Expected discounted return from the root when each retained child is
/// taken with probability 1/B, by explicit enumeration of every path.
pub fn path_expectation(s: &Skeleton, gamma: f64) -> f64 {
    fn walk(s: &Skeleton, gamma: f64, id: usize, prob: f64, ret: f64, discount: f64, acc: &mut f64) {
        if s.children[id].is_empty() {
            *acc += prob * ret;
            return;
        }
        let b = s.children[id].len() as f64;
        for &c in &s.children[id] {
            walk(s, gamma, c, prob / b, ret + discount * s.reward[c], discount * gamma, acc);
        }
    }
    let mut acc = 0.0;
    walk(s, gamma, 0, 1.0, 0.0, 1.0, &mut acc);
    acc
}
