mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use atpo_core::credit::{traceback_skeleton, AdvantageSource, TrajectoryGroup};
use atpo_core::env::{generate_scenarios, ActionKind, Env, EnvConfig, MacroAction, REWARD_CORRECT, REWARD_INCORRECT, REWARD_INVALID};
use atpo_core::model::{Policy, ReferencePolicy};
use atpo_core::optim::{policy_loss, tree_policy_turns, RatioMode, WeightedTurn};
use atpo_core::rng::StreamKey;
use atpo_core::runner::ComputeProfile;
use atpo_core::tree::{grow_tree, u1, u2, Decision, Normalizer, UncertaintyStats};
use atpo_core::vocab::TokenId;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn tau_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(f64::NEG_INFINITY), Just(f64::INFINITY), -2.0..3.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grown_trees_keep_their_structural_invariants(
        seed in 0u64..1000,
        n in 1usize..5,
        budget in 1usize..20,
        tau in tau_strategy(),
        alpha in 0.0..=1.0f64,
        bypass_p in prop_oneof![Just(0.0), Just(1.0), 0.0..=1.0f64],
    ) {
        let f = fixture(seed % 7, small_dims());
        let mut config = tree_config(n, budget, tau, bypass_p);
        config.alpha = alpha;
        let scenario = f.scenarios[seed as usize % f.scenarios.len()].clone();
        let key = StreamKey::new(seed);
        let tree = grow_tree(scenario.clone(), &f.policy, Some(&f.critic), &f.env, &config, key, &mut Normalizer::default()).unwrap();
        prop_assert!(tree.check_invariants().is_ok(), "{:?}", tree.check_invariants());
        prop_assert!(tree.leaf_count() <= budget);
        prop_assert!(tree.leaves().all(|l| l.state.is_terminal()));
        for node in &tree.nodes {
            if node.state.is_terminal() {
                continue;
            }
            let b = node.branches();
            prop_assert!(b == 1 || b == n);
            if b == n && n > 1 {
                prop_assert!(matches!(node.decision, Some(Decision::Expand) | Some(Decision::Bypass)));
            }
            if let (Some(a), Some(b2)) = (node.u1, node.u2_raw) {
                prop_assert!(a >= 0.0 && b2 >= 0.0);
            }
        }
        if tau == f64::INFINITY && bypass_p == 0.0 {
            prop_assert_eq!(tree.leaf_count(), 1);
        }
        if tau == f64::NEG_INFINITY && n > 1 {
            // Below the budget every node branches fully.
            for node in tree.nodes.iter().filter(|x| !x.state.is_terminal()) {
                prop_assert!(node.branches() == n || matches!(node.decision, Some(Decision::ForcePrune) | Some(Decision::Rollout)));
            }
        }
        let again = grow_tree(scenario, &f.policy, Some(&f.critic), &f.env, &config, key, &mut Normalizer::default()).unwrap();
        prop_assert_eq!(tree.dump(), again.dump());
    }

    #[test]
    fn variance_ignores_translation_and_bellman_error_is_nonnegative(
        qs in prop::collection::vec(-5.0..5.0f64, 1..8),
        shift in -10.0..10.0f64,
        v in -5.0..5.0f64,
    ) {
        let shifted: Vec<f64> = qs.iter().map(|q| q + shift).collect();
        prop_assert!((u2(&qs) - u2(&shifted)).abs() < 1e-9);
        prop_assert!(u2(&qs) >= 0.0);
        prop_assert!(u1(v, &qs) >= 0.0);
        let mean = qs.iter().sum::<f64>() / qs.len() as f64;
        prop_assert!((u1(mean + 2.0, &qs) - u1(mean - 2.0, &qs)).abs() < 1e-9);
    }

    #[test]
    fn zscore_history_variance_is_nonnegative(xs in prop::collection::vec(-100.0..100.0f64, 2..300)) {
        let mut stats = UncertaintyStats::new(256);
        for x in &xs {
            let z = stats.zscore(*x);
            prop_assert!(z.is_finite());
        }
        let (_, var) = stats.mean_var();
        prop_assert!(var >= 0.0);
        prop_assert_eq!(stats.len(), xs.len().min(256));
    }

    #[test]
    fn traceback_matches_path_enumeration_and_ignores_child_order(seed in any::<u64>(), n in 2usize..5, gamma in 0.0..=1.0f64) {
        let mut rng = StreamKey::new(seed).rng();
        let s = random_skeleton(&mut rng, n, 50);
        let v = traceback_skeleton(&s, gamma).unwrap();
        prop_assert!((v.get(0) - path_expectation(&s, gamma)).abs() < 1e-9);
        let mut permuted = s.clone();
        for c in &mut permuted.children {
            c.reverse();
        }
        let w = traceback_skeleton(&permuted, gamma).unwrap();
        for (a, b) in v.0.iter().zip(&w.0) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn visit_counts_equal_descendant_leaves(seed in 0u64..500, n in 2usize..5, budget in 2usize..16) {
        let f = fixture(seed % 5, small_dims());
        let config = tree_config(n, budget, 0.0, 0.3);
        let tree = grow_tree(f.scenarios[0].clone(), &f.policy, Some(&f.critic), &f.env, &config, StreamKey::new(seed), &mut Normalizer::default()).unwrap();
        let group = TrajectoryGroup::from_tree(&tree, AdvantageSource::Critic, 1.0).unwrap();
        let m = group.trajectories.len() as u32;
        prop_assert_eq!(m as usize, tree.leaf_count());
        prop_assert_eq!(group.visits.get(tree.root).unwrap(), m);
        let mut leaf_sum = 0;
        for node in &tree.nodes {
            let c = group.visits.get(node.id).unwrap();
            if node.is_leaf() {
                prop_assert_eq!(c, 1);
                leaf_sum += c;
            } else {
                let children: u32 = node.children().map(|k| group.visits.get(k).unwrap()).sum();
                prop_assert_eq!(c, children);
            }
        }
        prop_assert_eq!(leaf_sum, m);
    }

    /// Each node's tokens carry a total weight of (1/M)·mean over the
    /// trajectories through it of 1/K, however many trajectories share it.
    #[test]
    fn shared_prefixes_are_counted_once(seed in 0u64..500, budget in 4usize..16) {
        let f = fixture(seed % 5, small_dims());
        let config = tree_config(4, budget, f64::NEG_INFINITY, 0.0);
        let tree = grow_tree(f.scenarios[1].clone(), &f.policy, Some(&f.critic), &f.env, &config, StreamKey::new(seed), &mut Normalizer::default()).unwrap();
        let group = TrajectoryGroup::from_tree(&tree, AdvantageSource::Critic, 1.0).unwrap();
        let turns = tree_policy_turns(std::slice::from_ref(&group), true).unwrap();
        let m = group.trajectories.len() as f64;
        let mut per_node: BTreeMap<usize, (f64, f64, u32)> = BTreeMap::new();
        let mut i = 0;
        for traj in &group.trajectories {
            for turn in &traj.turns {
                let wt = &turns[i];
                i += 1;
                let e = per_node.entry(turn.node).or_insert((0.0, 0.0, 0));
                e.0 += wt.weights.iter().sum::<f64>();
                e.1 += 1.0 / traj.len() as f64;
                e.2 += 1;
            }
        }
        for (_, (total, inv_k, count)) in per_node {
            let expect = inv_k / f64::from(count) / m;
            prop_assert!((total - expect).abs() < 1e-12, "{total} vs {expect}");
        }
    }

    #[test]
    fn policy_equal_to_reference_gives_the_plain_gradient(seed in 0u64..500, adv_scale in 0.1..5.0f64) {
        let f = fixture(seed % 5, small_dims());
        let reference = ReferencePolicy::snapshot(&f.policy);
        let turns = sample_turns(&f.env, &f.policy, &f.scenarios, seed, adv_scale);
        for ratio in [RatioMode::Reference, RatioMode::Behavior] {
            let pl = policy_loss(&turns, &f.policy, reference.policy(), ratio, 0.2, 0.0).unwrap();
            prop_assert_eq!(pl.clip_fraction, 0.0);
            let plain = plain_policy_gradient(&f.policy, &turns);
            let scale = plain.iter().fold(1e-12f64, |a, g| a.max(g.abs()));
            for (a, b) in pl.grads.iter().zip(&plain) {
                prop_assert!((a - b).abs() <= 1e-9 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn rewards_live_in_three_values_and_only_at_the_end(seed in 0u64..10_000, temperature in 0.3..3.0f64) {
        let params = smoke_params(4);
        let env = Env::new(params.vocabulary(), EnvConfig::default());
        let f = fixture(seed % 3, small_dims());
        for s in generate_scenarios(seed, params).unwrap() {
            let mut state = env.reset(Arc::new(s)).unwrap();
            let mut rng = StreamKey::new(seed).rng();
            let mut turns = 0;
            while !state.is_terminal() {
                let a = f.policy.sample_macro_action(&env.vocab, &state, &mut rng, env.config.max_macro_len, temperature);
                let out = env.step(&state, &a).unwrap();
                turns += 1;
                prop_assert!([REWARD_CORRECT, REWARD_INCORRECT, REWARD_INVALID].contains(&out.reward));
                if !out.state.is_terminal() {
                    prop_assert_eq!(out.reward, 0.0);
                }
                if let (ActionKind::Ask(k), Some(reply)) = (a.kind, &out.reply) {
                    prop_assert_eq!(reply.effective, state.scenario.facts.contains_key(&k));
                }
                state = out.state;
            }
            prop_assert!(turns <= env.config.turn_limit);
        }
    }

    #[test]
    fn next_token_distributions_are_normalised(seed in 0u64..1000, len in 1usize..30) {
        let f = fixture(seed % 4, small_dims());
        let mut rng = StreamKey::new(seed).rng();
        let v = f.policy.vocab_size() as u32;
        let tokens: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..v) as TokenId).collect();
        let lp = f.policy.next_logprobs(&tokens).unwrap();
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(lp.iter().all(|l| l.exp() >= 0.0));
    }

    #[test]
    fn prefix_sharing_savings_identity(phi in 0u64..1_000_000, theta in 0u64..1_000_000, x in 0u64..4096, y in 0u64..4096, n in 1u64..64) {
        let p = ComputeProfile { phi, theta, x, y, n };
        let r = p.report();
        let tol = 1e-9 * r.independent_total.abs().max(1.0);
        prop_assert!((r.savings - (r.independent_total - r.tree_total)).abs() <= tol);
    }
}

/// Turns from a few sampled tree trajectories with random advantages.
fn sample_turns(env: &Env, policy: &Policy, scenarios: &[Arc<atpo_core::env::Scenario>], seed: u64, scale: f64) -> Vec<WeightedTurn> {
    let mut rng = StreamKey::new(seed).child(9).rng();
    let mut out = Vec::new();
    for (i, s) in scenarios.iter().take(3).enumerate() {
        let mut state = env.reset(s.clone()).unwrap();
        let mut srng = StreamKey::new(seed).child(i as u64).rng();
        while !state.is_terminal() {
            let a = policy.sample_macro_action(&env.vocab, &state, &mut srng, env.config.max_macro_len, 1.0);
            let n = a.sampled_len();
            if n > 0 {
                let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
                let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
                out.push(WeightedTurn { history: state.tokens.clone(), action: a.clone(), advantages: adv, weights: w });
            }
            state = env.step(&state, &a).unwrap().state;
        }
    }
    out
}

/// Gradient of −Σ w·A·log π(token), assembled independently of the loss code.
fn plain_policy_gradient(policy: &Policy, turns: &[WeightedTurn]) -> Vec<f64> {
    let v = policy.vocab_size();
    let mut grads = vec![0.0; policy.net.params.len()];
    for wt in turns {
        let (cache, dists) = policy.turn_forward(&wt.history, &wt.action);
        let mut d = vec![0.0; dists.len() * v];
        for (t, lp) in dists.iter().enumerate() {
            let tok = wt.action.tokens[t] as usize;
            let c = wt.weights[t] * wt.advantages[t];
            for (j, l) in lp.iter().enumerate() {
                let onehot = if j == tok { 1.0 } else { 0.0 };
                d[t * v + j] = -c * (onehot - l.exp());
            }
        }
        policy.net.backward(&cache, &d, &mut grads);
    }
    grads
}

#[test]
fn macro_action_grammar_round_trips() {
    let params = smoke_params(1);
    let vocab = params.vocabulary();
    for k in 0..params.num_keys {
        assert_eq!(MacroAction::from_tokens(&vocab, MacroAction::ask(&vocab, k).tokens.clone()).kind, ActionKind::Ask(k));
    }
    for o in 0..params.num_options {
        assert_eq!(MacroAction::from_tokens(&vocab, MacroAction::answer(&vocab, o).tokens.clone()).kind, ActionKind::Answer(o));
    }
}

#[test]
fn tree_growth_is_independent_of_the_thread_schedule() {
    let f = fixture(3, small_dims());
    let config = tree_config(4, 16, 0.2, 0.1);
    let grow = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            grow_tree(f.scenarios[2].clone(), &f.policy, Some(&f.critic), &f.env, &config, StreamKey::new(11), &mut Normalizer::default())
                .unwrap()
                .dump()
        })
    };
    assert_eq!(grow(1), grow(4));
}
