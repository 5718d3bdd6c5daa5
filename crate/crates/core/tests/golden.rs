mod common;

use std::path::PathBuf;

use atpo_core::credit::{traceback, traceback_skeleton, Skeleton};
use atpo_core::env::{DialogueState, Env, MacroAction};
use atpo_core::rng::{StreamKey, StreamRng};
use atpo_core::runner::{emit_tree_report, evaluate, ingest_str, setup, train, Actor, Algorithm, RunConfig};
use atpo_core::tree::{grow_tree, Normalizer, TreeDump};
use common::*;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct GoldenTree {
    leaves: usize,
    branching_by_depth: Vec<usize>,
    /// Action tokens along each root-to-leaf path, sorted.
    trajectories: Vec<Vec<u32>>,
}

fn summarize(dump: &TreeDump, branching_by_depth: Vec<usize>) -> GoldenTree {
    let mut trajectories = Vec::new();
    for node in dump.nodes.iter().filter(|n| !dump.edges.iter().any(|(p, _)| *p == n.id)) {
        let mut path = Vec::new();
        let mut cur = Some(node.id);
        while let Some(id) = cur {
            let n = &dump.nodes[id];
            if let Some(a) = &n.action {
                path.push(a.clone());
            }
            cur = n.parent;
        }
        path.reverse();
        trajectories.push(path.concat());
    }
    trajectories.sort();
    GoldenTree { leaves: dump.leaves, branching_by_depth, trajectories }
}

#[test]
fn golden_tree_fixture() {
    let run = setup(&pretrained(21)).unwrap();
    let config = tree_config(4, 16, 0.0, 0.25);
    let tree = grow_tree(
        run.train[0].clone(),
        &run.policy,
        run.critic.as_ref(),
        &run.env,
        &config,
        StreamKey::new(2024),
        &mut Normalizer::default(),
    )
    .unwrap();
    let report = emit_tree_report(&tree, &traceback(&tree, 1.0).unwrap());
    let got = summarize(&tree.dump(), report.branching_by_depth);
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_tree.json");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&got).unwrap() + "\n").unwrap();
    }
    let want: GoldenTree =
        serde_json::from_str(&std::fs::read_to_string(&path).expect("run with UPDATE_GOLDEN=1 to create the fixture")).unwrap();
    assert_eq!(got, want);
    assert!(got.leaves <= 16);
}

#[test]
fn chain_report_has_no_branching() {
    let f = fixture(4, small_dims());
    let tree = grow_tree(
        f.scenarios[3].clone(),
        &f.policy,
        Some(&f.critic),
        &f.env,
        &tree_config(4, 16, f64::INFINITY, 0.0),
        StreamKey::new(8),
        &mut Normalizer::default(),
    )
    .unwrap();
    let report = emit_tree_report(&tree, &traceback(&tree, 1.0).unwrap());
    assert_eq!(tree.leaf_count(), 1);
    assert!(report.branching_by_depth.iter().all(|b| *b == 0));
    assert!(report.returns_by_depth.iter().all(|d| d.count == 1 && d.variance == 0.0));
}

#[test]
fn binary_tree_report_branches_once_then_twice() {
    let run = setup(&pretrained(3)).unwrap();
    let config = tree_config(2, 4, f64::NEG_INFINITY, 0.0);
    let mut found = false;
    for seed in 0..200 {
        for s in &run.train {
            let tree =
                grow_tree(s.clone(), &run.policy, run.critic.as_ref(), &run.env, &config, StreamKey::new(seed), &mut Normalizer::default())
                    .unwrap();
            if tree.nodes.iter().any(|n| n.depth < 2 && n.state.is_terminal()) {
                continue;
            }
            let report = emit_tree_report(&tree, &traceback(&tree, 1.0).unwrap());
            assert_eq!(report.branching_by_depth[..2], [1, 2]);
            assert!(report.branching_by_depth[2..].iter().all(|b| *b == 0));
            assert_eq!(tree.leaf_count(), 4);
            found = true;
        }
        if found {
            break;
        }
    }
    assert!(found, "no tree reached depth 2 without terminating");
}

/// Root with two children, each with two terminal leaves:
///   A = mean(+3, 0) = 1.5
///   B = mean(−1, 0) = −0.5
///   root = mean(0 + γ·1.5, 0 + γ·(−0.5)) = 0.5γ
#[test]
fn seven_node_hand_recursion() {
    let s = Skeleton {
        children: vec![vec![1, 2], vec![3, 4], vec![5, 6], vec![], vec![], vec![], vec![]],
        reward: vec![0.0, 0.0, 0.0, 3.0, 0.0, -1.0, 0.0],
        terminal: vec![false, false, false, true, true, true, true],
    };
    let v = traceback_skeleton(&s, 1.0).unwrap();
    assert_eq!(v.0, [0.5, 1.5, -0.5, 3.0, 0.0, -1.0, 0.0]);
    // Terminal leaves carry no continuation, so only the root is discounted.
    let v = traceback_skeleton(&s, 0.5).unwrap();
    assert_eq!(v.0[..3], [0.25, 1.5, -0.5]);
}

#[test]
fn free_text_example_ingests_as_one_scenario() {
    let line = serde_json::json!({
        "id": "epilepsy-0",
        "context": "A 15-year-old girl has episodes of jerky movements of her arms.",
        "atomic_facts": [
            "The symptom is precipitated in the morning.",
            "The symptom is precipitated during exams.",
            "There is no history of loss of consciousness.",
            "Her cousin sister has been diagnosed with epilepsy.",
            "An EEG was performed and was suggestive of epileptic spikes."
        ],
        "question": "What is the most likely diagnosis?",
        "options": {"A": "Juvenile myoclonic epilepsy", "B": "Absence seizures", "C": "Syncope", "D": "Panic attacks"},
        "answer": "A"
    });
    let r = ingest_str(&line.to_string());
    assert!(r.issues.is_empty(), "{:?}", r.issues);
    assert_eq!(r.scenarios.len(), 1);
    let s = &r.scenarios[0];
    assert_eq!(s.facts.len(), 5);
    assert_eq!(s.options.len(), 4);
    assert_eq!(s.correct_option, 0);
    assert_eq!(r.dictionary.fact_text(s.facts[&3]), Some("Her cousin sister has been diagnosed with epilepsy."));
    assert_eq!(r.summary(), "1 scenarios accepted, 0 lines rejected");
}

/// Picks uniformly among every well-formed question and answer.
struct UniformActor;

impl Actor for UniformActor {
    fn act(&self, env: &Env, state: &DialogueState, rng: &mut StreamRng) -> MacroAction {
        let asks = env.vocab.num_keys;
        let options = &state.scenario.options;
        let i = rng.random_range(0..asks + options.len() as u32);
        if i < asks {
            MacroAction::ask(&env.vocab, i)
        } else {
            MacroAction::answer(&env.vocab, options[(i - asks) as usize])
        }
    }
}

#[test]
fn uniform_policy_stays_near_chance() {
    let f = fixture(17, small_dims());
    let summary = evaluate(&UniformActor, &f.env, &f.scenarios, 10_000usize.div_ceil(f.scenarios.len()), 5).unwrap();
    assert!(summary.episodes >= 10_000);
    assert!(summary.mean < 0.25, "uniform accuracy {}", summary.mean);
    assert_eq!(summary.invalid_rate, 0.0);
}

#[test]
fn policy_is_frozen_during_critic_warmup() {
    let mut c = small_run(6);
    c.steps = 5;
    c.critic_warmup_steps = 5;
    let initial = setup(&c).unwrap().policy;
    let out = train(&c, |_| {}).unwrap();
    assert_eq!(out.checkpoint.step, 5);
    assert_eq!(out.checkpoint.policy().unwrap().net.params, initial.net.params);
    assert!(out.metrics.iter().all(|m| !m.policy_updated));
    assert_ne!(
        out.checkpoint.critic().unwrap().unwrap().net.params,
        atpo_core::model::Critic::from_policy(&initial, c.critic_h).net.params
    );
}

fn small_run(seed: u64) -> RunConfig {
    let mut c = RunConfig::for_algorithm(Algorithm::AtpoU1u2);
    c.seed = seed;
    c.batch_size = 2;
    c.leaf_budget = 6;
    c.train_scenarios = 16;
    c.eval_scenarios = 8;
    c.embed_dim = 6;
    c.hidden = 8;
    c.pretrain_steps = 5;
    c
}

fn pretrained(seed: u64) -> RunConfig {
    RunConfig { pretrain_steps: RunConfig::default().pretrain_steps, ..small_run(seed) }
}
