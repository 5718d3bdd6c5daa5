//! Training orchestration.

use std::collections::VecDeque;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, RunConfig};
use super::eval::{evaluate, EvalSummary, PolicyActor};
use super::ingest::write_scenarios;
use super::report::{emit_tree_report, TreeReport};
use super::RunError;
use crate::credit::{traceback, AdvantageSource, Trajectory, TrajectoryGroup};
use crate::env::{effective_question_rate, generate_scenarios, DialogueState, Env, MacroAction, Scenario};
use crate::model::{Checkpoint, Critic, Policy};
use crate::optim::{apply_update, imitation_loss, Learner, OptimError, OptimizerKind, OptimizerState, UpdateReport};
use crate::rng::{StreamKey, Tag};
use crate::tree::{grow_tree, rollout_chain, DialogueTree, GrowthCounters, Normalizer};
use crate::vocab::TokenId;

const RETURN_VARIANCE_WINDOW: usize = 10;

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    /// Macro-actions sampled so far, pruned candidates included.
    pub generated_turns: u64,
    pub value_calls: u64,
    pub eval_accuracy: Option<f64>,
    pub eval_std: Option<f64>,
    pub train_accuracy: f64,
    pub mean_return: f64,
    /// Within-batch variance of trajectory returns, averaged over the last 10 steps.
    pub return_variance: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub effective_question_rate: f64,
    pub trajectories: usize,
    pub mean_turns: f64,
    pub policy_updated: bool,
    pub branching_by_depth: Vec<usize>,
    pub returns_by_depth: Vec<super::report::DepthStats>,
}

/// Scenarios, environment and the initial models of a run.
#[derive(Debug, Clone)]
pub struct RunSetup {
    pub env: Env,
    pub train: Vec<Arc<Scenario>>,
    pub eval: Vec<Arc<Scenario>>,
    pub policy: Policy,
    pub critic: Option<Critic>,
    pub pretrain_loss: Option<f64>,
}

/// Builds the scenario split and the format-pretrained starting policy. The
/// result depends on the seed and the model/scenario settings only, so every
/// algorithm run with the same seed starts from the same weights.
pub fn setup(config: &RunConfig) -> Result<RunSetup, RunError> {
    config.validate()?;
    let params = config.scenario_params();
    let env = Env::new(params.vocabulary(), config.env_config());
    let mut all: Vec<Arc<Scenario>> =
        generate_scenarios(config.seed, params).map_err(|e| RunError::Config(e.to_string()))?.into_iter().map(Arc::new).collect();
    let eval = all.split_off(config.train_scenarios);
    let mut policy = Policy::new(&env.vocab, config.model_dims(), StreamKey::new(config.seed).tagged(Tag::Init), config.head_scale);
    let pretrain_loss = pretrain_format(&mut policy, &env, &all, config)?;
    let critic = config.algorithm.uses_critic().then(|| Critic::from_policy(&policy, config.critic_h));
    Ok(RunSetup { env, train: all, eval, policy, critic, pretrain_loss })
}

/// A uniformly random well-formed action: ask any key or answer any offered option.
fn random_valid_action(env: &Env, state: &DialogueState, rng: &mut impl Rng) -> MacroAction {
    let n_keys = env.vocab.num_keys as usize;
    let opts = &state.scenario.options;
    let i = rng.random_range(0..n_keys + opts.len());
    if i < n_keys {
        MacroAction::ask(&env.vocab, i as u32)
    } else {
        MacroAction::answer(&env.vocab, opts[i - n_keys])
    }
}

/// Imitation of uniformly random well-formed turns so the policy starts out
/// speaking the action grammar. Returns the final loss.
pub fn pretrain_format(policy: &mut Policy, env: &Env, scenarios: &[Arc<Scenario>], config: &RunConfig) -> Result<Option<f64>, RunError> {
    if config.pretrain_steps == 0 {
        return Ok(None);
    }
    let root = StreamKey::new(config.seed).tagged(Tag::Format);
    let mut opt = OptimizerState::new(OptimizerKind::Adam, policy.net.params.len());
    let mut last = None;
    for step in 0..config.pretrain_steps {
        let examples: Vec<(Vec<TokenId>, MacroAction)> = (0..config.pretrain_batch)
            .map(|i| {
                let mut rng = root.child(step).child(i as u64).rng();
                let s = scenarios.choose(&mut rng).expect("non-empty scenario set").clone();
                let mut state = env.reset(s)?;
                let prefix = rng.random_range(0..=3u32.min(env.config.turn_limit - 1));
                for _ in 0..prefix {
                    let k = rng.random_range(0..env.vocab.num_keys);
                    state = env.step(&state, &MacroAction::ask(&env.vocab, k))?.state;
                }
                let action = random_valid_action(env, &state, &mut rng);
                Ok((state.tokens, action))
            })
            .collect::<Result<_, crate::env::EnvError>>()
            .map_err(|e| RunError::Input(e.to_string()))?;
        let (loss, grads) = imitation_loss(&examples, policy).map_err(|e| numeric(0, e))?;
        apply_update(&mut policy.net.params, &grads, config.pretrain_lr, &mut opt, None).map_err(|what| RunError::Numeric {
            step: 0,
            message: format!("non-finite {what} in format pretraining"),
            checkpoint: None,
        })?;
        last = Some(loss);
    }
    Ok(last)
}

fn numeric(step: u64, e: impl std::fmt::Display) -> RunError {
    RunError::Numeric { step, message: e.to_string(), checkpoint: None }
}

/// Rollouts of one step.
pub struct Collected {
    pub groups: Vec<TrajectoryGroup>,
    /// GRPO keeps per-scenario groups of independent chains.
    pub grpo: Vec<Vec<Trajectory>>,
    pub trees: Vec<DialogueTree>,
    pub counters: GrowthCounters,
    pub report: TreeReport,
}

impl Collected {
    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.groups.iter().flat_map(|g| &g.trajectories).chain(self.grpo.iter().flatten())
    }
}

/// Samples the step's rollouts for `scenarios` with the current models.
pub fn collect(
    config: &RunConfig,
    env: &Env,
    policy: &Policy,
    critic: Option<&Critic>,
    scenarios: &[Arc<Scenario>],
    step_key: StreamKey,
    normalizer: &mut Normalizer,
) -> Result<Collected, RunError> {
    let tc = config.tree_config();
    let gamma = config.gamma;
    let mut out =
        Collected { groups: vec![], grpo: vec![], trees: vec![], counters: GrowthCounters::default(), report: TreeReport::default() };
    let tree_err = |e: crate::tree::TreeError| RunError::Input(e.to_string());
    let credit_err = |e: crate::credit::CreditError| RunError::Input(e.to_string());
    match config.algorithm {
        Algorithm::AtpoU1 | Algorithm::AtpoU1u2 | Algorithm::Treepo => {
            let (critic, source) = match config.algorithm {
                Algorithm::Treepo => (None, AdvantageSource::Targets),
                _ => (critic, AdvantageSource::Critic),
            };
            let snapshot = normalizer.clone();
            let trees: Vec<DialogueTree> = scenarios
                .par_iter()
                .enumerate()
                .map(|(i, s)| {
                    let mut stats = snapshot.clone();
                    grow_tree(s.clone(), policy, critic, env, &tc, step_key.child(i as u64), &mut stats)
                })
                .collect::<Result<_, _>>()
                .map_err(tree_err)?;
            for t in &trees {
                normalizer.absorb(t);
                let targets = traceback(t, gamma).map_err(credit_err)?;
                out.report.merge(&emit_tree_report(t, &targets));
                out.groups.push(TrajectoryGroup::from_tree(t, source, gamma).map_err(credit_err)?);
                add(&mut out.counters, t.counters);
            }
            out.trees = trees;
        }
        Algorithm::PpoHmdp | Algorithm::PpoMdp | Algorithm::Grpo => {
            let critic = if config.algorithm == Algorithm::PpoHmdp { critic } else { None };
            let g = config.group_size;
            let chains: Vec<DialogueTree> = (0..scenarios.len() * g)
                .into_par_iter()
                .map(|j| {
                    let (i, r) = (j / g, j % g);
                    rollout_chain(
                        scenarios[i].clone(),
                        policy,
                        critic,
                        env,
                        &tc,
                        step_key.child(i as u64).tagged(Tag::Group).child(r as u64),
                    )
                })
                .collect::<Result<_, _>>()
                .map_err(tree_err)?;
            for (i, group) in chains.chunks(g).enumerate() {
                let mut trajs = Vec::with_capacity(g);
                for t in group {
                    add(&mut out.counters, t.counters);
                    let tg = TrajectoryGroup::from_tree(t, AdvantageSource::Critic, gamma).map_err(credit_err)?;
                    if config.algorithm == Algorithm::Grpo {
                        trajs.extend(tg.trajectories);
                    } else {
                        out.groups.push(tg);
                    }
                }
                if config.algorithm == Algorithm::Grpo {
                    debug_assert!(trajs.iter().all(|t| t.scenario_id == scenarios[i].id));
                    out.grpo.push(trajs);
                }
            }
            out.trees = chains;
        }
    }
    Ok(out)
}

fn add(a: &mut GrowthCounters, b: GrowthCounters) {
    a.generated_turns += b.generated_turns;
    a.value_calls += b.value_calls;
}

fn update(learner: &mut Learner, algorithm: Algorithm, c: &Collected) -> Result<UpdateReport, OptimError> {
    match algorithm {
        Algorithm::AtpoU1 | Algorithm::AtpoU1u2 => learner.atpo_update(&c.groups),
        Algorithm::Treepo => learner.treepo_update(&c.groups),
        Algorithm::PpoHmdp => learner.ppo_hmdp_update(&c.groups),
        Algorithm::Grpo => learner.grpo_update(&c.grpo),
        Algorithm::PpoMdp => {
            let trajs: Vec<Trajectory> = c.groups.iter().flat_map(|g| g.trajectories.clone()).collect();
            learner.ppo_mdp_update(&trajs)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub initial_eval: EvalSummary,
    pub final_eval: EvalSummary,
    pub pretrain_loss: Option<f64>,
}

pub fn train(config: &RunConfig, on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome, RunError> {
    train_with_cancel(config, on_row, None)
}

/// Greedy accuracy on the held-out scenarios.
pub fn greedy_eval(env: &Env, policy: &Policy, scenarios: &[Arc<Scenario>], seed: u64) -> Result<EvalSummary, RunError> {
    evaluate(&PolicyActor { policy, temperature: 0.0 }, env, scenarios, 1, seed).map_err(|e| RunError::Input(e.to_string()))
}

pub fn train_with_cancel(
    config: &RunConfig,
    mut on_row: impl FnMut(&MetricsRow),
    cancel: Option<&AtomicBool>,
) -> Result<TrainOutcome, RunError> {
    let RunSetup { env, train: scenarios, eval, policy, critic, pretrain_loss } = setup(config)?;
    let out_dir = (!config.out_dir.is_empty()).then(|| PathBuf::from(&config.out_dir));
    let mut metrics_file = match &out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            write_scenarios(&d.join("eval_scenarios.jsonl"), &eval.iter().map(|s| (**s).clone()).collect::<Vec<_>>())?;
            std::fs::write(d.join("config.txt"), config.to_text())?;
            Some(std::io::BufWriter::new(std::fs::File::create(d.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let initial_eval = greedy_eval(&env, &policy, &eval, config.seed)?;
    let mut learner = Learner::new(policy, critic, config.update_config()).map_err(|e| RunError::Config(e.to_string()))?;
    let mut normalizer = Normalizer::default();
    let run_key = StreamKey::new(config.seed);
    let (mut generated, mut value_calls) = (0u64, 0u64);
    let mut variances: VecDeque<f64> = VecDeque::new();
    let mut metrics = Vec::new();
    let mut last_eval = initial_eval.clone();

    for step in 0..config.steps {
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            return Err(RunError::Cancelled);
        }
        let mut brng = run_key.tagged(Tag::Batch).child(step).rng();
        let batch: Vec<Arc<Scenario>> = (0..config.batch_size).map(|_| scenarios.choose(&mut brng).expect("scenarios").clone()).collect();
        let collected = collect(config, &env, &learner.policy, learner.critic.as_ref(), &batch, run_key.child(step), &mut normalizer)?;
        let report = match update(&mut learner, config.algorithm, &collected) {
            Ok(r) => r,
            Err(e @ (OptimError::NonFinite { .. } | OptimError::Model(_))) => {
                let path = out_dir.as_ref().map(|d| d.join(format!("diagnostic-step{step}.json")));
                if let Some(p) = &path {
                    Checkpoint::new(step, env.vocab, &learner.policy, learner.critic.as_ref()).save(p).ok();
                }
                return Err(RunError::Numeric { step, message: e.to_string(), checkpoint: path.map(|p| p.display().to_string()) });
            }
            Err(e) => return Err(RunError::Input(e.to_string())),
        };
        generated += collected.counters.generated_turns;
        value_calls += collected.counters.value_calls;

        let trajs: Vec<&Trajectory> = collected.trajectories().collect();
        let returns: Vec<f64> = trajs.iter().map(|t| t.total_return()).collect();
        let (mean_return, var) = population(&returns);
        if variances.len() == RETURN_VARIANCE_WINDOW {
            variances.pop_front();
        }
        variances.push_back(var);
        let last_step = step + 1 == config.steps;
        let eval_now = last_step || (config.eval_every > 0 && (step + 1) % config.eval_every == 0);
        let eval_summary = if eval_now { Some(greedy_eval(&env, &learner.policy, &eval, config.seed)?) } else { None };
        if let Some(e) = &eval_summary {
            last_eval = e.clone();
        }
        let row = MetricsRow {
            step,
            generated_turns: generated,
            value_calls,
            eval_accuracy: eval_summary.as_ref().map(|e| e.mean),
            eval_std: eval_summary.as_ref().map(|e| e.std),
            train_accuracy: trajs.iter().filter(|t| t.correct()).count() as f64 / trajs.len().max(1) as f64,
            mean_return,
            return_variance: variances.iter().sum::<f64>() / variances.len() as f64,
            policy_loss: report.policy_loss,
            critic_loss: report.critic_loss,
            entropy: report.mean_entropy,
            clip_fraction: report.clip_fraction,
            mean_kl: report.mean_kl,
            effective_question_rate: effective_question_rate(trajs.iter().copied()),
            trajectories: trajs.len(),
            mean_turns: trajs.iter().map(|t| t.len()).sum::<usize>() as f64 / trajs.len().max(1) as f64,
            policy_updated: report.policy_updated,
            branching_by_depth: collected.report.branching_by_depth.clone(),
            returns_by_depth: collected.report.returns_by_depth.clone(),
        };
        if let Some(f) = metrics_file.as_mut() {
            serde_json::to_writer(&mut *f, &row).map_err(std::io::Error::from)?;
            f.write_all(b"\n")?;
        }
        on_row(&row);
        metrics.push(row);
        if let Some(d) = &out_dir {
            if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
                Checkpoint::new(step + 1, env.vocab, &learner.policy, learner.critic.as_ref())
                    .save(&d.join(format!("checkpoint-step{}.json", step + 1)))?;
            }
        }
    }
    if let Some(f) = metrics_file.as_mut() {
        f.flush()?;
    }
    let checkpoint = Checkpoint::new(config.steps, env.vocab, &learner.policy, learner.critic.as_ref());
    if let Some(d) = &out_dir {
        checkpoint.save(&d.join("final.json"))?;
    }
    Ok(TrainOutcome { checkpoint, metrics, initial_eval, final_eval: last_eval, pretrain_loss })
}

fn population(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n)
}

/// Grows one tree with the run's starting models (or a checkpoint's).
pub fn sample_tree(config: &RunConfig, seed: u64, checkpoint: Option<&Checkpoint>) -> Result<(DialogueTree, TreeReport), RunError> {
    let s = setup(config)?;
    let (policy, critic) = match checkpoint {
        Some(ck) => {
            let p = ck.policy().map_err(|e| RunError::Input(e.to_string()))?;
            let c = ck.critic().map_err(|e| RunError::Input(e.to_string()))?;
            (p, c)
        }
        None => (s.policy, s.critic),
    };
    let critic = if config.algorithm == Algorithm::Treepo { None } else { critic };
    let scenario = s.train[(seed % s.train.len() as u64) as usize].clone();
    let tree = if matches!(config.algorithm, Algorithm::Grpo | Algorithm::PpoMdp | Algorithm::PpoHmdp) {
        rollout_chain(scenario, &policy, critic.as_ref(), &s.env, &config.tree_config(), StreamKey::new(seed))
    } else {
        grow_tree(scenario, &policy, critic.as_ref(), &s.env, &config.tree_config(), StreamKey::new(seed), &mut Normalizer::default())
    }
    .map_err(|e| RunError::Input(e.to_string()))?;
    let targets = traceback(&tree, config.gamma).map_err(|e| RunError::Input(e.to_string()))?;
    let report = emit_tree_report(&tree, &targets);
    Ok((tree, report))
}

/// Loads a checkpoint, naming the file in any error.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, RunError> {
    Checkpoint::load(path).map_err(|e| RunError::Input(format!("{}: {e}", path.display())))
}
