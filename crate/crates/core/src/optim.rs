//! Policy and critic objectives, baseline update rules, parameter updates.
//!
//! Every policy-gradient variant reduces to a list of [`WeightedTurn`]s: a
//! sampled macro-action with one advantage and one weight per sampled token.
//! The clipped surrogate, the KL penalty and their exact gradients are shared.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credit::{Trajectory, TrajectoryGroup};
use crate::env::MacroAction;
use crate::model::{check_finite, entropy_of, Critic, ModelError, Network, Policy, ReferencePolicy, SeqCache};
use crate::vocab::TokenId;

/// Turns per rayon work item; fixed so gradient sums are reproducible.
const CHUNK: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("update config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Credit(#[from] crate::credit::CreditError),
    #[error("group of {0} trajectories; relative advantages need at least 2")]
    GroupTooSmall(usize),
    #[error("non-finite {what} after update (step {step})")]
    NonFinite { what: &'static str, step: u64 },
    #[error("this update needs a critic")]
    MissingCritic,
}

/// Denominator of the probability ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// The frozen reference policy (also the KL anchor).
    Reference,
    /// The policy that sampled the batch.
    Behavior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateConfig {
    pub clip_eps: f64,
    pub beta: f64,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub visit_downweight_policy: bool,
    pub visit_downweight_value: bool,
    pub critic_warmup_steps: u64,
    pub ratio: RatioMode,
    pub ppo_epochs: usize,
    pub gae_lambda: f64,
    pub gamma: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm cap applied before each step.
    pub max_grad_norm: Option<f64>,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        UpdateConfig {
            clip_eps: 0.2,
            beta: 0.01,
            policy_lr: 1e-6,
            critic_lr: 1e-5,
            visit_downweight_policy: true,
            visit_downweight_value: false,
            critic_warmup_steps: 5,
            ratio: RatioMode::Reference,
            ppo_epochs: 1,
            gae_lambda: 0.95,
            gamma: 1.0,
            optimizer: OptimizerKind::Sgd,
            max_grad_norm: None,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: String| Err(OptimError::Config(m));
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps must be > 0, got {}", self.clip_eps));
        }
        if !(self.beta >= 0.0) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.policy_lr > 0.0 && self.critic_lr > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(0.0..=1.0).contains(&self.gamma) {
            return bad("gae_lambda and gamma must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub step: u64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub mean_entropy: f64,
    pub policy_grad_norm: f64,
    pub critic_grad_norm: f64,
    pub policy_updated: bool,
    pub tokens: usize,
}

/// One macro-action contributing `Σ_t w_t · min(ρ_t A_t, clip(ρ_t) A_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTurn {
    pub history: Vec<TokenId>,
    pub action: MacroAction,
    /// Per sampled token.
    pub advantages: Vec<f64>,
    pub weights: Vec<f64>,
}

impl WeightedTurn {
    /// Same advantage and weight for every sampled token of the turn.
    pub fn uniform(history: Vec<TokenId>, action: MacroAction, advantage: f64, weight: f64) -> Self {
        let n = action.sampled_len();
        WeightedTurn { history, action, advantages: vec![advantage; n], weights: vec![weight; n] }
    }

    pub fn len(&self) -> usize {
        self.advantages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.advantages.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PolicyLoss {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub clip_fraction: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub tokens: usize,
}

struct TurnTerms {
    cache: SeqCache,
    d_out: Vec<f64>,
    surrogate: f64,
    kl: f64,
    entropy: f64,
    clipped: usize,
}

/// Negated clipped surrogate plus `β · mean_tokens KL(π‖π_ref)`, with exact
/// gradients w.r.t. the policy parameters.
pub fn policy_loss(
    turns: &[WeightedTurn],
    policy: &Policy,
    reference: &Policy,
    ratio: RatioMode,
    clip_eps: f64,
    beta: f64,
) -> Result<PolicyLoss, OptimError> {
    let n_tok: usize = turns.iter().map(WeightedTurn::len).sum();
    let mut out = PolicyLoss {
        loss: 0.0,
        grads: vec![0.0; policy.net.params.len()],
        clip_fraction: 0.0,
        mean_kl: 0.0,
        mean_entropy: 0.0,
        tokens: n_tok,
    };
    if n_tok == 0 {
        return Ok(out);
    }
    let v = policy.vocab_size();
    let kl_scale = beta / n_tok as f64;
    let terms = |wt: &WeightedTurn| -> TurnTerms {
        let (cache, dists) = policy.turn_forward(&wt.history, &wt.action);
        let ref_dists = reference.turn_forward(&wt.history, &wt.action).1;
        let mut d_out = vec![0.0; dists.len() * v];
        let (mut surrogate, mut kl_sum, mut ent_sum, mut clipped) = (0.0, 0.0, 0.0, 0);
        for (t, lp) in dists.iter().enumerate() {
            let tok = wt.action.tokens[t] as usize;
            let old = match ratio {
                RatioMode::Reference => ref_dists[t][tok],
                RatioMode::Behavior => wt.action.logprobs[t],
            };
            let rho = (lp[tok] - old).exp();
            let (a, w) = (wt.advantages[t], wt.weights[t]);
            let clipped_rho = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            if clipped_rho != rho {
                clipped += 1;
            }
            let (unclipped, bounded) = (rho * a, clipped_rho * a);
            surrogate += w * unclipped.min(bounded);
            let g = &mut d_out[t * v..(t + 1) * v];
            // d(-w·ρA)/d logits = -w·A·ρ·(onehot - p), live only on the unclipped branch
            if unclipped <= bounded {
                let c = -w * a * rho;
                for (gi, l) in g.iter_mut().zip(lp) {
                    *gi -= c * l.exp();
                }
                g[tok] += c;
            }
            let q = &ref_dists[t];
            let kl: f64 = lp.iter().zip(q).map(|(l, r)| l.exp() * (l - r)).sum();
            kl_sum += kl;
            ent_sum += entropy_of(lp);
            if kl_scale != 0.0 {
                for ((gi, l), r) in g.iter_mut().zip(lp).zip(q) {
                    *gi += kl_scale * l.exp() * (l - r - kl);
                }
            }
        }
        TurnTerms { cache, d_out, surrogate, kl: kl_sum, entropy: ent_sum, clipped }
    };
    let chunks: Vec<(Vec<f64>, f64, f64, f64, usize)> = turns
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; policy.net.params.len()];
            let (mut s, mut kl, mut ent, mut clipped) = (0.0, 0.0, 0.0, 0);
            for wt in chunk.iter().filter(|wt| !wt.is_empty()) {
                let t = terms(wt);
                policy.net.backward(&t.cache, &t.d_out, &mut g);
                s += t.surrogate;
                kl += t.kl;
                ent += t.entropy;
                clipped += t.clipped;
            }
            (g, s, kl, ent, clipped)
        })
        .collect();
    let (mut surrogate, mut kl, mut ent, mut clipped) = (0.0, 0.0, 0.0, 0);
    for (g, s, k, e, c) in chunks {
        for (a, b) in out.grads.iter_mut().zip(&g) {
            *a += b;
        }
        surrogate += s;
        kl += k;
        ent += e;
        clipped += c;
    }
    check_finite(&out.grads, &policy.net.layout())?;
    out.mean_kl = kl / n_tok as f64;
    out.mean_entropy = ent / n_tok as f64;
    out.clip_fraction = clipped as f64 / n_tok as f64;
    out.loss = -surrogate + beta * out.mean_kl;
    Ok(out)
}

/// Regression targets for a set of critic output positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTarget {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub targets: Vec<f64>,
    /// Multiplies each position's `½(V − target)²`.
    pub weight: f64,
}

impl ValueTarget {
    /// State value target over the critic's final-h window.
    pub fn state(critic: &Critic, state_tokens: &[TokenId], target: f64, weight: f64) -> Self {
        let tokens = critic.padded(state_tokens);
        let positions = critic.window_positions(tokens.len());
        let targets = vec![target; critic.h];
        ValueTarget { tokens, positions, targets, weight: weight / critic.h as f64 }
    }
}

/// `Σ weight·½(V − target)²` with exact gradients.
pub fn critic_loss(items: &[ValueTarget], critic: &Critic) -> Result<(f64, Vec<f64>), OptimError> {
    let net = &critic.net;
    let chunks: Vec<(Vec<f64>, f64)> = items
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; net.params.len()];
            let mut loss = 0.0;
            for it in chunk {
                let cache = net.forward(&it.tokens, &it.positions);
                let d: Vec<f64> = cache.outputs.iter().zip(&it.targets).map(|(v, t)| it.weight * (v - t)).collect();
                loss += cache.outputs.iter().zip(&it.targets).map(|(v, t)| 0.5 * it.weight * (v - t).powi(2)).sum::<f64>();
                net.backward(&cache, &d, &mut g);
            }
            (g, loss)
        })
        .collect();
    let mut grads = vec![0.0; net.params.len()];
    let mut loss = 0.0;
    for (g, l) in chunks {
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
        loss += l;
    }
    check_finite(&grads, &net.layout())?;
    Ok((loss, grads))
}

/// Tree objective: per tree, mean over trajectories of the per-trajectory mean
/// over turns, each turn scaled by `1/(C·L)`; trees are averaged.
pub fn tree_policy_turns(groups: &[TrajectoryGroup], downweight: bool) -> Result<Vec<WeightedTurn>, OptimError> {
    let t = groups.len() as f64;
    let mut out = Vec::new();
    for g in groups {
        let m = g.trajectories.len() as f64;
        for traj in &g.trajectories {
            let k = traj.len() as f64;
            for turn in &traj.turns {
                let c = if downweight { f64::from(g.visits.get(turn.node)?) } else { 1.0 };
                let l = turn.action.sampled_len() as f64;
                let w = 1.0 / (t * m * k * c * l);
                out.push(WeightedTurn::uniform(turn.state_tokens.clone(), turn.action.clone(), turn.advantage, w));
            }
        }
    }
    Ok(out)
}

/// Critic regression of every visited state onto its traceback target.
pub fn tree_value_targets(groups: &[TrajectoryGroup], critic: &Critic, downweight: bool) -> Result<Vec<ValueTarget>, OptimError> {
    let t = groups.len() as f64;
    let mut out = Vec::new();
    for g in groups {
        let m = g.trajectories.len() as f64;
        for traj in &g.trajectories {
            let k = traj.len() as f64;
            for turn in &traj.turns {
                let c = if downweight { f64::from(g.visits.get(turn.node)?) } else { 1.0 };
                out.push(ValueTarget::state(critic, &turn.state_tokens, turn.target, 1.0 / (t * m * k * c)));
            }
        }
    }
    Ok(out)
}

/// Group-relative advantages `(R − mean)/(std + 1e-8)` with population std.
pub fn group_advantages(returns: &[f64]) -> Result<Vec<f64>, OptimError> {
    if returns.len() < 2 {
        return Err(OptimError::GroupTooSmall(returns.len()));
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(returns.iter().map(|r| (r - mean) / (std + 1e-8)).collect())
}

/// Each group's trajectory advantage broadcast to its tokens; token-mean per
/// trajectory, mean over trajectories and groups.
pub fn grpo_turns(groups: &[Vec<Trajectory>]) -> Result<Vec<WeightedTurn>, OptimError> {
    let t = groups.len() as f64;
    let mut out = Vec::new();
    for g in groups {
        let returns: Vec<f64> = g.iter().map(Trajectory::total_return).collect();
        let adv = group_advantages(&returns)?;
        let n = g.len() as f64;
        for (traj, a) in g.iter().zip(adv) {
            let toks: usize = traj.turns.iter().map(|x| x.action.sampled_len()).sum();
            let w = 1.0 / (t * n * toks.max(1) as f64);
            for turn in &traj.turns {
                out.push(WeightedTurn::uniform(turn.state_tokens.clone(), turn.action.clone(), a, w));
            }
        }
    }
    Ok(out)
}

/// Generalised advantage estimation over one episode; the value after the
/// last step is 0.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        let next = values.get(i + 1).copied().unwrap_or(0.0);
        let delta = rewards[i] + gamma * next - values[i];
        acc = delta + gamma * lambda * acc;
        adv[i] = acc;
    }
    adv
}

pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for i in (0..rewards.len()).rev() {
        acc = rewards[i] + gamma * acc;
        out[i] = acc;
    }
    out
}

/// Token-level view of an episode: the full sequence, the positions that
/// emitted each sampled token, and the reward each token received.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEpisode {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// (turn index, token index within the turn) per sampled token.
    pub owner: Vec<(usize, usize)>,
}

impl TokenEpisode {
    /// A turn's reward lands on its last sampled token.
    pub fn of(traj: &Trajectory) -> Self {
        let last = traj.turns.last().expect("trajectory has at least one turn");
        let mut tokens = last.state_tokens.clone();
        tokens.extend_from_slice(&last.action.tokens);
        let (mut positions, mut rewards, mut owner) = (Vec::new(), Vec::new(), Vec::new());
        for (k, turn) in traj.turns.iter().enumerate() {
            let n = turn.action.sampled_len();
            for t in 0..n {
                positions.push(turn.state_tokens.len() - 1 + t);
                rewards.push(if t + 1 == n { turn.reward } else { 0.0 });
                owner.push((k, t));
            }
        }
        TokenEpisode { tokens, positions, rewards, owner }
    }
}

/// Token-level PPO batch: GAE advantages from a per-token critic and
/// discounted-return value targets.
pub fn ppo_mdp_batch(trajectories: &[Trajectory], critic: &Critic, gamma: f64, lambda: f64) -> (Vec<WeightedTurn>, Vec<ValueTarget>) {
    let t = trajectories.len() as f64;
    let mut turns = Vec::new();
    let mut values = Vec::new();
    for traj in trajectories {
        let ep = TokenEpisode::of(traj);
        if ep.positions.is_empty() {
            continue;
        }
        let v = critic.position_values(&ep.tokens, &ep.positions).outputs;
        let adv = gae(&ep.rewards, &v, gamma, lambda);
        let w = 1.0 / (t * ep.positions.len() as f64);
        let mut per_turn: Vec<WeightedTurn> = traj
            .turns
            .iter()
            .map(|x| WeightedTurn { history: x.state_tokens.clone(), action: x.action.clone(), advantages: vec![], weights: vec![] })
            .collect();
        for (i, (k, _)) in ep.owner.iter().enumerate() {
            per_turn[*k].advantages.push(adv[i]);
            per_turn[*k].weights.push(w);
        }
        turns.extend(per_turn);
        values.push(ValueTarget {
            tokens: ep.tokens.clone(),
            positions: ep.positions.clone(),
            targets: discounted_returns(&ep.rewards, gamma),
            weight: w,
        });
    }
    (turns, values)
}

/// Cross-entropy on demonstration macro-actions.
pub fn imitation_loss(examples: &[(Vec<TokenId>, MacroAction)], policy: &Policy) -> Result<(f64, Vec<f64>), OptimError> {
    let v = policy.vocab_size();
    let n: usize = examples.iter().map(|(_, a)| a.tokens.len()).sum();
    let mut grads = vec![0.0; policy.net.params.len()];
    let mut loss = 0.0;
    for (history, action) in examples {
        let mut full = action.clone();
        full.forced_eot = false;
        let (cache, dists) = policy.turn_forward(history, &full);
        let mut d = vec![0.0; dists.len() * v];
        for (t, lp) in dists.iter().enumerate() {
            let tok = full.tokens[t] as usize;
            loss -= lp[tok] / n as f64;
            let g = &mut d[t * v..(t + 1) * v];
            for (gi, l) in g.iter_mut().zip(lp) {
                *gi = l.exp() / n as f64;
            }
            g[tok] -= 1.0 / n as f64;
        }
        policy.net.backward(&cache, &d, &mut grads);
    }
    check_finite(&grads, &policy.net.layout())?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; len], vec![0.0; len]),
        };
        OptimizerState { kind, m, v, t: 0 }
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub fn grad_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One optimizer step. Parameters are left untouched when the result would
/// be non-finite.
pub fn apply_update(
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    state: &mut OptimizerState,
    max_grad_norm: Option<f64>,
) -> Result<(), &'static str> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err("gradient");
    }
    let scale = match max_grad_norm {
        Some(c) => {
            let n = grad_norm(grads);
            if n > c {
                c / n
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    let next: Vec<f64> = match state.kind {
        OptimizerKind::Sgd => params.iter().zip(grads).map(|(p, g)| p - lr * scale * g).collect(),
        OptimizerKind::Adam => {
            let t = state.t + 1;
            let (c1, c2) = (1.0 - ADAM_B1.powi(t as i32), 1.0 - ADAM_B2.powi(t as i32));
            let mut m = state.m.clone();
            let mut v = state.v.clone();
            let mut out = Vec::with_capacity(params.len());
            for i in 0..params.len() {
                let g = grads[i] * scale;
                m[i] = ADAM_B1 * m[i] + (1.0 - ADAM_B1) * g;
                v[i] = ADAM_B2 * v[i] + (1.0 - ADAM_B2) * g * g;
                out.push(params[i] - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS));
            }
            if out.iter().all(|p| p.is_finite()) {
                state.m = m;
                state.v = v;
                state.t = t;
            }
            out
        }
    };
    if next.iter().any(|p| !p.is_finite()) {
        return Err("parameters");
    }
    params.copy_from_slice(&next);
    Ok(())
}

/// Owns the trainable models and their optimizer state.
#[derive(Debug, Clone)]
pub struct Learner {
    pub policy: Policy,
    pub critic: Option<Critic>,
    pub reference: ReferencePolicy,
    pub config: UpdateConfig,
    pub policy_opt: OptimizerState,
    pub critic_opt: OptimizerState,
    /// Completed update steps.
    pub step: u64,
}

enum ValueJob {
    None,
    Targets(Vec<ValueTarget>),
}

impl Learner {
    pub fn new(policy: Policy, critic: Option<Critic>, config: UpdateConfig) -> Result<Self, OptimError> {
        config.validate()?;
        let reference = ReferencePolicy::snapshot(&policy);
        let policy_opt = OptimizerState::new(config.optimizer, policy.net.params.len());
        let critic_opt = OptimizerState::new(config.optimizer, critic.as_ref().map_or(0, |c| c.net.params.len()));
        Ok(Learner { policy, critic, reference, config, policy_opt, critic_opt, step: 0 })
    }

    /// True while only the critic is trained.
    pub fn in_warmup(&self) -> bool {
        self.critic.is_some() && self.step < self.config.critic_warmup_steps
    }

    fn critic_ref(&self) -> Result<&Critic, OptimError> {
        self.critic.as_ref().ok_or(OptimError::MissingCritic)
    }

    /// Visit-count-normalised tree update with critic advantages.
    pub fn atpo_update(&mut self, groups: &[TrajectoryGroup]) -> Result<UpdateReport, OptimError> {
        let turns = tree_policy_turns(groups, self.config.visit_downweight_policy)?;
        let values = tree_value_targets(groups, self.critic_ref()?, self.config.visit_downweight_value)?;
        self.run(turns, ValueJob::Targets(values))
    }

    /// Turn-level PPO on single-chain rollouts (each group holds one chain).
    pub fn ppo_hmdp_update(&mut self, chains: &[TrajectoryGroup]) -> Result<UpdateReport, OptimError> {
        let turns = tree_policy_turns(chains, false)?;
        let values = tree_value_targets(chains, self.critic_ref()?, false)?;
        self.run(turns, ValueJob::Targets(values))
    }

    /// Critic-free tree update; advantages come from traceback targets.
    pub fn treepo_update(&mut self, groups: &[TrajectoryGroup]) -> Result<UpdateReport, OptimError> {
        let turns = tree_policy_turns(groups, self.config.visit_downweight_policy)?;
        self.run(turns, ValueJob::None)
    }

    pub fn grpo_update(&mut self, groups: &[Vec<Trajectory>]) -> Result<UpdateReport, OptimError> {
        let turns = grpo_turns(groups)?;
        self.run(turns, ValueJob::None)
    }

    pub fn ppo_mdp_update(&mut self, trajectories: &[Trajectory]) -> Result<UpdateReport, OptimError> {
        let (turns, values) = ppo_mdp_batch(trajectories, self.critic_ref()?, self.config.gamma, self.config.gae_lambda);
        self.run(turns, ValueJob::Targets(values))
    }

    fn run(&mut self, turns: Vec<WeightedTurn>, values: ValueJob) -> Result<UpdateReport, OptimError> {
        let cfg = self.config;
        let train_policy = !self.in_warmup();
        let mut report = UpdateReport { step: self.step, policy_updated: train_policy, ..Default::default() };
        let mut clip_sum = 0.0;
        for epoch in 0..cfg.ppo_epochs {
            if train_policy {
                let pl = policy_loss(&turns, &self.policy, self.reference.policy(), cfg.ratio, cfg.clip_eps, cfg.beta)?;
                clip_sum += pl.clip_fraction;
                if epoch == 0 {
                    report.policy_loss = pl.loss;
                    report.mean_kl = pl.mean_kl;
                    report.mean_entropy = pl.mean_entropy;
                    report.policy_grad_norm = grad_norm(&pl.grads);
                    report.tokens = pl.tokens;
                }
                apply_update(&mut self.policy.net.params, &pl.grads, cfg.policy_lr, &mut self.policy_opt, cfg.max_grad_norm)
                    .map_err(|what| OptimError::NonFinite { what, step: self.step })?;
            } else if epoch == 0 {
                let pl = policy_loss(&turns, &self.policy, self.reference.policy(), cfg.ratio, cfg.clip_eps, cfg.beta)?;
                report.policy_loss = pl.loss;
                report.mean_kl = pl.mean_kl;
                report.mean_entropy = pl.mean_entropy;
                report.tokens = pl.tokens;
                report.clip_fraction = pl.clip_fraction;
            }
            if let (ValueJob::Targets(items), Some(critic)) = (&values, self.critic.as_mut()) {
                let (loss, grads) = critic_loss(items, critic)?;
                if epoch == 0 {
                    report.critic_loss = loss;
                    report.critic_grad_norm = grad_norm(&grads);
                }
                apply_update(&mut critic.net.params, &grads, cfg.critic_lr, &mut self.critic_opt, cfg.max_grad_norm)
                    .map_err(|what| OptimError::NonFinite { what, step: self.step })?;
            }
        }
        if train_policy {
            report.clip_fraction = clip_sum / cfg.ppo_epochs as f64;
        }
        if !report.policy_loss.is_finite() || !report.critic_loss.is_finite() {
            return Err(OptimError::NonFinite { what: "loss", step: self.step });
        }
        self.step += 1;
        Ok(report)
    }
}

/// Loss on `net` viewed as a function of a parameter vector (finite differences).
pub fn with_params<T>(net: &Network, params: &[f64], f: impl FnOnce(&Network) -> T) -> T {
    let mut n = net.clone();
    n.params.copy_from_slice(params);
    f(&n)
}
