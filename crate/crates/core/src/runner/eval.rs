//! Final-answer accuracy over repeated runs.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{ActionKind, DialogueState, Env, EnvError, MacroAction, Scenario, TerminalReason, REWARD_CORRECT};
use crate::model::Policy;
use crate::rng::{StreamKey, StreamRng, Tag};

/// Anything that can play the assistant role.
pub trait Actor: Sync {
    fn act(&self, env: &Env, state: &DialogueState, rng: &mut StreamRng) -> MacroAction;
}

/// A policy sampled at a fixed temperature (0 = greedy).
pub struct PolicyActor<'a> {
    pub policy: &'a Policy,
    pub temperature: f64,
}

impl Actor for PolicyActor<'_> {
    fn act(&self, env: &Env, state: &DialogueState, rng: &mut StreamRng) -> MacroAction {
        self.policy.sample_macro_action(&env.vocab, state, rng, env.config.max_macro_len, self.temperature)
    }
}

/// Asks for each hidden relevant fact, then answers correctly.
pub struct OracleActor;

impl Actor for OracleActor {
    fn act(&self, env: &Env, state: &DialogueState, _rng: &mut StreamRng) -> MacroAction {
        let s = &state.scenario;
        match s.relevant_keys.iter().find(|k| !state.revealed.contains(k)) {
            Some(&k) => MacroAction::ask(&env.vocab, k),
            None => MacroAction::answer(&env.vocab, s.correct_option),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub total_reward: f64,
    pub correct: bool,
    pub turns: u32,
    pub asks: u32,
    pub effective_asks: u32,
    pub terminal: TerminalReason,
}

pub fn run_episode(actor: &dyn Actor, env: &Env, scenario: Arc<Scenario>, key: StreamKey) -> Result<Episode, EnvError> {
    let mut state = env.reset(scenario)?;
    let mut rng = key.rng();
    let (mut total, mut asks, mut effective) = (0.0, 0, 0);
    let mut last = 0.0;
    while !state.is_terminal() {
        let action = actor.act(env, &state, &mut rng);
        if let ActionKind::Ask(_) = action.kind {
            asks += 1;
        }
        let out = env.step(&state, &action)?;
        if out.reply.as_ref().is_some_and(|r| r.effective) {
            effective += 1;
        }
        total += out.reward;
        last = out.reward;
        state = out.state;
    }
    let terminal = state.terminal.expect("loop ends on a terminal state");
    Ok(Episode {
        total_reward: total,
        correct: terminal == TerminalReason::Answered && last == REWARD_CORRECT,
        turns: state.turn,
        asks,
        effective_asks: effective,
        terminal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub mean: f64,
    /// Sample standard deviation across runs (0 for a single run).
    pub std: f64,
    pub per_run: Vec<f64>,
    pub episodes: usize,
    pub mean_turns: f64,
    pub effective_question_rate: f64,
    pub invalid_rate: f64,
}

/// Accuracy of `actor` on every scenario, repeated `runs` times with
/// independent streams.
pub fn evaluate(actor: &dyn Actor, env: &Env, scenarios: &[Arc<Scenario>], runs: usize, seed: u64) -> Result<EvalSummary, EnvError> {
    assert!(runs >= 1, "runs must be >= 1");
    let root = StreamKey::new(seed).tagged(Tag::Eval);
    let mut per_run = Vec::with_capacity(runs);
    let (mut turns, mut asks, mut effective, mut invalid, mut episodes) = (0u64, 0u64, 0u64, 0usize, 0usize);
    for r in 0..runs {
        let key = root.child(r as u64);
        let eps: Vec<Episode> = scenarios
            .par_iter()
            .enumerate()
            .map(|(i, s)| run_episode(actor, env, s.clone(), key.child(i as u64)))
            .collect::<Result<_, _>>()?;
        let correct = eps.iter().filter(|e| e.correct).count();
        per_run.push(if eps.is_empty() { 0.0 } else { correct as f64 / eps.len() as f64 });
        for e in &eps {
            turns += u64::from(e.turns);
            asks += u64::from(e.asks);
            effective += u64::from(e.effective_asks);
            invalid += usize::from(e.terminal == TerminalReason::InvalidFormat);
        }
        episodes += eps.len();
    }
    let (mean, std) = mean_std(&per_run);
    Ok(EvalSummary {
        mean,
        std,
        per_run,
        episodes,
        mean_turns: if episodes == 0 { 0.0 } else { turns as f64 / episodes as f64 },
        effective_question_rate: if asks == 0 { 1.0 } else { effective as f64 / asks as f64 },
        invalid_rate: if episodes == 0 { 0.0 } else { invalid as f64 / episodes as f64 },
    })
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
