//! Hidden-facts quiz environment.
//!
//! The assistant sees a short context, the question (the keys it must resolve)
//! and the answer options. Each turn it either asks for one fact key or commits
//! to an option. A scripted user answers strictly from the scenario's facts and
//! refuses everything else.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::credit::Trajectory;
use crate::rng::{StreamKey, Tag};
use crate::vocab::{Symbol, TokenId, Vocabulary, ANSWER, ASK, BOS, CANNOT_ANSWER, EOT};

pub const REWARD_CORRECT: f64 = 3.0;
pub const REWARD_INCORRECT: f64 = 0.0;
pub const REWARD_INVALID: f64 = -1.0;

/// Facts revealed in the opening context never exceed this many.
pub const MAX_CONTEXT_FACTS: usize = 2;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EnvError {
    #[error("scenario {id}: {reason}")]
    InvalidScenario { id: String, reason: String },
    #[error("infeasible scenario parameters: {0}")]
    InfeasibleParams(String),
    #[error("step called on a terminal state (scenario {0})")]
    TerminalStep(String),
    #[error("scenario {id} does not fit the vocabulary: {reason}")]
    Vocabulary { id: String, reason: String },
}

/// Maps the relevant fact values to the index of the correct option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum AnswerRule {
    /// Option index = (sum of relevant fact values) mod `modulus`.
    SumMod { modulus: u32 },
    /// The answer is given directly (ingested free-text cases).
    Fixed { index: u32 },
}

impl AnswerRule {
    /// Index into `options` selected by the rule.
    pub fn apply(&self, relevant_values: impl IntoIterator<Item = u32>) -> usize {
        match *self {
            AnswerRule::SumMod { modulus } => {
                let sum: u64 = relevant_values.into_iter().map(u64::from).sum();
                (sum % u64::from(modulus)) as usize
            }
            AnswerRule::Fixed { index } => index as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    pub context_keys: Vec<u32>,
    pub facts: BTreeMap<u32, u32>,
    pub relevant_keys: Vec<u32>,
    pub options: Vec<u32>,
    pub correct_option: u32,
    pub answer_rule: AnswerRule,
}

impl Scenario {
    /// Builds a scenario, checking every structural invariant.
    pub fn new(
        id: impl Into<String>,
        context_keys: Vec<u32>,
        facts: BTreeMap<u32, u32>,
        relevant_keys: Vec<u32>,
        options: Vec<u32>,
        answer_rule: AnswerRule,
    ) -> Result<Self, EnvError> {
        let id = id.into();
        let bad = |reason: String| EnvError::InvalidScenario { id: id.clone(), reason };
        if facts.is_empty() {
            return Err(bad("facts must be non-empty".into()));
        }
        if options.len() < 2 {
            return Err(bad(format!("need at least 2 options, got {}", options.len())));
        }
        let distinct: BTreeSet<_> = options.iter().collect();
        if distinct.len() != options.len() {
            return Err(bad("options must be distinct".into()));
        }
        if let Some(k) = relevant_keys.iter().find(|k| !facts.contains_key(k)) {
            return Err(bad(format!("relevant key {k} has no fact")));
        }
        if let Some(k) = context_keys.iter().find(|k| !facts.contains_key(k)) {
            return Err(bad(format!("context key {k} has no fact")));
        }
        let index = answer_rule.apply(relevant_keys.iter().map(|k| facts[k]));
        let Some(&correct_option) = options.get(index) else {
            return Err(bad(format!("answer rule selects option index {index} but only {} options exist", options.len())));
        };
        Ok(Scenario { id, context_keys, facts, relevant_keys, options, correct_option, answer_rule })
    }

    /// Re-applies the answer rule; true when it reproduces `correct_option`.
    pub fn is_consistent(&self) -> bool {
        let index = self.answer_rule.apply(self.relevant_keys.iter().filter_map(|k| self.facts.get(k).copied()));
        self.options.get(index) == Some(&self.correct_option) && self.relevant_keys.iter().all(|k| self.facts.contains_key(k))
    }

    pub fn check_vocabulary(&self, vocab: &Vocabulary) -> Result<(), EnvError> {
        let err = |reason: String| EnvError::Vocabulary { id: self.id.clone(), reason };
        if let Some((k, v)) = self.facts.iter().find(|(k, v)| **k >= vocab.num_keys || **v >= vocab.num_values) {
            return Err(err(format!("fact {k} -> {v} outside {} keys / {} values", vocab.num_keys, vocab.num_values)));
        }
        if let Some(o) = self.options.iter().find(|o| **o >= vocab.num_options) {
            return Err(err(format!("option {o} outside {} options", vocab.num_options)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalReason {
    Answered,
    InvalidFormat,
    TurnLimit,
}

/// High-level dialogue state: everything the assistant has seen before turn `turn`.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueState {
    pub scenario: Arc<Scenario>,
    pub turn: u32,
    pub tokens: Vec<TokenId>,
    pub revealed: BTreeSet<u32>,
    pub terminal: Option<TerminalReason>,
}

impl DialogueState {
    pub fn scenario_id(&self) -> &str {
        &self.scenario.id
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "snake_case")]
pub enum ActionKind {
    Ask(u32),
    Answer(u32),
    Invalid,
}

/// One assistant turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAction {
    pub tokens: Vec<TokenId>,
    pub kind: ActionKind,
    /// Log-probability of each sampled token under the sampling policy. A
    /// forced trailing EOT has no entry.
    pub logprobs: Vec<f64>,
    /// True when the EOT was appended because the length cap was hit.
    pub forced_eot: bool,
}

impl MacroAction {
    /// Parses the grammar `ASK key EOT | ANSWER option EOT`; anything else is invalid.
    pub fn parse(vocab: &Vocabulary, tokens: &[TokenId]) -> ActionKind {
        match tokens {
            [ASK, k, EOT] => match vocab.symbol(*k) {
                Some(Symbol::Key(k)) => ActionKind::Ask(k),
                _ => ActionKind::Invalid,
            },
            [ANSWER, o, EOT] => match vocab.symbol(*o) {
                Some(Symbol::Option(o)) => ActionKind::Answer(o),
                _ => ActionKind::Invalid,
            },
            _ => ActionKind::Invalid,
        }
    }

    pub fn from_tokens(vocab: &Vocabulary, tokens: Vec<TokenId>) -> Self {
        let kind = Self::parse(vocab, &tokens);
        MacroAction { tokens, kind, logprobs: Vec::new(), forced_eot: false }
    }

    pub fn ask(vocab: &Vocabulary, key: u32) -> Self {
        Self::from_tokens(vocab, vec![ASK, vocab.key(key), EOT])
    }

    pub fn answer(vocab: &Vocabulary, option: u32) -> Self {
        Self::from_tokens(vocab, vec![ANSWER, vocab.option(option), EOT])
    }

    /// Tokens that were actually sampled (excludes a forced EOT).
    pub fn sampled_len(&self) -> usize {
        self.tokens.len() - usize::from(self.forced_eot)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserReply {
    pub tokens: Vec<TokenId>,
    pub effective: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: DialogueState,
    pub reward: f64,
    pub terminal: bool,
    /// Present for ask turns.
    pub reply: Option<UserReply>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub turn_limit: u32,
    pub max_macro_len: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { turn_limit: 8, max_macro_len: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct Env {
    pub vocab: Vocabulary,
    pub config: EnvConfig,
}

impl Env {
    pub fn new(vocab: Vocabulary, config: EnvConfig) -> Self {
        Env { vocab, config }
    }

    pub fn reset(&self, scenario: Arc<Scenario>) -> Result<DialogueState, EnvError> {
        if !scenario.is_consistent() {
            return Err(EnvError::InvalidScenario {
                id: scenario.id.clone(),
                reason: "answer rule does not reproduce the correct option".into(),
            });
        }
        scenario.check_vocabulary(&self.vocab)?;
        let v = &self.vocab;
        let mut tokens = vec![BOS];
        for k in &scenario.context_keys {
            tokens.push(v.key(*k));
            tokens.push(v.value(scenario.facts[k]));
        }
        tokens.extend(scenario.relevant_keys.iter().map(|k| v.key(*k)));
        tokens.extend(scenario.options.iter().map(|o| v.option(*o)));
        let revealed = scenario.context_keys.iter().copied().collect();
        Ok(DialogueState { scenario, turn: 0, tokens, revealed, terminal: None })
    }

    /// Scripted user: reveals `facts[key]` or refuses. Pure in (scenario, key).
    pub fn simulate_user(&self, state: &DialogueState, key: u32) -> UserReply {
        match state.scenario.facts.get(&key) {
            Some(&value) => UserReply { tokens: vec![self.vocab.value(value)], effective: true },
            None => UserReply { tokens: vec![CANNOT_ANSWER], effective: false },
        }
    }

    pub fn step(&self, state: &DialogueState, action: &MacroAction) -> Result<StepOutcome, EnvError> {
        if state.is_terminal() {
            return Err(EnvError::TerminalStep(state.scenario.id.clone()));
        }
        let mut next = state.clone();
        next.tokens.extend_from_slice(&action.tokens);
        next.turn += 1;
        let (reward, reply) = match action.kind {
            ActionKind::Ask(key) => {
                let reply = self.simulate_user(state, key);
                next.tokens.extend_from_slice(&reply.tokens);
                if reply.effective {
                    next.revealed.insert(key);
                }
                if next.turn >= self.config.turn_limit {
                    next.terminal = Some(TerminalReason::TurnLimit);
                }
                (REWARD_INCORRECT, Some(reply))
            }
            ActionKind::Answer(option) if state.scenario.options.contains(&option) => {
                next.terminal = Some(TerminalReason::Answered);
                let r = if option == state.scenario.correct_option { REWARD_CORRECT } else { REWARD_INCORRECT };
                (r, None)
            }
            ActionKind::Answer(_) | ActionKind::Invalid => {
                next.terminal = Some(TerminalReason::InvalidFormat);
                (REWARD_INVALID, None)
            }
        };
        let terminal = next.is_terminal();
        Ok(StepOutcome { state: next, reward, terminal, reply })
    }
}

/// Parameters of the synthetic scenario generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioParams {
    pub num_keys: u32,
    pub num_relevant: u32,
    pub num_options: u32,
    pub count: usize,
}

impl ScenarioParams {
    /// Each key owns `num_options` value tokens: value id = key * num_options + level.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.num_keys, self.num_keys * self.num_options, self.num_options)
    }
}

/// Generates `count` solvable scenarios. The relevant key set is drawn once per
/// seed and shared by every scenario; the facts, context and answer vary.
pub fn generate_scenarios(seed: u64, params: ScenarioParams) -> Result<Vec<Scenario>, EnvError> {
    let ScenarioParams { num_keys, num_relevant, num_options, count } = params;
    if num_relevant == 0 {
        return Err(EnvError::InfeasibleParams("num_relevant must be at least 1".into()));
    }
    if num_relevant > num_keys {
        return Err(EnvError::InfeasibleParams(format!("num_relevant {num_relevant} > num_keys {num_keys}")));
    }
    if num_options < 2 {
        return Err(EnvError::InfeasibleParams(format!("num_options must be >= 2, got {num_options}")));
    }
    let root = StreamKey::new(seed).tagged(Tag::Scenario);
    let mut rng = root.rng();
    let mut keys: Vec<u32> = (0..num_keys).collect();
    keys.shuffle(&mut rng);
    let mut relevant: Vec<u32> = keys[..num_relevant as usize].to_vec();
    relevant.sort_unstable();

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = root.child(i as u64).rng();
        let mut facts = BTreeMap::new();
        for k in 0..num_keys {
            if relevant.contains(&k) || rng.random_bool(0.5) {
                facts.insert(k, k * num_options + rng.random_range(0..num_options));
            }
        }
        let fact_keys: Vec<u32> = facts.keys().copied().collect();
        let n_ctx = MAX_CONTEXT_FACTS.min(fact_keys.len());
        // At least one relevant fact must stay hidden.
        let context_keys = loop {
            let mut ctx: Vec<u32> = fact_keys.choose_multiple(&mut rng, n_ctx).copied().collect();
            ctx.sort_unstable();
            if !relevant.iter().all(|k| ctx.contains(k)) {
                break ctx;
            }
        };
        let s = Scenario::new(
            format!("syn-{seed}-{i}"),
            context_keys,
            facts,
            relevant.clone(),
            (0..num_options).collect(),
            AnswerRule::SumMod { modulus: num_options },
        )?;
        out.push(s);
    }
    Ok(out)
}

/// Fraction of ask turns whose reply carried a fact; 1 when there are no asks.
pub fn effective_question_rate<'a>(trajectories: impl IntoIterator<Item = &'a Trajectory>) -> f64 {
    let (mut asks, mut effective) = (0usize, 0usize);
    for t in trajectories {
        for turn in &t.turns {
            if let Some(e) = turn.reply_effective {
                asks += 1;
                effective += usize::from(e);
            }
        }
    }
    if asks == 0 {
        1.0
    } else {
        effective as f64 / asks as f64
    }
}
