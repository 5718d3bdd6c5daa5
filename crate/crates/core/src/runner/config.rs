//! Run configuration: a flat `key = value` text format with every field.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RunError;
use crate::env::{EnvConfig, ScenarioParams};
use crate::model::{ModelDims, Pooling};
use crate::optim::{OptimizerKind, RatioMode, UpdateConfig};
use crate::tree::TreeConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    AtpoU1,
    AtpoU1u2,
    Treepo,
    Grpo,
    PpoMdp,
    PpoHmdp,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] =
        [Algorithm::AtpoU1, Algorithm::AtpoU1u2, Algorithm::Treepo, Algorithm::Grpo, Algorithm::PpoMdp, Algorithm::PpoHmdp];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::AtpoU1 => "atpo_u1",
            Algorithm::AtpoU1u2 => "atpo_u1u2",
            Algorithm::Treepo => "treepo",
            Algorithm::Grpo => "grpo",
            Algorithm::PpoMdp => "ppo_mdp",
            Algorithm::PpoHmdp => "ppo_hmdp",
        }
    }

    pub fn uses_critic(self) -> bool {
        matches!(self, Algorithm::AtpoU1 | Algorithm::AtpoU1u2 | Algorithm::PpoMdp | Algorithm::PpoHmdp)
    }

    pub fn is_atpo(self) -> bool {
        matches!(self, Algorithm::AtpoU1 | Algorithm::AtpoU1u2)
    }

    fn default_tau(self) -> f64 {
        match self {
            Algorithm::AtpoU1 => 0.5,
            Algorithm::AtpoU1u2 => 1.5,
            _ => f64::NEG_INFINITY,
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm `{s}` (expected one of atpo_u1, atpo_u1u2, treepo, grpo, ppo_mdp, ppo_hmdp)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub steps: u64,
    /// Scenarios per update step.
    pub batch_size: usize,
    /// Independent rollouts per scenario for the chain-based algorithms.
    pub group_size: usize,

    pub n: usize,
    pub leaf_budget: usize,
    pub tau: f64,
    pub alpha: f64,
    pub bypass_p: f64,
    pub gamma: f64,
    pub normalize_u1: bool,
    pub temperature: f64,

    pub beta: f64,
    pub clip_eps: f64,
    pub critic_h: usize,
    pub policy_lr: f64,
    pub critic_lr: f64,
    pub critic_warmup_steps: u64,
    pub optimizer: OptimizerKind,
    pub ratio: RatioMode,
    pub ppo_epochs: usize,
    pub gae_lambda: f64,
    /// 0 disables gradient-norm clipping.
    pub max_grad_norm: f64,
    pub visit_downweight_policy: bool,
    pub visit_downweight_value: bool,

    pub turn_limit: u32,
    pub max_macro_len: usize,
    pub num_keys: u32,
    pub num_relevant: u32,
    pub num_options: u32,
    pub train_scenarios: usize,
    pub eval_scenarios: usize,
    /// 0 evaluates only after the last step.
    pub eval_every: u64,

    pub embed_dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub pooling: Pooling,
    pub head_scale: f64,
    pub pretrain_steps: u64,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,

    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Empty: keep everything in memory.
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_algorithm(Algorithm::AtpoU1u2)
    }
}

impl RunConfig {
    /// Defaults for `algorithm` at desk scale.
    pub fn for_algorithm(algorithm: Algorithm) -> Self {
        let mut c = RunConfig {
            algorithm,
            seed: 0,
            steps: 300,
            batch_size: 8,
            group_size: 32,
            n: 4,
            leaf_budget: 16,
            tau: algorithm.default_tau(),
            alpha: 0.3,
            bypass_p: 0.1,
            gamma: 1.0,
            normalize_u1: false,
            temperature: 1.0,
            beta: 0.01,
            clip_eps: 0.2,
            critic_h: 4,
            policy_lr: 3e-3,
            critic_lr: 3e-3,
            critic_warmup_steps: 5,
            optimizer: OptimizerKind::Adam,
            ratio: RatioMode::Reference,
            ppo_epochs: 1,
            gae_lambda: 0.95,
            max_grad_norm: 0.0,
            visit_downweight_policy: true,
            visit_downweight_value: false,
            turn_limit: 8,
            max_macro_len: 4,
            num_keys: 6,
            num_relevant: 3,
            num_options: 4,
            train_scenarios: 512,
            eval_scenarios: 128,
            eval_every: 10,
            embed_dim: 32,
            hidden: 32,
            window: 2,
            pooling: Pooling::Sum,
            head_scale: 1.0,
            pretrain_steps: 200,
            pretrain_batch: 64,
            pretrain_lr: 1e-2,
            checkpoint_every: 0,
            out_dir: String::new(),
        };
        c.normalize_variant();
        c
    }

    /// Variant-implied settings: U1-only ATPO has α = 1; TreePO is an
    /// unpruned binary tree.
    fn normalize_variant(&mut self) {
        match self.algorithm {
            Algorithm::AtpoU1 => self.alpha = 1.0,
            Algorithm::Treepo => {
                self.n = 2;
                self.tau = f64::NEG_INFINITY;
                self.bypass_p = 0.0;
            }
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |m: String| Err(RunError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.algorithm == Algorithm::Grpo && self.group_size < 2 {
            return bad(format!("grpo needs group_size >= 2, got {}", self.group_size));
        }
        if self.group_size == 0 {
            return bad("group_size must be >= 1".into());
        }
        if self.critic_h == 0 {
            return bad("critic_h must be >= 1".into());
        }
        if self.max_macro_len < 2 {
            return bad(format!("max_macro_len must be >= 2, got {}", self.max_macro_len));
        }
        if self.turn_limit == 0 {
            return bad("turn_limit must be >= 1".into());
        }
        if self.train_scenarios == 0 || self.eval_scenarios == 0 {
            return bad("train_scenarios and eval_scenarios must be >= 1".into());
        }
        if self.embed_dim == 0 || self.hidden == 0 {
            return bad("embed_dim and hidden must be >= 1".into());
        }
        if !(self.temperature >= 0.0) {
            return bad("temperature must be >= 0".into());
        }
        if self.max_grad_norm < 0.0 {
            return bad("max_grad_norm must be >= 0".into());
        }
        if self.pretrain_steps > 0 && !(self.pretrain_lr > 0.0) {
            return bad("pretrain_lr must be > 0".into());
        }
        self.tree_config().validate().map_err(|e| RunError::Config(e.to_string()))?;
        self.update_config().validate().map_err(|e| RunError::Config(e.to_string()))?;
        if self.num_relevant == 0 || self.num_relevant > self.num_keys || self.num_options < 2 {
            return bad(format!(
                "infeasible scenario parameters: {} keys, {} relevant, {} options",
                self.num_keys, self.num_relevant, self.num_options
            ));
        }
        Ok(())
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            n: self.n,
            leaf_budget: self.leaf_budget,
            tau: self.tau,
            alpha: self.alpha,
            bypass_p: self.bypass_p,
            gamma: self.gamma,
            normalize_u1: self.normalize_u1,
            temperature: self.temperature,
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        UpdateConfig {
            clip_eps: self.clip_eps,
            beta: self.beta,
            policy_lr: self.policy_lr,
            critic_lr: self.critic_lr,
            visit_downweight_policy: self.visit_downweight_policy,
            visit_downweight_value: self.visit_downweight_value,
            critic_warmup_steps: self.critic_warmup_steps,
            ratio: self.ratio,
            ppo_epochs: self.ppo_epochs,
            gae_lambda: self.gae_lambda,
            gamma: self.gamma,
            optimizer: self.optimizer,
            max_grad_norm: (self.max_grad_norm > 0.0).then_some(self.max_grad_norm),
        }
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig { turn_limit: self.turn_limit, max_macro_len: self.max_macro_len }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims { embed_dim: self.embed_dim, hidden: self.hidden, window: self.window, pooling: self.pooling }
    }

    /// Train and eval scenarios come from one generator call so they share
    /// the relevant-key set.
    pub fn scenario_params(&self) -> ScenarioParams {
        ScenarioParams {
            num_keys: self.num_keys,
            num_relevant: self.num_relevant,
            num_options: self.num_options,
            count: self.train_scenarios + self.eval_scenarios,
        }
    }

    /// Parses the flat text format. Every key is optional; unknown or repeated
    /// keys are errors. Variant-implied settings are applied last.
    pub fn parse(text: &str) -> Result<Self, RunError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(RunError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if entries.iter().any(|(key, _, _)| *key == k) {
                return Err(RunError::Config(format!("line {}: duplicate key `{k}`", i + 1)));
            }
            entries.push((k, v, i + 1));
        }
        let algorithm = match entries.iter().find(|(k, _, _)| *k == "algorithm") {
            Some((_, v, line)) => v.parse().map_err(|e| RunError::Config(format!("line {line}: {e}")))?,
            None => Algorithm::AtpoU1u2,
        };
        let mut c = RunConfig::for_algorithm(algorithm);
        for (k, v, line) in entries {
            c.set(k, v).map_err(|e| RunError::Config(format!("line {line}: {e}")))?;
        }
        c.normalize_variant();
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for `{key}`"))
        }
        match key {
            "algorithm" => {}
            "seed" => self.seed = p(key, v)?,
            "steps" => self.steps = p(key, v)?,
            "batch_size" => self.batch_size = p(key, v)?,
            "group_size" => self.group_size = p(key, v)?,
            "n" => self.n = p(key, v)?,
            "leaf_budget" => self.leaf_budget = p(key, v)?,
            "tau" => self.tau = p(key, v)?,
            "alpha" => self.alpha = p(key, v)?,
            "bypass_p" => self.bypass_p = p(key, v)?,
            "gamma" => self.gamma = p(key, v)?,
            "normalize_u1" => self.normalize_u1 = p(key, v)?,
            "temperature" => self.temperature = p(key, v)?,
            "beta" => self.beta = p(key, v)?,
            "clip_eps" => self.clip_eps = p(key, v)?,
            "critic_h" => self.critic_h = p(key, v)?,
            "policy_lr" => self.policy_lr = p(key, v)?,
            "critic_lr" => self.critic_lr = p(key, v)?,
            "critic_warmup_steps" => self.critic_warmup_steps = p(key, v)?,
            "optimizer" => {
                self.optimizer = match v {
                    "sgd" => OptimizerKind::Sgd,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(format!("invalid optimizer `{v}` (sgd or adam)")),
                }
            }
            "ratio" => {
                self.ratio = match v {
                    "reference" => RatioMode::Reference,
                    "behavior" => RatioMode::Behavior,
                    _ => return Err(format!("invalid ratio `{v}` (reference or behavior)")),
                }
            }
            "ppo_epochs" => self.ppo_epochs = p(key, v)?,
            "gae_lambda" => self.gae_lambda = p(key, v)?,
            "max_grad_norm" => self.max_grad_norm = p(key, v)?,
            "visit_downweight_policy" => self.visit_downweight_policy = p(key, v)?,
            "visit_downweight_value" => self.visit_downweight_value = p(key, v)?,
            "turn_limit" => self.turn_limit = p(key, v)?,
            "max_macro_len" => self.max_macro_len = p(key, v)?,
            "num_keys" => self.num_keys = p(key, v)?,
            "num_relevant" => self.num_relevant = p(key, v)?,
            "num_options" => self.num_options = p(key, v)?,
            "train_scenarios" => self.train_scenarios = p(key, v)?,
            "eval_scenarios" => self.eval_scenarios = p(key, v)?,
            "eval_every" => self.eval_every = p(key, v)?,
            "embed_dim" => self.embed_dim = p(key, v)?,
            "hidden" => self.hidden = p(key, v)?,
            "window" => self.window = p(key, v)?,
            "pooling" => {
                self.pooling = match v {
                    "sum" => Pooling::Sum,
                    "mean" => Pooling::Mean,
                    _ => return Err(format!("invalid pooling `{v}` (sum or mean)")),
                }
            }
            "head_scale" => self.head_scale = p(key, v)?,
            "pretrain_steps" => self.pretrain_steps = p(key, v)?,
            "pretrain_batch" => self.pretrain_batch = p(key, v)?,
            "pretrain_lr" => self.pretrain_lr = p(key, v)?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Every field in the text format; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        w("algorithm", self.algorithm.name().into());
        w("seed", self.seed.to_string());
        w("steps", self.steps.to_string());
        w("batch_size", self.batch_size.to_string());
        w("group_size", self.group_size.to_string());
        w("n", self.n.to_string());
        w("leaf_budget", self.leaf_budget.to_string());
        w("tau", self.tau.to_string());
        w("alpha", self.alpha.to_string());
        w("bypass_p", self.bypass_p.to_string());
        w("gamma", self.gamma.to_string());
        w("normalize_u1", self.normalize_u1.to_string());
        w("temperature", self.temperature.to_string());
        w("beta", self.beta.to_string());
        w("clip_eps", self.clip_eps.to_string());
        w("critic_h", self.critic_h.to_string());
        w("policy_lr", self.policy_lr.to_string());
        w("critic_lr", self.critic_lr.to_string());
        w("critic_warmup_steps", self.critic_warmup_steps.to_string());
        w(
            "optimizer",
            match self.optimizer {
                OptimizerKind::Sgd => "sgd",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        w(
            "ratio",
            match self.ratio {
                RatioMode::Reference => "reference",
                RatioMode::Behavior => "behavior",
            }
            .into(),
        );
        w("ppo_epochs", self.ppo_epochs.to_string());
        w("gae_lambda", self.gae_lambda.to_string());
        w("max_grad_norm", self.max_grad_norm.to_string());
        w("visit_downweight_policy", self.visit_downweight_policy.to_string());
        w("visit_downweight_value", self.visit_downweight_value.to_string());
        w("turn_limit", self.turn_limit.to_string());
        w("max_macro_len", self.max_macro_len.to_string());
        w("num_keys", self.num_keys.to_string());
        w("num_relevant", self.num_relevant.to_string());
        w("num_options", self.num_options.to_string());
        w("train_scenarios", self.train_scenarios.to_string());
        w("eval_scenarios", self.eval_scenarios.to_string());
        w("eval_every", self.eval_every.to_string());
        w("embed_dim", self.embed_dim.to_string());
        w("hidden", self.hidden.to_string());
        w("window", self.window.to_string());
        w(
            "pooling",
            match self.pooling {
                Pooling::Sum => "sum",
                Pooling::Mean => "mean",
            }
            .into(),
        );
        w("head_scale", self.head_scale.to_string());
        w("pretrain_steps", self.pretrain_steps.to_string());
        w("pretrain_batch", self.pretrain_batch.to_string());
        w("pretrain_lr", self.pretrain_lr.to_string());
        w("checkpoint_every", self.checkpoint_every.to_string());
        w("out_dir", self.out_dir.clone());
        s
    }
}
