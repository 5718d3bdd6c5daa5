//! Token-level policy, critic with final-h averaging, and gradient plumbing.

mod checkpoint;
mod fd;
mod net;

pub use checkpoint::{Checkpoint, CheckpointError, NetDump, TensorDump, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use fd::{finite_difference_check, relative_error, FdReport};
pub use net::{log_softmax, Cursor, Layout, NetConfig, Network, Pooling, SeqCache};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{DialogueState, MacroAction};
use crate::rng::{StreamKey, StreamRng};
use crate::vocab::{TokenId, Vocabulary, BOS, EOT};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("state token sequence is empty")]
    EmptyState,
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(TokenId),
    #[error("non-finite gradient in parameter block `{block}` (index {index})")]
    NonFiniteGradient { block: &'static str, index: usize },
    #[error("gradient length {got} does not match parameter count {expected}")]
    Shape { expected: usize, got: usize },
}

/// Encoder hyper-parameters shared by policy and critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed_dim: usize,
    pub hidden: usize,
    pub window: usize,
    pub pooling: Pooling,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { embed_dim: 32, hidden: 32, window: 2, pooling: Pooling::Sum }
    }
}

impl ModelDims {
    pub fn net_config(&self, vocab_size: usize, out_dim: usize) -> NetConfig {
        NetConfig { vocab_size, embed_dim: self.embed_dim, hidden: self.hidden, window: self.window, pooling: self.pooling, out_dim }
    }
}

/// Autoregressive next-token policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub net: Network,
}

impl Policy {
    pub fn new(vocab: &Vocabulary, dims: ModelDims, key: StreamKey, head_scale: f64) -> Self {
        let size = vocab.size();
        Policy { net: Network::init(dims.net_config(size, size), key, head_scale) }
    }

    /// Zero head: every next-token distribution is uniform.
    pub fn uniform(vocab: &Vocabulary, dims: ModelDims, key: StreamKey) -> Self {
        Self::new(vocab, dims, key, 0.0)
    }

    pub fn vocab_size(&self) -> usize {
        self.net.config.vocab_size
    }

    fn check(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyState);
        }
        match tokens.iter().find(|t| **t as usize >= self.vocab_size()) {
            Some(t) => Err(ModelError::UnknownToken(*t)),
            None => Ok(()),
        }
    }

    /// Log next-token distribution after `state_tokens`.
    pub fn next_logprobs(&self, state_tokens: &[TokenId]) -> Result<Vec<f64>, ModelError> {
        self.check(state_tokens)?;
        let mut cur = self.net.cursor();
        for &t in state_tokens {
            self.net.push(&mut cur, t);
        }
        Ok(log_softmax(&self.net.output(&cur)))
    }

    pub fn logprob(&self, state_tokens: &[TokenId], token: TokenId) -> Result<f64, ModelError> {
        if token as usize >= self.vocab_size() {
            return Err(ModelError::UnknownToken(token));
        }
        Ok(self.next_logprobs(state_tokens)?[token as usize])
    }

    pub fn entropy(&self, state_tokens: &[TokenId]) -> Result<f64, ModelError> {
        Ok(entropy_of(&self.next_logprobs(state_tokens)?))
    }

    /// Samples one macro-action. `temperature == 0` is greedy (ties to lowest id).
    /// Recorded log-probs are under the untempered policy.
    pub fn sample_macro_action(
        &self,
        vocab: &Vocabulary,
        state: &DialogueState,
        rng: &mut StreamRng,
        max_len: usize,
        temperature: f64,
    ) -> MacroAction {
        let mut cur = self.net.cursor();
        for &t in &state.tokens {
            self.net.push(&mut cur, t);
        }
        let mut tokens = Vec::with_capacity(max_len);
        let mut logprobs = Vec::with_capacity(max_len);
        let mut forced_eot = false;
        loop {
            if tokens.len() + 1 >= max_len.max(1) {
                // Length cap: the final slot is always EOT.
                tokens.push(EOT);
                forced_eot = true;
                break;
            }
            let lp = log_softmax(&self.net.output(&cur));
            let tok = draw(&lp, rng, temperature);
            tokens.push(tok);
            logprobs.push(lp[tok as usize]);
            if tok == EOT {
                break;
            }
            self.net.push(&mut cur, tok);
        }
        let kind = MacroAction::parse(vocab, &tokens);
        MacroAction { tokens, kind, logprobs, forced_eot }
    }

    /// Forward pass over `history ++ action` at the positions that predict each
    /// sampled action token. Returns the cache and per-token log distributions.
    pub fn turn_forward(&self, history: &[TokenId], action: &MacroAction) -> (SeqCache, Vec<Vec<f64>>) {
        let mut seq = history.to_vec();
        seq.extend_from_slice(&action.tokens);
        let n = action.sampled_len();
        let positions: Vec<usize> = (0..n).map(|t| history.len() - 1 + t).collect();
        let cache = self.net.forward(&seq, &positions);
        let v = self.vocab_size();
        let dists = (0..n).map(|i| log_softmax(cache.output(i, v))).collect();
        (cache, dists)
    }
}

fn draw(logprobs: &[f64], rng: &mut StreamRng, temperature: f64) -> TokenId {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, v) in logprobs.iter().enumerate() {
            if *v > logprobs[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let scaled: Vec<f64> = logprobs.iter().map(|l| l / temperature).collect();
    let p = log_softmax(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in p.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i as TokenId;
        }
    }
    // rounding: fall back to the last token with non-zero mass
    p.iter().rposition(|lp| lp.is_finite()).unwrap_or(0) as TokenId
}

pub fn entropy_of(logprobs: &[f64]) -> f64 {
    -logprobs.iter().filter(|l| l.is_finite()).map(|l| l.exp() * l).sum::<f64>()
}

/// Frozen snapshot used as the KL anchor (and, by default, the ratio denominator).
#[derive(Debug, Clone)]
pub struct ReferencePolicy(Arc<Policy>);

impl ReferencePolicy {
    pub fn snapshot(policy: &Policy) -> Self {
        ReferencePolicy(Arc::new(policy.clone()))
    }

    pub fn policy(&self) -> &Policy {
        &self.0
    }
}

/// State-value model: encoder + scalar head, averaged over the final `h` positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub net: Network,
    pub h: usize,
}

impl Critic {
    /// Copies the policy's encoder weights; the value head starts at zero.
    pub fn from_policy(policy: &Policy, h: usize) -> Self {
        assert!(h >= 1, "critic window h must be >= 1");
        let cfg = NetConfig { out_dim: 1, ..policy.net.config };
        let mut net = Network::zeros(cfg);
        let (src, dst) = (policy.net.layout(), cfg.layout());
        for (s, d) in [(src.embedding, dst.embedding), (src.w_in, dst.w_in), (src.b_in, dst.b_in)] {
            net.params[d].copy_from_slice(&policy.net.params[s]);
        }
        Critic { net, h }
    }

    /// Left-pads with BOS so the final-h window always exists.
    pub fn padded(&self, state_tokens: &[TokenId]) -> Vec<TokenId> {
        let pad = self.h.saturating_sub(state_tokens.len());
        let mut v = vec![BOS; pad];
        v.extend_from_slice(state_tokens);
        v
    }

    pub fn window_positions(&self, len: usize) -> Vec<usize> {
        (len - self.h..len).collect()
    }

    /// Forward over the final-h window; outputs are the per-position predictions.
    pub fn value_forward(&self, state_tokens: &[TokenId]) -> SeqCache {
        let seq = self.padded(state_tokens);
        let pos = self.window_positions(seq.len());
        self.net.forward(&seq, &pos)
    }

    pub fn value(&self, state_tokens: &[TokenId]) -> f64 {
        let c = self.value_forward(state_tokens);
        c.outputs.iter().sum::<f64>() / self.h as f64
    }

    /// Per-position predictions (token-level critic use).
    pub fn position_values(&self, tokens: &[TokenId], positions: &[usize]) -> SeqCache {
        self.net.forward(tokens, positions)
    }
}

/// Collected (forward cache, upstream gradient) pairs for one network.
#[derive(Debug, Default)]
pub struct LossGraph {
    entries: Vec<(SeqCache, Vec<f64>)>,
}

impl LossGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, cache: SeqCache, d_out: Vec<f64>) {
        self.entries.push((cache, d_out));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn extend(&mut self, other: LossGraph) {
        self.entries.extend(other.entries);
    }

    /// Exact reverse-mode gradient of the assembled loss w.r.t. `net`'s parameters.
    pub fn backward(&self, net: &Network) -> Result<Vec<f64>, ModelError> {
        let mut grads = vec![0.0; net.params.len()];
        for (cache, d_out) in &self.entries {
            net.backward(cache, d_out, &mut grads);
        }
        check_finite(&grads, &net.layout())?;
        Ok(grads)
    }
}

pub fn check_finite(grads: &[f64], layout: &Layout) -> Result<(), ModelError> {
    if grads.len() != layout.len {
        return Err(ModelError::Shape { expected: layout.len, got: grads.len() });
    }
    match grads.iter().position(|g| !g.is_finite()) {
        Some(index) => Err(ModelError::NonFiniteGradient { block: layout.block_of(index), index }),
        None => Ok(()),
    }
}
