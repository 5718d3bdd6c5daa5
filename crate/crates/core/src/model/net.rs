//! Pooled-window sequence encoder with a linear head.
//!
//! For a prefix ending at position `t` the encoder input is
//! `[pool(E[tok_0..=t]); E[tok_t]; E[tok_{t-1}]; ...]` (one block per window
//! slot, zeros before the sequence start), followed by one tanh layer and a
//! linear head. Parameters live in one flat vector so optimisers, checkpoints
//! and finite-difference checks can treat every network uniformly.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::StreamKey;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Trailing tokens that get their own input block.
    pub window: usize,
    pub pooling: Pooling,
    pub out_dim: usize,
}

impl NetConfig {
    pub fn input_dim(&self) -> usize {
        (1 + self.window) * self.embed_dim
    }

    pub fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let embedding = take(self.vocab_size * self.embed_dim);
        let w_in = take(self.hidden * self.input_dim());
        let b_in = take(self.hidden);
        let w_out = take(self.out_dim * self.hidden);
        let b_out = take(self.out_dim);
        Layout { embedding, w_in, b_in, w_out, b_out, len: at }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embedding: Range<usize>,
    pub w_in: Range<usize>,
    pub b_in: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub len: usize,
}

impl Layout {
    pub fn blocks(&self) -> [(&'static str, Range<usize>); 5] {
        [
            ("embedding", self.embedding.clone()),
            ("w_in", self.w_in.clone()),
            ("b_in", self.b_in.clone()),
            ("w_out", self.w_out.clone()),
            ("b_out", self.b_out.clone()),
        ]
    }

    /// Name of the block containing flat index `i`.
    pub fn block_of(&self, i: usize) -> &'static str {
        self.blocks().into_iter().find(|(_, r)| r.contains(&i)).map_or("?", |(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetConfig,
    pub params: Vec<f64>,
}

/// Running encoder state over a growing prefix.
#[derive(Debug, Clone)]
pub struct Cursor {
    pooled: Vec<f64>,
    recent: Vec<TokenId>,
    len: usize,
}

impl Cursor {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Activations kept for the backward pass of one sequence.
#[derive(Debug, Clone)]
pub struct SeqCache {
    pub tokens: Vec<TokenId>,
    pub positions: Vec<usize>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    /// `positions.len() * out_dim` head outputs.
    pub outputs: Vec<f64>,
}

impl SeqCache {
    pub fn output(&self, i: usize, out_dim: usize) -> &[f64] {
        &self.outputs[i * out_dim..(i + 1) * out_dim]
    }
}

impl Network {
    /// Glorot-uniform hidden layer, uniform embeddings, head scaled by `head_scale`
    /// (0 gives a uniform policy / zero critic at initialisation).
    pub fn init(config: NetConfig, key: StreamKey, head_scale: f64) -> Self {
        let layout = config.layout();
        let mut rng = key.rng();
        let mut params = vec![0.0; layout.len];
        for p in &mut params[layout.embedding.clone()] {
            *p = rng.random_range(-0.5..0.5);
        }
        let lim = (6.0 / (config.input_dim() + config.hidden) as f64).sqrt();
        for p in &mut params[layout.w_in.clone()] {
            *p = rng.random_range(-lim..lim);
        }
        if head_scale > 0.0 {
            let lim = head_scale * (6.0 / (config.hidden + config.out_dim) as f64).sqrt();
            for p in &mut params[layout.w_out.clone()] {
                *p = rng.random_range(-lim..lim);
            }
        }
        Network { config, params }
    }

    pub fn zeros(config: NetConfig) -> Self {
        Network { params: vec![0.0; config.num_params()], config }
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn cursor(&self) -> Cursor {
        Cursor { pooled: vec![0.0; self.config.embed_dim], recent: Vec::with_capacity(self.config.window), len: 0 }
    }

    pub fn push(&self, cur: &mut Cursor, tok: TokenId) {
        let d = self.config.embed_dim;
        let e = &self.params[tok as usize * d..(tok as usize + 1) * d];
        for (p, x) in cur.pooled.iter_mut().zip(e) {
            *p += x;
        }
        if self.config.window > 0 {
            if cur.recent.len() == self.config.window {
                cur.recent.pop();
            }
            cur.recent.insert(0, tok);
        }
        cur.len += 1;
    }

    fn input(&self, cur: &Cursor) -> Vec<f64> {
        let d = self.config.embed_dim;
        let mut x = vec![0.0; self.config.input_dim()];
        let scale = match self.config.pooling {
            Pooling::Sum => 1.0,
            Pooling::Mean => 1.0 / cur.len.max(1) as f64,
        };
        for (xi, p) in x[..d].iter_mut().zip(&cur.pooled) {
            *xi = p * scale;
        }
        for (slot, &tok) in cur.recent.iter().enumerate() {
            let e = &self.params[tok as usize * d..(tok as usize + 1) * d];
            x[(slot + 1) * d..(slot + 2) * d].copy_from_slice(e);
        }
        x
    }

    fn layer(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let c = &self.config;
        let l = c.layout();
        let w_in = &self.params[l.w_in];
        let b_in = &self.params[l.b_in];
        let n_in = c.input_dim();
        let h: Vec<f64> = (0..c.hidden)
            .map(|j| {
                let row = &w_in[j * n_in..(j + 1) * n_in];
                (b_in[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let w_out = &self.params[l.w_out];
        let b_out = &self.params[l.b_out];
        let out = (0..c.out_dim)
            .map(|o| b_out[o] + w_out[o * c.hidden..(o + 1) * c.hidden].iter().zip(&h).map(|(w, v)| w * v).sum::<f64>())
            .collect();
        (h, out)
    }

    /// Head output for the prefix the cursor has consumed.
    pub fn output(&self, cur: &Cursor) -> Vec<f64> {
        self.layer(&self.input(cur)).1
    }

    /// Runs the encoder over `tokens`, recording head outputs at `positions`
    /// (each an index into `tokens`, sorted ascending).
    pub fn forward(&self, tokens: &[TokenId], positions: &[usize]) -> SeqCache {
        debug_assert!(positions.windows(2).all(|w| w[0] <= w[1]));
        let mut cur = self.cursor();
        let mut inputs = Vec::with_capacity(positions.len());
        let mut hidden = Vec::with_capacity(positions.len());
        let mut outputs = Vec::with_capacity(positions.len() * self.config.out_dim);
        let mut next = positions.iter().peekable();
        for (t, &tok) in tokens.iter().enumerate() {
            self.push(&mut cur, tok);
            while next.peek() == Some(&&t) {
                next.next();
                let x = self.input(&cur);
                let (h, out) = self.layer(&x);
                inputs.push(x);
                hidden.push(h);
                outputs.extend(out);
            }
            if next.peek().is_none() {
                break;
            }
        }
        SeqCache { tokens: tokens.to_vec(), positions: positions.to_vec(), inputs, hidden, outputs }
    }

    /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(outputs).
    pub fn backward(&self, cache: &SeqCache, d_out: &[f64], grads: &mut [f64]) {
        let c = &self.config;
        let l = c.layout();
        let (d, n_in, nh, no) = (c.embed_dim, c.input_dim(), c.hidden, c.out_dim);
        debug_assert_eq!(d_out.len(), cache.positions.len() * no);
        debug_assert_eq!(grads.len(), l.len);
        let w_in = &self.params[l.w_in.clone()];
        let w_out = &self.params[l.w_out.clone()];
        let mut d_pool_at: Vec<(usize, Vec<f64>)> = Vec::with_capacity(cache.positions.len());
        for (i, &pos) in cache.positions.iter().enumerate() {
            let g = &d_out[i * no..(i + 1) * no];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let h = &cache.hidden[i];
            let x = &cache.inputs[i];
            let mut dh = vec![0.0; nh];
            for (o, &go) in g.iter().enumerate() {
                if go == 0.0 {
                    continue;
                }
                grads[l.b_out.start + o] += go;
                let row = o * nh;
                for j in 0..nh {
                    grads[l.w_out.start + row + j] += go * h[j];
                    dh[j] += go * w_out[row + j];
                }
            }
            let mut dx = vec![0.0; n_in];
            for j in 0..nh {
                let dz = dh[j] * (1.0 - h[j] * h[j]);
                if dz == 0.0 {
                    continue;
                }
                grads[l.b_in.start + j] += dz;
                let row = j * n_in;
                for k in 0..n_in {
                    grads[l.w_in.start + row + k] += dz * x[k];
                    dx[k] += dz * w_in[row + k];
                }
            }
            for slot in 0..c.window {
                if pos < slot {
                    break;
                }
                let tok = cache.tokens[pos - slot] as usize;
                let src = &dx[(slot + 1) * d..(slot + 2) * d];
                for (gk, s) in grads[l.embedding.start + tok * d..][..d].iter_mut().zip(src) {
                    *gk += s;
                }
            }
            let scale = match c.pooling {
                Pooling::Sum => 1.0,
                Pooling::Mean => 1.0 / (pos + 1) as f64,
            };
            d_pool_at.push((pos, dx[..d].iter().map(|v| v * scale).collect()));
        }
        // Pooled input at `pos` sums embeddings of tokens 0..=pos, so token s
        // receives the suffix sum of pooled gradients over queries at >= s.
        let Some(max_pos) = d_pool_at.iter().map(|(p, _)| *p).max() else { return };
        let mut acc = vec![0.0; d];
        let mut by_pos = d_pool_at;
        by_pos.sort_by_key(|(p, _)| std::cmp::Reverse(*p));
        let mut it = by_pos.into_iter().peekable();
        for s in (0..=max_pos).rev() {
            while let Some((_, g)) = it.next_if(|(p, _)| *p == s) {
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += v;
                }
            }
            let tok = cache.tokens[s] as usize;
            for (gk, a) in grads[l.embedding.start + tok * d..][..d].iter_mut().zip(&acc) {
                *gk += a;
            }
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(pooling: Pooling, out_dim: usize) -> NetConfig {
        NetConfig { vocab_size: 7, embed_dim: 3, hidden: 4, window: 2, pooling, out_dim }
    }

    #[test]
    fn layout_is_contiguous() {
        let l = cfg(Pooling::Sum, 7).layout();
        assert_eq!(l.embedding, 0..21);
        assert_eq!(l.w_in.start, 21);
        assert_eq!(l.len, 21 + 4 * 9 + 4 + 7 * 4 + 7);
        assert_eq!(l.block_of(22), "w_in");
    }

    #[test]
    fn forward_matches_cursor() {
        let net = Network::init(cfg(Pooling::Mean, 7), StreamKey::new(3), 1.0);
        let toks = [0, 3, 5, 5, 1, 6];
        let cache = net.forward(&toks, &[0, 2, 5]);
        let mut cur = net.cursor();
        for (t, &tok) in toks.iter().enumerate() {
            net.push(&mut cur, tok);
            if let Some(i) = [0, 2, 5].iter().position(|p| *p == t) {
                assert_eq!(cache.output(i, 7), net.output(&cur).as_slice());
            }
        }
    }

    #[test]
    fn log_softmax_is_normalised() {
        let lp = log_softmax(&[1000.0, 0.0, -3.0, 2.5]);
        let s: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(lp.iter().all(|v| v.is_finite()));
    }
}
