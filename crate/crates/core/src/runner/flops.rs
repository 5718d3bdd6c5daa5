//! Analytic prefill/decode cost of sampling `N` continuations of one prompt.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeProfile {
    /// Parameters in the linear projections.
    pub phi: u64,
    /// Parameters in attention.
    pub theta: u64,
    /// Prompt length in tokens.
    pub x: u64,
    /// Generated length in tokens.
    pub y: u64,
    pub n: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub prefill: f64,
    pub decode: f64,
    pub independent_total: f64,
    pub tree_total: f64,
    pub savings: f64,
}

impl ComputeProfile {
    /// `2φx + 4θx²`
    pub fn prefill_cost(&self) -> f64 {
        let (phi, theta, x) = (self.phi as f64, self.theta as f64, self.x as f64);
        2.0 * phi * x + 4.0 * theta * x * x
    }

    /// `2φy + 2θ(2x + y + 1)`
    pub fn decode_cost(&self) -> f64 {
        let (phi, theta, x, y) = (self.phi as f64, self.theta as f64, self.x as f64, self.y as f64);
        2.0 * phi * y + 2.0 * theta * (2.0 * x + y + 1.0)
    }

    /// Every sample re-encodes the prompt.
    pub fn independent_total(&self) -> f64 {
        self.n as f64 * (self.prefill_cost() + self.decode_cost())
    }

    /// The prompt is encoded once and shared.
    pub fn tree_total(&self) -> f64 {
        self.prefill_cost() + self.n as f64 * self.decode_cost()
    }

    /// `(N − 1)(2φx + 4θx²)`
    pub fn savings(&self) -> f64 {
        self.n.saturating_sub(1) as f64 * self.prefill_cost()
    }

    pub fn report(&self) -> FlopsReport {
        FlopsReport {
            prefill: self.prefill_cost(),
            decode: self.decode_cost(),
            independent_total: self.independent_total(),
            tree_total: self.tree_total(),
            savings: self.savings(),
        }
    }
}
