//! Single-head attention and feed-forward blocks on the autodiff tape.

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamId, ParamSet};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Additive value that removes a key from attention.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNormParams {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: set.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: set.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        tape.layer_norm(x, bound.var(self.gain), bound.var(self.bias))
    }
}

/// Post-norm residual attention: `LN(q + softmax(QKᵀ/√d + mask)·V·Wo)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm: LayerNormParams,
    dim: usize,
}

pub struct AttentionOutput {
    pub hidden: Var,
    /// `queries × keys` attention weights.
    pub weights: Var,
}

impl Attention {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            wq: set.add_glorot(format!("{name}.wq"), dim, dim, rng),
            wk: set.add_glorot(format!("{name}.wk"), dim, dim, rng),
            wv: set.add_glorot(format!("{name}.wv"), dim, dim, rng),
            wo: set.add_glorot(format!("{name}.wo"), dim, dim, rng),
            norm: LayerNormParams::new(set, &format!("{name}.norm"), dim),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, queries: Var, keys: Var, mask: Option<&Array2<f64>>) -> AttentionOutput {
        let q = tape.matmul(queries, bound.var(self.wq));
        let k = tape.matmul(keys, bound.var(self.wk));
        let v = tape.matmul(keys, bound.var(self.wv));
        let scores = tape.matmul_t(q, k);
        let mut scores = tape.scale(scores, 1.0 / (self.dim as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add_const(scores, m);
        }
        let weights = tape.softmax_rows(scores);
        let mixed = tape.matmul(weights, v);
        let projected = tape.matmul(mixed, bound.var(self.wo));
        let residual = tape.add(queries, projected);
        AttentionOutput {
            hidden: self.norm.forward(tape, bound, residual),
            weights,
        }
    }
}

/// Post-norm residual two-layer ReLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    norm: LayerNormParams,
}

impl FeedForward {
    pub fn new(set: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w1: set.add_glorot(format!("{name}.w1"), dim, hidden, rng),
            b1: set.add(format!("{name}.b1"), Array2::zeros((1, hidden))),
            w2: set.add_glorot(format!("{name}.w2"), hidden, dim, rng),
            b2: set.add(format!("{name}.b2"), Array2::zeros((1, dim))),
            norm: LayerNormParams::new(set, &format!("{name}.norm"), dim),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, bound.var(self.w1));
        let h = tape.add_row(h, bound.var(self.b1));
        let h = tape.relu(h);
        let h = tape.matmul(h, bound.var(self.w2));
        let h = tape.add_row(h, bound.var(self.b2));
        let residual = tape.add(x, h);
        self.norm.forward(tape, bound, residual)
    }
}

/// Mask hiding keys at or beyond `valid` for every query row.
pub fn key_padding_mask(queries: usize, keys: usize, valid: usize) -> Array2<f64> {
    Array2::from_shape_fn((queries, keys), |(_, k)| if k < valid { 0.0 } else { MASKED })
}

/// Causal mask combined with key padding.
pub fn causal_mask(n: usize, valid: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(q, k)| if k <= q && k < valid { 0.0 } else { MASKED })
}
