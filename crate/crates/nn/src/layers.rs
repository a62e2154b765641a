use std::sync::Arc;

use rand::Rng;

use crate::{AttentionMask, Graph, NnError, ParamId, ParamStore, Real, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Fully connected layer, weight `[out, in]`, bias `[1, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            weight: store.add_glorot(format!("{prefix}.weight"), fan_out, fan_in, rng)?,
            bias: store.add_zeros(format!("{prefix}.bias"), 1, fan_out)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize) -> Result<Self, NnError> {
        Ok(Self {
            gamma: store.add_full(format!("{prefix}.gamma"), 1, dim, 1.0)?,
            beta: store.add_zeros(format!("{prefix}.beta"), 1, dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Two-layer feed-forward network with ReLU in between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        Ok(Self {
            inner: Linear::register(store, &format!("{prefix}.inner"), dim, hidden, rng)?,
            outer: Linear::register(store, &format!("{prefix}.outer"), hidden, dim, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Var {
        let h = self.inner.forward(g, x);
        let h = g.relu(h);
        self.outer.forward(g, h)
    }
}

/// Multi-head attention with learned query/key/value/output projections.
#[derive(Clone, Copy, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, NnError> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(NnError::Shape(format!("model dim {dim} not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Linear::register(store, &format!("{prefix}.query"), dim, dim, rng)?,
            key: Linear::register(store, &format!("{prefix}.key"), dim, dim, rng)?,
            value: Linear::register(store, &format!("{prefix}.value"), dim, dim, rng)?,
            output: Linear::register(store, &format!("{prefix}.output"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// `MultiHead(Q, K, V)`; `mask`, when given, is `[|Q|, |K|]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        values: Var,
        mask: Option<Arc<AttentionMask>>,
    ) -> Result<Var, NnError> {
        for (what, v) in [("queries", queries), ("keys", keys), ("values", values)] {
            let c = g.value(v).cols();
            if c != self.dim {
                return Err(NnError::Shape(format!("{what} have width {c}, expected {}", self.dim)));
            }
        }
        if g.value(keys).rows() != g.value(values).rows() {
            return Err(NnError::Shape("keys and values differ in length".into()));
        }
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, values);
        let ctx = g.attention(q, k, v, self.heads, mask)?;
        Ok(self.output.forward(g, ctx))
    }
}

/// Sinusoidal positional encoding of a single position.
pub fn sinusoidal_position(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
