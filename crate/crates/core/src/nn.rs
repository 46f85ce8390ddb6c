//! Parameterized building blocks shared by the attention and model code.

use rand::Rng;

use crate::error::Result;
use crate::tensor::rng::{normal, uniform};
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const EMBED_STD: f64 = 0.02;

/// Affine map `x @ w + b` over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight ~ U(±1/√d_in), zero bias.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), group, uniform(rng, &[d_in, d_out], bound));
        let b = store.add(format!("{name}.b"), group, Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    /// `x @ w` without the bias.
    pub fn forward_no_bias<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        g.matmul(x, w)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), group, Tensor::full(&[dim], T::one()));
        let bias = store.add(format!("{name}.bias"), group, Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Learned table initialized from N(0, 0.02²).
pub fn embedding<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    group: ParamGroup,
    rows: usize,
    dim: usize,
    rng: &mut impl Rng,
) -> ParamId {
    store.add(name, group, normal(rng, &[rows, dim], EMBED_STD))
}

/// Two-layer feed-forward block with a GELU between.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), group, hidden, dim, rng),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}
