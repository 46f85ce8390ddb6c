//! Transformer layers and prediction heads.

use rand::Rng;

use crate::attention::{mhca, mhsa, MhaWeights};
use crate::error::Result;
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::tensor::{Graph, ParamGroup, ParamStore, Scalar, Var};

/// Post-norm self-attention + feed-forward layer.
#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub attn: MhaWeights,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MhaWeights::new(store, &format!("{name}.attn"), group, dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, dim, ffn_dim, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
        })
    }

    /// Returns the updated tokens and the attention probabilities.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        pos: Option<Var>,
        padding: Option<&[bool]>,
    ) -> Result<(Var, Var)> {
        let a = mhsa(g, store, &self.attn, x, pos, padding)?;
        let x = g.add(x, a.out)?;
        let x = self.norm1.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        Ok((self.norm2.forward(g, store, x)?, a.probs))
    }
}

/// Query self-attention, cross-attention to the memory, and feed-forward,
/// each followed by a residual add and layer norm.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_attn: MhaWeights,
    pub norm1: LayerNorm,
    pub cross_attn: MhaWeights,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MhaWeights::new(store, &format!("{name}.self_attn"), group, dim, heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, dim),
            cross_attn: MhaWeights::new(store, &format!("{name}.cross_attn"), group, dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), group, dim, ffn_dim, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), group, dim),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        query_pos: Var,
        memory: Var,
        memory_pos: Var,
        memory_padding: &[bool],
    ) -> Result<Var> {
        let a = mhsa(g, store, &self.self_attn, queries, Some(query_pos), None)?;
        let x = g.add(queries, a.out)?;
        let x = self.norm1.forward(g, store, x)?;
        let c = mhca(
            g,
            store,
            &self.cross_attn,
            x,
            Some(query_pos),
            memory,
            Some(memory_pos),
            Some(memory_padding),
        )?;
        let x = g.add(x, c.out)?;
        let x = self.norm2.forward(g, store, x)?;
        let f = self.ffn.forward(g, store, x)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, store, x)
    }
}

/// Three linear layers with ReLU between and a sigmoid on the 4 outputs.
#[derive(Clone, Copy, Debug)]
pub struct BoxHead {
    pub layers: [Linear; 3],
}

impl BoxHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Rest;
        Self {
            layers: [
                Linear::new(store, "box_head.0", g, dim, dim, rng),
                Linear::new(store, "box_head.1", g, dim, dim, rng),
                Linear::new(store, "box_head.2", g, dim, 4, rng),
            ],
        }
    }

    /// `query: [1, dim]` to a `[4]` center/size box in (0, 1).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, query: Var) -> Result<Var> {
        let mut h = query;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h)?;
            if i < 2 {
                h = g.relu(h)?;
            }
        }
        let h = g.sigmoid(h)?;
        g.reshape(h, &[4])
    }
}

/// Per-cell mask logits from `[seg query ; visual token]` pairs through a
/// `2·dim -> dim -> 1` MLP.
///
/// The first layer's weight is stored as one `[2·dim, dim]` matrix; its
/// upper half multiplies the query and its lower half the visual token.
#[derive(Clone, Copy, Debug)]
pub struct SegHead {
    pub hidden: Linear,
    pub out: Linear,
    pub dim: usize,
}

impl SegHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Self {
        let g = ParamGroup::Rest;
        Self {
            hidden: Linear::new(store, "seg_head.0", g, 2 * dim, dim, rng),
            out: Linear::new(store, "seg_head.1", g, dim, 1, rng),
            dim,
        }
    }

    /// `queries: [n_seg, dim]`, `visual: [n_v, dim]` to `[n_seg, n_v]`.
    ///
    /// Evaluates `W·[q; v] = W_q·q + W_v·v` so the query half is computed
    /// once per query rather than once per cell.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        visual: Var,
    ) -> Result<Var> {
        let (n_seg, n_v) = (g.shape(queries)[0], g.shape(visual)[0]);
        let w = g.param(store, self.hidden.w);
        let wq = g.slice(w, 0, 0, self.dim)?;
        let wv = g.slice(w, 0, self.dim, self.dim)?;
        let qa = g.matmul(queries, wq)?;
        let va = g.matmul(visual, wv)?;
        let q_idx: Vec<usize> = (0..n_seg).flat_map(|s| std::iter::repeat(s).take(n_v)).collect();
        let v_idx: Vec<usize> = (0..n_seg).flat_map(|_| 0..n_v).collect();
        let qa = g.gather_rows(qa, &q_idx)?;
        let va = g.gather_rows(va, &v_idx)?;
        let h = g.add(qa, va)?;
        let b = g.param(store, self.hidden.b);
        let h = g.add_bias(h, b)?;
        let h = g.relu(h)?;
        let logits = self.out.forward(g, store, h)?;
        g.reshape(logits, &[n_seg, n_v])
    }

    /// Reference path that materializes the `[n_seg · n_v, 2·dim]` pairs.
    pub fn forward_concat<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        queries: Var,
        visual: Var,
    ) -> Result<Var> {
        let (n_seg, n_v) = (g.shape(queries)[0], g.shape(visual)[0]);
        let q_idx: Vec<usize> = (0..n_seg).flat_map(|s| std::iter::repeat(s).take(n_v)).collect();
        let v_idx: Vec<usize> = (0..n_seg).flat_map(|_| 0..n_v).collect();
        let q = g.gather_rows(queries, &q_idx)?;
        let v = g.gather_rows(visual, &v_idx)?;
        let pairs = g.concat(&[q, v], 1)?;
        let h = self.hidden.forward(g, store, pairs)?;
        let h = g.relu(h)?;
        let logits = self.out.forward(g, store, h)?;
        g.reshape(logits, &[n_seg, n_v])
    }
}
