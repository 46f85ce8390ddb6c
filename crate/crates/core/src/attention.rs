//! Multi-head attention: self-attention, cross-attention, and the joint
//! three-stream attention used to align query, text, and vision tokens.
//!
//! All projections act on row-major token matrices `[tokens, dim]`. The
//! attention probabilities are returned next to every output as a
//! `[heads, rows, keys]` node so that diagnostics can read them.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Graph, ParamGroup, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct MhaWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MhaWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut lin = |s: &str| Linear::new(store, &format!("{name}.{s}"), group, dim, dim, rng);
        Ok(Self {
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            out: lin("o"),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || dim % heads != 0 {
        return Err(Error::invalid(
            "attention",
            format!("model dim {dim} not divisible by {heads} heads"),
        ));
    }
    Ok(())
}

/// Output of an attention call.
#[derive(Clone, Copy, Debug)]
pub struct Attention {
    /// `[rows, dim]`, after the output projection.
    pub out: Var,
    /// `[heads, rows, keys]` probabilities.
    pub probs: Var,
}

/// Additive `-inf` mask over keys flagged `true` (padding).
fn padding_bias<T: Scalar>(
    g: &mut Graph<T>,
    heads: usize,
    rows: usize,
    padding: &[bool],
) -> Result<Var> {
    if padding.iter().all(|&p| p) {
        return Err(Error::invalid("attention", "every key is masked"));
    }
    let keys = padding.len();
    let mut data = Vec::with_capacity(heads * rows * keys);
    for _ in 0..heads * rows {
        data.extend(
            padding
                .iter()
                .map(|&p| if p { T::neg_infinity() } else { T::zero() }),
        );
    }
    Ok(g.constant(Tensor::new(&[heads, rows, keys], data)?))
}

/// Scaled dot-product attention split over `heads`, on already projected
/// `q: [n, d]`, `k: [m, d]`, `v: [m, d]`. Returns the merged `[n, d]`
/// context (before any output projection) and the probabilities.
pub fn scaled_dot_product<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    key_padding: Option<&[bool]>,
) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let (n, d, m) = (sq[0], sq[1], sk[0]);
    check_heads(d, heads)?;
    if let Some(p) = key_padding {
        if p.len() != m {
            return Err(Error::shape("attention", &[p.len()], &[m]));
        }
    }
    let dk = d / heads;
    let qh = g.reshape(q, &[n, heads, dk])?;
    let qh = g.permute(qh, &[1, 0, 2])?;
    let kh = g.reshape(k, &[m, heads, dk])?;
    let kh = g.permute(kh, &[1, 2, 0])?;
    let vh = g.reshape(v, &[m, heads, dk])?;
    let vh = g.permute(vh, &[1, 0, 2])?;

    let logits = g.matmul(qh, kh)?;
    let mut logits = g.scale(logits, 1.0 / (dk as f64).sqrt())?;
    if let Some(p) = key_padding.filter(|p| p.iter().any(|&x| x)) {
        let bias = padding_bias(g, heads, n, p)?;
        logits = g.add(logits, bias)?;
    }
    let probs = g.softmax(logits, 2)?;
    let ctx = g.matmul(probs, vh)?;
    let ctx = g.permute(ctx, &[1, 0, 2])?;
    let ctx = g.reshape(ctx, &[n, d])?;
    Ok((ctx, probs))
}

fn with_pos<T: Scalar>(g: &mut Graph<T>, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => g.add(x, p),
        None => Ok(x),
    }
}

/// Self-attention over `x: [n, d]`. `pos` is added to the query and key
/// inputs only.
pub fn mhsa<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &MhaWeights,
    x: Var,
    pos: Option<Var>,
    key_padding: Option<&[bool]>,
) -> Result<Attention> {
    mhca(g, store, w, x, pos, x, pos, key_padding)
}

/// Cross-attention from `q: [n, d]` to `kv: [m, d]`.
#[allow(clippy::too_many_arguments)]
pub fn mhca<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &MhaWeights,
    q: Var,
    q_pos: Option<Var>,
    kv: Var,
    kv_pos: Option<Var>,
    key_padding: Option<&[bool]>,
) -> Result<Attention> {
    for x in [q, kv] {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != w.dim {
            return Err(Error::shape("mha", s, &[w.dim]));
        }
    }
    let qi = with_pos(g, q, q_pos)?;
    let ki = with_pos(g, kv, kv_pos)?;
    let qp = w.q.forward(g, store, qi)?;
    let kp = w.k.forward(g, store, ki)?;
    let vp = w.v.forward(g, store, kv)?;
    let (ctx, probs) = scaled_dot_product(g, qp, kp, vp, w.heads, key_padding)?;
    let out = w.out.forward(g, store, ctx)?;
    Ok(Attention { out, probs })
}

/// Query, key, value, and output projections of one stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

/// Weights of the joint attention over (query, text, vision) streams.
#[derive(Clone, Copy, Debug)]
pub struct TriMhaWeights {
    /// Indexed by [`Stream`].
    pub streams: [StreamProjections; 3],
    pub heads: usize,
    pub dim: usize,
}

/// Stream order along the joint key axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Query = 0,
    Text = 1,
    Vision = 2,
}

impl TriMhaWeights {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        let mut make = |stream: &str| {
            let mut lin = |s: &str| {
                Linear::new(store, &format!("{name}.{stream}.{s}"), group, dim, dim, rng)
            };
            StreamProjections {
                q: lin("q"),
                k: lin("k"),
                v: lin("v"),
                out: lin("o"),
            }
        };
        Ok(Self {
            streams: [make("query"), make("text"), make("vision")],
            heads,
            dim,
        })
    }
}

/// One input stream to [`tri_mha`].
#[derive(Clone, Copy, Debug)]
pub struct StreamInput<'a> {
    pub x: Var,
    /// Added to the query and key inputs, not the values.
    pub pos: Option<Var>,
    /// Keys flagged `true` are excluded from every row.
    pub padding: Option<&'a [bool]>,
}

impl StreamInput<'_> {
    pub fn plain(x: Var) -> Self {
        Self {
            x,
            pos: None,
            padding: None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TriAttention {
    /// Per-stream attention outputs (before the residual merge).
    pub out: [Var; 3],
    /// `[heads, N_o + N_t + N_v, N_o + N_t + N_v]`.
    pub probs: Var,
    /// Start row of each stream on the joint axis.
    pub offsets: [usize; 3],
}

/// Every stream is projected with its own weights, the projections are
/// concatenated in (query, text, vision) order, and one softmax runs over
/// all keys. The joint result is split back and passed through each
/// stream's output projection.
pub fn tri_mha<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    w: &TriMhaWeights,
    inputs: [StreamInput<'_>; 3],
) -> Result<TriAttention> {
    let mut lens = [0usize; 3];
    for (i, s) in inputs.iter().enumerate() {
        let shape = g.shape(s.x);
        if shape.len() != 2 || shape[1] != w.dim {
            return Err(Error::shape("tri_mha", shape, &[w.dim]));
        }
        lens[i] = shape[0];
        if let Some(p) = s.padding {
            if p.len() != lens[i] {
                return Err(Error::shape("tri_mha", &[p.len()], &[lens[i]]));
            }
        }
    }
    let (mut qs, mut ks, mut vs) = (Vec::new(), Vec::new(), Vec::new());
    for (s, proj) in inputs.iter().zip(&w.streams) {
        let qk_in = with_pos(g, s.x, s.pos)?;
        qs.push(proj.q.forward(g, store, qk_in)?);
        ks.push(proj.k.forward(g, store, qk_in)?);
        vs.push(proj.v.forward(g, store, s.x)?);
    }
    let q = g.concat(&qs, 0)?;
    let k = g.concat(&ks, 0)?;
    let v = g.concat(&vs, 0)?;

    let padding: Option<Vec<bool>> = inputs.iter().any(|s| s.padding.is_some()).then(|| {
        inputs
            .iter()
            .zip(lens)
            .flat_map(|(s, n)| match s.padding {
                Some(p) => p.to_vec(),
                None => vec![false; n],
            })
            .collect()
    });
    let (ctx, probs) = scaled_dot_product(g, q, k, v, w.heads, padding.as_deref())?;

    let offsets = [0, lens[0], lens[0] + lens[1]];
    let mut out = [ctx; 3];
    for i in 0..3 {
        let part = g.slice(ctx, 0, offsets[i], lens[i])?;
        out[i] = w.streams[i].out.forward(g, store, part)?;
    }
    Ok(TriAttention {
        out,
        probs,
        offsets,
    })
}

/// Share of attention that `rows` place on the visual keys listed in
/// `region` (indices relative to `visual_offset`), averaged over heads and
/// rows. An empty region or row set gives 0.
pub fn attention_mass_to_region<T: Scalar>(
    probs: &Tensor<T>,
    rows: &[usize],
    visual_offset: usize,
    region: &[usize],
) -> Result<f64> {
    let s = probs.shape();
    if s.len() != 3 {
        return Err(Error::invalid(
            "attention_mass_to_region",
            format!("expected [heads, rows, keys], got {s:?}"),
        ));
    }
    if region.is_empty() || rows.is_empty() {
        return Ok(0.0);
    }
    let (heads, n, m) = (s[0], s[1], s[2]);
    if let Some(&r) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::invalid("attention_mass_to_region", format!("row {r} out of range")));
    }
    if let Some(&c) = region.iter().find(|&&c| visual_offset + c >= m) {
        return Err(Error::invalid("attention_mass_to_region", format!("cell {c} out of range")));
    }
    let data = probs.data();
    let mut total = 0.0;
    for h in 0..heads {
        for &r in rows {
            let row = &data[(h * n + r) * m..(h * n + r + 1) * m];
            total += region
                .iter()
                .map(|&c| row[visual_offset + c].as_f64())
                .sum::<f64>();
        }
    }
    Ok(total / (heads * rows.len()) as f64)
}

/// Writes the head-averaged `[rows, keys]` matrix as CSV (one line per row,
/// one column per key).
pub fn write_attention_csv<T: Scalar>(path: &Path, probs: &Tensor<T>) -> Result<()> {
    let s = probs.shape();
    if s.len() != 3 {
        return Err(Error::invalid("write_attention_csv", format!("rank-3 input expected, got {s:?}")));
    }
    let (heads, n, m) = (s[0], s[1], s[2]);
    let mut out = String::from("query");
    for j in 0..m {
        let _ = write!(out, ",k{j}");
    }
    out.push('\n');
    let d = probs.data();
    for r in 0..n {
        let _ = write!(out, "{r}");
        for j in 0..m {
            let v: f64 = (0..heads).map(|h| d[(h * n + r) * m + j].as_f64()).sum::<f64>() / heads as f64;
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
