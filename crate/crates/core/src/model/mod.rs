//! The grounding network: stand-in backbones interleaved with the
//! query/text/vision alignment attention, a multimodal encoder, and a
//! decoder whose every layer predicts a box and per-query masks.

mod config;
pub mod layers;

use crate::attention::{tri_mha, StreamInput, TriMhaWeights};
use crate::error::{Error, Result};
use crate::geometry::BoxCcwh;
use crate::nn::{embedding, LayerNorm, Linear};
use crate::tensor::rng::SeedTree;
use crate::tensor::{Graph, ParamGroup, ParamId, ParamStore, Scalar, Tensor, Var};

pub use config::ModelConfig;
use layers::{BoxHead, DecoderLayer, EncoderLayer, SegHead};

/// Segmentation probabilities at or above this value count toward the
/// inference confidence.
pub const CONFIDENCE_THRESHOLD: f64 = 0.35;

/// One image/text pair as fed to the network.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// `[3, height, width]`, values in `[0, 1]`.
    pub image: &'a Tensor<f32>,
    /// Token ids, length `text_len`.
    pub tokens: &'a [usize],
    /// `true` marks padding tokens.
    pub padding: &'a [bool],
}

#[derive(Clone, Copy, Debug)]
struct AlignStep {
    vision: EncoderLayer,
    text: [EncoderLayer; 2],
    tri: Option<(TriMhaWeights, [LayerNorm; 3])>,
}

/// Predictions of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[4]` center/size box.
    pub boxes: Var,
    /// `[seg_queries, visual_tokens]`, absent when `seg_queries == 0`.
    pub seg_logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// One entry per decoder layer, first to last.
    pub layers: Vec<LayerOutput>,
    /// Alignment attention probabilities per step, `[heads, N, N]` over the
    /// joint (query, text, vision) axis. Empty when alignment is off.
    pub align_probs: Vec<Var>,
    /// Encoder self-attention probabilities per layer.
    pub encoder_probs: Vec<Var>,
    pub queries: Var,
    pub text: Var,
    pub vision: Var,
    pub memory: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub boxes: BoxCcwh,
    pub confidence: f64,
    /// Sigmoid mask probabilities of the last layer, one row per seg query.
    pub seg_probs: Vec<Vec<f64>>,
}

/// Parameter layout of the network. Values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    vision_proj: Linear,
    vision_pos: Tensor<f64>,
    token_embed: ParamId,
    text_pos: ParamId,
    steps: Vec<AlignStep>,
    query_embed: ParamId,
    seg_pos: Option<ParamId>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    box_head: BoxHead,
    seg_head: Option<SegHead>,
}

/// Fixed 2-D sine/cosine table `[rows * cols, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_position_embedding(rows: usize, cols: usize, dim: usize) -> Tensor<f64> {
    let half = dim / 2;
    let enc = |p: f64, out: &mut [f64]| {
        for k in 0..half / 2 {
            let freq = 10_000f64.powf(-(2.0 * k as f64) / half as f64);
            out[2 * k] = (p * freq).sin();
            out[2 * k + 1] = (p * freq).cos();
        }
    };
    let mut data = vec![0.0; rows * cols * dim];
    let two_pi = 2.0 * std::f64::consts::PI;
    for i in 0..rows {
        for j in 0..cols {
            let row = &mut data[(i * cols + j) * dim..(i * cols + j + 1) * dim];
            let (ry, rx) = row.split_at_mut(half);
            enc((i as f64 + 0.5) / rows as f64 * two_pi, ry);
            enc((j as f64 + 0.5) / cols as f64 * two_pi, rx);
        }
    }
    Tensor::from_parts(vec![rows * cols, dim], data)
}

/// Mean of the probabilities at or above [`CONFIDENCE_THRESHOLD`]; 0 when
/// none qualify.
pub fn confidence_score(probs: &[f64]) -> f64 {
    let kept: Vec<f64> = probs
        .iter()
        .copied()
        .filter(|&p| p >= CONFIDENCE_THRESHOLD)
        .collect();
    if kept.is_empty() {
        0.0
    } else {
        kept.iter().sum::<f64>() / kept.len() as f64
    }
}

impl Model {
    /// Creates the layout and freshly initialized parameters.
    pub fn init<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let root = SeedTree::new(seed).split("init");
        let mut rng = root.rng();
        let rng = &mut rng;
        let (c, h, f) = (cfg.model_dim, cfg.heads, cfg.ffn_dim);
        let bb = ParamGroup::Backbone;
        let rest = ParamGroup::Rest;

        let [ph, pw] = cfg.patch();
        let feat = 3 * cfg.pool_subgrid * cfg.pool_subgrid;
        debug_assert_eq!(ph * pw % (cfg.pool_subgrid * cfg.pool_subgrid), 0);
        let vision_proj = Linear::new(&mut store, "vision.proj", bb, feat, c, rng);
        let token_embed = embedding(&mut store, "text.token_embed", bb, cfg.vocab_size, c, rng);
        let text_pos = embedding(&mut store, "text.pos_embed", bb, cfg.text_len, c, rng);

        let mut steps = Vec::with_capacity(cfg.align_layers);
        for i in 0..cfg.align_layers {
            let vision = EncoderLayer::new(&mut store, &format!("vision.layer{i}"), bb, c, h, f, rng)?;
            let text = [
                EncoderLayer::new(&mut store, &format!("text.layer{}", 2 * i), bb, c, h, f, rng)?,
                EncoderLayer::new(&mut store, &format!("text.layer{}", 2 * i + 1), bb, c, h, f, rng)?,
            ];
            let tri = if cfg.triple_alignment {
                let name = format!("align{i}");
                let w = TriMhaWeights::new(&mut store, &format!("{name}.attn"), rest, c, h, rng)?;
                let norms = ["query", "text", "vision"]
                    .map(|s| LayerNorm::new(&mut store, &format!("{name}.norm.{s}"), rest, c));
                Some((w, norms))
            } else {
                None
            };
            steps.push(AlignStep { vision, text, tri });
        }

        let query_embed = embedding(&mut store, "queries.embed", rest, 1 + cfg.seg_queries, c, rng);
        let seg_pos = (cfg.seg_queries > 0)
            .then(|| embedding(&mut store, "queries.seg_pos", rest, cfg.seg_queries, c, rng));
        let encoder = (0..cfg.encoder_layers)
            .map(|i| EncoderLayer::new(&mut store, &format!("encoder.layer{i}"), rest, c, h, f, rng))
            .collect::<Result<_>>()?;
        let decoder = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(&mut store, &format!("decoder.layer{i}"), rest, c, h, f, rng))
            .collect::<Result<_>>()?;
        let box_head = BoxHead::new(&mut store, c, rng);
        let seg_head = (cfg.seg_queries > 0).then(|| SegHead::new(&mut store, c, rng));

        let model = Self {
            cfg: cfg.clone(),
            vision_proj,
            vision_pos: sine_position_embedding(cfg.vision_grid[0], cfg.vision_grid[1], c),
            token_embed,
            text_pos,
            steps,
            query_embed,
            seg_pos,
            encoder,
            decoder,
            box_head,
            seg_head,
        };
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn has_alignment(&self) -> bool {
        self.steps.iter().any(|s| s.tri.is_some())
    }

    pub fn query_embed(&self) -> ParamId {
        self.query_embed
    }

    /// Average-pools every patch onto the sub-grid: `[visual_tokens, 3·s·s]`
    /// with features ordered channel, sub-row, sub-column.
    pub fn pool_patches(&self, image: &Tensor<f32>) -> Result<Tensor<f64>> {
        let cfg = &self.cfg;
        let [ih, iw] = cfg.image_size;
        if image.shape() != [3, ih, iw] {
            return Err(Error::shape("vision_stub", image.shape(), &[3, ih, iw]));
        }
        let [gh, gw] = cfg.vision_grid;
        let [ph, pw] = cfg.patch();
        let s = cfg.pool_subgrid;
        let (sh, sw) = (ph / s, pw / s);
        let feat = 3 * s * s;
        let px = image.data();
        let mut out = vec![0.0; gh * gw * feat];
        let norm = 1.0 / (sh * sw) as f64;
        for ti in 0..gh {
            for tj in 0..gw {
                let token = &mut out[(ti * gw + tj) * feat..(ti * gw + tj + 1) * feat];
                for ch in 0..3 {
                    for a in 0..s {
                        for b in 0..s {
                            let mut acc = 0.0;
                            for y in 0..sh {
                                let row = ti * ph + a * sh + y;
                                let base = (ch * ih + row) * iw + tj * pw + b * sw;
                                acc += px[base..base + sw].iter().map(|&v| f64::from(v)).sum::<f64>();
                            }
                            token[(ch * s + a) * s + b] = acc * norm;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_parts(vec![gh * gw, feat], out))
    }

    /// Patch tokens before the position embedding is added.
    pub fn vision_features<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<f32>,
    ) -> Result<Var> {
        let pooled = g.constant(self.pool_patches(image)?.cast());
        self.vision_proj.forward(g, store, pooled)
    }

    /// `[visual_tokens, model_dim]` patch tokens with the fixed position table added.
    pub fn vision_stub<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: &Tensor<f32>,
    ) -> Result<Var> {
        let x = self.vision_features(g, store, image)?;
        let pos = g.constant(self.vision_pos.cast());
        g.add(x, pos)
    }

    /// `[text_len, model_dim]` token embeddings plus learned positions.
    pub fn text_stub<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
    ) -> Result<Var> {
        if tokens.len() != self.cfg.text_len {
            return Err(Error::shape("text_stub", &[tokens.len()], &[self.cfg.text_len]));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::invalid(
                "text_stub",
                format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_size),
            ));
        }
        let table = g.param(store, self.token_embed);
        let x = g.gather_rows(table, tokens)?;
        let pos = g.param(store, self.text_pos);
        g.add(x, pos)
    }

    /// Query position table: zero for the regression query, the learned
    /// per-query embedding for each seg query.
    fn query_pos<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        let zero = g.constant(Tensor::zeros(&[1, self.cfg.model_dim]));
        match self.seg_pos {
            Some(p) => {
                let p = g.param(store, p);
                g.concat(&[zero, p], 0)
            }
            None => Ok(zero),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        input: &ModelInput<'_>,
    ) -> Result<Forward> {
        let cfg = &self.cfg;
        if input.padding.len() != cfg.text_len {
            return Err(Error::shape("forward", &[input.padding.len()], &[cfg.text_len]));
        }
        let padding = input.padding;
        let mut zv = self.vision_stub(g, store, input.image)?;
        let mut zt = self.text_stub(g, store, input.tokens)?;
        let mut zo = g.param(store, self.query_embed);
        let vision_pos = g.constant(self.vision_pos.cast());
        let text_pos = g.param(store, self.text_pos);

        let mut align_probs = Vec::new();
        for step in &self.steps {
            zv = step.vision.forward(g, store, zv, Some(vision_pos), None)?.0;
            for layer in &step.text {
                zt = layer.forward(g, store, zt, None, Some(padding))?.0;
            }
            if let Some((w, norms)) = &step.tri {
                let inputs = [
                    StreamInput::plain(zo),
                    StreamInput {
                        x: zt,
                        pos: Some(text_pos),
                        padding: Some(padding),
                    },
                    StreamInput {
                        x: zv,
                        pos: Some(vision_pos),
                        padding: None,
                    },
                ];
                let a = tri_mha(g, store, w, inputs)?;
                let mut merged = [zo, zt, zv];
                for i in 0..3 {
                    let r = g.add(merged[i], a.out[i])?;
                    merged[i] = norms[i].forward(g, store, r)?;
                }
                [zo, zt, zv] = merged;
                align_probs.push(a.probs);
            }
        }

        let mut memory = g.concat(&[zt, zv], 0)?;
        let memory_pos = g.concat(&[text_pos, vision_pos], 0)?;
        let memory_padding: Vec<bool> = padding
            .iter()
            .copied()
            .chain(std::iter::repeat(false).take(cfg.visual_tokens()))
            .collect();
        let mut encoder_probs = Vec::new();
        for layer in &self.encoder {
            let (m, p) = layer.forward(g, store, memory, Some(memory_pos), Some(&memory_padding))?;
            memory = m;
            encoder_probs.push(p);
        }

        let query_pos = self.query_pos(g, store)?;
        let visual_memory = g.slice(memory, 0, cfg.text_len, cfg.visual_tokens())?;
        let mut layers = Vec::with_capacity(self.decoder.len());
        let mut q = zo;
        for layer in &self.decoder {
            q = layer.forward(g, store, q, query_pos, memory, memory_pos, &memory_padding)?;
            let reg = g.slice(q, 0, 0, 1)?;
            let boxes = self.box_head.forward(g, store, reg)?;
            let seg_logits = match &self.seg_head {
                Some(head) => {
                    let seg = g.slice(q, 0, 1, cfg.seg_queries)?;
                    Some(head.forward(g, store, seg, visual_memory)?)
                }
                None => None,
            };
            layers.push(LayerOutput { boxes, seg_logits });
        }

        Ok(Forward {
            layers,
            align_probs,
            encoder_probs,
            queries: zo,
            text: zt,
            vision: zv,
            memory,
        })
    }

    /// Box and confidence from the last decoder layer.
    pub fn predict(&self, store: &ParamStore<f32>, input: &ModelInput<'_>) -> Result<Prediction> {
        let mut g = Graph::<f32>::inference();
        let out = self.forward(&mut g, store, input)?;
        Ok(Self::prediction(&g, out.layers.last().expect("decoder_layers >= 1")))
    }

    /// Reads a [`Prediction`] from one layer's values.
    pub fn prediction<T: Scalar>(g: &Graph<T>, layer: &LayerOutput) -> Prediction {
        let b: Vec<f64> = g.value(layer.boxes).data().iter().map(|v| v.as_f64()).collect();
        let seg_probs: Vec<Vec<f64>> = match layer.seg_logits {
            Some(l) => {
                let t = g.value(l);
                let n_v = t.shape()[1];
                t.data()
                    .chunks(n_v)
                    .map(|r| r.iter().map(|&v| crate::tensor::sigmoid(v).as_f64()).collect())
                    .collect()
            }
            None => Vec::new(),
        };
        let confidence = seg_probs.first().map_or(1.0, |p| confidence_score(p));
        Prediction {
            boxes: BoxCcwh::from_slice(&b),
            confidence,
            seg_probs,
        }
    }
}

#[cfg(test)]
mod tests;
