//! Run configuration and the training loop.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_dataset, GroundingSample, SceneConfig};
use crate::error::{Error, Result};
use crate::geometry::bbox2seg;
use crate::losses::{total_loss, LayerLoss, LossWeights};
use crate::model::{Model, ModelConfig};
use crate::tensor::checkpoint;
use crate::tensor::optim::{AdamW, AdamWConfig, Gradients};
use crate::tensor::rng::SeedTree;
use crate::tensor::{Graph, ParamGroup, ParamStore};

pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const LOSS_LOG_HEADER: &str = "step,l1,giou,dice,focal,c_focal,total";

/// Evaluation data of run seed `s` is generated from seed `s + EVAL_SEED_OFFSET`.
pub const EVAL_SEED_OFFSET: u64 = 1_000_003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_backbone: f64,
    pub lr_rest: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Learning rates are multiplied by 0.1 from this epoch on.
    pub lr_drop_epoch: usize,
    pub batch_size: usize,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Largest random whole-scene shift in pixels applied to each training
    /// sample per epoch; 0 trains on the scenes as generated.
    pub shift_augment: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 1.5e-4,
            lr_rest: 3e-4,
            weight_decay: 0.05,
            epochs: 42,
            lr_drop_epoch: 36,
            batch_size: 4,
            warmup_steps: 200,
            grad_clip: 1.0,
            shift_augment: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub scene: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_samples: 2000,
            eval_samples: 500,
            scene: SceneConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

fn config_error(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

impl RunConfig {
    /// Parses and validates; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let msg = inner.to_string();
            let key = match msg.strip_prefix("unknown field `").and_then(|r| r.split('`').next()) {
                Some(field) if path == "." => field.to_string(),
                _ => path,
            };
            config_error(&key, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let t = &self.train;
        if t.epochs == 0 {
            return Err(config_error("train.epochs", "must be >= 1"));
        }
        if t.lr_drop_epoch >= t.epochs {
            return Err(config_error(
                "train.lr_drop_epoch",
                format!("{} must be below epochs ({})", t.lr_drop_epoch, t.epochs),
            ));
        }
        if t.batch_size == 0 {
            return Err(config_error("train.batch_size", "must be >= 1"));
        }
        for (key, v) in [
            ("train.lr_backbone", t.lr_backbone),
            ("train.lr_rest", t.lr_rest),
            ("train.weight_decay", t.weight_decay),
            ("train.grad_clip", t.grad_clip),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_error(key, format!("must be a finite nonnegative number, got {v}")));
            }
        }
        if self.data.train_samples == 0 {
            return Err(config_error("data.train_samples", "must be >= 1"));
        }
        if self.data.eval_samples == 0 {
            return Err(config_error("data.eval_samples", "must be >= 1"));
        }
        Ok(())
    }

    pub fn train_data(&self) -> Result<Vec<GroundingSample>> {
        self.dataset(self.seed, self.data.train_samples)
    }

    pub fn eval_data(&self) -> Result<Vec<GroundingSample>> {
        self.dataset(self.seed.wrapping_add(EVAL_SEED_OFFSET), self.data.eval_samples)
    }

    fn dataset(&self, seed: u64, n: usize) -> Result<Vec<GroundingSample>> {
        generate_dataset(seed, n, self.model.image_size, self.model.text_len, &self.data.scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// One row of the loss log: batch means of per-sample summaries.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub loss: LayerLoss,
}

impl LossRow {
    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, l.l1, l.giou, l.dice, l.focal, l.c_focal, l.total
        )
    }
}

/// Learning rate of `group` at a given epoch and global step, or `None`
/// while that group is frozen.
pub fn learning_rate(cfg: &RunConfig, group: ParamGroup, epoch: usize, step: usize) -> Option<f64> {
    let t = &cfg.train;
    let base = match group {
        ParamGroup::Backbone if epoch < cfg.model.freeze_backbone_epochs => return None,
        ParamGroup::Backbone => t.lr_backbone,
        ParamGroup::Rest => t.lr_rest,
    };
    let drop = if epoch >= t.lr_drop_epoch { 0.1 } else { 1.0 };
    let warm = if t.warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / t.warmup_steps as f64).min(1.0)
    };
    Some(base * drop * warm)
}

/// Gradient and loss summary of one sample; the gradient is pre-scaled by
/// `scale`.
pub fn sample_gradient(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &GroundingSample,
    weights: &LossWeights,
    scale: f32,
) -> Result<(Gradients, LayerLoss)> {
    let cfg = model.config();
    let mask = bbox2seg(&sample.gt_box, cfg.vision_grid[0], cfg.vision_grid[1])?;
    let mut g = Graph::<f32>::new();
    let out = model.forward(&mut g, store, &sample.input())?;
    let loss = total_loss(&mut g, &out.layers, &sample.gt_box, &mask, weights)?;
    let summary = loss.summary();
    let mut grads = Gradients::new(store);
    if summary.total.is_finite() {
        g.backward(loss.total)?;
        for (id, grad) in g.param_grads() {
            grads.accumulate(id, grad, scale);
        }
    }
    Ok((grads, summary))
}

pub struct Trained {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub log: Vec<LossRow>,
}

/// Training state advanced one epoch at a time.
pub struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a [GroundingSample],
    model: Model,
    store: ParamStore<f32>,
    opt: AdamW,
    shuffle: SeedTree,
    augment: SeedTree,
    epoch: usize,
    step: usize,
    log: Vec<LossRow>,
}

impl<'a> Trainer<'a> {
    /// Fresh initialization from the run seed.
    pub fn new(cfg: &'a RunConfig, data: &'a [GroundingSample]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Data("cannot train on an empty dataset".into()));
        }
        let (model, store) = Model::init::<f32>(&cfg.model, cfg.seed)?;
        let opt = AdamW::new(
            &store,
            AdamWConfig {
                weight_decay: cfg.train.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Ok(Self {
            cfg,
            data,
            model,
            store,
            opt,
            shuffle: SeedTree::new(cfg.seed).split("shuffle"),
            augment: SeedTree::new(cfg.seed).split("augment"),
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }

    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&LossRow)) -> Result<()> {
        let cfg = self.cfg;
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut self.shuffle.index(epoch as u64).rng());
        for chunk in order.chunks(cfg.train.batch_size) {
            let step = self.step;
            let scale = 1.0 / chunk.len() as f32;
            let (model, store, data) = (&self.model, &self.store, self.data);
            let augment = self.augment.index(epoch as u64);
            let parts = chunk
                .par_iter()
                .map(|&i| {
                    if cfg.train.shift_augment == 0 {
                        return sample_gradient(model, store, &data[i], &cfg.loss, scale);
                    }
                    let mut rng = augment.index(i as u64).rng();
                    let shifted = data[i].shifted(cfg.train.shift_augment, &mut rng)?;
                    sample_gradient(model, store, &shifted, &cfg.loss, scale)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFiniteLoss { step },
                    e => e,
                })?;
            let mut grads = Gradients::new(&self.store);
            let mut mean = LayerLoss::default();
            let k = chunk.len() as f64;
            for (gr, l) in &parts {
                grads.merge(gr);
                mean.l1 += l.l1 / k;
                mean.giou += l.giou / k;
                mean.dice += l.dice / k;
                mean.focal += l.focal / k;
                mean.c_focal += l.c_focal / k;
                mean.total += l.total / k;
            }
            if !mean.total.is_finite() || grads.global_norm().is_nan() {
                return Err(Error::NonFiniteLoss { step });
            }
            if cfg.train.grad_clip > 0.0 {
                grads.clip_global_norm(cfg.train.grad_clip);
            }
            self.opt
                .step(&mut self.store, &grads, |group| learning_rate(cfg, group, epoch, step));
            let row = LossRow { step, loss: mean };
            on_step(&row);
            self.log.push(row);
            self.step += 1;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn finish(self) -> Trained {
        Trained {
            model: self.model,
            store: self.store,
            log: self.log,
        }
    }
}

/// Trains from a fresh initialization for the configured epochs. `on_step`
/// sees every loss row as it is produced.
pub fn train(
    cfg: &RunConfig,
    data: &[GroundingSample],
    mut on_step: impl FnMut(&LossRow),
) -> Result<Trained> {
    let mut t = Trainer::new(cfg, data)?;
    while !t.finished() {
        t.run_epoch(&mut on_step)?;
    }
    Ok(t.finish())
}

pub fn loss_log_csv(log: &[LossRow]) -> String {
    let mut s = format!("{LOSS_LOG_HEADER}\n");
    for row in log {
        let _ = writeln!(s, "{}", row.csv_line());
    }
    s
}

/// Trains on the run's training split and writes the checkpoint, loss log
/// and resolved configuration into `out`.
pub fn run_training(cfg: &RunConfig, out: &Path, on_step: impl FnMut(&LossRow)) -> Result<Trained> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(RESOLVED_CONFIG_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| Error::io(&path, e))?;
    let data = cfg.train_data()?;
    let trained = train(cfg, &data, on_step)?;
    let path = out.join(LOSS_LOG_FILE);
    fs::write(&path, loss_log_csv(&trained.log)).map_err(|e| Error::io(&path, e))?;
    checkpoint::save_store(&trained.store, &out.join(CHECKPOINT_FILE))?;
    Ok(trained)
}

/// Rebuilds the model described by `cfg` and fills it from a checkpoint.
pub fn load_trained(cfg: &ModelConfig, path: &Path) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::init::<f32>(cfg, 0)?;
    checkpoint::load_into(&mut store, checkpoint::read(path)?)?;
    Ok((model, store))
}
