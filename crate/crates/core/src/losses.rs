//! Box regression and box-derived mask supervision, the confidence factor,
//! and the deeply supervised composite objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou_loss, BoxCcwh, SegTarget};
use crate::model::LayerOutput;
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub use crate::geometry::bbox2seg;

pub const PROB_CLAMP: f64 = 1e-6;
pub const DICE_SMOOTHING: f64 = 1.0;
/// Lower bound of the confidence factor.
pub const CONF_FLOOR: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub lambda_dice: f64,
    pub lambda_focal: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub conf_gamma: f64,
    /// When false the confidence factor is pinned to 1.
    pub use_conf_factor: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            lambda_dice: 1.0,
            lambda_focal: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            conf_gamma: 2.0,
            use_conf_factor: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_l1", self.lambda_l1),
            ("lambda_giou", self.lambda_giou),
            ("lambda_dice", self.lambda_dice),
            ("lambda_focal", self.lambda_focal),
            ("focal_gamma", self.focal_gamma),
            ("conf_gamma", self.conf_gamma),
        ];
        for (key, v) in named {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config {
                    key: format!("loss.{key}"),
                    reason: format!("must be a finite nonnegative number, got {v}"),
                });
            }
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::Config {
                key: "loss.focal_alpha".into(),
                reason: format!("must lie in [0, 1], got {}", self.focal_alpha),
            });
        }
        Ok(())
    }
}

/// Component values of one decoder layer's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LayerLoss {
    pub l1: f64,
    pub giou: f64,
    pub dice: f64,
    pub focal: f64,
    pub c_focal: f64,
    pub total: f64,
}

impl LayerLoss {
    /// Assembles the weighted total from component values. The confidence
    /// factor scales the box and dice terms only.
    pub fn compose(l1: f64, giou: f64, dice: f64, focal: f64, c_focal: f64, w: &LossWeights) -> Self {
        let total = w.lambda_l1 * c_focal * l1
            + w.lambda_giou * c_focal * giou
            + w.lambda_dice * c_focal * dice
            + w.lambda_focal * focal;
        Self {
            l1,
            giou,
            dice,
            focal,
            c_focal,
            total,
        }
    }
}

/// Mean absolute coordinate difference.
pub fn l1_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &BoxCcwh) -> Result<Var> {
    if g.shape(pred) != [4] {
        return Err(Error::shape("l1_loss", g.shape(pred), &[4]));
    }
    let gt = g.constant(Tensor::from_f64(&[4], &gt.to_array())?);
    let d = g.sub(pred, gt)?;
    let d = g.abs(d)?;
    g.mean(d)
}

fn check_cells<T: Scalar>(op: &'static str, g: &Graph<T>, x: Var, target: &SegTarget) -> Result<()> {
    if g.shape(x) != [target.cells()] {
        return Err(Error::shape(op, g.shape(x), &[target.cells()]));
    }
    Ok(())
}

/// Sigmoid focal loss averaged over cells.
pub fn focal_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &SegTarget,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    check_cells("focal_loss", g, logits, target)?;
    let n = target.cells();
    let t = target.as_f64();
    let p = g.sigmoid(logits)?;
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    // p_t = (1 - t) + p (2t - 1)
    let sign = g.constant(Tensor::from_f64(&[n], &t.iter().map(|&t| 2.0 * t - 1.0).collect::<Vec<_>>())?);
    let offset = g.constant(Tensor::from_f64(&[n], &t.iter().map(|&t| 1.0 - t).collect::<Vec<_>>())?);
    let neg_alpha = g.constant(Tensor::from_f64(
        &[n],
        &t.iter().map(|&t| -(alpha * t + (1.0 - alpha) * (1.0 - t))).collect::<Vec<_>>(),
    )?);
    let pt = g.mul(p, sign)?;
    let pt = g.add(pt, offset)?;
    let log_pt = g.log(pt)?;
    let miss = g.neg(pt)?;
    let miss = g.add_scalar(miss, 1.0)?;
    let modulator = g.powf(miss, gamma)?;
    let cell = g.mul(modulator, log_pt)?;
    let cell = g.mul(cell, neg_alpha)?;
    g.mean(cell)
}

/// Smoothed soft dice loss on probabilities.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, target: &SegTarget) -> Result<Var> {
    check_cells("dice_loss", g, probs, target)?;
    let t = g.constant(Tensor::from_f64(&[target.cells()], &target.as_f64())?);
    let inter = g.mul(probs, t)?;
    let inter = g.sum(inter)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_scalar(num, DICE_SMOOTHING)?;
    let den = g.sum(probs)?;
    let den = g.add_scalar(den, target.foreground() as f64 + DICE_SMOOTHING)?;
    let ratio = g.div(num, den)?;
    let loss = g.neg(ratio)?;
    g.add_scalar(loss, 1.0)
}

/// Mean over queries of the mean probability on foreground cells, mapped
/// to `clamp((1 - c)^gamma, 0.05, 1)`. `probs` is `[queries, cells]`
/// row-major.
pub fn confidence_factor(probs: &[f64], queries: usize, target: &SegTarget, conf_gamma: f64) -> Result<f64> {
    let cells = target.cells();
    if queries == 0 || probs.len() != queries * cells {
        return Err(Error::invalid(
            "confidence_factor",
            format!("{} probabilities for {queries} queries of {cells} cells", probs.len()),
        ));
    }
    let fg = target.foreground_indices();
    if fg.is_empty() {
        return Err(Error::invalid("confidence_factor", "target has no foreground cell"));
    }
    let c = probs
        .chunks(cells)
        .map(|row| fg.iter().map(|&i| row[i]).sum::<f64>() / fg.len() as f64)
        .sum::<f64>()
        / queries as f64;
    Ok((1.0 - c).powf(conf_gamma).clamp(CONF_FLOOR, 1.0))
}

/// Differentiable total of one layer plus its component values.
#[derive(Clone, Copy, Debug)]
pub struct LayerTerms {
    pub total: Var,
    pub values: LayerLoss,
}

pub fn layer_loss<T: Scalar>(
    g: &mut Graph<T>,
    out: &LayerOutput,
    gt_box: &BoxCcwh,
    gt_mask: &SegTarget,
    w: &LossWeights,
) -> Result<LayerTerms> {
    let l1 = l1_loss(g, out.boxes, gt_box)?;
    let giou = giou_loss(g, out.boxes, gt_box)?;
    let read = |g: &Graph<T>, v: Var| g.value(v).item().as_f64();

    let seg = match out.seg_logits {
        Some(logits) => {
            let shape = g.shape(logits).to_vec();
            if shape.len() != 2 || shape[1] != gt_mask.cells() {
                return Err(Error::shape("layer_loss", &shape, &[shape[0], gt_mask.cells()]));
            }
            let queries = shape[0];
            let mut dice_terms = Vec::with_capacity(queries);
            let mut focal_terms = Vec::with_capacity(queries);
            let mut probs_seen = Vec::with_capacity(queries * gt_mask.cells());
            for q in 0..queries {
                let row = g.slice(logits, 0, q, 1)?;
                let row = g.reshape(row, &[gt_mask.cells()])?;
                focal_terms.push(focal_loss(g, row, gt_mask, w.focal_alpha, w.focal_gamma)?);
                let p = g.sigmoid(row)?;
                probs_seen.extend(g.value(p).data().iter().map(|v| v.as_f64()));
                dice_terms.push(dice_loss(g, p, gt_mask)?);
            }
            let dice = mean_of(g, &dice_terms)?;
            let focal = mean_of(g, &focal_terms)?;
            let c_focal = if w.use_conf_factor {
                confidence_factor(&probs_seen, queries, gt_mask, w.conf_gamma)?
            } else {
                1.0
            };
            Some((dice, focal, c_focal))
        }
        None => None,
    };

    let c_focal = seg.map_or(1.0, |s| s.2);
    let mut total = g.scale(l1, w.lambda_l1 * c_focal)?;
    let box_term = g.scale(giou, w.lambda_giou * c_focal)?;
    total = g.add(total, box_term)?;
    let (dice_v, focal_v) = match seg {
        Some((dice, focal, _)) => {
            let d = g.scale(dice, w.lambda_dice * c_focal)?;
            total = g.add(total, d)?;
            let f = g.scale(focal, w.lambda_focal)?;
            total = g.add(total, f)?;
            (read(g, dice), read(g, focal))
        }
        None => (0.0, 0.0),
    };
    let mut values = LayerLoss::compose(read(g, l1), read(g, giou), dice_v, focal_v, c_focal, w);
    values.total = read(g, total);
    Ok(LayerTerms { total, values })
}

fn mean_of<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// Summed layer totals and per-layer component values.
#[derive(Clone, Debug)]
pub struct SampleLoss {
    pub total: Var,
    pub layers: Vec<LayerLoss>,
}

impl SampleLoss {
    /// Components summed over layers; `c_focal` is the layer average.
    pub fn summary(&self) -> LayerLoss {
        let mut s = LayerLoss::default();
        for l in &self.layers {
            s.l1 += l.l1;
            s.giou += l.giou;
            s.dice += l.dice;
            s.focal += l.focal;
            s.c_focal += l.c_focal;
            s.total += l.total;
        }
        s.c_focal /= self.layers.len().max(1) as f64;
        s
    }
}

/// Deep supervision: the same objective applied at every decoder layer and
/// summed.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[LayerOutput],
    gt_box: &BoxCcwh,
    gt_mask: &SegTarget,
    w: &LossWeights,
) -> Result<SampleLoss> {
    if outs.is_empty() {
        return Err(Error::invalid("total_loss", "need at least one decoder layer"));
    }
    let mut layers = Vec::with_capacity(outs.len());
    let mut total = None;
    for out in outs {
        let t = layer_loss(g, out, gt_box, gt_mask, w)?;
        layers.push(t.values);
        total = Some(match total {
            None => t.total,
            Some(acc) => g.add(acc, t.total)?,
        });
    }
    Ok(SampleLoss {
        total: total.expect("nonempty"),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn target(mask: &[u8], height: usize, width: usize) -> SegTarget {
        SegTarget {
            height,
            width,
            mask: mask.to_vec(),
        }
    }

    fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var>) -> f64 {
        let mut g = Graph::<f64>::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn input(g: &mut Graph<f64>, v: &[f64]) -> Var {
        g.input(Tensor::new(&[v.len()], v.to_vec()).unwrap())
    }

    #[test]
    fn l1_examples() {
        let gt = BoxCcwh::new(0.5, 0.5, 0.3, 0.3);
        let v = eval(|g| {
            let p = input(g, &[0.5, 0.5, 0.5, 0.5]);
            l1_loss(g, p, &gt)
        });
        assert_abs_diff_eq!(v, 0.1, epsilon = 1e-12);
        let v = eval(|g| {
            let p = input(g, &[0.5, 0.5, 0.3, 0.3]);
            l1_loss(g, p, &gt)
        });
        assert_eq!(v, 0.0);

        let mut g = Graph::<f64>::new();
        let p = input(&mut g, &[0.6, 0.4, 0.5, 0.1]);
        let l = l1_loss(&mut g, p, &gt).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data(), &[0.25, -0.25, 0.25, -0.25]);
    }

    #[test]
    fn focal_single_cell() {
        let t = target(&[1], 1, 1);
        let v = eval(|g| {
            let x = input(g, &[0.0]);
            focal_loss(g, x, &t, 0.25, 2.0)
        });
        let oracle = -0.25 * 0.25 * 0.5f64.ln();
        assert_abs_diff_eq!(v, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.04332, epsilon = 1e-5);
    }

    #[test]
    fn focal_reduces_to_half_bce() {
        let t = target(&[1, 0, 1, 0, 0], 1, 5);
        let x = [0.3, -1.2, 2.0, 0.7, -0.1];
        let v = eval(|g| {
            let x = input(g, &x);
            focal_loss(g, x, &t, 0.5, 0.0)
        });
        let bce: f64 = x
            .iter()
            .zip(&t.mask)
            .map(|(&x, &m)| {
                let p = 1.0 / (1.0 + (-x).exp());
                if m == 1 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / 5.0;
        assert_abs_diff_eq!(v, 0.5 * bce, epsilon = 1e-12);
    }

    #[test]
    fn focal_vanishes_for_confident_correct_logits() {
        let t = target(&[1, 0, 0, 1], 2, 2);
        let v = eval(|g| {
            let x = input(g, &[30.0, -30.0, -30.0, 30.0]);
            focal_loss(g, x, &t, 0.25, 2.0)
        });
        assert!(v < 1e-12, "{v}");
    }

    #[test]
    fn dice_examples() {
        let n = 10_000;
        let t = target(&vec![1; n], 100, 100);
        let v = eval(|g| {
            let p = input(g, &vec![0.5; n]);
            dice_loss(g, p, &t)
        });
        let slack = DICE_SMOOTHING / (0.5 * n as f64 + n as f64 + DICE_SMOOTHING);
        assert!((v - 1.0 / 3.0).abs() <= slack, "{v}");

        let t = target(&[0, 1, 1, 0], 2, 2);
        let v = eval(|g| {
            let p = input(g, &[0.0, 1.0, 1.0, 0.0]);
            dice_loss(g, p, &t)
        });
        assert!(v.abs() <= DICE_SMOOTHING / (4.0 + DICE_SMOOTHING));

        let t = target(&[0; 4], 2, 2);
        let v = eval(|g| {
            let p = input(g, &[0.0; 4]);
            dice_loss(g, p, &t)
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let t = target(&[1, 0, 0, 0], 2, 2);
        let mut g = Graph::<f64>::new();
        let x = input(&mut g, &[0.0; 3]);
        assert!(focal_loss(&mut g, x, &t, 0.25, 2.0).is_err());
        assert!(dice_loss(&mut g, x, &t).is_err());
    }

    #[test]
    fn confidence_factor_examples() {
        let t = target(&[1, 1, 0, 0], 2, 2);
        assert_eq!(confidence_factor(&[1.0, 1.0, 0.3, 0.2], 1, &t, 2.0).unwrap(), CONF_FLOOR);
        assert_eq!(confidence_factor(&[0.0, 0.0, 0.9, 0.9], 1, &t, 2.0).unwrap(), 1.0);
        let c = confidence_factor(&[0.5, 0.5, 0.0, 0.0], 1, &t, 2.0).unwrap();
        assert_abs_diff_eq!(c, 0.25, epsilon = 1e-15);
        // averaged over queries: (0.8 + 0.2) / 2
        let c = confidence_factor(&[0.8, 0.8, 0.0, 0.0, 0.2, 0.2, 0.0, 0.0], 2, &t, 2.0).unwrap();
        assert_abs_diff_eq!(c, 0.25, epsilon = 1e-15);
        assert!(confidence_factor(&[0.5; 4], 1, &target(&[0; 4], 2, 2), 2.0).is_err());
    }

    #[test]
    fn compose_with_half_factor() {
        let w = LossWeights::default();
        let (l1, giou, dice, focal) = (0.3, 0.7, 0.45, 0.12);
        let l = LayerLoss::compose(l1, giou, dice, focal, 0.5, &w);
        assert_eq!(l.total, 5.0 * 0.5 * l1 + 2.0 * 0.5 * giou + 1.0 * 0.5 * dice + 1.0 * focal);
    }

    fn layer(g: &mut Graph<f64>, boxes: &[f64], logits: Option<(&[f64], usize)>) -> LayerOutput {
        let boxes = input(g, boxes);
        let seg_logits = logits.map(|(v, q)| g.input(Tensor::new(&[q, v.len() / q], v.to_vec()).unwrap()));
        LayerOutput { boxes, seg_logits }
    }

    #[test]
    fn layer_loss_matches_composition_of_its_components() {
        let gt = BoxCcwh::new(0.5, 0.5, 0.5, 0.5);
        let mask = bbox2seg(&gt, 4, 4).unwrap();
        let w = LossWeights::default();
        let logits: Vec<f64> = (0..32).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
        let mut g = Graph::<f64>::new();
        let out = layer(&mut g, &[0.45, 0.55, 0.4, 0.6], Some((&logits, 2)));
        let t = layer_loss(&mut g, &out, &gt, &mask, &w).unwrap();
        let v = t.values;
        let expect = LayerLoss::compose(v.l1, v.giou, v.dice, v.focal, v.c_focal, &w);
        assert_abs_diff_eq!(v.total, expect.total, epsilon = 1e-12);
        assert!(v.c_focal > CONF_FLOOR && v.c_focal < 1.0);
        assert!(v.l1 >= 0.0 && v.giou >= 0.0 && v.dice >= 0.0 && v.focal >= 0.0);

        // separately evaluated components
        let probs: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
        let c = confidence_factor(&probs, 2, &mask, 2.0).unwrap();
        assert_abs_diff_eq!(v.c_focal, c, epsilon = 1e-15);
        let d0 = eval(|g| {
            let p = input(g, &probs[..16]);
            dice_loss(g, p, &mask)
        });
        let d1 = eval(|g| {
            let p = input(g, &probs[16..]);
            dice_loss(g, p, &mask)
        });
        assert_abs_diff_eq!(v.dice, (d0 + d1) / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn regression_only_objective() {
        let gt = BoxCcwh::new(0.4, 0.5, 0.3, 0.2);
        let mask = bbox2seg(&gt, 4, 4).unwrap();
        let w = LossWeights::default();
        let mut g = Graph::<f64>::new();
        let out = layer(&mut g, &[0.45, 0.55, 0.4, 0.3], None);
        let t = layer_loss(&mut g, &out, &gt, &mask, &w).unwrap();
        let v = t.values;
        assert_eq!(v.c_focal, 1.0);
        assert_eq!((v.dice, v.focal), (0.0, 0.0));
        assert_abs_diff_eq!(v.total, 5.0 * v.l1 + 2.0 * v.giou, epsilon = 1e-12);
    }

    #[test]
    fn disabled_factor_gives_unscaled_composite() {
        let gt = BoxCcwh::new(0.4, 0.5, 0.3, 0.2);
        let mask = bbox2seg(&gt, 4, 4).unwrap();
        let w = LossWeights {
            use_conf_factor: false,
            ..LossWeights::default()
        };
        let logits = [0.3; 16];
        let mut g = Graph::<f64>::new();
        let out = layer(&mut g, &[0.45, 0.55, 0.4, 0.3], Some((&logits, 1)));
        let v = layer_loss(&mut g, &out, &gt, &mask, &w).unwrap().values;
        assert_eq!(v.c_focal, 1.0);
        assert_abs_diff_eq!(v.total, 5.0 * v.l1 + 2.0 * v.giou + v.dice + v.focal, epsilon = 1e-12);
    }

    #[test]
    fn confidence_factor_blocks_gradient() {
        // With the box fixed, seg-logit gradients must equal those of
        // c * dice + focal with c held constant.
        let gt = BoxCcwh::new(0.5, 0.5, 0.5, 0.5);
        let mask = bbox2seg(&gt, 4, 4).unwrap();
        let w = LossWeights::default();
        let logits: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) / 6.0).collect();
        let mut g = Graph::<f64>::new();
        let out = layer(&mut g, &[0.45, 0.55, 0.4, 0.6], Some((&logits, 1)));
        let t = layer_loss(&mut g, &out, &gt, &mask, &w).unwrap();
        g.backward(t.total).unwrap();
        let got = g.grad(out.seg_logits.unwrap()).unwrap().clone();

        let c = t.values.c_focal;
        let mut h = Graph::<f64>::new();
        let x = input(&mut h, &logits);
        let p = h.sigmoid(x).unwrap();
        let d = dice_loss(&mut h, p, &mask).unwrap();
        let f = focal_loss(&mut h, x, &mask, 0.25, 2.0).unwrap();
        let d = h.scale(d, c).unwrap();
        let s = h.add(d, f).unwrap();
        h.backward(s).unwrap();
        let want = h.grad(x).unwrap().data().to_vec();
        for (a, b) in got.data().iter().zip(&want) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn total_loss_sums_layers() {
        let gt = BoxCcwh::new(0.5, 0.5, 0.5, 0.5);
        let mask = bbox2seg(&gt, 4, 4).unwrap();
        let w = LossWeights::default();
        let logits = [0.2; 48];
        let mut g = Graph::<f64>::new();
        let a = layer(&mut g, &[0.45, 0.55, 0.4, 0.6], Some((&logits, 3)));
        let single = total_loss(&mut g, &[a], &gt, &mask, &w).unwrap();
        let triple = total_loss(&mut g, &[a, a, a], &gt, &mask, &w).unwrap();
        let one = g.value(single.total).item();
        assert_abs_diff_eq!(one, single.layers[0].total, epsilon = 1e-12);
        assert_abs_diff_eq!(g.value(triple.total).item(), 3.0 * one, epsilon = 1e-12);
        assert_abs_diff_eq!(triple.summary().total, 3.0 * one, epsilon = 1e-12);
        assert!(total_loss(&mut g, &[], &gt, &mask, &w).is_err());
    }

    #[test]
    fn losses_pass_gradcheck() {
        let gt = BoxCcwh::new(0.5, 0.45, 0.4, 0.5);
        let mask = bbox2seg(&gt, 3, 3).unwrap();
        // the factor is detached, so finite differences would see a path
        // the analytic gradient deliberately omits
        let w = LossWeights {
            use_conf_factor: false,
            ..LossWeights::default()
        };
        let boxes = Tensor::new(&[4], vec![0.42, 0.5, 0.3, 0.35]).unwrap();
        let logits = Tensor::new(&[2, 9], (0..18).map(|i| ((i * 5) % 7) as f64 / 3.0 - 1.0).collect()).unwrap();
        let err = gradcheck::check_f64(&[boxes, logits], 1e-6, |g, v| {
            let out = LayerOutput {
                boxes: v[0],
                seg_logits: Some(v[1]),
            };
            Ok(total_loss(g, &[out, out], &gt, &mask, &w)?.total)
        })
        .unwrap();
        assert!(err.max_rel < 1e-4, "{err:?}");
    }

    proptest! {
        #[test]
        fn components_are_nonnegative_and_target_is_best(
            logits in prop::collection::vec(-6.0f64..6.0, 9),
            mask in prop::collection::vec(0u8..2, 9),
        ) {
            let t = target(&mask, 3, 3);
            let focal = eval(|g| { let x = input(g, &logits); focal_loss(g, x, &t, 0.25, 2.0) });
            let probs: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
            let dice = eval(|g| { let p = input(g, &probs); dice_loss(g, p, &t) });
            prop_assert!(focal >= 0.0 && dice >= 0.0);
            let ideal: Vec<f64> = mask.iter().map(|&m| if m == 1 { 40.0 } else { -40.0 }).collect();
            let best_focal = eval(|g| { let x = input(g, &ideal); focal_loss(g, x, &t, 0.25, 2.0) });
            let bin: Vec<f64> = mask.iter().map(|&m| f64::from(m)).collect();
            let best_dice = eval(|g| { let p = input(g, &bin); dice_loss(g, p, &t) });
            prop_assert!(best_focal <= focal + 1e-12);
            prop_assert!(best_dice <= dice + 1e-12);
        }

        #[test]
        fn confidence_factor_is_monotone_and_bounded(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let t = target(&[1, 0], 1, 2);
            let fa = confidence_factor(&[a, 0.0], 1, &t, 2.0).unwrap();
            let fb = confidence_factor(&[b, 0.0], 1, &t, 2.0).unwrap();
            prop_assert!((CONF_FLOOR..=1.0).contains(&fa));
            if a <= b {
                prop_assert!(fa >= fb);
            }
        }
    }
}
