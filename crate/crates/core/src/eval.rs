//! Grounding metrics, confidence calibration and threshold reports, and
//! alignment-attention diagnostics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::attention::attention_mass_to_region;
use crate::data::GroundingSample;
use crate::error::{Error, Result};
use crate::geometry::{bbox2seg, iou, BoxCcwh};
use crate::model::{Model, Prediction};
use crate::tensor::{Graph, ParamStore};

/// A prediction counts as correct when its IoU with the target exceeds this.
pub const IOU_THRESHOLD: f64 = 0.5;
pub const CONFIDENCE_BINS: usize = 5;
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.0, 0.65, 0.70, 0.75, 0.80, 0.85];

pub const METRICS_CSV: &str = "metrics.csv";
pub const BINS_CSV: &str = "confidence_bins.csv";
pub const THRESHOLDS_CSV: &str = "thresholds.csv";
pub const ALIGNMENT_CSV: &str = "attention_alignment.csv";

/// What the evaluator keeps from one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub pred: BoxCcwh,
    pub gt: BoxCcwh,
    pub iou: f64,
    pub confidence: f64,
    /// Query-to-target attention share per alignment layer.
    pub alignment: Vec<f64>,
}

impl SampleRecord {
    pub fn new(pred: BoxCcwh, gt: BoxCcwh, confidence: f64, alignment: Vec<f64>) -> Self {
        Self {
            iou: iou(&pred.to_xyxy(), &gt.to_xyxy()),
            pred,
            gt,
            confidence,
            alignment,
        }
    }

    pub fn correct(&self) -> bool {
        self.iou > IOU_THRESHOLD
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinRow {
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_iou: f64,
    pub acc_at_50: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub retained: usize,
    pub proportion: f64,
    /// `None` when nothing is retained.
    pub acc_at_50: Option<f64>,
    pub mean_iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentRow {
    pub layer: usize,
    pub attention_mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub acc_at_50: f64,
    pub mean_iou: f64,
    pub ap50: f64,
    pub bins: Vec<BinRow>,
    pub thresholds: Vec<ThresholdRow>,
    pub alignment: Vec<AlignmentRow>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn accuracy(records: &[SampleRecord]) -> f64 {
    mean(records.iter().map(|r| if r.correct() { 1.0 } else { 0.0 }))
}

/// Average precision at the 0.5-IoU criterion: predictions ranked by
/// descending confidence (ties by input order), precision made monotone
/// from the right, integrated over recall. Every sample has exactly one
/// target, so recall is relative to the sample count.
pub fn ap50(records: &[SampleRecord]) -> f64 {
    let n = records.len();
    if n == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[b].confidence.total_cmp(&records[a].confidence));
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(n);
    let mut hit = Vec::with_capacity(n);
    for (k, &i) in order.iter().enumerate() {
        let c = records[i].correct();
        tp += usize::from(c);
        precision.push(tp as f64 / (k + 1) as f64);
        hit.push(c);
    }
    for k in (0..n.saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    precision
        .iter()
        .zip(&hit)
        .filter(|(_, &h)| h)
        .map(|(p, _)| p)
        .sum::<f64>()
        / n as f64
}

/// Sorts by ascending confidence and splits into `bins` parts whose sizes
/// differ by at most one. Empty parts are dropped.
pub fn confidence_bins(records: &[SampleRecord], bins: usize) -> Vec<BinRow> {
    let mut sorted: Vec<&SampleRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let n = sorted.len();
    let mut rows = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let len = n / bins + usize::from(b < n % bins);
        let part = &sorted[start..start + len];
        start += len;
        if part.is_empty() {
            continue;
        }
        rows.push(BinRow {
            count: part.len(),
            mean_confidence: mean(part.iter().map(|r| r.confidence)),
            mean_iou: mean(part.iter().map(|r| r.iou)),
            acc_at_50: mean(part.iter().map(|r| if r.correct() { 1.0 } else { 0.0 })),
        });
    }
    rows
}

/// Metrics restricted to samples with confidence at or above each threshold.
pub fn threshold_analysis(records: &[SampleRecord], thresholds: &[f64]) -> Result<Vec<ThresholdRow>> {
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("threshold_analysis", "thresholds must be sorted ascending"));
    }
    Ok(thresholds
        .iter()
        .map(|&threshold| {
            let kept: Vec<SampleRecord> = records
                .iter()
                .filter(|r| r.confidence >= threshold)
                .cloned()
                .collect();
            let any = !kept.is_empty();
            ThresholdRow {
                threshold,
                retained: kept.len(),
                proportion: kept.len() as f64 / records.len().max(1) as f64,
                acc_at_50: any.then(|| accuracy(&kept)),
                mean_iou: any.then(|| mean(kept.iter().map(|r| r.iou))),
            }
        })
        .collect())
}

pub fn summarize(records: &[SampleRecord], thresholds: &[f64]) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let layers = records[0].alignment.len();
    let alignment = (0..layers)
        .map(|layer| AlignmentRow {
            layer,
            attention_mass: mean(records.iter().map(|r| r.alignment[layer])),
        })
        .collect();
    Ok(EvalReport {
        samples: records.len(),
        acc_at_50: accuracy(records),
        mean_iou: mean(records.iter().map(|r| r.iou)),
        ap50: ap50(records),
        bins: confidence_bins(records, CONFIDENCE_BINS),
        thresholds: threshold_analysis(records, thresholds)?,
        alignment,
    })
}

/// Runs the model on one sample: its prediction plus the share of
/// attention the query rows put on the target's visual cells at each
/// alignment layer (averaged over heads and queries).
pub fn predict_with_alignment(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &GroundingSample,
) -> Result<(Prediction, Vec<f64>)> {
    let cfg = model.config();
    let mut g = Graph::<f32>::inference();
    let out = model.forward(&mut g, store, &sample.input())?;
    let pred = Model::prediction(&g, out.layers.last().expect("decoder_layers >= 1"));
    let [gh, gw] = cfg.vision_grid;
    let region = bbox2seg(&sample.gt_box, gh, gw)?.foreground_indices();
    let queries: Vec<usize> = (0..1 + cfg.seg_queries).collect();
    let offset = queries.len() + cfg.text_len;
    let alignment = out
        .align_probs
        .iter()
        .map(|&p| attention_mass_to_region(g.value(p), &queries, offset, &region))
        .collect::<Result<_>>()?;
    Ok((pred, alignment))
}

/// Evaluates any predictor over a dataset; samples run in parallel and are
/// reduced in input order.
pub fn evaluate_with<F>(samples: &[GroundingSample], thresholds: &[f64], predict: F) -> Result<EvalReport>
where
    F: Fn(&GroundingSample) -> Result<(Prediction, Vec<f64>)> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Data("cannot evaluate an empty dataset".into()));
    }
    let records = samples
        .par_iter()
        .map(|s| {
            let (p, alignment) = predict(s)?;
            Ok(SampleRecord::new(p.boxes, s.gt_box, p.confidence, alignment))
        })
        .collect::<Result<Vec<_>>>()?;
    summarize(&records, thresholds)
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[GroundingSample],
    thresholds: &[f64],
) -> Result<EvalReport> {
    evaluate_with(samples, thresholds, |s| predict_with_alignment(model, store, s))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn metrics_csv(&self) -> String {
        format!(
            "samples,acc_at_50,mean_iou,ap50\n{},{:.6},{:.6},{:.6}\n",
            self.samples, self.acc_at_50, self.mean_iou, self.ap50
        )
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("bin,count,mean_confidence,mean_iou,acc_at_50\n");
        for (i, b) in self.bins.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{:.6},{:.6},{:.6}",
                b.count, b.mean_confidence, b.mean_iou, b.acc_at_50
            );
        }
        s
    }

    /// Thresholds that retain nothing leave the metric columns empty.
    pub fn thresholds_csv(&self) -> String {
        let mut s = String::from("threshold,retained,proportion,acc_at_50,mean_iou\n");
        for t in &self.thresholds {
            let _ = writeln!(
                s,
                "{:.2},{},{:.6},{},{}",
                t.threshold,
                t.retained,
                t.proportion,
                opt(t.acc_at_50),
                opt(t.mean_iou)
            );
        }
        s
    }

    pub fn alignment_csv(&self, layers: Option<&[usize]>) -> String {
        let mut s = String::from("layer,attention_mass\n");
        for a in &self.alignment {
            if layers.map_or(true, |l| l.contains(&a.layer)) {
                let _ = writeln!(s, "{},{:.6}", a.layer, a.attention_mass);
            }
        }
        s
    }

    /// Writes the four report files into `dir`.
    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (METRICS_CSV, self.metrics_csv()),
            (BINS_CSV, self.bins_csv()),
            (THRESHOLDS_CSV, self.thresholds_csv()),
            (ALIGNMENT_CSV, self.alignment_csv(None)),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// First, middle and last of `n` layers, deduplicated.
pub fn sampled_layers(n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let mut v = vec![0, (n - 1) / 2, n - 1];
    v.dedup();
    v
}
