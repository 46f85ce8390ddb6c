//! Controlled-variable ablation grid over alignment, seg query count and
//! the confidence factor.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::Result;
use crate::eval::{evaluate, DEFAULT_THRESHOLDS};
use crate::train::{train, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cell {
    pub triple_alignment: bool,
    pub seg_queries: usize,
    pub use_conf_factor: bool,
}

impl Cell {
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.model.triple_alignment = self.triple_alignment;
        cfg.model.seg_queries = self.seg_queries;
        cfg.loss.use_conf_factor = self.use_conf_factor;
        cfg
    }
}

pub const SEG_QUERY_GRID: [usize; 4] = [0, 1, 3, 5];

/// `{alignment on, off} x {0, 1, 3, 5} x {factor on, off}`.
pub fn full_grid() -> Vec<Cell> {
    let mut cells = Vec::with_capacity(16);
    for triple_alignment in [true, false] {
        for seg_queries in SEG_QUERY_GRID {
            for use_conf_factor in [true, false] {
                cells.push(Cell {
                    triple_alignment,
                    seg_queries,
                    use_conf_factor,
                });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: Cell,
    /// Eval acc@0.5 per seed, in seed order.
    pub acc_per_seed: Vec<f64>,
    pub acc_at_50: f64,
    pub mean_iou: f64,
    pub ap50: f64,
}

/// Trains and evaluates one cell per seed and averages the metrics.
pub fn run_cell(base: &RunConfig, cell: Cell, seeds: &[u64]) -> Result<AblationRow> {
    let mut accs = Vec::with_capacity(seeds.len());
    let (mut miou, mut ap) = (0.0, 0.0);
    for &seed in seeds {
        let cfg = cell.apply(base, seed);
        let trained = train(&cfg, &cfg.train_data()?, |_| {})?;
        let report = evaluate(&trained.model, &trained.store, &cfg.eval_data()?, &DEFAULT_THRESHOLDS)?;
        accs.push(report.acc_at_50);
        miou += report.mean_iou / seeds.len() as f64;
        ap += report.ap50 / seeds.len() as f64;
    }
    Ok(AblationRow {
        cell,
        acc_at_50: accs.iter().sum::<f64>() / accs.len() as f64,
        acc_per_seed: accs,
        mean_iou: miou,
        ap50: ap,
    })
}

/// Runs `cells` on up to `workers` threads; rows come back in cell order.
pub fn run_grid(base: &RunConfig, cells: &[Cell], seeds: &[u64], workers: usize) -> Result<Vec<AblationRow>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| crate::Error::invalid("run_grid", e.to_string()))?;
    pool.install(|| cells.par_iter().map(|&c| run_cell(base, c, seeds)).collect())
}

pub const ABLATION_HEADER: &str = "triple_alignment,seg_queries,use_conf_factor,seeds,acc_at_50,mean_iou,ap50,acc_per_seed";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let per: Vec<String> = r.acc_per_seed.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{}",
            r.cell.triple_alignment,
            r.cell.seg_queries,
            r.cell.use_conf_factor,
            r.acc_per_seed.len(),
            r.acc_at_50,
            r.mean_iou,
            r.ap50,
            per.join(";")
        );
    }
    s
}
