//! `segvg` subcommands: train, eval, gradcheck, ablate, analyze.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{ablation_csv, full_grid, run_grid};
use crate::error::{Error, Result};
use crate::eval::{evaluate, predict_with_alignment, sampled_layers, summarize, SampleRecord, DEFAULT_THRESHOLDS};
use crate::geometry::write_pgm;
use crate::gradcheck_suite;
use crate::model::Model;
use crate::tensor::{Graph, OpKind};
use crate::train::{load_trained, run_training, RunConfig, CHECKPOINT_FILE, RESOLVED_CONFIG_FILE};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const QUALITATIVE_SAMPLES: usize = 8;

#[derive(Debug, Parser)]
#[command(name = "segvg", version, about = "Train and inspect a toy visual grounding model")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "SEGVG_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from scratch and write final.ckpt, loss_log.csv and config.resolved.json.
    Train,
    /// Evaluate a checkpoint on the held-out split of the seed.
    Eval(CheckpointArgs),
    /// Finite-difference check of every op and of the micro model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate the 16-cell ablation grid.
    Ablate(AblateArgs),
    /// Attention and confidence diagnostics plus mask dumps.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Defaults to `<out>/final.ckpt`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only `micro` is defined.
    #[arg(long, default_value = "micro")]
    pub preset: String,
    /// Corrupts one op's backward pass to confirm the suite catches it.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Number of seeds per cell, starting at the run seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub checkpoint: CheckpointArgs,
    /// Comma-separated, ascending.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Option<Vec<f64>>,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } => EXIT_CONFIG,
        Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::CheckpointMismatch { .. } | Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

/// Config from `--config`, else from a resolved config next to the
/// checkpoint, else defaults; then the seed override.
fn resolve_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let beside = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join(RESOLVED_CONFIG_FILE))
        .filter(|p| p.exists());
    let mut cfg = match (&common.config, beside) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(&p)?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn checkpoint_path(common: &Common, args: &CheckpointArgs) -> PathBuf {
    args.checkpoint
        .clone()
        .unwrap_or_else(|| common.out.join(CHECKPOINT_FILE))
}

fn parse_op(name: &str) -> Result<OpKind> {
    let kinds = [
        ("matmul", OpKind::MatMul),
        ("add", OpKind::Add),
        ("sub", OpKind::Sub),
        ("mul", OpKind::Mul),
        ("div", OpKind::Div),
        ("sigmoid", OpKind::Sigmoid),
        ("relu", OpKind::Relu),
        ("gelu", OpKind::Gelu),
        ("softmax", OpKind::Softmax),
        ("layer_norm", OpKind::LayerNorm),
        ("log", OpKind::Log),
        ("exp", OpKind::Exp),
    ];
    kinds
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, k)| *k)
        .ok_or_else(|| Error::Config {
            key: "inject_fault".into(),
            reason: format!("unknown op `{name}`"),
        })
}

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn cmd_train(common: &Common) -> Result<i32> {
    let cfg = resolve_config(common, None)?;
    let steps_per_epoch = cfg.data.train_samples.div_ceil(cfg.train.batch_size);
    let trained = run_training(&cfg, &common.out, |row| {
        if (row.step + 1) % steps_per_epoch == 0 {
            println!(
                "epoch {:>3}  step {:>6}  loss {:.4}",
                (row.step + 1) / steps_per_epoch,
                row.step + 1,
                row.loss.total
            );
        }
    })?;
    println!(
        "trained {} steps; wrote {}",
        trained.log.len(),
        common.out.join(CHECKPOINT_FILE).display()
    );
    Ok(EXIT_OK)
}

fn cmd_eval(common: &Common, args: &CheckpointArgs) -> Result<i32> {
    let ckpt = checkpoint_path(common, args);
    let cfg = resolve_config(common, Some(&ckpt))?;
    let (model, store) = load_trained(&cfg.model, &ckpt)?;
    let report = evaluate(&model, &store, &cfg.eval_data()?, &DEFAULT_THRESHOLDS)?;
    report.write_csvs(&common.out)?;
    println!("acc@0.5 {:.4}", report.acc_at_50);
    println!("mean_iou {:.4}", report.mean_iou);
    println!("ap50 {:.4}", report.ap50);
    Ok(EXIT_OK)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    if args.preset != "micro" {
        return Err(Error::Config {
            key: "preset".into(),
            reason: format!("unknown preset `{}`; only `micro` exists", args.preset),
        });
    }
    let fault = args.inject_fault.as_deref().map(parse_op).transpose()?;
    let report = gradcheck_suite::run(fault)?;
    print!("{}", report.table());
    Ok(if report.passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_ablate(common: &Common, args: &AblateArgs) -> Result<i32> {
    let cfg = resolve_config(common, None)?;
    cfg.validate()?;
    let seeds: Vec<u64> = (0..args.seeds.max(1)).map(|i| cfg.seed + i).collect();
    let rows = run_grid(&cfg, &full_grid(), &seeds, args.workers)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    let csv = ablation_csv(&rows);
    write(&common.out.join(ABLATION_CSV), &csv)?;
    print!("{csv}");
    Ok(EXIT_OK)
}

fn cmd_analyze(common: &Common, args: &AnalyzeArgs) -> Result<i32> {
    let ckpt = checkpoint_path(common, &args.checkpoint);
    let cfg = resolve_config(common, Some(&ckpt))?;
    let (model, store) = load_trained(&cfg.model, &ckpt)?;
    let thresholds = args.thresholds.clone().unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
    let data = cfg.eval_data()?;
    let records = data
        .iter()
        .map(|s| {
            let (p, alignment) = predict_with_alignment(&model, &store, s)?;
            Ok(SampleRecord::new(p.boxes, s.gt_box, p.confidence, alignment))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = summarize(&records, &thresholds)?;
    fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    write(&common.out.join(crate::eval::THRESHOLDS_CSV), report.thresholds_csv())?;
    write(&common.out.join(crate::eval::BINS_CSV), report.bins_csv())?;
    print!("{}", report.thresholds_csv());

    let layers = sampled_layers(cfg.model.align_layers);
    if model.has_alignment() {
        let csv = report.alignment_csv(Some(&layers));
        write(&common.out.join(crate::eval::ALIGNMENT_CSV), &csv)?;
        print!("{csv}");
    } else {
        println!("checkpoint has no alignment attention; skipping the attention report");
    }
    dump_samples(&model, &store, &data[..QUALITATIVE_SAMPLES.min(data.len())], &layers, &common.out)?;
    Ok(EXIT_OK)
}

/// Per sample: mask probabilities of every decoder layer and seg query as
/// PGM, the head-averaged alignment attention of the sampled layers as
/// CSV, and a short text summary.
fn dump_samples(
    model: &Model,
    store: &crate::tensor::ParamStore<f32>,
    samples: &[crate::data::GroundingSample],
    layers: &[usize],
    out: &Path,
) -> Result<()> {
    let [gh, gw] = model.config().vision_grid;
    for (i, s) in samples.iter().enumerate() {
        let dir = out.join("samples").join(format!("sample{i}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut g = Graph::<f32>::inference();
        let fwd = model.forward(&mut g, store, &s.input())?;
        for (l, layer) in fwd.layers.iter().enumerate() {
            let pred = Model::prediction(&g, layer);
            for (q, probs) in pred.seg_probs.iter().enumerate() {
                write_pgm(&dir.join(format!("seg_L{l}_Q{q}.pgm")), gh, gw, probs)?;
            }
        }
        for &l in layers {
            if let Some(&p) = fwd.align_probs.get(l) {
                crate::attention::write_attention_csv(&dir.join(format!("attention_L{l}.csv")), g.value(p))?;
            }
        }
        let pred = Model::prediction(&g, fwd.layers.last().expect("decoder_layers >= 1"));
        let info = format!(
            "text: {}\ngt: {:?}\npred: {:?}\nconfidence: {:.4}\n",
            s.text,
            s.gt_box.to_array(),
            pred.boxes.to_array(),
            pred.confidence
        );
        write(&dir.join("info.txt"), info)?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train => cmd_train(&cli.common),
        Command::Eval(a) => cmd_eval(&cli.common, a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(&cli.common, a),
        Command::Analyze(a) => cmd_analyze(&cli.common, a),
    }
}

/// Parses the process arguments, runs, and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
