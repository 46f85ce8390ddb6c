//! Drives the `segvg` binary end to end on a tiny configuration.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 4,
  "data": {
    "train_samples": 8,
    "eval_samples": 6,
    "scene": {"max_objects": 3, "min_size": 3, "max_size": 7, "size_margin": 3}
  },
  "model": {
    "model_dim": 8, "align_layers": 2, "encoder_layers": 1, "decoder_layers": 2,
    "seg_queries": 2, "heads": 2, "ffn_dim": 16, "vision_grid": [4, 4],
    "image_size": [16, 16], "pool_subgrid": 2, "text_len": 8
  },
  "train": {"epochs": 2, "lr_drop_epoch": 1, "batch_size": 4, "warmup_steps": 2}
}"#;

fn segvg(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segvg"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env_remove("SEGVG_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let run = dir.path().join("run");

    let o = segvg(&["train", "--config", &cfg], &run);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["final.ckpt", "loss_log.csv", "config.resolved.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("step,l1,giou,dice,focal,c_focal,total\n"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);

    // eval picks up config.resolved.json beside the checkpoint
    let o = segvg(&["eval"], &run);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("acc@0.5"), "{out}");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("samples,acc_at_50,mean_iou,ap50\n6,"), "{metrics}");

    let o = segvg(&["analyze", "--thresholds", "0,0.65,0.75,0.85"], &run);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let t = std::fs::read_to_string(run.join("thresholds.csv")).unwrap();
    assert_eq!(t.lines().count(), 1 + 4);
    let a = std::fs::read_to_string(run.join("attention_alignment.csv")).unwrap();
    assert_eq!(a.lines().next(), Some("layer,attention_mass"));
    assert_eq!(a.lines().count(), 1 + 2);
    assert!(run.join("confidence_bins.csv").exists());
    let sample = run.join("samples/sample0");
    for f in ["seg_L0_Q0.pgm", "seg_L1_Q1.pgm", "attention_L0.csv", "attention_L1.csv", "info.txt"] {
        assert!(sample.join(f).exists(), "{f} missing");
    }
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = segvg(&["train", "--config", &cfg], d);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let read = |d: &Path| std::fs::read(d.join("final.ckpt")).unwrap();
    assert_eq!(read(&a), read(&b));

    let c = dir.path().join("c");
    let o = segvg(&["train", "--config", &cfg, "--seed", "5"], &c);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (r#"{"train": {"epochz": 3}}"#, "train.epochz"),
        (r#"{"model": {"heads": 3}}"#, "model.heads"),
        (r#"{"train": {"epochs": 4, "lr_drop_epoch": 4}}"#, "train.lr_drop_epoch"),
        (r#"{"loss": {"lambda_l1": -1}}"#, "loss.lambda_l1"),
    ];
    for (i, (body, key)) in cases.iter().enumerate() {
        let cfg = write_config(dir.path(), &format!("c{i}.json"), body);
        let o = segvg(&["train", "--config", &cfg], &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(2), "{body}: {}", stderr(&o));
        assert!(stderr(&o).contains(key), "{body}: {}", stderr(&o));
    }
}

#[test]
fn divergence_exits_3_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let body = TINY.replace(
        r#""warmup_steps": 2"#,
        r#""warmup_steps": 0, "lr_rest": 1e30, "lr_backbone": 1e30, "grad_clip": 0.0, "epochs": 4, "lr_drop_epoch": 3"#,
    )
    .replace(r#""epochs": 2, "lr_drop_epoch": 1, "#, "");
    let cfg = write_config(dir.path(), "bad.json", &body);
    let o = segvg(&["train", "--config", &cfg], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn checkpoint_problems_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.json", TINY);
    let run = dir.path().join("run");
    let o = segvg(&["train", "--config", &cfg], &run);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ckpt = run.join("final.ckpt");
    let ckpt = ckpt.to_str().unwrap();

    let wider = write_config(dir.path(), "wider.json", &TINY.replace(r#""ffn_dim": 16"#, r#""ffn_dim": 24"#));
    let o = segvg(&["eval", "--config", &wider, "--checkpoint", ckpt], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("ffn"), "{}", stderr(&o));

    let mut bytes = std::fs::read(ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, bytes).unwrap();
    let o = segvg(&["eval", "--config", &cfg, "--checkpoint", corrupt.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = segvg(&["gradcheck"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("model_micro_f64"), "{table}");

    let o = segvg(&["gradcheck", "--inject-fault", "softmax"], dir.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let o = segvg(&["gradcheck", "--preset", "huge"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}
