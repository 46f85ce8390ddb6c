use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use segvg::data::tokenize;
use segvg::model::{Model, ModelConfig, ModelInput};
use segvg::tensor::checkpoint::save_store;
use segvg::tensor::Tensor;
use segvg::train::RunConfig;
use segvg_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(segvg_last_error()) }.to_string_lossy().into_owned()
}

fn micro_config() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 5,
        model: ModelConfig::micro(),
        ..RunConfig::default()
    };
    cfg.model.image_size = [16, 16];
    cfg.model.vision_grid = [4, 4];
    cfg.model.text_len = 8;
    cfg
}

/// Writes a config and a freshly initialized checkpoint into `dir`.
fn write_model(dir: &Path, cfg: &RunConfig) -> (CString, CString) {
    let (_, store) = Model::init::<f32>(&cfg.model, cfg.seed).unwrap();
    let ckpt = dir.join("m.ckpt");
    save_store(&store, &ckpt).unwrap();
    let json = dir.join("config.json");
    std::fs::write(&json, cfg.to_json()).unwrap();
    (cstr(json.to_str().unwrap()), cstr(ckpt.to_str().unwrap()))
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(segvg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn iou_of_identical_and_disjoint_boxes() {
    let a = [0.5, 0.5, 0.2, 0.2];
    let b = [0.1, 0.1, 0.1, 0.1];
    let mut out = -1.0;
    assert_eq!(unsafe { segvg_iou(a.as_ptr(), a.as_ptr(), &mut out) }, SegvgStatus::Ok);
    assert!((out - 1.0).abs() < 1e-12);
    assert_eq!(unsafe { segvg_iou(a.as_ptr(), b.as_ptr(), &mut out) }, SegvgStatus::Ok);
    assert_eq!(out, 0.0);
    let bad = [0.5, 0.5, 0.0, 0.2];
    assert_eq!(
        unsafe { segvg_iou(a.as_ptr(), bad.as_ptr(), &mut out) },
        SegvgStatus::InvalidArgument
    );
    assert!(!last_error().is_empty());
}

#[test]
fn tokenize_matches_the_rust_tokenizer() {
    let text = cstr("red circle");
    let mut ids = [0u32; 8];
    let mut mask = [9u8; 8];
    let s = unsafe { segvg_tokenize(text.as_ptr(), 8, ids.as_mut_ptr(), mask.as_mut_ptr()) };
    assert_eq!(s, SegvgStatus::Ok, "{}", last_error());
    assert!(last_error().is_empty());
    let (t, m) = tokenize("red circle", 8).unwrap();
    assert_eq!(ids.iter().map(|&i| i as usize).collect::<Vec<_>>(), t);
    assert_eq!(mask.iter().map(|&b| b == 1).collect::<Vec<_>>(), m);
}

#[test]
fn null_pointers_are_reported_not_dereferenced() {
    let mut out = 0.0;
    let a = [0.5; 4];
    assert_eq!(unsafe { segvg_iou(ptr::null(), a.as_ptr(), &mut out) }, SegvgStatus::NullPointer);
    assert!(last_error().contains("null"));
    let ckpt = cstr("x.ckpt");
    assert_eq!(
        unsafe { segvg_model_load(ptr::null(), ckpt.as_ptr(), ptr::null_mut()) },
        SegvgStatus::NullPointer
    );
    unsafe { segvg_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let (json, ckpt) = write_model(dir.path(), &cfg);
    let mut handle = ptr::null_mut();

    let bad_cfg = dir.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"model": {"heads": 0}}"#).unwrap();
    let bad_cfg = cstr(bad_cfg.to_str().unwrap());
    assert_eq!(
        unsafe { segvg_model_load(bad_cfg.as_ptr(), ckpt.as_ptr(), &mut handle) },
        SegvgStatus::Config
    );
    assert!(handle.is_null());
    assert!(last_error().contains("model.heads"), "{}", last_error());

    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, b"not a checkpoint").unwrap();
    let corrupt = cstr(corrupt.to_str().unwrap());
    assert_eq!(
        unsafe { segvg_model_load(json.as_ptr(), corrupt.as_ptr(), &mut handle) },
        SegvgStatus::Checkpoint
    );

    // Weights from a different width do not fit the configured model.
    let mut wide = cfg.clone();
    wide.model.ffn_dim *= 2;
    let other = tempfile::tempdir().unwrap();
    let (_, wide_ckpt) = write_model(other.path(), &wide);
    assert_eq!(
        unsafe { segvg_model_load(json.as_ptr(), wide_ckpt.as_ptr(), &mut handle) },
        SegvgStatus::Checkpoint
    );
    assert!(handle.is_null());
}

#[test]
fn predict_through_the_handle_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config();
    let (json, ckpt) = write_model(dir.path(), &cfg);
    let mut handle = ptr::null_mut();
    let s = unsafe { segvg_model_load(json.as_ptr(), ckpt.as_ptr(), &mut handle) };
    assert_eq!(s, SegvgStatus::Ok, "{}", last_error());

    let (mut c, mut h, mut w) = (0, 0, 0);
    assert_eq!(
        unsafe { segvg_model_image_shape(handle, &mut c, &mut h, &mut w) },
        SegvgStatus::Ok
    );
    assert_eq!((c, h, w), (3, 16, 16));

    let pixels: Vec<f32> = (0..c * h * w).map(|i| (i % 7) as f32 / 7.0).collect();
    let text = cstr("green square");
    let mut boxes = [0.0f64; 4];
    let mut conf = -1.0;
    let s = unsafe {
        segvg_predict(handle, pixels.as_ptr(), pixels.len(), text.as_ptr(), boxes.as_mut_ptr(), &mut conf)
    };
    assert_eq!(s, SegvgStatus::Ok, "{}", last_error());

    let (model, store) = Model::init::<f32>(&cfg.model, cfg.seed).unwrap();
    let image = Tensor::new(&[3, 16, 16], pixels.clone()).unwrap();
    let (tokens, padding) = tokenize("green square", cfg.model.text_len).unwrap();
    let want = model
        .predict(&store, &ModelInput { image: &image, tokens: &tokens, padding: &padding })
        .unwrap();
    assert_eq!(boxes, want.boxes.to_array());
    assert_eq!(conf, want.confidence);

    let s = unsafe {
        segvg_predict(handle, pixels.as_ptr(), pixels.len() - 1, text.as_ptr(), boxes.as_mut_ptr(), &mut conf)
    };
    assert_eq!(s, SegvgStatus::InvalidArgument);
    let unknown = cstr("purple blob");
    let s = unsafe {
        segvg_predict(handle, pixels.as_ptr(), pixels.len(), unknown.as_ptr(), boxes.as_mut_ptr(), &mut conf)
    };
    assert_ne!(s, SegvgStatus::Ok);
    unsafe { segvg_model_free(handle) };
}

#[test]
fn generated_header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/segvg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["segvg_model_load", "segvg_predict", "segvg_model_free", "segvg_last_error", "SEGVG_STATUS_CHECKPOINT = 4"] {
        assert!(text.contains(f), "header lacks {f}");
    }
    let Ok(cc) = Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler on PATH; header syntax not checked");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"segvg.h\"\nint main(void) { SegvgModel *m = 0; \
         SegvgStatus s = segvg_model_load(0, \"x\", &m); segvg_model_free(m); \
         return s == SEGVG_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
