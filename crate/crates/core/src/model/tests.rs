use super::*;
use crate::data::{tokenize, SceneConfig};

fn micro(seed: u64) -> (Model, ParamStore<f32>) {
    Model::init(&ModelConfig::micro(), seed).unwrap()
}

fn micro_input(cfg: &ModelConfig, seed: u64) -> (Tensor<f32>, Vec<usize>, Vec<bool>) {
    let mut rng = SeedTree::new(seed).rng();
    let [h, w] = cfg.image_size;
    let image = crate::tensor::rng::uniform::<f32>(&mut rng, &[3, h, w], 0.5).map(|v| v + 0.5);
    let (tokens, padding) = tokenize("red", cfg.text_len).unwrap();
    (image, tokens, padding)
}

fn toy_sample() -> crate::data::GroundingSample {
    crate::data::generate_dataset(1, 1, [64, 64], 12, &SceneConfig::default())
        .unwrap()
        .remove(0)
}

#[test]
fn constant_image_gives_identical_tokens_before_positions() {
    let (model, store) = micro(0);
    let image = Tensor::full(&[3, 8, 8], 0.3f32);
    let mut g = Graph::inference();
    let x = model.vision_features(&mut g, &store, &image).unwrap();
    let t = g.value(x);
    assert_eq!(t.shape(), &[4, 8]);
    for r in 1..4 {
        assert_eq!(&t.data()[r * 8..(r + 1) * 8], &t.data()[..8]);
    }
    let with_pos = model.vision_stub(&mut g, &store, &image).unwrap();
    assert_ne!(&g.value(with_pos).data()[..8], &g.value(with_pos).data()[8..16]);
}

#[test]
fn patch_change_is_local() {
    let (model, store) = Model::init::<f32>(&ModelConfig::default(), 1).unwrap();
    let a = toy_sample().image;
    let mut b = a.clone();
    // pixel (row 20, col 45) lies in token (2, 5)
    for c in 0..3 {
        b.data_mut()[(c * 64 + 20) * 64 + 45] += 0.5;
    }
    let mut g = Graph::inference();
    let fa = model.vision_features(&mut g, &store, &a).unwrap();
    let fb = model.vision_features(&mut g, &store, &b).unwrap();
    let (fa, fb) = (g.value(fa), g.value(fb));
    assert_eq!(fa.shape(), &[64, 64]);
    for t in 0..64 {
        let same = fa.data()[t * 64..(t + 1) * 64] == fb.data()[t * 64..(t + 1) * 64];
        assert_eq!(same, t != 2 * 8 + 5, "token {t}");
    }
}

#[test]
fn indivisible_image_is_rejected() {
    let (model, store) = micro(0);
    let mut g = Graph::inference();
    assert!(model.vision_stub(&mut g, &store, &Tensor::zeros(&[3, 8, 9])).is_err());
    let mut cfg = ModelConfig::micro();
    cfg.image_size = [9, 8];
    assert!(Model::init::<f32>(&cfg, 0).is_err());
}

#[test]
fn text_stub_positions_and_range() {
    let (model, store) = micro(0);
    let mut g = Graph::inference();
    let x = model.text_stub(&mut g, &store, &[7, 7, 7, 7]).unwrap();
    let t = g.value(x);
    assert_eq!(t.shape(), &[4, 8]);
    assert_ne!(&t.data()[..8], &t.data()[8..16]);
    assert!(model.text_stub(&mut g, &store, &[1, 2, 64, 0]).is_err());
    assert!(model.text_stub(&mut g, &store, &[1, 2, 3]).is_err());
}

#[test]
fn shapes_are_preserved_end_to_end() {
    let cfg = ModelConfig::default();
    let (model, store) = Model::init::<f32>(&cfg, 2).unwrap();
    let s = toy_sample();
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &s.input()).unwrap();
    assert_eq!(g.shape(out.queries), &[6, 64]);
    assert_eq!(g.shape(out.text), &[12, 64]);
    assert_eq!(g.shape(out.vision), &[64, 64]);
    assert_eq!(g.shape(out.memory), &[76, 64]);
    assert_eq!(out.layers.len(), 2);
    assert_eq!(out.align_probs.len(), 2);
    for l in &out.layers {
        assert!(g.value(l.boxes).data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(g.shape(l.seg_logits.unwrap()), &[5, 64]);
    }
}

#[test]
fn disabled_alignment_leaves_queries_static() {
    let mut cfg = ModelConfig::micro();
    cfg.triple_alignment = false;
    let (model, store) = Model::init::<f32>(&cfg, 3).unwrap();
    assert!(!model.has_alignment());
    let (image, tokens, padding) = micro_input(&cfg, 4);
    let input = ModelInput {
        image: &image,
        tokens: &tokens,
        padding: &padding,
    };
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &input).unwrap();
    assert_eq!(g.value(out.queries), store.get(model.query_embed()));

    cfg.triple_alignment = true;
    let (model, store) = Model::init::<f32>(&cfg, 3).unwrap();
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &input).unwrap();
    assert!(g.value(out.queries).max_abs_diff(store.get(model.query_embed())) > 1e-3);
}

#[test]
fn without_encoder_memory_is_the_raw_concatenation() {
    let mut cfg = ModelConfig::micro();
    cfg.encoder_layers = 0;
    let (model, store) = Model::init::<f32>(&cfg, 5).unwrap();
    let (image, tokens, padding) = micro_input(&cfg, 6);
    let input = ModelInput {
        image: &image,
        tokens: &tokens,
        padding: &padding,
    };
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &input).unwrap();
    let expected = [g.value(out.text).data(), g.value(out.vision).data()].concat();
    assert_eq!(g.value(out.memory).data(), &expected[..]);
    assert_eq!(g.shape(out.memory), &[8, 8]);
    assert!(out.encoder_probs.is_empty());
}

#[test]
fn padded_text_keys_get_no_attention() {
    let (model, store) = Model::init::<f32>(&ModelConfig::default(), 7).unwrap();
    let s = toy_sample();
    let pads: Vec<usize> = (0..12).filter(|&i| s.padding[i]).collect();
    assert!(!pads.is_empty());
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &s.input()).unwrap();
    // text keys sit at offset 0 of the memory and at offset 6 of the joint axis
    for (probs, offset) in out
        .encoder_probs
        .iter()
        .map(|&p| (p, 0))
        .chain(out.align_probs.iter().map(|&p| (p, 6)))
    {
        let p = g.value(probs);
        let (h, n, m) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        for hh in 0..h {
            for r in 0..n {
                for &k in &pads {
                    assert_eq!(p.data()[(hh * n + r) * m + offset + k], 0.0);
                }
            }
        }
    }
}

#[test]
fn regression_only_mode_has_unit_confidence() {
    let mut cfg = ModelConfig::micro();
    cfg.seg_queries = 0;
    let (model, store) = Model::init::<f32>(&cfg, 8).unwrap();
    let (image, tokens, padding) = micro_input(&cfg, 9);
    let input = ModelInput {
        image: &image,
        tokens: &tokens,
        padding: &padding,
    };
    let p = model.predict(&store, &input).unwrap();
    assert_eq!(p.confidence, 1.0);
    assert!(p.seg_probs.is_empty());
}

#[test]
fn seg_queries_differ_at_init() {
    let (model, store) = Model::init::<f32>(&ModelConfig::default(), 10).unwrap();
    let s = toy_sample();
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &s.input()).unwrap();
    let t = g.value(out.layers[1].seg_logits.unwrap());
    let rows: Vec<&[f32]> = t.data().chunks(64).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(d > 0.0, "queries {i} and {j} coincide");
        }
    }
}

#[test]
fn prediction_reads_the_last_layer_only() {
    let (model, store) = Model::init::<f32>(&ModelConfig::default(), 11).unwrap();
    let s = toy_sample();
    let p = model.predict(&store, &s.input()).unwrap();
    let mut g = Graph::inference();
    let out = model.forward(&mut g, &store, &s.input()).unwrap();
    assert_eq!(p, Model::prediction(&g, &out.layers[1]));
    assert_ne!(p, Model::prediction(&g, &out.layers[0]));
}

#[test]
fn confidence_threshold_rule() {
    assert!((confidence_score(&[0.9; 16]) - 0.9).abs() < 1e-12);
    assert_eq!(confidence_score(&[0.2; 16]), 0.0);
    assert!((confidence_score(&[0.35, 0.1, 0.45]) - 0.4).abs() < 1e-12);
    assert_eq!(CONFIDENCE_THRESHOLD, 0.35);
}

#[test]
fn sine_table_rows_are_distinct() {
    let t = sine_position_embedding(3, 3, 8);
    let rows: Vec<&[f64]> = t.data().chunks(8).collect();
    for i in 0..9 {
        for j in i + 1..9 {
            assert_ne!(rows[i], rows[j]);
        }
    }
}

#[test]
fn same_seed_same_parameters() {
    let (_, a) = micro(21);
    let (_, b) = micro(21);
    let (_, c) = micro(22);
    assert_eq!(a, b);
    assert_ne!(a, c);
}
