//! Synthetic grounding data: scenes, expressions, tokens, and on-disk
//! persistence.

pub mod scene;
pub mod text;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxCcwh;
use crate::model::ModelInput;
use crate::tensor::rng::SeedTree;
use crate::tensor::Tensor;

pub use scene::{Color, Expression, SceneConfig, SceneObject, SceneSpec, Shape};
pub use text::{detokenize, tokenize, CLS_ID, FIRST_WORD_ID, PAD_ID, SEP_ID, WORDS};

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingSample {
    pub scene: SceneSpec,
    /// `[3, height, width]` in `[0, 1]`.
    pub image: Tensor<f32>,
    pub text: String,
    pub tokens: Vec<usize>,
    /// `true` at padding positions.
    pub padding: Vec<bool>,
    pub gt_box: BoxCcwh,
}

impl GroundingSample {
    pub fn from_scene(scene: SceneSpec, text_len: usize) -> Result<Self> {
        let text = scene.text();
        let (tokens, padding) = tokenize(&text, text_len)?;
        Ok(Self {
            image: scene.render(),
            gt_box: scene.gt_box(),
            text,
            tokens,
            padding,
            scene,
        })
    }

    /// The same sample with the whole scene shifted by up to `max_shift`
    /// pixels per axis, clamped so every object stays on the canvas.
    /// Positions change, relations and the referent do not.
    pub fn shifted(&self, max_shift: usize, rng: &mut impl Rng) -> Result<Self> {
        let m = max_shift as isize;
        let ([x0, x1], [y0, y1]) = self.scene.shift_range();
        let dx = rng.gen_range(x0.max(-m)..=x1.min(m));
        let dy = rng.gen_range(y0.max(-m)..=y1.min(m));
        let scene = self
            .scene
            .translated(dx, dy)
            .ok_or_else(|| Error::Data("shift outside the canvas".into()))?;
        Ok(Self {
            image: scene.render(),
            gt_box: scene.gt_box(),
            text: self.text.clone(),
            tokens: self.tokens.clone(),
            padding: self.padding.clone(),
            scene,
        })
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            image: &self.image,
            tokens: &self.tokens,
            padding: &self.padding,
        }
    }
}

/// Deterministic dataset: sample `i` draws only from the stream
/// `seed / "scene" / i`.
pub fn generate_dataset(
    seed: u64,
    n: usize,
    canvas: [usize; 2],
    text_len: usize,
    cfg: &SceneConfig,
) -> Result<Vec<GroundingSample>> {
    if n == 0 {
        return Err(Error::Data("dataset size must be >= 1".into()));
    }
    if cfg.min_objects < 2 || cfg.min_objects > cfg.max_objects {
        return Err(Error::Data(format!(
            "object count range {}..={} must start at 2 or more",
            cfg.min_objects, cfg.max_objects
        )));
    }
    if cfg.min_size == 0 || cfg.min_size > cfg.max_size || cfg.max_size + 2 > canvas[0].min(canvas[1]) {
        return Err(Error::Data(format!(
            "object sizes {}..={} do not fit a {:?} canvas",
            cfg.min_size, cfg.max_size, canvas
        )));
    }
    if cfg.size_margin > cfg.max_size - cfg.min_size {
        return Err(Error::Data(format!(
            "size_margin {} exceeds the size range {}..={}",
            cfg.size_margin, cfg.min_size, cfg.max_size
        )));
    }
    let root = SeedTree::new(seed).split("scene");
    (0..n)
        .map(|i| {
            let mut rng = root.index(i as u64).rng();
            GroundingSample::from_scene(scene::generate_scene(&mut rng, canvas, cfg), text_len)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    scene: SceneSpec,
    text: String,
    gt_box: BoxCcwh,
}

#[derive(Serialize, Deserialize)]
struct Index {
    text_len: usize,
    canvas: [usize; 2],
    samples: Vec<IndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";
pub const IMAGES_FILE: &str = "images.f32";

/// Writes `index.json` (scenes, texts, boxes) and `images.f32` (all images
/// back to back, little-endian `[3, height, width]` each).
pub fn save_dataset(dir: &Path, samples: &[GroundingSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("refusing to save an empty dataset".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let index = Index {
        text_len: first.tokens.len(),
        canvas: first.scene.canvas,
        samples: samples
            .iter()
            .map(|s| IndexEntry {
                scene: s.scene.clone(),
                text: s.text.clone(),
                gt_box: s.gt_box,
            })
            .collect(),
    };
    let path = dir.join(INDEX_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    let mut blob = Vec::with_capacity(samples.len() * first.image.numel() * 4);
    for s in samples {
        for v in s.image.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = dir.join(IMAGES_FILE);
    fs::write(&path, blob).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<GroundingSample>> {
    let path = dir.join(INDEX_FILE);
    let index: Index = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
    let path = dir.join(IMAGES_FILE);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let [h, w] = index.canvas;
    let per = 3 * h * w;
    if blob.len() != index.samples.len() * per * 4 {
        return Err(Error::Data(format!(
            "{IMAGES_FILE} holds {} bytes, index expects {}",
            blob.len(),
            index.samples.len() * per * 4
        )));
    }
    index
        .samples
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let data = blob[i * per * 4..(i + 1) * per * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let (tokens, padding) = tokenize(&e.text, index.text_len)?;
            Ok(GroundingSample {
                image: Tensor::new(&[3, h, w], data)?,
                text: e.text,
                tokens,
                padding,
                gt_box: e.gt_box,
                scene: e.scene,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> Vec<GroundingSample> {
        generate_dataset(seed, n, [64, 64], 12, &SceneConfig::default()).unwrap()
    }

    /// Independent reading of the expression text against the scene.
    fn brute_force_matches(text: &str, objects: &[SceneObject]) -> Vec<usize> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let shape_of = |w: &str| Shape::ALL.into_iter().find(|s| s.word() == w).unwrap();
        let color_of = |w: &str| Color::ALL.into_iter().find(|c| c.word() == w).unwrap();
        match words[..] {
            ["largest", s] => {
                let s = shape_of(s);
                (0..objects.len())
                    .filter(|&i| {
                        objects[i].shape == s
                            && objects
                                .iter()
                                .enumerate()
                                .all(|(j, o)| j == i || o.shape != s || o.size < objects[i].size)
                    })
                    .collect()
            }
            [c, s] => (0..objects.len())
                .filter(|&i| objects[i].color == color_of(c) && objects[i].shape == shape_of(s))
                .collect(),
            [s, "left", "of", ac, ash] => {
                let anchors: Vec<usize> = (0..objects.len())
                    .filter(|&i| objects[i].color == color_of(ac) && objects[i].shape == shape_of(ash))
                    .collect();
                if anchors.len() != 1 {
                    return Vec::new();
                }
                let a = objects[anchors[0]];
                (0..objects.len())
                    .filter(|&i| {
                        i != anchors[0]
                            && objects[i].shape == shape_of(s)
                            && objects[i].x + objects[i].size <= a.x
                    })
                    .collect()
            }
            _ => panic!("unexpected text {text}"),
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(5, 20), small(5, 20));
        assert_ne!(small(5, 20), small(6, 20));
    }

    #[test]
    fn every_expression_has_exactly_one_referent() {
        for s in small(11, 300) {
            let hits = brute_force_matches(&s.text, &s.scene.objects);
            assert_eq!(hits, vec![s.scene.referent], "{}", s.text);
        }
    }

    #[test]
    fn scenes_respect_layout_constraints() {
        let data = small(12, 300);
        let mut kinds = [0usize; 3];
        for s in &data {
            let b = s.gt_box.to_xyxy();
            assert!(b.x0 > 0.0 && b.y0 > 0.0 && b.x1 < 1.0 && b.y1 < 1.0);
            assert!((2..=4).contains(&s.scene.objects.len()));
            assert!(s.scene.distractor);
            for (i, a) in s.scene.objects.iter().enumerate() {
                for o in &s.scene.objects[i + 1..] {
                    let (ba, bo) = (extent_box(a), extent_box(o));
                    assert!(crate::geometry::iou(&ba, &bo) < 0.1);
                }
            }
            let k = match s.scene.expression {
                Expression::Attribute { .. } => 0,
                Expression::LeftOf { .. } => 1,
                Expression::Largest { .. } => 2,
            };
            kinds[k] += 1;
        }
        assert!(kinds.iter().all(|&k| k > 50), "{kinds:?}");
    }

    fn extent_box(o: &SceneObject) -> crate::geometry::BoxXyxy {
        crate::geometry::BoxXyxy::new(o.x as f64, o.y as f64, (o.x + o.size) as f64, (o.y + o.size) as f64)
    }

    #[test]
    fn gt_box_matches_rendered_pixels() {
        for s in small(13, 50) {
            let [h, w] = s.scene.canvas;
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
            let r = s.scene.objects[s.scene.referent];
            let rgb = r.color.rgb();
            for py in r.y..r.y + r.size {
                for px in r.x..r.x + r.size {
                    let lit = (0..3).all(|c| s.image.at(&[c, py, px]) == rgb[c]);
                    if lit {
                        x0 = x0.min(px);
                        y0 = y0.min(py);
                        x1 = x1.max(px + 1);
                        y1 = y1.max(py + 1);
                    }
                }
            }
            let b = s.gt_box.to_xyxy();
            let px = 1.0 / w as f64;
            assert!((b.x0 - x0 as f64 * px).abs() <= px);
            assert!((b.x1 - x1 as f64 * px).abs() <= px);
            assert!((b.y0 - y0 as f64 / h as f64).abs() <= px);
            assert!((b.y1 - y1 as f64 / h as f64).abs() <= px);
        }
    }

    #[test]
    fn shifted_samples_keep_referent_and_move_the_box() {
        let mut rng = SeedTree::new(3).rng();
        for s in small(15, 100) {
            let t = s.shifted(4, &mut rng).unwrap();
            assert_eq!(brute_force_matches(&t.text, &t.scene.objects), vec![t.scene.referent]);
            let [h, w] = s.scene.canvas;
            let (a, b) = (s.scene.objects[0], t.scene.objects[0]);
            let (dx, dy) = (b.x as f64 - a.x as f64, b.y as f64 - a.y as f64);
            assert!(dx.abs() <= 4.0 && dy.abs() <= 4.0);
            let (g0, g1) = (s.gt_box.to_xyxy(), t.gt_box.to_xyxy());
            assert!((g1.x0 - g0.x0 - dx / w as f64).abs() < 1e-12);
            assert!((g1.y1 - g0.y1 - dy / h as f64).abs() < 1e-12);
            assert!(g1.x0 > 0.0 && g1.y0 > 0.0 && g1.x1 < 1.0 && g1.y1 < 1.0);
            assert_eq!(t.tokens, s.tokens);
        }
    }

    #[test]
    fn translation_outside_the_margin_is_rejected() {
        let s = &small(16, 1)[0];
        let ([_, x1], _) = s.scene.shift_range();
        assert!(s.scene.translated(x1 + 1, 0).is_none());
        assert!(s.scene.translated(x1, 0).is_some());
        assert_eq!(s.scene.translated(0, 0).as_ref(), Some(&s.scene));
    }

    #[test]
    fn persistence_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = small(14, 7);
        save_dataset(dir.path(), &data).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
    }

    #[test]
    fn empty_dataset_and_unsatisfiable_configs_are_rejected() {
        assert!(generate_dataset(0, 0, [64, 64], 12, &SceneConfig::default()).is_err());
        let narrow = SceneConfig {
            min_size: 10,
            max_size: 12,
            ..SceneConfig::default()
        };
        assert!(generate_dataset(0, 4, [64, 64], 12, &narrow).is_err());
    }
}
