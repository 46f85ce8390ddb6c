//! Procedural scenes of colored shapes and the referring expressions that
//! single out one of them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BoxCcwh, BoxXyxy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl Color {
    pub const ALL: [Color; 6] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Yellow,
        Color::Magenta,
        Color::Cyan,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

/// An object occupying the `size x size` pixel square at `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub size: usize,
    pub x: usize,
    pub y: usize,
}

impl SceneObject {
    /// Whether the pixel with top-left corner `(px, py)` is painted.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        if px < self.x || py < self.y || px >= self.x + self.size || py >= self.y + self.size {
            return false;
        }
        let s = self.size as f64;
        let u = (px - self.x) as f64 + 0.5;
        let v = (py - self.y) as f64 + 0.5;
        match self.shape {
            Shape::Square => true,
            Shape::Circle => {
                let r = s / 2.0;
                (u - r).powi(2) + (v - r).powi(2) <= r * r
            }
            // apex at the top center, base along the bottom edge
            Shape::Triangle => (u - s / 2.0).abs() <= (v + 0.5) / 2.0,
        }
    }

    /// Pixel extent of the painted area as `(x0, y0, x1, y1)`, exclusive end.
    pub fn painted_extent(&self) -> (usize, usize, usize, usize) {
        let mut ext = (usize::MAX, usize::MAX, 0, 0);
        for py in self.y..self.y + self.size {
            for px in self.x..self.x + self.size {
                if self.covers(px, py) {
                    ext.0 = ext.0.min(px);
                    ext.1 = ext.1.min(py);
                    ext.2 = ext.2.max(px + 1);
                    ext.3 = ext.3.max(py + 1);
                }
            }
        }
        ext
    }

    fn disjoint(&self, other: &SceneObject, gap: usize) -> bool {
        self.x + self.size + gap <= other.x
            || other.x + other.size + gap <= self.x
            || self.y + self.size + gap <= other.y
            || other.y + other.size + gap <= self.y
    }
}

/// Referring-expression templates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expression {
    /// `<color> <shape>`
    Attribute { color: Color, shape: Shape },
    /// `<shape> left of <color> <shape>`: the only object of `shape` lying
    /// entirely left of the anchor.
    LeftOf {
        shape: Shape,
        anchor_color: Color,
        anchor_shape: Shape,
    },
    /// `largest <shape>`
    Largest { shape: Shape },
}

impl Expression {
    pub fn text(&self) -> String {
        match self {
            Expression::Attribute { color, shape } => format!("{} {}", color.word(), shape.word()),
            Expression::LeftOf {
                shape,
                anchor_color,
                anchor_shape,
            } => format!(
                "{} left of {} {}",
                shape.word(),
                anchor_color.word(),
                anchor_shape.word()
            ),
            Expression::Largest { shape } => format!("largest {}", shape.word()),
        }
    }

    /// Indices of the objects the expression denotes.
    pub fn resolve(&self, objects: &[SceneObject]) -> Vec<usize> {
        let idx = |f: &dyn Fn(&SceneObject) -> bool| -> Vec<usize> {
            objects.iter().enumerate().filter(|(_, o)| f(o)).map(|(i, _)| i).collect()
        };
        match *self {
            Expression::Attribute { color, shape } => idx(&|o| o.color == color && o.shape == shape),
            Expression::LeftOf {
                shape,
                anchor_color,
                anchor_shape,
            } => {
                let anchors = idx(&|o| o.color == anchor_color && o.shape == anchor_shape);
                let [a] = anchors[..] else {
                    return Vec::new();
                };
                let anchor = objects[a];
                objects
                    .iter()
                    .enumerate()
                    .filter(|&(i, o)| i != a && o.shape == shape && o.x + o.size <= anchor.x)
                    .map(|(i, _)| i)
                    .collect()
            }
            Expression::Largest { shape } => {
                let same = idx(&|o| o.shape == shape);
                let Some(max) = same.iter().map(|&i| objects[i].size).max() else {
                    return Vec::new();
                };
                same.into_iter().filter(|&i| objects[i].size == max).collect()
            }
        }
    }
}

/// Scene generation limits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side in pixels.
    pub min_size: usize,
    pub max_size: usize,
    /// Minimum side difference between the largest object of a shape and
    /// the runner-up, for the comparative template.
    pub size_margin: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 4,
            min_size: 10,
            max_size: 22,
            size_margin: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// `[height, width]` in pixels.
    pub canvas: [usize; 2],
    pub objects: Vec<SceneObject>,
    pub referent: usize,
    pub expression: Expression,
    /// Another object shares the referent's shape or color.
    pub distractor: bool,
}

impl SceneSpec {
    /// Range of horizontal and vertical shifts that keep every object
    /// inside the one-pixel margin: `([dx_min, dx_max], [dy_min, dy_max])`.
    pub fn shift_range(&self) -> ([isize; 2], [isize; 2]) {
        let [h, w] = self.canvas;
        let (mut x, mut y) = ([isize::MIN, isize::MAX], [isize::MIN, isize::MAX]);
        for o in &self.objects {
            x[0] = x[0].max(1 - o.x as isize);
            x[1] = x[1].min(w as isize - 1 - (o.x + o.size) as isize);
            y[0] = y[0].max(1 - o.y as isize);
            y[1] = y[1].min(h as isize - 1 - (o.y + o.size) as isize);
        }
        (x, y)
    }

    /// The scene moved by `(dx, dy)` pixels; `None` outside
    /// [`shift_range`](Self::shift_range).
    pub fn translated(&self, dx: isize, dy: isize) -> Option<Self> {
        let ([x0, x1], [y0, y1]) = self.shift_range();
        if dx < x0 || dx > x1 || dy < y0 || dy > y1 {
            return None;
        }
        let mut out = self.clone();
        for o in &mut out.objects {
            o.x = (o.x as isize + dx) as usize;
            o.y = (o.y as isize + dy) as usize;
        }
        Some(out)
    }

    pub fn text(&self) -> String {
        self.expression.text()
    }

    /// Normalized box of the referent's painted pixels.
    pub fn gt_box(&self) -> BoxCcwh {
        let (x0, y0, x1, y1) = self.objects[self.referent].painted_extent();
        let [h, w] = self.canvas;
        BoxXyxy::new(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            x1 as f64 / w as f64,
            y1 as f64 / h as f64,
        )
        .to_ccwh()
    }

    /// `[3, height, width]` rendering on a black background.
    pub fn render(&self) -> Tensor<f32> {
        let [h, w] = self.canvas;
        let mut data = vec![0.0f32; 3 * h * w];
        for o in &self.objects {
            let rgb = o.color.rgb();
            for py in o.y..(o.y + o.size).min(h) {
                for px in o.x..(o.x + o.size).min(w) {
                    if o.covers(px, py) {
                        for (c, v) in rgb.iter().enumerate() {
                            data[(c * h + py) * w + px] = *v;
                        }
                    }
                }
            }
        }
        Tensor::new(&[3, h, w], data).expect("consistent extents")
    }
}

const PLACEMENT_TRIES: usize = 64;

fn place_objects(rng: &mut impl Rng, canvas: [usize; 2], cfg: &SceneConfig) -> Option<Vec<SceneObject>> {
    let n = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
    for _ in 0..n {
        let shape = *Shape::ALL.choose(rng).expect("non-empty");
        let color = *Color::ALL.choose(rng).expect("non-empty");
        let size = rng.gen_range(cfg.min_size..=cfg.max_size);
        let placed = (0..PLACEMENT_TRIES).find_map(|_| {
            // one-pixel margin keeps every box strictly inside the canvas
            let x = rng.gen_range(1..=canvas[1] - size - 1);
            let y = rng.gen_range(1..=canvas[0] - size - 1);
            let o = SceneObject {
                shape,
                color,
                size,
                x,
                y,
            };
            objects.iter().all(|p| p.disjoint(&o, 1)).then_some(o)
        })?;
        objects.push(placed);
    }
    Some(objects)
}

fn has_distractor(objects: &[SceneObject], referent: usize) -> bool {
    let r = objects[referent];
    objects
        .iter()
        .enumerate()
        .any(|(i, o)| i != referent && (o.shape == r.shape || o.color == r.color))
}

/// Every expression of the given template kind that denotes exactly one
/// object with a distractor, paired with that object.
fn candidates(objects: &[SceneObject], kind: usize, cfg: &SceneConfig) -> Vec<(Expression, usize)> {
    let mut exprs = Vec::new();
    match kind {
        0 => {
            for o in objects {
                exprs.push(Expression::Attribute {
                    color: o.color,
                    shape: o.shape,
                });
            }
        }
        1 => {
            for a in objects {
                for s in Shape::ALL {
                    exprs.push(Expression::LeftOf {
                        shape: s,
                        anchor_color: a.color,
                        anchor_shape: a.shape,
                    });
                }
            }
        }
        _ => {
            for s in Shape::ALL {
                let mut sizes: Vec<usize> = objects.iter().filter(|o| o.shape == s).map(|o| o.size).collect();
                sizes.sort_unstable_by(|a, b| b.cmp(a));
                if sizes.len() >= 2 && sizes[0] >= sizes[1] + cfg.size_margin {
                    exprs.push(Expression::Largest { shape: s });
                }
            }
        }
    }
    exprs.dedup();
    exprs
        .into_iter()
        .filter_map(|e| match e.resolve(objects)[..] {
            [r] if has_distractor(objects, r) => Some((e, r)),
            _ => None,
        })
        .collect()
}

/// Draws scenes until one admits an unambiguous expression of a randomly
/// chosen template.
pub fn generate_scene(rng: &mut impl Rng, canvas: [usize; 2], cfg: &SceneConfig) -> SceneSpec {
    let kind = rng.gen_range(0..3);
    loop {
        let Some(objects) = place_objects(rng, canvas, cfg) else {
            continue;
        };
        let options = candidates(&objects, kind, cfg);
        if let Some(&(expression, referent)) = options.choose(rng) {
            let distractor = has_distractor(&objects, referent);
            return SceneSpec {
                canvas,
                objects,
                referent,
                expression,
                distractor,
            };
        }
    }
}
