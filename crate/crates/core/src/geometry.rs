//! Boxes, overlap measures, and box-to-mask rasterization.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

/// Normalized center/size box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxCcwh {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Normalized corner box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoxCcwh {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// Corner form, clipped to the unit square.
    pub fn to_xyxy(&self) -> BoxXyxy {
        BoxXyxy {
            x0: (self.cx - self.w / 2.0).clamp(0.0, 1.0),
            y0: (self.cy - self.h / 2.0).clamp(0.0, 1.0),
            x1: (self.cx + self.w / 2.0).clamp(0.0, 1.0),
            y1: (self.cy + self.h / 2.0).clamp(0.0, 1.0),
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl BoxXyxy {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn to_ccwh(&self) -> BoxCcwh {
        BoxCcwh {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

/// Intersection over union; 0 for disjoint boxes or an empty union.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU on plain values.
pub fn giou(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x1.min(b.x1) - a.x0.max(b.x0)).max(0.0);
    let ih = (a.y1.min(b.y1) - a.y0.max(b.y0)).max(0.0);
    let inter = iw * ih;
    let union = (a.area() + b.area() - inter).max(AREA_FLOOR);
    let hull = ((a.x1.max(b.x1) - a.x0.min(b.x0)) * (a.y1.max(b.y1) - a.y0.min(b.y0))).max(AREA_FLOOR);
    inter / union - (hull - union) / hull
}

const AREA_FLOOR: f64 = 1e-7;

/// `1 - GIoU(pred, gt)` where `pred` is a differentiable `[4]` center/size
/// vector and `gt` a constant box.
pub fn giou_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &BoxCcwh) -> Result<Var> {
    if g.shape(pred) != [4] {
        return Err(Error::shape("giou_loss", g.shape(pred), &[4]));
    }
    let gt = gt.to_xyxy();
    let c = |g: &mut Graph<T>, i| g.slice(pred, 0, i, 1);
    let (cx, cy, w, h) = (c(g, 0)?, c(g, 1)?, c(g, 2)?, c(g, 3)?);
    let hw = g.scale(w, 0.5)?;
    let hh = g.scale(h, 0.5)?;
    let px0 = g.sub(cx, hw)?;
    let px1 = g.add(cx, hw)?;
    let py0 = g.sub(cy, hh)?;
    let py1 = g.add(cy, hh)?;

    let k = |g: &mut Graph<T>, v: f64| g.scalar(v);
    let (gx0, gy0, gx1, gy1) = (k(g, gt.x0), k(g, gt.y0), k(g, gt.x1), k(g, gt.y1));

    // intersection
    let ix0 = g.maximum(px0, gx0)?;
    let iy0 = g.maximum(py0, gy0)?;
    let ix1 = g.minimum(px1, gx1)?;
    let iy1 = g.minimum(py1, gy1)?;
    let iw = g.sub(ix1, ix0)?;
    let iw = g.clamp(iw, 0.0, f64::INFINITY)?;
    let ih = g.sub(iy1, iy0)?;
    let ih = g.clamp(ih, 0.0, f64::INFINITY)?;
    let inter = g.mul(iw, ih)?;

    let pred_area = g.mul(w, h)?;
    let union = g.add_scalar(pred_area, gt.area())?;
    let union = g.sub(union, inter)?;
    let union = g.clamp(union, AREA_FLOOR, f64::INFINITY)?;

    // enclosing hull
    let hx0 = g.minimum(px0, gx0)?;
    let hy0 = g.minimum(py0, gy0)?;
    let hx1 = g.maximum(px1, gx1)?;
    let hy1 = g.maximum(py1, gy1)?;
    let hw = g.sub(hx1, hx0)?;
    let hh = g.sub(hy1, hy0)?;
    let hull = g.mul(hw, hh)?;
    let hull = g.clamp(hull, AREA_FLOOR, f64::INFINITY)?;

    let iou = g.div(inter, union)?;
    let gap = g.sub(hull, union)?;
    let gap = g.div(gap, hull)?;
    let giou = g.sub(iou, gap)?;
    let loss = g.neg(giou)?;
    let loss = g.add_scalar(loss, 1.0)?;
    g.reshape(loss, &[])
}

/// Binary foreground mask over a `height x width` grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegTarget {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<u8>,
}

impl SegTarget {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| (m == 1).then_some(i))
            .collect()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&m| f64::from(m)).collect()
    }
}

/// Rasterizes a box onto the feature grid: a cell is foreground iff its
/// center lies inside the closed box. If no center is covered, the cell
/// nearest the box center is marked instead.
pub fn bbox2seg(gt: &BoxCcwh, height: usize, width: usize) -> Result<SegTarget> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("bbox2seg", "grid extents must be >= 1"));
    }
    let b = gt.to_xyxy();
    let mut mask = vec![0u8; height * width];
    for i in 0..height {
        let y = (i as f64 + 0.5) / height as f64;
        if y < b.y0 || y > b.y1 {
            continue;
        }
        for j in 0..width {
            let x = (j as f64 + 0.5) / width as f64;
            if x >= b.x0 && x <= b.x1 {
                mask[i * width + j] = 1;
            }
        }
    }
    if mask.iter().all(|&m| m == 0) {
        let c = b.to_ccwh();
        let i = ((c.cy * height as f64).floor() as usize).min(height - 1);
        let j = ((c.cx * width as f64).floor() as usize).min(width - 1);
        mask[i * width + j] = 1;
    }
    Ok(SegTarget {
        height,
        width,
        mask,
    })
}

/// Writes probabilities in `[0, 1]` as a plain-text (P2) PGM scaled to 0..=255.
pub fn write_pgm(path: &Path, height: usize, width: usize, probs: &[f64]) -> Result<()> {
    if probs.len() != height * width {
        return Err(Error::invalid(
            "write_pgm",
            format!("{} values for a {height}x{width} image", probs.len()),
        ));
    }
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in probs.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|p| ((p.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
