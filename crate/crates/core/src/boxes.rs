//! Axis-aligned boxes and scored detections.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, Result};

/// Axis-aligned box: top-left corner `(x, y)`, width `w`, height `h`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Rejects zero-area and non-finite boxes.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return contract_err(format!("non-finite box ({x}, {y}, {w}, {h})"));
        }
        if w <= 0.0 || h <= 0.0 {
            return contract_err(format!("degenerate box ({x}, {y}, {w}, {h}): width and height must be positive"));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    /// Multiplies every coordinate and extent by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { x: self.x * s, y: self.y * s, w: self.w * s, h: self.h * s }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn union_area(&self, other: &BBox) -> f64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &BBox) -> BBox {
        let x = self.x.min(other.x);
        let y = self.y.min(other.y);
        BBox { x, y, w: self.right().max(other.right()) - x, h: self.bottom().max(other.bottom()) - y }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        self.intersection_area(other) / self.union_area(other)
    }

    /// Clips to `[0, width] × [0, height]`, keeping a positive extent.
    pub fn clamp_to(&self, width: f64, height: f64) -> BBox {
        const MIN_EXTENT: f64 = 1e-6;
        let x0 = self.x.clamp(0.0, width - MIN_EXTENT);
        let y0 = self.y.clamp(0.0, height - MIN_EXTENT);
        let x1 = self.right().clamp(x0 + MIN_EXTENT, width);
        let y1 = self.bottom().clamp(y0 + MIN_EXTENT, height);
        BBox { x: x0, y: y0, w: x1 - x0, h: y1 - y0 }
    }
}

/// A scored, classified box. Class 0 is hyperplastic, class 1 adenomatous.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
}

impl Detection {
    pub fn new(bbox: BBox, score: f64, class_id: usize) -> Self {
        Self { bbox, score, class_id }
    }
}

/// Canonical detection order: score descending, then `x`, `y`, `w`, `h` ascending.
pub fn canonical_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.x.total_cmp(&b.bbox.x))
        .then(a.bbox.y.total_cmp(&b.bbox.y))
        .then(a.bbox.w.total_cmp(&b.bbox.w))
        .then(a.bbox.h.total_cmp(&b.bbox.h))
        .then(a.class_id.cmp(&b.class_id))
}
