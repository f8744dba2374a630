//! Boxes, click points and their overlap measure.
//!
//! Coordinates are continuous pixels: pixel column `i` covers `[i, i + 1)`.

use serde::{Deserialize, Serialize};

/// Axis-aligned box given by center and extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w
    }
    pub fn x1(&self) -> f64 {
        self.cx + 0.5 * self.w
    }
    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h
    }
    pub fn y1(&self) -> f64 {
        self.cy + 0.5 * self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Whether the box lies within `[0, width] x [0, height]`, up to `tol`.
    pub fn within(&self, width: f64, height: f64, tol: f64) -> bool {
        self.x0() >= -tol && self.y0() >= -tol && self.x1() <= width + tol && self.y1() <= height + tol
    }

    /// Intersection with the rectangle `[x0, x1] x [y0, y1]`, or `None` when empty.
    pub fn clip_to(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<BBox> {
        let nx0 = self.x0().max(x0);
        let ny0 = self.y0().max(y0);
        let nx1 = self.x1().min(x1);
        let ny1 = self.y1().min(y1);
        (nx1 > nx0 && ny1 > ny0).then(|| BBox::from_corners(nx0, ny0, nx1, ny1))
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x > self.x0() && x < self.x1() && y > self.y0() && y < self.y1()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let ih = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        iw * ih
    }
}

/// A click on a query-side object, in query-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickPoint {
    pub x: f64,
    pub y: f64,
}

impl ClickPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Intersection over union; `0` for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}
