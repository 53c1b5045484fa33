//! Axis-aligned boxes in screenshot pixel coordinates.

use serde::{Deserialize, Serialize};

/// Default screenshot side in CSS pixels.
pub const VIEWPORT_SIDE: u32 = 1280;

/// `(x, y, w, h)` in screenshot pixels. Fractional values are kept as-is.
///
/// Serialized as a four-element JSON array `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }

    /// True when the box has no overlap with `[0, width) x [0, height)`.
    pub fn outside(&self, width: f64, height: f64) -> bool {
        self.x >= width || self.y >= height || self.right() <= 0.0 || self.bottom() <= 0.0
    }

    /// Intersection with the viewport rectangle. Boxes fully outside collapse to zero size.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = self.right().clamp(0.0, width);
        let y1 = self.bottom().clamp(0.0, height);
        BBox {
            x: x0,
            y: y0,
            w: (x1 - x0).max(0.0),
            h: (y1 - y0).max(0.0),
        }
    }

    /// Raw positional vector `[x, y, w, h, w/h]`; `w/h` is 0 when `h` is 0.
    pub fn raw_features(&self) -> [f64; 5] {
        let ratio = if self.h > 0.0 { self.w / self.h } else { 0.0 };
        [self.x, self.y, self.w, self.h, ratio]
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x >= self.x
            && other.y >= self.y
            && other.right() <= self.right()
            && other.bottom() <= self.bottom()
    }
}
