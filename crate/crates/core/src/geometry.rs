//! Axis-aligned boxes in continuous pixel coordinates.
//!
//! Pixel `i` covers `[i, i + 1)`, so a box `(x, y, w, h)` has center
//! `(x + w/2, y + h/2)` and a `W × H` frame has center `(W/2, H/2)`.

use serde::{Deserialize, Serialize};

use crate::tensor::rotate_point;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(center: (f64, f64), size: (f64, f64)) -> Self {
        Self::new(
            center.0 - size.0 / 2.0,
            center.1 - size.1 / 2.0,
            size.0,
            size.1,
        )
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn size(&self) -> (f64, f64) {
        (self.w, self.h)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite())
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (x1, y1) = (self.x + self.w, self.y + self.h);
        [(self.x, self.y), (x1, self.y), (x1, y1), (self.x, y1)]
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        ix.max(0.0) * iy.max(0.0)
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (a, b) = (self.center(), other.center());
        (a.0 - b.0).hypot(a.1 - b.1)
    }

    /// Clips to a `width × height` frame.
    pub fn clipped(&self, width: f64, height: f64) -> BBox {
        let x0 = self.x.clamp(0.0, width);
        let y0 = self.y.clamp(0.0, height);
        let x1 = (self.x + self.w).clamp(0.0, width);
        let y1 = (self.y + self.h).clamp(0.0, height);
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }

    /// Tight axis-aligned box around this box after rotating it
    /// counter-clockwise (on screen) by `theta` radians about `pivot`.
    pub fn rotated_enclosing(&self, pivot: (f64, f64), theta: f64) -> BBox {
        let pts = self.corners().map(|p| rotate_point(p, pivot, theta));
        let (mut x0, mut y0) = (f64::INFINITY, f64::INFINITY);
        let (mut x1, mut y1) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        BBox::new(x0, y0, x1 - x0, y1 - y0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Side of the square exemplar region: `sqrt((w + p)(h + p))` with
/// context `p = context · (w + h)`.
pub fn exemplar_extent(size: (f64, f64), context: f64) -> f64 {
    let p = context * (size.0 + size.1);
    ((size.0 + p) * (size.1 + p)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, SQRT_2};

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&BBox::new(5.0, 5.0, 1.0, 1.0)), 0.0);
        assert!((a.iou(&BBox::new(1.0, 0.0, 2.0, 2.0)) - 1.0 / 3.0).abs() < 1e-15);
        let empty = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(empty.iou(&empty), 0.0);
    }

    #[test]
    fn square_at_45_degrees_inflates_by_sqrt2() {
        let b = BBox::new(10.0, 20.0, 8.0, 8.0);
        let r = b.rotated_enclosing(b.center(), FRAC_PI_4);
        assert!((r.w - 8.0 * SQRT_2).abs() < 1e-9);
        assert!((r.h - 8.0 * SQRT_2).abs() < 1e-9);
        assert!((r.center().0 - 14.0).abs() < 1e-9 && (r.center().1 - 24.0).abs() < 1e-9);
    }

    #[test]
    fn quarter_turn_swaps_sides() {
        let b = BBox::new(3.0, 4.0, 10.0, 6.0);
        let pivot = (50.0, 40.0);
        let r = b.rotated_enclosing(pivot, FRAC_PI_2);
        let c = rotate_point(b.center(), pivot, FRAC_PI_2);
        assert!((r.w - 6.0).abs() < 1e-9 && (r.h - 10.0).abs() < 1e-9);
        assert!((r.center().0 - c.0).abs() < 1e-9 && (r.center().1 - c.1).abs() < 1e-9);
    }

    #[test]
    fn clipping() {
        let b = BBox::new(-2.0, 5.0, 10.0, 10.0).clipped(6.0, 12.0);
        assert_eq!(b, BBox::new(0.0, 5.0, 6.0, 7.0));
    }

    #[test]
    fn exemplar_extent_of_square() {
        assert!((exemplar_extent((10.0, 10.0), 0.5) - 20.0).abs() < 1e-12);
    }
}
