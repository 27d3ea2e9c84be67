//! Boxes and the person-crop affine transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in image pixels, `(x, y)` top-left corner plus extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Intersection over union of two boxes; 0 for a degenerate union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    if ix <= 0.0 || iy <= 0.0 {
        return 0.0;
    }
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Affine map from image pixels to network-input pixels, with its inverse.
///
/// The person box is expanded to the input aspect ratio, padded by a fixed
/// factor, then scaled so its center lands on the input center.
#[derive(Debug, Clone, PartialEq)]
pub struct CropTransform {
    fwd: [f64; 6],
    inv: [f64; 6],
}

impl CropTransform {
    pub const DEFAULT_PADDING: f64 = 1.25;

    /// Builds the crop for `bbox` into an `input_w x input_h` canvas.
    pub fn for_box(bbox: &BBox, input_w: usize, input_h: usize, padding: f64) -> Result<Self> {
        if !(bbox.w > 0.0) || !(bbox.h > 0.0) {
            return Err(Error::invalid(
                "crop_transform",
                format!("degenerate box extents {}x{}", bbox.w, bbox.h),
            ));
        }
        if padding <= 0.0 {
            return Err(Error::invalid("crop_transform", "padding factor must be > 0"));
        }
        let aspect = input_w as f64 / input_h as f64;
        let (mut bw, mut bh) = (bbox.w, bbox.h);
        if bw / bh > aspect {
            bh = bw / aspect;
        } else {
            bw = bh * aspect;
        }
        let window_w = bw * padding;
        let window_h = bh * padding;
        let (cx, cy) = bbox.center();
        let sx = input_w as f64 / window_w;
        let sy = input_h as f64 / window_h;
        let tx = input_w as f64 / 2.0 - sx * cx;
        let ty = input_h as f64 / 2.0 - sy * cy;
        let fwd = [sx, 0.0, tx, 0.0, sy, ty];
        let inv = [1.0 / sx, 0.0, cx - input_w as f64 / (2.0 * sx), 0.0, 1.0 / sy, cy - input_h as f64 / (2.0 * sy)];
        Ok(CropTransform { fwd, inv })
    }

    /// Identity transform; image pixels are input pixels.
    pub fn identity() -> Self {
        CropTransform {
            fwd: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            inv: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        }
    }

    /// Composes with a horizontal mirror of the input canvas:
    /// `x -> (input_w - 1) - x`.
    pub fn then_hflip(&self, input_w: usize) -> Self {
        let w1 = input_w as f64 - 1.0;
        let fwd = [
            -self.fwd[0],
            -self.fwd[1],
            w1 - self.fwd[2],
            self.fwd[3],
            self.fwd[4],
            self.fwd[5],
        ];
        let inv = [
            -self.inv[0],
            self.inv[1],
            self.inv[0] * w1 + self.inv[2],
            -self.inv[3],
            self.inv[4],
            self.inv[3] * w1 + self.inv[5],
        ];
        CropTransform { fwd, inv }
    }

    /// Image pixel to input pixel.
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.fwd[0] * x + self.fwd[1] * y + self.fwd[2],
            self.fwd[3] * x + self.fwd[4] * y + self.fwd[5],
        )
    }

    /// Input pixel back to image pixel.
    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.inv[0] * x + self.inv[1] * y + self.inv[2],
            self.inv[3] * x + self.inv[4] * y + self.inv[5],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_identical_is_one() {
        let a = BBox::new(1.0, 2.0, 3.0, 4.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(5.0, 5.0, 1.0, 1.0);
        assert_eq!(iou(&a, &b), 0.0);
        // Touching edges do not intersect.
        let c = BBox::new(1.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &c), 0.0);
    }

    #[test]
    fn iou_half_overlapping_unit_squares() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        let b = BBox::new(0.5, 0.0, 1.0, 1.0);
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_degenerate_union_is_zero() {
        let a = BBox::new(0.0, 0.0, 0.0, 0.0);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn box_center_maps_to_input_center() {
        let b = BBox::new(10.0, 20.0, 30.0, 70.0);
        let t = CropTransform::for_box(&b, 48, 64, 1.25).unwrap();
        let (cx, cy) = b.center();
        let (ix, iy) = t.apply(cx, cy);
        assert!((ix - 24.0).abs() < 1e-9);
        assert!((iy - 32.0).abs() < 1e-9);
    }

    #[test]
    fn inverse_round_trips() {
        let b = BBox::new(3.0, 7.0, 21.0, 40.0);
        let t = CropTransform::for_box(&b, 48, 64, 1.25).unwrap();
        for i in 0..100 {
            let x = -20.0 + 1.37 * i as f64;
            let y = 90.0 - 0.61 * i as f64;
            let (ix, iy) = t.apply(x, y);
            let (bx, by) = t.apply_inverse(ix, iy);
            assert!((bx - x).abs() < 1e-9, "x: {bx} vs {x}");
            assert!((by - y).abs() < 1e-9, "y: {by} vs {y}");
        }
    }

    #[test]
    fn corner_maps_to_hand_computed_coordinate() {
        // Box 40x40 into a 48x64 input: expand height to 40/0.75 = 160/3,
        // pad by 1.25 -> window 50 x (200/3); scale = 48/50 = 0.96.
        let b = BBox::new(0.0, 0.0, 40.0, 40.0);
        let t = CropTransform::for_box(&b, 48, 64, 1.25).unwrap();
        let (ix, iy) = t.apply(0.0, 0.0);
        // x: 24 - 0.96*20 = 4.8; y: 32 - (64/(200/3))*20 = 32 - 19.2 = 12.8.
        assert!((ix - 4.8).abs() < 1e-9);
        assert!((iy - 12.8).abs() < 1e-9);
    }

    #[test]
    fn hflip_composition_mirrors_x() {
        let t = CropTransform::identity().then_hflip(48);
        assert_eq!(t.apply(0.0, 5.0), (47.0, 5.0));
        assert_eq!(t.apply(47.0, 5.0), (0.0, 5.0));
        let (x, y) = t.apply_inverse(47.0, 5.0);
        assert!((x - 0.0).abs() < 1e-12 && (y - 5.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_rejected() {
        let b = BBox::new(0.0, 0.0, 0.0, 10.0);
        assert!(CropTransform::for_box(&b, 48, 64, 1.25).is_err());
    }
}
