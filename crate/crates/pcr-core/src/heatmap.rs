//! Keypoint sets and their Gaussian heatmap encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CropTransform;
use crate::tensor::{Shape, Tensor};

/// COCO visibility convention: 0 unlabeled, 1 labeled but occluded,
/// 2 labeled and visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Visibility {
    Unlabeled,
    Occluded,
    Visible,
}

impl Visibility {
    pub fn from_flag(v: f64) -> Result<Self> {
        match v as i64 {
            0 => Ok(Visibility::Unlabeled),
            1 => Ok(Visibility::Occluded),
            2 => Ok(Visibility::Visible),
            other => Err(Error::invalid(
                "visibility",
                format!("flag {other} outside {{0, 1, 2}}"),
            )),
        }
    }

    pub fn flag(&self) -> u8 {
        match self {
            Visibility::Unlabeled => 0,
            Visibility::Occluded => 1,
            Visibility::Visible => 2,
        }
    }

    /// Both occluded and visible joints carry a label.
    pub fn is_labeled(&self) -> bool {
        !matches!(self, Visibility::Unlabeled)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visibility: Visibility,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, visibility: Visibility) -> Self {
        Keypoint { x, y, visibility }
    }

    pub fn unlabeled() -> Self {
        Keypoint::new(0.0, 0.0, Visibility::Unlabeled)
    }
}

/// Per-instance joint coordinates with visibility flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    joints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(joints: Vec<Keypoint>) -> Self {
        KeypointSet { joints }
    }

    pub fn unlabeled(count: usize) -> Self {
        KeypointSet {
            joints: vec![Keypoint::unlabeled(); count],
        }
    }

    /// Parses the flat `[x1, y1, v1, x2, y2, v2, ...]` layout.
    pub fn from_triplets(values: &[f64]) -> Result<Self> {
        if values.len() % 3 != 0 {
            return Err(Error::invalid(
                "keypoints",
                format!("triplet array length {} not divisible by 3", values.len()),
            ));
        }
        let mut joints = Vec::with_capacity(values.len() / 3);
        for t in values.chunks_exact(3) {
            if !t[0].is_finite() || !t[1].is_finite() {
                return Err(Error::invalid("keypoints", "non-finite coordinate"));
            }
            joints.push(Keypoint::new(t[0], t[1], Visibility::from_flag(t[2])?));
        }
        Ok(KeypointSet { joints })
    }

    pub fn triplets(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.joints.len() * 3);
        for j in &self.joints {
            out.push(j.x);
            out.push(j.y);
            out.push(f64::from(j.visibility.flag()));
        }
        out
    }

    pub fn len(&self) -> usize {
        self.joints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.joints.is_empty()
    }

    pub fn get(&self, j: usize) -> &Keypoint {
        &self.joints[j]
    }

    pub fn get_mut(&mut self, j: usize) -> &mut Keypoint {
        &mut self.joints[j]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Keypoint> {
        self.joints.iter()
    }

    pub fn labeled_count(&self) -> usize {
        self.joints.iter().filter(|j| j.visibility.is_labeled()).count()
    }
}

/// Gaussian heatmap encoding of one instance: `1 x J x H x W` maps in
/// `[0, 1]` plus one loss weight per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapTarget {
    pub maps: Tensor,
    pub weights: Vec<f64>,
}

/// Converts between keypoint coordinates and Gaussian heatmaps.
///
/// `stride` is the input-to-heatmap downsampling factor (4 for the shipped
/// models); `sigma` is in heatmap pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeatmapCodec {
    pub joints: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub stride: f64,
    pub sigma: f64,
}

impl HeatmapCodec {
    pub const DEFAULT_SIGMA: f64 = 2.0;
    pub const DEFAULT_STRIDE: f64 = 4.0;

    pub fn new(joints: usize, map_h: usize, map_w: usize, stride: f64, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::invalid("heatmap codec", format!("sigma {sigma} must be > 0")));
        }
        if stride <= 0.0 {
            return Err(Error::invalid("heatmap codec", "stride must be > 0"));
        }
        Ok(HeatmapCodec {
            joints,
            map_h,
            map_w,
            stride,
            sigma,
        })
    }

    /// Encodes a keypoint set into heatmaps.
    ///
    /// Each labeled joint becomes a Gaussian bump centered at its sub-pixel
    /// heatmap position, truncated to a `(6 sigma + 1)`-wide window around
    /// the nearest pixel and rescaled so that nearest pixel holds exactly
    /// 1.0. Unlabeled joints and joints that land outside the map get an
    /// all-zero map with weight 0.
    pub fn encode(&self, kps: &KeypointSet, transform: &CropTransform) -> Result<HeatmapTarget> {
        if kps.len() != self.joints {
            return Err(Error::ShapeMismatch {
                op: "heatmap encode",
                dim: "joints",
                expected: self.joints,
                got: kps.len(),
            });
        }
        let shape = Shape::new(1, self.joints, self.map_h, self.map_w);
        let mut maps = Tensor::zeros(shape);
        let mut weights = vec![0.0; self.joints];
        let half = (3.0 * self.sigma).floor() as isize;

        for (j, kp) in kps.iter().enumerate() {
            if !kp.visibility.is_labeled() {
                continue;
            }
            let (ix, iy) = transform.apply(kp.x, kp.y);
            let hx = ix / self.stride;
            let hy = iy / self.stride;
            let px = hx.round() as isize;
            let py = hy.round() as isize;
            if px < 0 || px >= self.map_w as isize || py < 0 || py >= self.map_h as isize {
                continue;
            }
            let denom = 2.0 * self.sigma * self.sigma;
            let peak = (-((px as f64 - hx).powi(2) + (py as f64 - hy).powi(2)) / denom).exp();
            for yy in (py - half).max(0)..=(py + half).min(self.map_h as isize - 1) {
                for xx in (px - half).max(0)..=(px + half).min(self.map_w as isize - 1) {
                    let d2 = (xx as f64 - hx).powi(2) + (yy as f64 - hy).powi(2);
                    let v = (-d2 / denom).exp() / peak;
                    *maps.at_mut(0, j, yy as usize, xx as usize) = v.min(1.0);
                }
            }
            weights[j] = 1.0;
        }
        Ok(HeatmapTarget { maps, weights })
    }

    /// Decodes heatmaps into keypoints and per-joint scores.
    ///
    /// Per joint: the argmax is shifted a quarter pixel toward the larger
    /// adjacent neighbor on each axis and mapped back through the inverse
    /// crop transform. The score is the peak value; an all-zero map scores 0.
    pub fn decode(&self, maps: &Tensor, transform: &CropTransform) -> Result<(KeypointSet, Vec<f64>)> {
        self.decode_with_refinement(maps, transform, true)
    }

    /// [`HeatmapCodec::decode`] with the quarter-pixel refinement optional;
    /// plain argmax decoding serves as the baseline it is measured against.
    pub fn decode_with_refinement(
        &self,
        maps: &Tensor,
        transform: &CropTransform,
        refine: bool,
    ) -> Result<(KeypointSet, Vec<f64>)> {
        let s = maps.shape();
        if s.n != 1 || s.c != self.joints || s.h != self.map_h || s.w != self.map_w {
            return Err(Error::ShapeMismatch {
                op: "heatmap decode",
                dim: "map extents",
                expected: Shape::new(1, self.joints, self.map_h, self.map_w).len(),
                got: s.len(),
            });
        }
        let mut joints = Vec::with_capacity(self.joints);
        let mut scores = Vec::with_capacity(self.joints);
        for j in 0..self.joints {
            let (mut px, mut py, mut peak) = (0usize, 0usize, f64::NEG_INFINITY);
            for y in 0..self.map_h {
                for x in 0..self.map_w {
                    let v = maps.at(0, j, y, x);
                    if v > peak {
                        peak = v;
                        px = x;
                        py = y;
                    }
                }
            }
            let mut hx = px as f64;
            let mut hy = py as f64;
            if refine {
                if px > 0 && px + 1 < self.map_w {
                    let diff = maps.at(0, j, py, px + 1) - maps.at(0, j, py, px - 1);
                    hx += 0.25 * quarter_shift(diff, peak);
                }
                if py > 0 && py + 1 < self.map_h {
                    let diff = maps.at(0, j, py + 1, px) - maps.at(0, j, py - 1, px);
                    hy += 0.25 * quarter_shift(diff, peak);
                }
            }
            let (img_x, img_y) = transform.apply_inverse(hx * self.stride, hy * self.stride);
            let score = peak;
            let visibility = if score > 0.0 {
                Visibility::Visible
            } else {
                Visibility::Unlabeled
            };
            joints.push(Keypoint::new(img_x, img_y, visibility));
            scores.push(score);
        }
        Ok((KeypointSet::new(joints), scores))
    }

    /// All-zero maps with every weight 1, so the loss actively penalizes any
    /// predicted activation.
    pub fn hard_negative_target(&self) -> HeatmapTarget {
        hard_negative_target(self.joints, self.map_h, self.map_w)
    }
}

/// Sign of the neighbor difference. Ties stay on the argmax pixel; the tie
/// band is relative to the peak so rounding fuzz in symmetric maps cannot
/// flip the shift.
fn quarter_shift(diff: f64, peak: f64) -> f64 {
    let tie = 1e-9 * peak.abs();
    if diff > tie {
        1.0
    } else if diff < -tie {
        -1.0
    } else {
        0.0
    }
}

/// Training target for a hard-negative crop: zero maps, full weights.
pub fn hard_negative_target(joints: usize, map_h: usize, map_w: usize) -> HeatmapTarget {
    HeatmapTarget {
        maps: Tensor::zeros(Shape::new(1, joints, map_h, map_w)),
        weights: vec![1.0; joints],
    }
}
