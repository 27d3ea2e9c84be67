//! OKS metric, OKS-based non-maximum suppression, and COCO-protocol AP/AR.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heatmap::{KeypointSet, Visibility};

pub use crate::geometry::iou;

/// A person bounding box produced by a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonDetection {
    pub image_id: i64,
    pub bbox: BBox,
    pub score: f64,
}

/// Decoded keypoints plus scores for one person instance. Serialized as the
/// COCO results convention: keypoints flattened `[x1, y1, s1, ...]` with the
/// per-joint score in the third slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseResult {
    pub image_id: i64,
    pub keypoints: KeypointSet,
    pub joint_scores: Vec<f64>,
    pub score: f64,
}

impl PoseResult {
    pub fn to_json_value(&self) -> PoseResultJson {
        let mut keypoints = Vec::with_capacity(self.keypoints.len() * 3);
        for (kp, &s) in self.keypoints.iter().zip(&self.joint_scores) {
            keypoints.push(kp.x);
            keypoints.push(kp.y);
            keypoints.push(s);
        }
        PoseResultJson {
            image_id: self.image_id,
            keypoints,
            score: self.score,
        }
    }
}

/// Serializable mirror of [`PoseResult`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseResultJson {
    pub image_id: i64,
    pub keypoints: Vec<f64>,
    pub score: f64,
}

impl PoseResultJson {
    /// Joints with a positive score count as labeled; the rest are treated as
    /// absent predictions.
    pub fn into_pose_result(self, index: usize) -> Result<PoseResult> {
        if self.keypoints.len() % 3 != 0 {
            return Err(Error::Record {
                index,
                msg: format!("keypoint array length {} not divisible by 3", self.keypoints.len()),
            });
        }
        if !self.score.is_finite() {
            return Err(Error::Record {
                index,
                msg: format!("non-finite instance score {}", self.score),
            });
        }
        let mut joints = Vec::with_capacity(self.keypoints.len() / 3);
        let mut joint_scores = Vec::with_capacity(self.keypoints.len() / 3);
        for t in self.keypoints.chunks_exact(3) {
            let v = if t[2] > 0.0 {
                Visibility::Visible
            } else {
                Visibility::Unlabeled
            };
            joints.push(crate::heatmap::Keypoint::new(t[0], t[1], v));
            joint_scores.push(t[2]);
        }
        Ok(PoseResult {
            image_id: self.image_id,
            keypoints: KeypointSet::new(joints),
            joint_scores,
            score: self.score,
        })
    }
}

pub fn results_to_json(results: &[PoseResult]) -> Vec<PoseResultJson> {
    results.iter().map(|r| r.to_json_value()).collect()
}

pub fn results_from_json(values: Vec<PoseResultJson>) -> Result<Vec<PoseResult>> {
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.into_pose_result(i))
        .collect()
}

/// Per-joint falloff constants, OKS threshold grid, and the area ranges for
/// the medium/large splits.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Per-joint falloff; the COCO convention stores twice the per-joint
    /// sigma here.
    pub kappas: Vec<f64>,
    /// The ten thresholds 0.50, 0.55, ..., 0.95.
    pub oks_thresholds: Vec<f64>,
    /// Medium instances: area in `[medium_area.0, medium_area.1)`.
    pub medium_area: (f64, f64),
    /// Large instances: area `>= large_area_min`.
    pub large_area_min: f64,
}

impl EvalConfig {
    /// The published 17-joint COCO constants (twice the per-joint sigmas).
    pub fn coco17() -> Self {
        let sigmas = [
            0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
            0.107, 0.087, 0.087, 0.089, 0.089,
        ];
        EvalConfig {
            kappas: sigmas.iter().map(|s| 2.0 * s).collect(),
            ..EvalConfig::uniform(0)
        }
    }

    /// Unit falloff for every joint; handy for tests and toy data.
    pub fn uniform(joints: usize) -> Self {
        EvalConfig {
            kappas: vec![1.0; joints],
            oks_thresholds: (0..10).map(|i| 0.50 + 0.05 * i as f64).collect(),
            medium_area: (32.0 * 32.0, 96.0 * 96.0),
            large_area_min: 96.0 * 96.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.oks_thresholds.len() != 10 {
            return Err(Error::Config(format!(
                "expected 10 OKS thresholds, got {}",
                self.oks_thresholds.len()
            )));
        }
        if self.kappas.iter().any(|&k| !(k > 0.0)) {
            return Err(Error::Config("every OKS falloff constant must be > 0".into()));
        }
        Ok(())
    }
}

/// Object keypoint similarity between a predicted and a ground-truth keypoint
/// set: the mean over labeled ground-truth joints of
/// `exp(-d^2 / (2 * s^2 * kappa^2))` with `s^2` the instance area.
pub fn oks(pred: &KeypointSet, gt: &KeypointSet, gt_area: f64, cfg: &EvalConfig) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            op: "oks",
            dim: "joints",
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if gt.len() > cfg.kappas.len() {
        return Err(Error::ShapeMismatch {
            op: "oks",
            dim: "falloff constants",
            expected: gt.len(),
            got: cfg.kappas.len(),
        });
    }
    let s2 = gt_area + f64::EPSILON;
    let mut acc = 0.0;
    let mut labeled = 0usize;
    for j in 0..gt.len() {
        let g = gt.get(j);
        if !g.visibility.is_labeled() {
            continue;
        }
        let p = pred.get(j);
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        let kappa = cfg.kappas[j];
        acc += (-d2 / (2.0 * s2 * kappa * kappa)).exp();
        labeled += 1;
    }
    if labeled == 0 {
        return Err(Error::UndefinedOks);
    }
    Ok(acc / labeled as f64)
}

/// Tight box over the labeled joints of a pose; the area surrogate used when
/// suppressing pose detections against each other.
pub fn keypoint_area(kps: &KeypointSet) -> f64 {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut any = false;
    for kp in kps.iter() {
        if kp.visibility.is_labeled() {
            any = true;
            min_x = min_x.min(kp.x);
            max_x = max_x.max(kp.x);
            min_y = min_y.min(kp.y);
            max_y = max_y.max(kp.y);
        }
    }
    if !any {
        return 0.0;
    }
    (max_x - min_x) * (max_y - min_y)
}

/// OKS of a candidate pose against an already-kept pose. The kept pose plays
/// the ground-truth role and supplies the area surrogate; a kept pose with no
/// labeled joints suppresses nothing.
fn oks_against_kept(candidate: &PoseResult, kept: &PoseResult, cfg: &EvalConfig) -> f64 {
    oks(
        &candidate.keypoints,
        &kept.keypoints,
        keypoint_area(&kept.keypoints),
        cfg,
    )
    .unwrap_or(0.0)
}

/// Greedy OKS-based non-maximum suppression. Returns the indices of kept
/// results: taken in instance-score order (ties keep input order), a result
/// survives iff its OKS with every already-kept result of the same image is
/// at or below the threshold.
pub fn oks_nms_indices(results: &[PoseResult], threshold: f64, cfg: &EvalConfig) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::invalid(
            "oks_nms",
            format!("threshold {threshold} outside (0, 1]"),
        ));
    }
    let mut order: Vec<usize> = (0..results.len()).collect();
    order.sort_by(|&a, &b| {
        results[b]
            .score
            .partial_cmp(&results[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            results[k].image_id == results[i].image_id
                && oks_against_kept(&results[i], &results[k], cfg) > threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// [`oks_nms_indices`], materialized. Kept results preserve their relative
/// input order.
pub fn oks_nms(results: &[PoseResult], threshold: f64, cfg: &EvalConfig) -> Result<Vec<PoseResult>> {
    Ok(oks_nms_indices(results, threshold, cfg)?
        .into_iter()
        .map(|i| results[i].clone())
        .collect())
}

/// One ground-truth instance for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: i64,
    pub keypoints: KeypointSet,
    pub area: f64,
}

/// The summary row: mean AP over the ten OKS thresholds, the two fixed
/// thresholds, the area splits, and mean recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    pub ar: f64,
}

#[derive(Clone, Copy, PartialEq)]
enum AreaRange {
    All,
    Medium,
    Large,
}

impl AreaRange {
    fn ignores(&self, area: f64, cfg: &EvalConfig) -> bool {
        match self {
            AreaRange::All => false,
            AreaRange::Medium => !(area >= cfg.medium_area.0 && area < cfg.medium_area.1),
            AreaRange::Large => area < cfg.large_area_min,
        }
    }
}

/// COCO-protocol evaluation.
///
/// Per image and threshold, predictions are taken in score order and each
/// greedily claims the unmatched ground truth with the highest OKS at or
/// above the threshold, preferring ground truths inside the area range over
/// ignored ones. Predictions matched to an ignored ground truth are excluded
/// from precision/recall; every other unmatched prediction counts as a false
/// positive. AP interpolates precision at 101 recall points and averages over
/// the ten thresholds; empty sets yield 0.
pub fn evaluate_ap(
    results: &[PoseResult],
    gt: &[GroundTruthInstance],
    cfg: &EvalConfig,
) -> Result<Metrics> {
    cfg.validate()?;

    // Ground truths with no labeled joints are skipped outright.
    let gt: Vec<&GroundTruthInstance> = gt
        .iter()
        .filter(|g| g.keypoints.labeled_count() > 0)
        .collect();

    let mut image_ids: Vec<i64> = gt
        .iter()
        .map(|g| g.image_id)
        .chain(results.iter().map(|r| r.image_id))
        .collect();
    image_ids.sort_unstable();
    image_ids.dedup();

    // Per-image OKS matrices, computed once and shared across thresholds.
    struct ImageEval<'a> {
        preds: Vec<(usize, &'a PoseResult)>,
        gts: Vec<&'a GroundTruthInstance>,
        oks: Vec<Vec<f64>>,
    }
    let mut images = Vec::new();
    for &id in &image_ids {
        let mut preds: Vec<(usize, &PoseResult)> = results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.image_id == id)
            .collect();
        preds.sort_by(|a, b| {
            b.1.score
                .partial_cmp(&a.1.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let gts: Vec<&GroundTruthInstance> =
            gt.iter().copied().filter(|g| g.image_id == id).collect();
        let mut oks_matrix = vec![vec![0.0; gts.len()]; preds.len()];
        for (pi, (_, p)) in preds.iter().enumerate() {
            for (gi, g) in gts.iter().enumerate() {
                oks_matrix[pi][gi] = oks(&p.keypoints, &g.keypoints, g.area, cfg)?;
            }
        }
        images.push(ImageEval {
            preds,
            gts,
            oks: oks_matrix,
        });
    }

    let recall_grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();

    // AP for one (threshold, area range) pair.
    let ap_at = |thr: f64, range: AreaRange| -> (f64, f64) {
        // (global pred index, score, is_tp, excluded)
        let mut pooled: Vec<(usize, f64, bool, bool)> = Vec::new();
        let mut num_gt = 0usize;
        for img in &images {
            let ignored: Vec<bool> = img.gts.iter().map(|g| range.ignores(g.area, cfg)).collect();
            num_gt += ignored.iter().filter(|&&x| !x).count();
            let mut gt_taken = vec![false; img.gts.len()];
            for (pi, &(global_idx, p)) in img.preds.iter().enumerate() {
                // Best unmatched ground truth at or above the threshold,
                // preferring ones inside the area range.
                let mut best: Option<(usize, f64)> = None;
                for pass_ignored in [false, true] {
                    for gi in 0..img.gts.len() {
                        if gt_taken[gi] || ignored[gi] != pass_ignored {
                            continue;
                        }
                        let v = img.oks[pi][gi];
                        if v >= thr && best.map_or(true, |(_, bv)| v > bv) {
                            best = Some((gi, v));
                        }
                    }
                    if best.is_some() {
                        break;
                    }
                }
                match best {
                    Some((gi, _)) => {
                        gt_taken[gi] = true;
                        pooled.push((global_idx, p.score, true, ignored[gi]));
                    }
                    None => pooled.push((global_idx, p.score, false, false)),
                }
            }
        }
        if num_gt == 0 {
            return (0.0, 0.0);
        }
        pooled.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut recalls = Vec::new();
        let mut precisions = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, _, is_tp, excluded) in &pooled {
            if excluded {
                continue;
            }
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            recalls.push(tp as f64 / num_gt as f64);
            precisions.push(tp as f64 / (tp + fp) as f64);
        }
        // Precision envelope: monotone non-increasing from the right.
        for i in (0..precisions.len().saturating_sub(1)).rev() {
            precisions[i] = precisions[i].max(precisions[i + 1]);
        }
        let mut ap_sum = 0.0;
        for &r in &recall_grid {
            if let Some(idx) = recalls.iter().position(|&rc| rc >= r) {
                ap_sum += precisions[idx];
            }
        }
        let recall_final = recalls.last().copied().unwrap_or(0.0);
        (ap_sum / recall_grid.len() as f64, recall_final)
    };

    let per_thr_all: Vec<(f64, f64)> = cfg
        .oks_thresholds
        .iter()
        .map(|&t| ap_at(t, AreaRange::All))
        .collect();
    let mean = |vals: &[f64]| vals.iter().sum::<f64>() / vals.len() as f64;
    let ap_all: Vec<f64> = per_thr_all.iter().map(|v| v.0).collect();
    let recalls_all: Vec<f64> = per_thr_all.iter().map(|v| v.1).collect();

    let find_thr = |target: f64| -> usize {
        cfg.oks_thresholds
            .iter()
            .position(|&t| (t - target).abs() < 1e-9)
            .unwrap_or(0)
    };

    let ap_medium = mean(
        &cfg.oks_thresholds
            .iter()
            .map(|&t| ap_at(t, AreaRange::Medium).0)
            .collect::<Vec<_>>(),
    );
    let ap_large = mean(
        &cfg.oks_thresholds
            .iter()
            .map(|&t| ap_at(t, AreaRange::Large).0)
            .collect::<Vec<_>>(),
    );

    Ok(Metrics {
        ap: mean(&ap_all),
        ap50: ap_all[find_thr(0.50)],
        ap75: ap_all[find_thr(0.75)],
        ap_medium,
        ap_large,
        ar: mean(&recalls_all),
    })
}
