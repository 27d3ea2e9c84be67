//! Annotation ingest, person crops, and the data-side training strategies:
//! hard-negative person detection mining, pseudo-label filtering, and
//! external-dataset merging.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{PersonDetection, PoseResult};
use crate::geometry::{iou, BBox, CropTransform};
use crate::heatmap::{HeatmapCodec, Keypoint, KeypointSet, Visibility};
use crate::model::Batch;
use crate::tensor::{Shape, Tensor};

pub use crate::geometry::CropTransform as Transform;

/// Where a training instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    Labeled,
    Pseudo,
    HardNegative,
    External,
}

/// Reference to the raster an instance lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: i64,
    pub file_name: String,
    #[serde(default)]
    pub width: usize,
    #[serde(default)]
    pub height: usize,
}

/// One person instance: image reference, box, joints, provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub image: ImageRef,
    pub bbox: BBox,
    pub keypoints: KeypointSet,
    pub source: SourceTag,
    /// Annotated segmentation area when present; falls back to the box area.
    pub ann_area: Option<f64>,
}

impl InstanceRecord {
    pub fn area(&self) -> f64 {
        self.ann_area.unwrap_or_else(|| self.bbox.area())
    }
}

/// Parsed annotation file: image table plus instance list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub images: Vec<ImageRef>,
    pub records: Vec<InstanceRecord>,
}

impl AnnotationSet {
    pub fn image_by_id(&self, id: i64) -> Option<&ImageRef> {
        self.images.iter().find(|im| im.id == id)
    }

    /// Ground-truth boxes grouped by image id.
    pub fn boxes_by_image(&self) -> BTreeMap<i64, Vec<BBox>> {
        let mut out: BTreeMap<i64, Vec<BBox>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.image.id).or_default().push(r.bbox);
        }
        out
    }

    pub fn to_ground_truth(&self) -> Vec<crate::eval::GroundTruthInstance> {
        self.records
            .iter()
            .map(|r| crate::eval::GroundTruthInstance {
                image_id: r.image.id,
                keypoints: r.keypoints.clone(),
                area: r.area(),
            })
            .collect()
    }
}

// Serde mirror of the annotation JSON subset.

#[derive(Serialize, Deserialize)]
struct CocoJson {
    #[serde(default)]
    images: Vec<ImageRef>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default)]
    id: i64,
    image_id: i64,
    bbox: [f64; 4],
    keypoints: Vec<f64>,
    #[serde(default)]
    num_keypoints: Option<usize>,
    #[serde(default)]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: i64,
    #[serde(default = "default_category")]
    category_id: i64,
    #[serde(default)]
    source: Option<SourceTag>,
}

fn default_category() -> i64 {
    1
}

/// Loads a COCO-format annotation subset. Every keypoint array must hold
/// exactly `3 * joints` values; crowd instances are skipped.
pub fn load_annotations(path: impl AsRef<Path>, joints: usize) -> Result<AnnotationSet> {
    let file = fs::File::open(path.as_ref())?;
    parse_annotations(BufReader::new(file), joints)
}

pub fn parse_annotations(reader: impl Read, joints: usize) -> Result<AnnotationSet> {
    let json: CocoJson = serde_json::from_reader(reader)?;
    let images_by_id: BTreeMap<i64, ImageRef> =
        json.images.iter().map(|im| (im.id, im.clone())).collect();
    let mut records = Vec::with_capacity(json.annotations.len());
    for (index, ann) in json.annotations.into_iter().enumerate() {
        if ann.iscrowd != 0 {
            continue;
        }
        if ann.keypoints.len() != 3 * joints {
            return Err(Error::Record {
                index,
                msg: format!(
                    "keypoint array holds {} values, expected {}",
                    ann.keypoints.len(),
                    3 * joints
                ),
            });
        }
        let keypoints = KeypointSet::from_triplets(&ann.keypoints)
            .map_err(|e| Error::Record { index, msg: e.to_string() })?;
        let image = images_by_id
            .get(&ann.image_id)
            .cloned()
            .unwrap_or_else(|| ImageRef {
                id: ann.image_id,
                file_name: format!("{}.pgm", ann.image_id),
                width: 0,
                height: 0,
            });
        records.push(InstanceRecord {
            image,
            bbox: ann.bbox.into(),
            keypoints,
            source: ann.source.unwrap_or(SourceTag::Labeled),
            ann_area: ann.area,
        });
    }
    Ok(AnnotationSet {
        images: json.images,
        records,
    })
}

/// Writes records back out in the same annotation schema.
pub fn save_annotations(path: impl AsRef<Path>, set: &AnnotationSet) -> Result<()> {
    let mut images = set.images.clone();
    for r in &set.records {
        if !images.iter().any(|im| im.id == r.image.id) {
            images.push(r.image.clone());
        }
    }
    let annotations: Vec<CocoAnnotation> = set
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| CocoAnnotation {
            id: i as i64 + 1,
            image_id: r.image.id,
            bbox: r.bbox.into(),
            keypoints: r.keypoints.triplets(),
            num_keypoints: Some(r.keypoints.labeled_count()),
            area: r.ann_area,
            iscrowd: 0,
            category_id: 1,
            source: Some(r.source),
        })
        .collect();
    let json = CocoJson {
        images,
        annotations,
        categories: vec![serde_json::json!({"id": 1, "name": "person"})],
    };
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &json)?;
    f.flush()?;
    Ok(())
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<PersonDetection>> {
    let file = fs::File::open(path)?;
    let dets: Vec<PersonDetection> = serde_json::from_reader(BufReader::new(file))?;
    for (index, det) in dets.iter().enumerate() {
        if !(det.bbox.w >= 0.0 && det.bbox.h >= 0.0) || !det.score.is_finite() {
            return Err(Error::Record {
                index,
                msg: format!(
                    "detection with negative extents or non-finite score: {}x{} @ {}",
                    det.bbox.w, det.bbox.h, det.score
                ),
            });
        }
    }
    Ok(dets)
}

pub fn save_detections(path: impl AsRef<Path>, dets: &[PersonDetection]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, dets)?;
    f.flush()?;
    Ok(())
}

/// Person-crop transform for a detection or annotation box.
pub fn crop_transform(bbox: &BBox, input_w: usize, input_h: usize) -> Result<CropTransform> {
    CropTransform::for_box(bbox, input_w, input_h, CropTransform::DEFAULT_PADDING)
}

/// Hard-negative person detection mining: detections whose score clears the
/// threshold but whose box has zero overlap with every ground-truth person
/// box of the image become training crops whose heatmaps are all zero.
pub fn mine_hard_negatives(
    detections: &[PersonDetection],
    annotations: &AnnotationSet,
    score_thr: f64,
    joints: usize,
) -> Result<Vec<InstanceRecord>> {
    if !(0.0..=1.0).contains(&score_thr) {
        return Err(Error::invalid("mine_hard_negatives", "score threshold outside [0, 1]"));
    }
    let boxes = annotations.boxes_by_image();
    let mut out = Vec::new();
    for (index, det) in detections.iter().enumerate() {
        if det.score < score_thr {
            continue;
        }
        let gt = boxes.get(&det.image_id).map(Vec::as_slice).unwrap_or(&[]);
        if gt.iter().any(|b| iou(b, &det.bbox) > 0.0) {
            continue;
        }
        let image = annotations
            .image_by_id(det.image_id)
            .cloned()
            .ok_or_else(|| Error::Record {
                index,
                msg: format!("detection references unknown image {}", det.image_id),
            })?;
        out.push(InstanceRecord {
            image,
            bbox: det.bbox,
            keypoints: KeypointSet::unlabeled(joints),
            source: SourceTag::HardNegative,
            ann_area: None,
        });
    }
    Ok(out)
}

/// Pseudo-annotation filtering over pose results on unlabeled images: joints
/// with a score strictly above the threshold keep their coordinates as
/// visible labels, the rest become unlabeled, and instances with no kept
/// joint are dropped.
///
/// The emitted image references follow the `<image_id>.pgm` naming
/// convention; pass the unlabeled set's image table to the CLI to remap.
pub fn filter_pseudo_labels(results: &[PoseResult], keep_thr: f64) -> Vec<InstanceRecord> {
    let mut out = Vec::new();
    for r in results {
        let mut kept = 0usize;
        let joints: Vec<Keypoint> = r
            .keypoints
            .iter()
            .zip(&r.joint_scores)
            .map(|(kp, &score)| {
                if score > keep_thr {
                    kept += 1;
                    Keypoint::new(kp.x, kp.y, Visibility::Visible)
                } else {
                    Keypoint::new(kp.x, kp.y, Visibility::Unlabeled)
                }
            })
            .collect();
        if kept == 0 {
            continue;
        }
        let kps = KeypointSet::new(joints);
        out.push(InstanceRecord {
            image: ImageRef {
                id: r.image_id,
                file_name: format!("{}.pgm", r.image_id),
                width: 0,
                height: 0,
            },
            bbox: pseudo_bbox(&kps),
            keypoints: kps,
            source: SourceTag::Pseudo,
            ann_area: None,
        });
    }
    out
}

/// Box for a pseudo-labeled instance: the tight box over kept joints, grown
/// by a quarter on each axis with a one-pixel floor.
fn pseudo_bbox(kps: &KeypointSet) -> BBox {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for kp in kps.iter().filter(|k| k.visibility.is_labeled()) {
        min_x = min_x.min(kp.x);
        max_x = max_x.max(kp.x);
        min_y = min_y.min(kp.y);
        max_y = max_y.max(kp.y);
    }
    let w = (max_x - min_x).max(1.0);
    let h = (max_y - min_y).max(1.0);
    BBox::new(
        min_x - 0.125 * w,
        min_y - 0.125 * h,
        w * 1.25,
        h * 1.25,
    )
}

/// Joint-index remapping from an external skeleton into the primary one.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryMap {
    /// `entries[external_joint] = Some(primary_joint)` or `None` to discard.
    entries: Vec<Option<usize>>,
    target_joints: usize,
}

impl CategoryMap {
    pub fn new(entries: Vec<Option<usize>>, target_joints: usize) -> Result<Self> {
        let mut seen = vec![false; target_joints];
        for &e in entries.iter().flatten() {
            if e >= target_joints {
                return Err(Error::Config(format!(
                    "category map target {e} outside 0..{target_joints}"
                )));
            }
            if seen[e] {
                return Err(Error::DuplicateMapTarget { target: e });
            }
            seen[e] = true;
        }
        Ok(CategoryMap {
            entries,
            target_joints,
        })
    }

    /// Empty map: every external joint is discarded.
    pub fn discard_all(external_joints: usize, target_joints: usize) -> Self {
        CategoryMap {
            entries: vec![None; external_joints],
            target_joints,
        }
    }

    /// Identity over `joints` indices.
    pub fn identity(joints: usize) -> Self {
        CategoryMap {
            entries: (0..joints).map(Some).collect(),
            target_joints: joints,
        }
    }

    pub fn external_joints(&self) -> usize {
        self.entries.len()
    }

    pub fn target_joints(&self) -> usize {
        self.target_joints
    }

    pub fn mapped_count(&self) -> usize {
        self.entries.iter().flatten().count()
    }

    pub fn target_of(&self, external: usize) -> Option<usize> {
        self.entries.get(external).copied().flatten()
    }

    /// Parses the key-value text form: one `external = primary` line per
    /// mapped joint, `external = skip` to discard, `#` comments.
    pub fn parse(text: &str, external_joints: usize, target_joints: usize) -> Result<Self> {
        let mut entries = vec![None; external_joints];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (lhs, rhs) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("category map line {}: expected 'ext = primary'", lineno + 1))
            })?;
            let ext: usize = lhs.trim().parse().map_err(|_| {
                Error::Config(format!("category map line {}: bad external index", lineno + 1))
            })?;
            if ext >= external_joints {
                return Err(Error::Config(format!(
                    "category map line {}: external index {ext} outside 0..{external_joints}",
                    lineno + 1
                )));
            }
            let rhs = rhs.trim();
            entries[ext] = if rhs.eq_ignore_ascii_case("skip") {
                None
            } else {
                Some(rhs.parse().map_err(|_| {
                    Error::Config(format!("category map line {}: bad primary index", lineno + 1))
                })?)
            };
        }
        CategoryMap::new(entries, target_joints)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (ext, entry) in self.entries.iter().enumerate() {
            match entry {
                Some(t) => s.push_str(&format!("{ext} = {t}\n")),
                None => s.push_str(&format!("{ext} = skip\n")),
            }
        }
        s
    }
}

/// Conventional correspondence from the 14-joint AIC skeleton into the
/// 17-joint COCO skeleton: the 12 shared limb joints map across, head-top
/// and neck are discarded. A guess by convention, not a published table;
/// override it with a map file when a vetted correspondence exists.
pub fn default_aic_to_coco_map() -> CategoryMap {
    CategoryMap::new(
        vec![
            Some(6),  // right shoulder
            Some(8),  // right elbow
            Some(10), // right wrist
            Some(5),  // left shoulder
            Some(7),  // left elbow
            Some(9),  // left wrist
            Some(12), // right hip
            Some(14), // right knee
            Some(16), // right ankle
            Some(11), // left hip
            Some(13), // left knee
            Some(15), // left ankle
            None,     // head top
            None,     // neck
        ],
        17,
    )
    .expect("static table is valid")
}

/// Merges an external dataset into the primary one. Primary records pass
/// through unchanged; external joints are remapped (unmapped slots become
/// unlabeled) and tagged [`SourceTag::External`]. Output order is primary
/// then external.
pub fn merge_datasets(
    primary: &[InstanceRecord],
    external: &[InstanceRecord],
    map: &CategoryMap,
) -> Result<Vec<InstanceRecord>> {
    let mut out = Vec::with_capacity(primary.len() + external.len());
    out.extend_from_slice(primary);
    for (index, rec) in external.iter().enumerate() {
        if rec.keypoints.len() != map.external_joints() {
            return Err(Error::Record {
                index,
                msg: format!(
                    "external record has {} joints, map covers {}",
                    rec.keypoints.len(),
                    map.external_joints()
                ),
            });
        }
        let mut joints = vec![Keypoint::unlabeled(); map.target_joints()];
        for ext in 0..rec.keypoints.len() {
            if let Some(t) = map.target_of(ext) {
                joints[t] = *rec.keypoints.get(ext);
            }
        }
        out.push(InstanceRecord {
            image: rec.image.clone(),
            bbox: rec.bbox,
            keypoints: KeypointSet::new(joints),
            source: SourceTag::External,
            ann_area: rec.ann_area,
        });
    }
    Ok(out)
}

/// Grayscale raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y).clamp(0.0, 1.0));
            }
        }
        ImageBuffer {
            width,
            height,
            data,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Bilinear sample; coordinates outside the raster read as 0.
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let sx = x0 + dx;
                let sy = y0 + dy;
                let v = if sx >= 0.0 && sy >= 0.0 && (sx as usize) < self.width && (sy as usize) < self.height
                {
                    self.get(sx as usize, sy as usize)
                } else {
                    0.0
                };
                acc += wx * wy * v;
            }
        }
        acc
    }

    /// Writes the binary PGM (P5) form, 8-bit.
    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        write!(f, "P5\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    /// Reads a binary (P5) or ASCII (P2) PGM raster.
    pub fn load_pgm(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref())?;
        let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.as_ref().display()));
        let mut fields = Vec::new();
        let mut pos = 0usize;
        // Header: magic, width, height, maxval, each optionally separated by
        // comments and whitespace.
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos] as char).is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !(bytes[pos] as char).is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        let magic = fields[0].as_str();
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let maxval: f64 = fields[3].parse().map_err(|_| bad("bad maxval"))?;
        if maxval <= 0.0 || maxval > 255.0 {
            return Err(bad("unsupported maxval"));
        }
        let mut img = ImageBuffer::new(width, height);
        match magic {
            "P5" => {
                pos += 1; // single whitespace after maxval
                if bytes.len() < pos + width * height {
                    return Err(bad("truncated pixel data"));
                }
                for (i, b) in bytes[pos..pos + width * height].iter().enumerate() {
                    img.data[i] = f64::from(*b) / maxval;
                }
            }
            "P2" => {
                let text = String::from_utf8_lossy(&bytes[pos..]);
                let mut count = 0usize;
                for tok in text.split_ascii_whitespace() {
                    if count >= width * height {
                        break;
                    }
                    let v: f64 = tok.parse().map_err(|_| bad("bad ascii pixel"))?;
                    img.data[count] = v / maxval;
                    count += 1;
                }
                if count != width * height {
                    return Err(bad("truncated ascii pixel data"));
                }
            }
            other => return Err(bad(&format!("unsupported magic {other}"))),
        }
        Ok(img)
    }
}

/// In-memory image table keyed by image id.
#[derive(Debug, Clone, Default)]
pub struct ImageStore {
    images: BTreeMap<i64, ImageBuffer>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: i64, image: ImageBuffer) {
        self.images.insert(id, image);
    }

    pub fn get(&self, id: i64) -> Option<&ImageBuffer> {
        self.images.get(&id)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads every referenced raster from `dir`, resolving each image's
    /// `file_name` relative to it.
    pub fn load_dir(dir: impl AsRef<Path>, images: &[ImageRef]) -> Result<Self> {
        let mut store = ImageStore::new();
        for im in images {
            let path = dir.as_ref().join(&im.file_name);
            store.insert(im.id, ImageBuffer::load_pgm(path)?);
        }
        Ok(store)
    }
}

/// Left/right joint index pairs swapped under a horizontal flip.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipPairs(Vec<(usize, usize)>);

impl FlipPairs {
    pub fn new(pairs: Vec<(usize, usize)>, joints: usize) -> Result<Self> {
        let mut seen = vec![false; joints];
        for &(a, b) in &pairs {
            if a >= joints || b >= joints || a == b {
                return Err(Error::Config(format!("bad flip pair ({a}, {b})")));
            }
            if seen[a] || seen[b] {
                return Err(Error::Config(format!("joint in flip pair ({a}, {b}) reused")));
            }
            seen[a] = true;
            seen[b] = true;
        }
        Ok(FlipPairs(pairs))
    }

    /// The COCO 17-joint skeleton pairs.
    pub fn coco17() -> Self {
        FlipPairs(vec![(1, 2), (3, 4), (5, 6), (7, 8), (9, 10), (11, 12), (13, 14), (15, 16)])
    }

    pub fn empty() -> Self {
        FlipPairs(Vec::new())
    }

    pub fn swap_joints(&self, kps: &KeypointSet) -> KeypointSet {
        let mut joints: Vec<Keypoint> = kps.iter().copied().collect();
        for &(a, b) in &self.0 {
            joints.swap(a, b);
        }
        KeypointSet::new(joints)
    }
}

/// Builds a training batch from instance records.
///
/// Crops are resampled bilinearly into the input canvas; hard-negative
/// records get the all-zero full-weight target; `flip`, when given, mirrors
/// every sample horizontally and swaps the paired joints.
pub fn build_batch(
    records: &[InstanceRecord],
    images: &ImageStore,
    codec: &HeatmapCodec,
    input_h: usize,
    input_w: usize,
    flip: Option<&FlipPairs>,
) -> Result<Batch> {
    if records.is_empty() {
        return Err(Error::EmptyInput { op: "build_batch" });
    }
    let n = records.len();
    let mut batch_images = Tensor::zeros(Shape::new(n, 1, input_h, input_w));
    let mut maps = Tensor::zeros(Shape::new(n, codec.joints, codec.map_h, codec.map_w));
    let mut weights = vec![0.0; n * codec.joints];

    for (i, rec) in records.iter().enumerate() {
        let raster = images
            .get(rec.image.id)
            .ok_or_else(|| Error::Data(format!("no raster for image {}", rec.image.id)))?;
        let mut transform = crop_transform(&rec.bbox, input_w, input_h)?;
        let mut kps = rec.keypoints.clone();
        if let Some(pairs) = flip {
            transform = transform.then_hflip(input_w);
            kps = pairs.swap_joints(&kps);
        }
        for y in 0..input_h {
            for x in 0..input_w {
                let (sx, sy) = transform.apply_inverse(x as f64, y as f64);
                *batch_images.at_mut(i, 0, y, x) = raster.sample(sx, sy);
            }
        }
        let target = match rec.source {
            SourceTag::HardNegative => codec.hard_negative_target(),
            _ => codec.encode(&kps, &transform)?,
        };
        for j in 0..codec.joints {
            weights[i * codec.joints + j] = target.weights[j];
            for y in 0..codec.map_h {
                for x in 0..codec.map_w {
                    *maps.at_mut(i, j, y, x) = target.maps.at(0, j, y, x);
                }
            }
        }
    }
    Ok(Batch {
        images: batch_images,
        target_maps: maps,
        target_weights: weights,
    })
}

/// Reads the flat key-value category-map file format from disk.
pub fn load_category_map(
    path: impl AsRef<Path>,
    external_joints: usize,
    target_joints: usize,
) -> Result<CategoryMap> {
    let mut text = String::new();
    fs::File::open(path)?.read_to_string(&mut text)?;
    CategoryMap::parse(&text, external_joints, target_joints)
}

/// Convenience line-based reader for loss logs in tests.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let f = fs::File::open(path)?;
    BufReader::new(f).lines().collect::<std::io::Result<_>>().map_err(Error::Io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::Visibility;

    fn sample_annotation_json() -> String {
        let triplets: Vec<f64> = (0..17)
            .flat_map(|j| vec![10.0 + j as f64, 20.0 + j as f64, (j % 3) as f64])
            .collect();
        serde_json::json!({
            "images": [{"id": 1, "file_name": "1.pgm", "width": 128, "height": 128}],
            "annotations": [{
                "id": 1,
                "image_id": 1,
                "category_id": 1,
                "bbox": [10.0, 20.0, 30.0, 40.0],
                "keypoints": triplets,
                "num_keypoints": 11,
                "area": 900.0,
                "iscrowd": 0
            }],
            "categories": [{"id": 1, "name": "person"}]
        })
        .to_string()
    }

    #[test]
    fn empty_annotation_list_parses_to_empty_output() {
        let set = parse_annotations(r#"{"images": [], "annotations": []}"#.as_bytes(), 17).unwrap();
        assert!(set.records.is_empty());
    }

    #[test]
    fn seventeen_triplet_instance_round_trips() {
        let set = parse_annotations(sample_annotation_json().as_bytes(), 17).unwrap();
        assert_eq!(set.records.len(), 1);
        let dir = std::env::temp_dir().join(format!("pcr-data-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.json");
        save_annotations(&path, &set).unwrap();
        let back = load_annotations(&path, 17).unwrap();
        assert_eq!(back.records[0].keypoints, set.records[0].keypoints);
        assert_eq!(back.records[0].bbox, set.records[0].bbox);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn labeled_joint_count_matches_a_recount_of_the_flags() {
        let set = parse_annotations(sample_annotation_json().as_bytes(), 17).unwrap();
        let rec = &set.records[0];
        // Independent scan over the raw triplets.
        let triplets = rec.keypoints.triplets();
        let manual = triplets.chunks_exact(3).filter(|t| t[2] > 0.0).count();
        assert_eq!(rec.keypoints.labeled_count(), manual);
        assert_eq!(manual, 11);
    }

    #[test]
    fn wrong_keypoint_arity_is_a_record_error_with_index() {
        let json = r#"{"images": [], "annotations": [
            {"id": 1, "image_id": 1, "bbox": [0,0,1,1], "keypoints": [1.0, 2.0, 2.0]}
        ]}"#;
        let err = parse_annotations(json.as_bytes(), 17).unwrap_err();
        match err {
            Error::Record { index, .. } => assert_eq!(index, 0),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn crowd_instances_are_skipped() {
        let json = r#"{"images": [], "annotations": [
            {"id": 1, "image_id": 1, "bbox": [0,0,1,1], "iscrowd": 1,
             "keypoints": [1.0, 2.0, 2.0]}
        ]}"#;
        let set = parse_annotations(json.as_bytes(), 17).unwrap();
        assert!(set.records.is_empty());
    }

    fn det(image_id: i64, x: f64, y: f64, w: f64, h: f64, score: f64) -> PersonDetection {
        PersonDetection {
            image_id,
            bbox: BBox::new(x, y, w, h),
            score,
        }
    }

    fn annotations_with_one_box() -> AnnotationSet {
        let image = ImageRef {
            id: 1,
            file_name: "1.pgm".into(),
            width: 128,
            height: 128,
        };
        AnnotationSet {
            images: vec![image.clone()],
            records: vec![InstanceRecord {
                image,
                bbox: BBox::new(10.0, 10.0, 40.0, 60.0),
                keypoints: KeypointSet::unlabeled(4),
                source: SourceTag::Labeled,
                ann_area: None,
            }],
        }
    }

    #[test]
    fn high_score_zero_overlap_detection_is_mined() {
        let set = annotations_with_one_box();
        let dets = vec![det(1, 80.0, 80.0, 20.0, 20.0, 0.95)];
        let mined = mine_hard_negatives(&dets, &set, 0.5, 4).unwrap();
        assert_eq!(mined.len(), 1);
        assert_eq!(mined[0].source, SourceTag::HardNegative);
        assert_eq!(mined[0].keypoints.labeled_count(), 0);
        assert_eq!(mined[0].keypoints.len(), 4);
    }

    #[test]
    fn any_overlap_disqualifies_regardless_of_score() {
        let set = annotations_with_one_box();
        // Overlaps the gt box by a sliver.
        let dets = vec![det(1, 49.0, 50.0, 20.0, 20.0, 0.99)];
        assert!(mine_hard_negatives(&dets, &set, 0.5, 4).unwrap().is_empty());
    }

    #[test]
    fn low_score_detection_is_not_mined() {
        let set = annotations_with_one_box();
        let dets = vec![det(1, 80.0, 80.0, 20.0, 20.0, 0.4)];
        assert!(mine_hard_negatives(&dets, &set, 0.5, 4).unwrap().is_empty());
    }

    #[test]
    fn threshold_is_inclusive() {
        let set = annotations_with_one_box();
        let dets = vec![det(1, 80.0, 80.0, 20.0, 20.0, 0.5)];
        assert_eq!(mine_hard_negatives(&dets, &set, 0.5, 4).unwrap().len(), 1);
    }

    fn pose(image_id: i64, coords: &[(f64, f64)], scores: &[f64]) -> PoseResult {
        PoseResult {
            image_id,
            keypoints: KeypointSet::new(
                coords
                    .iter()
                    .map(|&(x, y)| Keypoint::new(x, y, Visibility::Visible))
                    .collect(),
            ),
            joint_scores: scores.to_vec(),
            score: scores.iter().sum::<f64>() / scores.len() as f64,
        }
    }

    #[test]
    fn pseudo_filter_keeps_strictly_above_threshold() {
        let results = vec![pose(
            1,
            &[(10.0, 10.0), (20.0, 20.0), (30.0, 30.0)],
            &[0.95, 0.9, 0.85],
        )];
        let recs = filter_pseudo_labels(&results, 0.9);
        assert_eq!(recs.len(), 1);
        let flags: Vec<u8> = recs[0].keypoints.iter().map(|k| k.visibility.flag()).collect();
        // 0.95 kept; 0.9 is not strictly above; 0.85 dropped.
        assert_eq!(flags, vec![2, 0, 0]);
        assert_eq!(recs[0].source, SourceTag::Pseudo);
    }

    #[test]
    fn pseudo_filter_drops_instances_with_no_kept_joint() {
        let results = vec![pose(1, &[(10.0, 10.0), (20.0, 20.0)], &[0.5, 0.89])];
        assert!(filter_pseudo_labels(&results, 0.9).is_empty());
    }

    #[test]
    fn pseudo_filter_is_idempotent() {
        let results = vec![
            pose(1, &[(10.0, 10.0), (20.0, 20.0), (30.0, 30.0)], &[0.95, 0.93, 0.2]),
            pose(2, &[(5.0, 5.0)], &[0.91]),
        ];
        let first = filter_pseudo_labels(&results, 0.9);
        // Re-feed the filtered output: kept joints keep their score, dropped
        // joints score zero.
        let refed: Vec<PoseResult> = first
            .iter()
            .map(|rec| {
                let orig = results.iter().find(|r| r.image_id == rec.image.id).unwrap();
                PoseResult {
                    image_id: rec.image.id,
                    keypoints: rec.keypoints.clone(),
                    joint_scores: rec
                        .keypoints
                        .iter()
                        .zip(&orig.joint_scores)
                        .map(|(kp, &s)| if kp.visibility.is_labeled() { s } else { 0.0 })
                        .collect(),
                    score: orig.score,
                }
            })
            .collect();
        let second = filter_pseudo_labels(&refed, 0.9);
        assert_eq!(first.len(), second.len());
        for (a, b) in first.iter().zip(&second) {
            assert_eq!(a.keypoints, b.keypoints);
        }
    }

    fn external_record(joints: usize) -> InstanceRecord {
        InstanceRecord {
            image: ImageRef {
                id: 9,
                file_name: "9.pgm".into(),
                width: 0,
                height: 0,
            },
            bbox: BBox::new(0.0, 0.0, 10.0, 10.0),
            keypoints: KeypointSet::new(
                (0..joints)
                    .map(|j| Keypoint::new(j as f64, j as f64 + 0.5, Visibility::Visible))
                    .collect(),
            ),
            source: SourceTag::Labeled,
            ann_area: None,
        }
    }

    #[test]
    fn empty_map_discards_every_external_joint() {
        let ext = vec![external_record(14)];
        let map = CategoryMap::discard_all(14, 17);
        let merged = merge_datasets(&[], &ext, &map).unwrap();
        assert_eq!(merged.len(), 1);
        assert_eq!(merged[0].keypoints.len(), 17);
        assert_eq!(merged[0].keypoints.labeled_count(), 0);
        assert_eq!(merged[0].source, SourceTag::External);
    }

    #[test]
    fn identity_map_preserves_keypoints_exactly() {
        let ext = vec![external_record(17)];
        let map = CategoryMap::identity(17);
        let merged = merge_datasets(&[], &ext, &map).unwrap();
        assert_eq!(merged[0].keypoints.triplets(), ext[0].keypoints.triplets());
    }

    #[test]
    fn aic_map_yields_twelve_labeled_joints() {
        let map = default_aic_to_coco_map();
        assert_eq!(map.external_joints(), 14);
        assert_eq!(map.mapped_count(), 12);
        let ext = vec![external_record(14)];
        let merged = merge_datasets(&[], &ext, &map).unwrap();
        assert_eq!(merged[0].keypoints.len(), 17);
        assert_eq!(merged[0].keypoints.labeled_count(), 12);
        // Spot-check one correspondence: external 3 (left shoulder) lands on
        // primary 5 with its coordinates intact.
        let kp = merged[0].keypoints.get(5);
        assert_eq!((kp.x, kp.y), (3.0, 3.5));
    }

    #[test]
    fn merge_preserves_primary_records_and_order() {
        let set = annotations_with_one_box();
        let ext = vec![external_record(14)];
        let merged = merge_datasets(&set.records, &ext, &default_aic_to_coco_map()).unwrap();
        assert_eq!(merged.len(), set.records.len() + 1);
        assert_eq!(&merged[..set.records.len()], set.records.as_slice());
    }

    #[test]
    fn duplicate_map_targets_are_rejected() {
        let err = CategoryMap::new(vec![Some(3), Some(3)], 17).unwrap_err();
        assert!(matches!(err, Error::DuplicateMapTarget { target: 3 }));
        assert!(CategoryMap::new(vec![Some(17)], 17).is_err());
    }

    #[test]
    fn category_map_text_round_trips() {
        let map = default_aic_to_coco_map();
        let text = map.to_text();
        let back = CategoryMap::parse(&text, 14, 17).unwrap();
        assert_eq!(back, map);
        assert!(CategoryMap::parse("0 = banana", 14, 17).is_err());
        assert!(CategoryMap::parse("20 = 3", 14, 17).is_err());
    }

    #[test]
    fn pgm_round_trips_both_formats() {
        let img = ImageBuffer::from_fn(9, 5, |x, y| ((x * 29 + y * 31) % 256) as f64 / 255.0);
        let dir = std::env::temp_dir().join(format!("pcr-pgm-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.pgm");
        img.save_pgm(&path).unwrap();
        let back = ImageBuffer::load_pgm(&path).unwrap();
        assert_eq!(back.width, 9);
        assert_eq!(back.height, 5);
        for y in 0..5 {
            for x in 0..9 {
                assert!((back.get(x, y) - img.get(x, y)).abs() < 1.0 / 255.0);
            }
        }
        // ASCII flavor with a comment line.
        std::fs::write(dir.join("a.pgm"), "P2\n# demo\n2 2\n255\n0 128\n255 64\n").unwrap();
        let ascii = ImageBuffer::load_pgm(dir.join("a.pgm")).unwrap();
        assert!((ascii.get(1, 0) - 128.0 / 255.0).abs() < 1e-12);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn flip_pairs_validation() {
        assert!(FlipPairs::new(vec![(0, 1)], 4).is_ok());
        assert!(FlipPairs::new(vec![(0, 0)], 4).is_err());
        assert!(FlipPairs::new(vec![(0, 1), (1, 2)], 4).is_err());
        assert!(FlipPairs::new(vec![(0, 4)], 4).is_err());
    }
}
