//! Deterministic procedural training corpus: disk markers at joint
//! locations, so the repository needs no dataset download.
//!
//! Each sample is a 128x128 grayscale raster holding one person window in
//! the upper-left region. Joints sit on the stride-4 grid of their crop so a
//! well-fit model can decode them exactly, and each joint draws a disk whose
//! intensity identifies it. The lower-right quadrant stays person-free,
//! which gives hard-negative mining clean territory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AnnotationSet, ImageBuffer, ImageRef, ImageStore, InstanceRecord, SourceTag};
use crate::eval::PersonDetection;
use crate::geometry::BBox;
use crate::heatmap::{Keypoint, KeypointSet, Visibility};

pub const IMAGE_SIZE: usize = 128;
/// Crop canvas the corpus is tuned for (width x height 48x64, stride-4
/// heatmaps 12x16).
pub const INPUT_W: usize = 48;
pub const INPUT_H: usize = 64;

/// Whole synthetic corpus: annotations plus rasters.
pub fn toy_dataset(count: usize, joints: usize, seed: u64) -> (AnnotationSet, ImageStore) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(count);
    let mut records = Vec::with_capacity(count);
    let mut store = ImageStore::new();

    for i in 0..count {
        let id = i as i64 + 1;
        // Window origin on the pixel grid; the person stays inside the
        // upper-left 80x96 region.
        let wx = 4 * rng.random_range(0..8usize); // 0..28
        let wy = 4 * rng.random_range(0..8usize); // 0..28
        let (cx, cy) = (wx as f64 + INPUT_W as f64 / 2.0, wy as f64 + INPUT_H as f64 / 2.0);
        // Box sized so aspect fit is a no-op and 1.25 padding recovers the
        // 48x64 window exactly: scale 1, integer translation.
        let bw = INPUT_W as f64 / 1.25;
        let bh = INPUT_H as f64 / 1.25;
        let bbox = BBox::new(cx - bw / 2.0, cy - bh / 2.0, bw, bh);

        // Joints one pixel off the stride-4 grid (a quarter heatmap pixel),
        // strictly inside the unpadded box: the quarter-offset decode
        // refinement then recovers them exactly.
        let mut kps = Vec::with_capacity(joints);
        let mut taken: Vec<(usize, usize)> = Vec::new();
        for _ in 0..joints {
            let (gx, gy) = loop {
                let gx = rng.random_range(2..=9usize); // crop x in 9..=37
                let gy = rng.random_range(2..=13usize); // crop y in 9..=53
                if !taken.contains(&(gx, gy)) {
                    break (gx, gy);
                }
            };
            taken.push((gx, gy));
            kps.push(Keypoint::new(
                wx as f64 + (4 * gx + 1) as f64,
                wy as f64 + (4 * gy + 1) as f64,
                Visibility::Visible,
            ));
        }
        let kps = KeypointSet::new(kps);

        store.insert(id, render_scene(&kps, joints));
        let image = ImageRef {
            id,
            file_name: format!("{id}.pgm"),
            width: IMAGE_SIZE,
            height: IMAGE_SIZE,
        };
        images.push(image.clone());
        records.push(InstanceRecord {
            image,
            bbox,
            keypoints: kps,
            source: SourceTag::Labeled,
            ann_area: None,
        });
    }
    (AnnotationSet { images, records }, store)
}

/// Raster for one sample: faint checker background plus one disk per joint,
/// intensity keyed to the joint index.
fn render_scene(kps: &KeypointSet, joints: usize) -> ImageBuffer {
    let radius = 3.0f64;
    ImageBuffer::from_fn(IMAGE_SIZE, IMAGE_SIZE, |x, y| {
        let mut v: f64 = if (x / 8 + y / 8) % 2 == 0 { 0.05 } else { 0.12 };
        for (j, kp) in kps.iter().enumerate() {
            let d2 = (x as f64 - kp.x).powi(2) + (y as f64 - kp.y).powi(2);
            if d2 <= radius * radius {
                let ink = 0.35 + 0.65 * (j + 1) as f64 / joints as f64;
                v = v.max(ink);
            }
        }
        v
    })
}

/// High-score detections over the person-free lower-right quadrant. With
/// `offset` varied the boxes shift, which separates mined-from and held-out
/// negatives.
pub fn background_detections(set: &AnnotationSet, count: usize, offset: usize, score: f64) -> Vec<PersonDetection> {
    let mut out = Vec::new();
    for (i, image) in set.images.iter().enumerate() {
        if out.len() >= count {
            break;
        }
        let shift = ((i + offset) % 3) as f64 * 6.0;
        out.push(PersonDetection {
            image_id: image.id,
            bbox: BBox::new(84.0 + shift, 84.0 + shift, 32.0, 32.0),
            score,
        });
    }
    out
}

/// Writes every raster as `<id>.pgm` under `dir`.
pub fn write_images(store: &ImageStore, set: &AnnotationSet, dir: impl AsRef<std::path::Path>) -> crate::error::Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for image in &set.images {
        let raster = store
            .get(image.id)
            .ok_or_else(|| crate::error::Error::Data(format!("missing raster {}", image.id)))?;
        raster.save_pgm(dir.as_ref().join(&image.file_name))?;
    }
    Ok(())
}
