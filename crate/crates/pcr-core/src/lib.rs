//! Progressive context refinement for human keypoint detection.
//!
//! A desk-scale, dependency-light implementation of a top-down pose
//! estimator built around context-aware modules: a minimal `f64` tensor
//! engine with reverse-mode differentiation, the CAM/PCR network, a Gaussian
//! heatmap codec, OKS-based post-processing and COCO-protocol evaluation,
//! plus the data-side training strategies (hard-negative mining,
//! pseudo-labels, dataset merging).

pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod heatmap;
pub mod model;
pub mod params;
pub mod synthetic;
pub mod tensor;

pub use error::{Error, Result};
pub use geometry::{iou, BBox, CropTransform};
pub use heatmap::{hard_negative_target, HeatmapCodec, HeatmapTarget, Keypoint, KeypointSet, Visibility};
pub use tensor::{ConvSpec, Graph, NodeId, Shape, Tensor};
