//! Two-stage drone-from-drone detection: a segmentation stage over
//! overlapping frame regions (pyramid pooling + channel/pixel attention)
//! and a motion-verification stage that tracks candidates, builds
//! spatio-temporal cuboids, and confirms or rejects them. Includes the
//! full evaluation protocol and a synthetic video generator for
//! desk-scale testing.

pub mod attention;
pub mod boxes;
pub mod cuboid;
pub mod data;
pub mod error;
pub mod features;
pub mod imgproc;
pub mod losses;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod tiling;

pub use boxes::{diou_terms, iou, BoundingBox, Detection, DIoUBreakdown};
pub use error::{Error, Result};
pub use metrics::{average_precision, match_detections, prf1, MetricsReport};
