//! Dataset layer: annotation I/O, detection-file I/O, video frame storage,
//! train/test splits, and the synthetic scene generator.

pub mod annotations;

pub use annotations::{load_annotations, save_annotations, AnnotationSet};
