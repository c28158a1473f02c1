//! Ground-truth annotation sets and their CSV serialization.
//!
//! One CSV line per box: `frame_index,x1,y1,x2,y2`. A header line is
//! optional. Frames without drones simply do not appear in the file.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::boxes::BoundingBox;
use crate::error::{Error, Result};

/// Per-frame ground-truth boxes for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationSet {
    pub video_id: String,
    pub frame_count: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    frames: BTreeMap<usize, Vec<BoundingBox>>,
}

impl AnnotationSet {
    pub fn new(video_id: impl Into<String>, frame_count: usize, frame_width: usize, frame_height: usize) -> Self {
        Self {
            video_id: video_id.into(),
            frame_count,
            frame_width,
            frame_height,
            frames: BTreeMap::new(),
        }
    }

    /// Add a box, clamping it to frame bounds. Returns a warning string when
    /// clamping changed the box, an error when the frame index is out of
    /// range or nothing of the box lies inside the frame.
    pub fn add_box(&mut self, frame_index: usize, b: BoundingBox) -> Result<Option<String>> {
        if frame_index >= self.frame_count {
            return Err(Error::data(format!(
                "frame index {frame_index} >= frame count {}",
                self.frame_count
            )));
        }
        let clamped = b.clamped(self.frame_width as f64, self.frame_height as f64)?;
        let warning = if clamped != b {
            Some(format!(
                "box ({}, {}, {}, {}) on frame {frame_index} clamped to frame bounds",
                b.x1, b.y1, b.x2, b.y2
            ))
        } else {
            None
        };
        self.frames.entry(frame_index).or_default().push(clamped);
        Ok(warning)
    }

    pub fn boxes_for(&self, frame_index: usize) -> &[BoundingBox] {
        self.frames.get(&frame_index).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Frames that carry at least one box, ascending.
    pub fn annotated_frames(&self) -> impl Iterator<Item = (usize, &[BoundingBox])> {
        self.frames.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn total_boxes(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Restrict to a subset of frames (used for strided evaluation).
    pub fn restricted_to(&self, frame_indices: &[usize]) -> AnnotationSet {
        let mut out = AnnotationSet::new(
            self.video_id.clone(),
            self.frame_count,
            self.frame_width,
            self.frame_height,
        );
        for &f in frame_indices {
            if let Some(v) = self.frames.get(&f) {
                out.frames.insert(f, v.clone());
            }
        }
        out
    }
}

fn fmt_coord(v: f64) -> String {
    // `Display` for f64 is the shortest round-trip representation, so
    // integer coordinates print as integers and the file reloads losslessly.
    format!("{v}")
}

/// Write the annotation CSV with a header line.
pub fn save_annotations(set: &AnnotationSet, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut buf = String::from("frame_index,x1,y1,x2,y2\n");
    for (frame, boxes) in set.annotated_frames() {
        for b in boxes {
            buf.push_str(&format!(
                "{frame},{},{},{},{}\n",
                fmt_coord(b.x1),
                fmt_coord(b.y1),
                fmt_coord(b.x2),
                fmt_coord(b.y2)
            ));
        }
    }
    f.write_all(buf.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse the annotation CSV. Frame count and dimensions come from the
/// caller (they are properties of the video, not of the box list).
/// Out-of-bounds boxes are clamped; clamp messages are returned as warnings.
pub fn load_annotations(
    path: &Path,
    video_id: impl Into<String>,
    frame_count: usize,
    frame_width: usize,
    frame_height: usize,
) -> Result<(AnnotationSet, Vec<String>)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(f);
    let mut set = AnnotationSet::new(video_id, frame_count, frame_width, frame_height);
    let mut warnings = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if lineno == 0 && trimmed.starts_with("frame_index") {
            continue; // optional header
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(Error::data(format!(
                "{}:{}: expected 5 fields, got {}",
                path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let parse_err = |what: &str, v: &str| {
            Error::data(format!(
                "{}:{}: malformed {what} '{v}'",
                path.display(),
                lineno + 1
            ))
        };
        let frame: usize = fields[0].parse().map_err(|_| parse_err("frame_index", fields[0]))?;
        let mut coords = [0f64; 4];
        for (i, c) in coords.iter_mut().enumerate() {
            *c = fields[i + 1].parse().map_err(|_| parse_err("coordinate", fields[i + 1]))?;
        }
        let b = BoundingBox::new(coords[0], coords[1], coords[2], coords[3]).map_err(|e| {
            Error::data(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        if let Some(w) = set.add_box(frame, b)? {
            warnings.push(format!("{}:{}: {w}", path.display(), lineno + 1));
        }
    }
    Ok((set, warnings))
}
