//! Pluggable face detection and confidence-gated cropping.
//!
//! The third-party detector itself is out of scope; only its interface is
//! modeled. Two built-ins exist: a whole-image detector (confidence 1.0)
//! and a detector that replays the box stored on the manifest row.

use crate::data::manifest::{Detection, ManifestRow};
use crate::data::image::Image;
use crate::data::DataError;

/// Detection threshold: a face counts only above this confidence.
pub const CONFIDENCE_THRESHOLD: f32 = 0.9;

pub trait FaceDetector: Sync {
    /// Candidate boxes for an image already resized to working resolution.
    fn detect(&self, img: &Image, row: &ManifestRow) -> Vec<Detection>;
}

/// Reports the full frame with confidence 1.0.
pub struct WholeImageDetector;

impl FaceDetector for WholeImageDetector {
    fn detect(&self, img: &Image, _row: &ManifestRow) -> Vec<Detection> {
        vec![Detection {
            x: 0.0,
            y: 0.0,
            w: img.w as f32,
            h: img.h as f32,
            confidence: 1.0,
        }]
    }
}

/// Replays the detection stored on the manifest row, if any.
pub struct ManifestBoxDetector;

impl FaceDetector for ManifestBoxDetector {
    fn detect(&self, _img: &Image, row: &ManifestRow) -> Vec<Detection> {
        row.detection.into_iter().collect()
    }
}

/// Crop the highest-confidence detection above `threshold` from a copy of
/// the image. `None` means no acceptable face (the row is dropped and
/// counted `no_face` by the caller). A degenerate box is a detector
/// contract violation, not a data condition.
pub fn detect_and_crop(
    img: &Image,
    detector: &dyn FaceDetector,
    row: &ManifestRow,
    threshold: f32,
) -> Result<Option<Image>, DataError> {
    let detections = detector.detect(img, row);
    let best = detections
        .into_iter()
        .filter(|d| d.confidence > threshold)
        .max_by(|a, b| a.confidence.total_cmp(&b.confidence));
    let Some(best) = best else { return Ok(None) };
    if best.w <= 0.0 || best.h <= 0.0 {
        return Err(DataError::DetectorContract(format!(
            "degenerate box {}x{}",
            best.w, best.h
        )));
    }
    if best.x < 0.0
        || best.y < 0.0
        || best.x + best.w > img.w as f32
        || best.y + best.h > img.h as f32
    {
        return Err(DataError::DetectorContract(format!(
            "box ({}, {}) {}x{} outside {}x{} image",
            best.x, best.y, best.w, best.h, img.w, img.h
        )));
    }
    let crop = img.crop(
        best.x as usize,
        best.y as usize,
        best.w as usize,
        best.h as usize,
    )?;
    Ok(Some(crop))
}
