//! The preprocessing pipeline: label filtering, resize to working
//! resolution, confidence-gated face cropping, and cropped-image output.

use std::path::{Path, PathBuf};

use crate::data::detect::{detect_and_crop, FaceDetector};
use crate::data::filter::{filter_rows, FilterReport};
use crate::data::image::{read_image, write_image};
use crate::data::manifest::ManifestRow;
use crate::data::DataError;

pub struct PreprocessConfig<'a> {
    pub image_root: PathBuf,
    pub out_dir: PathBuf,
    pub working_res: usize,
    pub threshold: f32,
    pub detector: &'a dyn FaceDetector,
}

pub struct PreprocessOutcome {
    pub rows: Vec<ManifestRow>,
    pub report: FilterReport,
    /// Retained rows whose image file could not be read; dropped, listed,
    /// but not a program failure.
    pub missing_files: Vec<String>,
}

/// Run the full pipeline. Rows survive if their labels pass the filter AND
/// a face clears the confidence gate; crops are written under `out_dir` and
/// the returned rows point at them.
pub fn preprocess(rows: &[ManifestRow], cfg: &PreprocessConfig) -> Result<PreprocessOutcome, DataError> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (labeled, mut report) = filter_rows(rows);
    let mut out_rows = Vec::with_capacity(labeled.len());
    let mut missing_files = Vec::new();
    for (i, row) in labeled.into_iter().enumerate() {
        let src = cfg.image_root.join(&row.path);
        let img = match read_image(&src) {
            Ok(img) => img,
            Err(DataError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => {
                missing_files.push(row.path.clone());
                report.retained -= 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        // Resize happens before detection; stored boxes are in
        // working-resolution coordinates.
        let resized = img.resize(cfg.working_res, cfg.working_res);
        match detect_and_crop(&resized, cfg.detector, &row, cfg.threshold)? {
            None => {
                report.no_face += 1;
                report.retained -= 1;
            }
            Some(face) => {
                let out_name = format!("face_{i:06}.ppm");
                let face = face.resize(cfg.working_res, cfg.working_res);
                write_image(&cfg.out_dir.join(&out_name), &face)?;
                out_rows.push(ManifestRow {
                    path: out_name,
                    ..row
                });
            }
        }
    }
    Ok(PreprocessOutcome {
        rows: out_rows,
        report,
        missing_files,
    })
}

/// Report text: the filter counts plus any missing-file listing.
pub fn render_report(outcome: &PreprocessOutcome) -> String {
    let mut s = outcome.report.render();
    s.push_str(&format!("missing_file: {}\n", outcome.missing_files.len()));
    for path in &outcome.missing_files {
        s.push_str(&format!("  missing: {path}\n"));
    }
    s
}

/// Write `String` content atomically (temp file + rename).
pub fn write_atomic(path: &Path, content: &str) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, content)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
