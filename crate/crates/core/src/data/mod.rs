//! Data pipeline: manifests, filtering, detector-driven cropping,
//! normalization, augmentation, batching, and synthetic datasets.

pub mod augment;
pub mod batch;
pub mod dataset;
pub mod detect;
pub mod filter;
pub mod image;
pub mod manifest;
pub mod normalize;
pub mod preprocess;
pub mod synth;

use thiserror::Error;

pub use augment::{augment, AugmentConfig};
pub use batch::make_batches;
pub use dataset::{label_for, load_labeled, LabeledDataset};
pub use detect::{detect_and_crop, FaceDetector, ManifestBoxDetector, WholeImageDetector, CONFIDENCE_THRESHOLD};
pub use filter::{filter_rows, FilterReport};
pub use image::Image;
pub use manifest::{load_manifest, save_manifest, AgeGroup, Detection, Gender, ManifestRow};
pub use normalize::{batch_tensor, intensity_histogram, normalize_batch};
pub use preprocess::{preprocess, render_report, PreprocessConfig, PreprocessOutcome};
pub use synth::{manifest_with_defects, synthesize_dataset, write_synth, DefectCounts, SynthConfig, SynthDataset};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image: {0}")]
    Image(String),
    #[error("detector contract violation: {0}")]
    DetectorContract(String),
    #[error("synthesis: {0}")]
    Synth(String),
}
