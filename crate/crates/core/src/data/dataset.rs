//! In-memory labeled dataset assembled from a manifest.

use std::path::Path;

use crate::data::image::{read_image, Image};
use crate::data::manifest::ManifestRow;
use crate::data::synth::SynthDataset;
use crate::data::DataError;
use crate::model::Task;

/// Images resized to working resolution with their task labels.
pub struct LabeledDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Fraction of the most frequent label.
    pub fn majority_fraction(&self) -> f64 {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap_or(&0) as f64 / self.labels.len().max(1) as f64
    }
}

/// Load manifest rows into memory, resizing to `working_res`. Rows must
/// carry the labels the task needs (run the filter first).
pub fn load_labeled(
    rows: &[ManifestRow],
    image_root: &Path,
    task: Task,
    working_res: usize,
) -> Result<LabeledDataset, DataError> {
    let mut images = Vec::with_capacity(rows.len());
    let mut labels = Vec::with_capacity(rows.len());
    for row in rows {
        let label = label_for(row, task)?;
        let img = read_image(&image_root.join(&row.path))?;
        images.push(img.resize(working_res, working_res));
        labels.push(label);
    }
    Ok(LabeledDataset {
        images,
        labels,
        classes: task.num_classes(),
    })
}

/// Task label of a filtered row.
pub fn label_for(row: &ManifestRow, task: Task) -> Result<usize, DataError> {
    match task {
        Task::Age8 => row
            .age_group
            .map(|g| g.index())
            .ok_or_else(|| DataError::Manifest(format!("{}: missing age group", row.path))),
        Task::Gender2 => row
            .gender
            .and_then(|g| g.label())
            .ok_or_else(|| DataError::Manifest(format!("{}: missing binary gender", row.path))),
    }
}

impl SynthDataset {
    /// View the synthetic set as a labeled dataset without touching disk.
    pub fn to_labeled(&self) -> LabeledDataset {
        LabeledDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            classes: self.classes,
        }
    }
}
