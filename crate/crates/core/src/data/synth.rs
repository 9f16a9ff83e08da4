//! Synthetic class-separable datasets for desk-scale runs, plus a manifest
//! fixture generator with controlled defect counts for the preprocessing
//! arithmetic tests.

use std::path::Path;

use rand::Rng;

use crate::data::image::{write_image, Image};
use crate::data::manifest::{save_manifest, AgeGroup, Detection, Gender, ManifestRow};
use crate::data::DataError;
use crate::rng::RngState;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub seed: u64,
}

pub struct SynthDataset {
    pub images: Vec<Image>,
    pub rows: Vec<ManifestRow>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// Generate `n` images over `classes` labels (round-robin, so counts are
/// balanced when classes divide n). Class k brightens blocks k and k+8 of a
/// 4x4 grid, with per-pixel noise on top; every manifest row carries valid
/// labels so the filter drops nothing.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<SynthDataset, DataError> {
    if cfg.classes == 0 || cfg.classes > 8 {
        return Err(DataError::Synth(format!(
            "classes must be in 1..=8, got {}",
            cfg.classes
        )));
    }
    if cfg.n < cfg.classes {
        return Err(DataError::Synth(format!(
            "need at least one sample per class ({} < {})",
            cfg.n, cfg.classes
        )));
    }
    if cfg.image_size < 4 {
        return Err(DataError::Synth("image_size must be >= 4".into()));
    }
    let mut rng = RngState::new(cfg.seed).stream();
    let mut images = Vec::with_capacity(cfg.n);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let label = i % cfg.classes;
        images.push(class_image(label, cfg.image_size, &mut rng));
        labels.push(label);
        rows.push(ManifestRow {
            path: format!("img_{i:05}.ppm"),
            age_group: Some(AgeGroup::ALL[label % 8]),
            gender: Some(if cfg.classes == 2 {
                [Gender::F, Gender::M][label]
            } else if i % 2 == 0 {
                Gender::F
            } else {
                Gender::M
            }),
            detection: None,
        });
    }
    Ok(SynthDataset {
        images,
        rows,
        labels,
        classes: cfg.classes,
    })
}

fn class_image(label: usize, size: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Image {
    let block = size / 4;
    let bright = [label % 16, (label + 8) % 16];
    let mut img = Image::filled(size, size, 3, 0);
    for y in 0..size {
        for x in 0..size {
            let cell = (y / block).min(3) * 4 + (x / block).min(3);
            let base: f32 = if bright.contains(&cell) { 205.0 } else { 55.0 };
            for ch in 0..3 {
                let noise: f32 = rng.random_range(-35.0..35.0);
                img.set(y, x, ch, (base + noise).clamp(0.0, 255.0) as u8);
            }
        }
    }
    img
}

/// Write images and `manifest.csv` under `dir`.
pub fn write_synth(ds: &SynthDataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    for (img, row) in ds.images.iter().zip(&ds.rows) {
        write_image(&dir.join(&row.path), img)?;
    }
    save_manifest(&dir.join("manifest.csv"), &ds.rows)?;
    Ok(())
}

/// Defect mix for a preprocessing fixture manifest.
#[derive(Debug, Clone, Copy)]
pub struct DefectCounts {
    pub valid: usize,
    pub no_gender: usize,
    pub gender_u: usize,
    pub no_age: usize,
    /// Rows whose stored detection confidence sits below the 0.9 gate.
    pub low_confidence: usize,
}

impl DefectCounts {
    pub fn total(&self) -> usize {
        self.valid + self.no_gender + self.gender_u + self.no_age + self.low_confidence
    }
}

/// Build a manifest with exactly the requested defect counts. Every row
/// points at `image_path`; detection boxes are full-frame in `res`-pixel
/// working coordinates with confidence 0.95 (valid) or 0.85 (low).
/// Defective rows carry exactly one defect each, so drop-reason precedence
/// cannot reshuffle the counts.
pub fn manifest_with_defects(counts: &DefectCounts, image_path: &str, res: usize) -> Vec<ManifestRow> {
    let box_at = |confidence: f32| {
        Some(Detection {
            x: 0.0,
            y: 0.0,
            w: res as f32,
            h: res as f32,
            confidence,
        })
    };
    let mut rows = Vec::with_capacity(counts.total());
    let mut age_cycle = (0..8).cycle();
    let mut push = |n: usize, age: bool, gender: Option<Gender>, conf: f32| {
        for _ in 0..n {
            let age_group = age.then(|| AgeGroup::ALL[age_cycle.next().unwrap()]);
            rows.push(ManifestRow {
                path: image_path.to_string(),
                age_group,
                gender,
                detection: box_at(conf),
            });
        }
    };
    push(counts.no_gender, true, None, 0.95);
    push(counts.gender_u, true, Some(Gender::U), 0.95);
    push(counts.no_age, false, Some(Gender::M), 0.95);
    push(counts.low_confidence, true, Some(Gender::F), 0.85);
    push(counts.valid, true, Some(Gender::M), 0.95);
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::filter::filter_rows;

    #[test]
    fn balanced_class_counts() {
        let ds = synthesize_dataset(&SynthConfig {
            n: 64,
            classes: 8,
            image_size: 32,
            seed: 1,
        })
        .unwrap();
        for k in 0..8 {
            assert_eq!(ds.labels.iter().filter(|&&l| l == k).count(), 8);
        }
    }

    #[test]
    fn generated_manifest_passes_filter_with_zero_drops() {
        let ds = synthesize_dataset(&SynthConfig {
            n: 24,
            classes: 8,
            image_size: 16,
            seed: 2,
        })
        .unwrap();
        let (kept, report) = filter_rows(&ds.rows);
        assert_eq!(kept.len(), 24);
        assert_eq!(report.discarded(), 0);
    }

    #[test]
    fn nearest_class_mean_probe_beats_chance() {
        // Separability sanity: a linear probe (nearest class mean on raw
        // pixels) must beat chance by a wide margin.
        let ds = synthesize_dataset(&SynthConfig {
            n: 160,
            classes: 8,
            image_size: 32,
            seed: 3,
        })
        .unwrap();
        let half = ds.images.len() / 2;
        let dim = 32 * 32 * 3;
        let mut means = vec![vec![0.0f64; dim]; 8];
        let mut counts = vec![0usize; 8];
        for i in 0..half {
            counts[ds.labels[i]] += 1;
            for (m, &v) in means[ds.labels[i]].iter_mut().zip(&ds.images[i].data) {
                *m += v as f64;
            }
        }
        for (mean, &count) in means.iter_mut().zip(&counts) {
            for v in mean.iter_mut() {
                *v /= count.max(1) as f64;
            }
        }
        let mut correct = 0;
        for i in half..ds.images.len() {
            let img = &ds.images[i];
            let best = (0..8)
                .min_by(|&a, &b| {
                    let da: f64 = means[a]
                        .iter()
                        .zip(&img.data)
                        .map(|(m, &v)| (m - v as f64).powi(2))
                        .sum();
                    let db: f64 = means[b]
                        .iter()
                        .zip(&img.data)
                        .map(|(m, &v)| (m - v as f64).powi(2))
                        .sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            if best == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / (ds.images.len() - half) as f64;
        assert!(acc > 0.5, "probe accuracy {acc} not above chance 0.125");
    }

    #[test]
    fn defect_fixture_has_exact_counts() {
        let counts = DefectCounts {
            valid: 10,
            no_gender: 3,
            gender_u: 2,
            no_age: 4,
            low_confidence: 1,
        };
        let rows = manifest_with_defects(&counts, "shared.ppm", 8);
        assert_eq!(rows.len(), 20);
        let (kept, report) = filter_rows(&rows);
        assert_eq!(report.no_gender, 3);
        assert_eq!(report.gender_u, 2);
        assert_eq!(report.no_age, 4);
        // Low-confidence rows survive label filtering; the detect stage
        // drops them later.
        assert_eq!(kept.len(), 11);
    }
}
