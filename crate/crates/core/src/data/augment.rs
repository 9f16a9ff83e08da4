//! Randomized training augmentation: flip, transpose, per-channel
//! saturation scaling, and rotation. Values stay in 0-255 by clamping.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub transpose_prob: f64,
    /// Per-channel multiplicative scale sampled uniformly from this range.
    pub saturation: (f32, f32),
    /// Rotation angle sampled uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            transpose_prob: 0.5,
            saturation: (0.8, 1.2),
            rotation_deg: 15.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Identity configuration: no randomness applied at all.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            transpose_prob: 0.0,
            saturation: (1.0, 1.0),
            rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> bool {
        (0.0..=1.0).contains(&self.flip_prob)
            && (0.0..=1.0).contains(&self.transpose_prob)
            && self.saturation.0 <= self.saturation.1
            && self.saturation.0.is_finite()
            && self.saturation.1.is_finite()
            && self.rotation_deg.is_finite()
            && self.rotation_deg >= 0.0
    }
}

/// Apply each augmentation independently at random. The RNG draw order is
/// fixed (flip, transpose, saturation per channel, rotation) so a fixed
/// seed reproduces the exact output.
pub fn augment(img: &Image, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Image {
    debug_assert!(cfg.validate(), "invalid augment config {cfg:?}");
    let mut out = img.clone();
    if cfg.flip_prob > 0.0 && rng.random::<f64>() < cfg.flip_prob {
        out = out.flip_horizontal();
    }
    if cfg.transpose_prob > 0.0 && rng.random::<f64>() < cfg.transpose_prob {
        out = out.transpose();
    }
    if cfg.saturation != (1.0, 1.0) {
        for ch in 0..out.c {
            let factor = rng.random_range(cfg.saturation.0..=cfg.saturation.1);
            out = out.scale_channel(ch, factor);
        }
    }
    if cfg.rotation_deg > 0.0 {
        let angle = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out = out.rotate(angle);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn test_image() -> Image {
        let mut img = Image::filled(8, 8, 3, 0);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 251) as u8;
        }
        img
    }

    #[test]
    fn identity_config_leaves_image_unchanged() {
        let img = test_image();
        let mut rng = RngState::new(1).stream();
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn flip_twice_restores_original() {
        let img = test_image();
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
    }

    #[test]
    fn fixed_seed_reproduces_output() {
        let img = test_image();
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut RngState::new(11).stream());
        let b = augment(&img, &cfg, &mut RngState::new(11).stream());
        let c = augment(&img, &cfg, &mut RngState::new(12).stream());
        assert_eq!(a, b);
        // Different seed virtually always differs on this image.
        assert_ne!(a, c);
    }
}
