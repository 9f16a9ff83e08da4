//! Per-sample intensity normalization and the diagnostic histogram.

use crate::data::image::Image;
use crate::tensor::{Element, Tensor};

/// Stack images into a raw `[B, H, W, C]` tensor of 0-255 values. All
/// images must share dimensions.
pub fn batch_tensor<E: Element>(images: &[&Image]) -> Tensor<E> {
    assert!(!images.is_empty(), "empty batch");
    let (h, w, c) = (images[0].h, images[0].w, images[0].c);
    let mut data = Vec::with_capacity(images.len() * h * w * c);
    for img in images {
        assert_eq!((img.h, img.w, img.c), (h, w, c), "ragged batch");
        data.extend(img.data.iter().map(|&v| E::from_f64(v as f64)));
    }
    Tensor::new(vec![images.len(), h, w, c], data).expect("batch shape")
}

/// Floor for the per-sample standard deviation, guarding constant samples.
pub const STD_FLOOR: f64 = 1e-7;

/// Per sample: rescale 0-255 to 0-1, subtract the sample's own mean over all
/// pixels and channels, then divide by its population standard deviation
/// (floored at 1e-7).
pub fn normalize_batch<E: Element>(batch: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(batch.rank(), 4, "expected [B,H,W,C]");
    let b = batch.shape()[0];
    let sample_len = batch.numel() / b;
    let inv255 = E::from_f64(1.0 / 255.0);
    let inv_n = E::from_f64(1.0 / sample_len as f64);
    let floor = E::from_f64(STD_FLOOR);
    let mut data = Vec::with_capacity(batch.numel());
    for sample in batch.data().chunks_exact(sample_len) {
        let mut mean = E::zero();
        for &v in sample {
            mean = mean + v * inv255;
        }
        mean = mean * inv_n;
        let mut var = E::zero();
        for &v in sample {
            let d = v * inv255 - mean;
            var = var + d * d;
        }
        var = var * inv_n;
        let inv_std = E::one() / var.sqrt().max(floor);
        for &v in sample {
            data.push((v * inv255 - mean) * inv_std);
        }
    }
    Tensor::new(batch.shape().to_vec(), data).expect("shape preserved")
}

/// Equal-width histogram over the observed range; the last bin is closed.
/// Counts always sum to the element count.
pub fn histogram<E: Element>(values: &Tensor<E>, bins: usize) -> Vec<u64> {
    assert!(bins >= 1);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values.data() {
        let v = v.as_f64();
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let mut counts = vec![0u64; bins];
    if !lo.is_finite() || hi <= lo {
        counts[0] = values.numel() as u64;
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values.data() {
        let idx = (((v.as_f64() - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Bin counts of the raw batch and of its normalized counterpart.
pub fn intensity_histogram<E: Element>(batch: &Tensor<E>, bins: usize) -> (Vec<u64>, Vec<u64>) {
    let before = histogram(batch, bins);
    let after = histogram(&normalize_batch(batch), bins);
    (before, after)
}
