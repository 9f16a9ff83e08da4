//! Patch flattening: an image becomes a sequence of non-overlapping
//! P x P x C blocks, each flattened row-major.

use crate::model::config::PatchConfig;
use crate::model::ModelError;
use crate::tensor::{Element, Tensor};

/// `[H, W, C]` image to `[N, P*P*C]` patch rows. Patches are ordered
/// row-major over the patch grid; within a patch, elements are ordered
/// (y, x, channel) row-major, matching the image layout.
pub fn extract_patches<E: Element>(
    img: &Tensor<E>,
    cfg: &PatchConfig,
) -> Result<Tensor<E>, ModelError> {
    if img.shape() != [cfg.h, cfg.w, cfg.c] {
        return Err(ModelError::BatchShape {
            expected: vec![cfg.h, cfg.w, cfg.c],
            found: img.shape().to_vec(),
        });
    }
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_len());
    copy_patches(img.data(), cfg, &mut out);
    Ok(Tensor::new(vec![cfg.num_patches(), cfg.patch_len()], out)?)
}

/// `[B, H, W, C]` batch to `[B*N, P*P*C]`, sample-major.
pub fn extract_patches_batch<E: Element>(
    batch: &Tensor<E>,
    cfg: &PatchConfig,
) -> Result<Tensor<E>, ModelError> {
    if batch.rank() != 4 || batch.shape()[1..] != [cfg.h, cfg.w, cfg.c] {
        return Err(ModelError::BatchShape {
            expected: vec![0, cfg.h, cfg.w, cfg.c],
            found: batch.shape().to_vec(),
        });
    }
    cfg.validate()?;
    let b = batch.shape()[0];
    let sample_len = cfg.h * cfg.w * cfg.c;
    let mut out = Vec::with_capacity(b * cfg.num_patches() * cfg.patch_len());
    for s in 0..b {
        copy_patches(&batch.data()[s * sample_len..(s + 1) * sample_len], cfg, &mut out);
    }
    Ok(Tensor::new(vec![b * cfg.num_patches(), cfg.patch_len()], out)?)
}

fn copy_patches<E: Element>(img: &[E], cfg: &PatchConfig, out: &mut Vec<E>) {
    let (w, c, p) = (cfg.w, cfg.c, cfg.p);
    let grid_w = cfg.w / p;
    for patch in 0..cfg.num_patches() {
        let gy = patch / grid_w;
        let gx = patch % grid_w;
        for py in 0..p {
            let y = gy * p + py;
            let row_start = (y * w + gx * p) * c;
            out.extend_from_slice(&img[row_start..row_start + p * c]);
        }
    }
}
