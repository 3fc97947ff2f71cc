//! Binary PPM (P6) output.

use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::KeepSet;
use crate::tensor::Tensor;

/// Fill value for dropped patches.
pub const MASK_GRAY: u8 = 128;

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 1- or 3-channel image; a single channel is written as gray.
pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    overlay(image, None, 1)
}

/// PPM bytes with every patch outside `keep` painted [`MASK_GRAY`].
pub fn overlay_ppm(image: &Tensor<f32>, keep: &KeepSet, patch_size: usize) -> Result<Vec<u8>> {
    overlay(image, Some(keep), patch_size)
}

pub fn render_mask_overlay(
    image: &Tensor<f32>,
    keep: &KeepSet,
    patch_size: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = overlay_ppm(image, keep, patch_size)?;
    let path = path.as_ref();
    std::fs::write(path, bytes).map_err(|e| Error::file(path, e))
}

fn overlay(image: &Tensor<f32>, keep: Option<&KeepSet>, patch_size: usize) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::param("PPM output expects a channels×H×W image"));
    };
    if c != 1 && c != 3 {
        return Err(Error::param(format!("cannot write {c} channels as PPM")));
    }
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::param(format!(
            "{h}×{w} image is not divisible into {patch_size}-pixel patches"
        )));
    }
    let gw = w / patch_size;
    if let Some(k) = keep {
        if k.universe() != gw * (h / patch_size) {
            return Err(Error::param("keep set does not match the patch grid"));
        }
    }
    let header = format!("P6\n{w} {h}\n255\n");
    let mut out = Vec::with_capacity(header.len() + 3 * h * w);
    out.extend_from_slice(header.as_bytes());
    let d = image.data();
    for y in 0..h {
        for x in 0..w {
            let patch = (y / patch_size) * gw + x / patch_size;
            if keep.is_some_and(|k| !k.contains(patch)) {
                out.extend_from_slice(&[MASK_GRAY; 3]);
                continue;
            }
            for ch in 0..3 {
                let src = if c == 1 { 0 } else { ch };
                out.push(to_byte(d[src * h * w + y * w + x]));
            }
        }
    }
    Ok(out)
}
