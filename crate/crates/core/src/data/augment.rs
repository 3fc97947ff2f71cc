//! Horizontal flip and pad-then-crop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero padding on every side before cropping back to the original size.
pub const PAD: usize = 4;

/// Crop window origin within the padded image; `(PAD, PAD)` is centered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Crop {
    pub dy: usize,
    pub dx: usize,
}

/// Flips with probability ½, then crops a random window of the zero-padded
/// image. Deterministic given `seed`.
pub fn augment(image: &Tensor<f32>, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.gen_bool(0.5);
    let crop = Crop {
        dy: rng.gen_range(0..=2 * PAD),
        dx: rng.gen_range(0..=2 * PAD),
    };
    augment_with(image, flip, crop)
}

pub fn augment_with(image: &Tensor<f32>, flip: bool, crop: Crop) -> Result<Tensor<f32>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::param("augment expects a channels×H×W image"));
    };
    if crop.dy > 2 * PAD || crop.dx > 2 * PAD {
        return Err(Error::param("crop offset outside the padded image"));
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            // padded row y + dy maps to source row y + dy - PAD
            let Some(sy) = (y + crop.dy).checked_sub(PAD).filter(|&v| v < h) else {
                continue;
            };
            for x in 0..w {
                let Some(sx) = (x + crop.dx).checked_sub(PAD).filter(|&v| v < w) else {
                    continue;
                };
                let sx = if flip { w - 1 - sx } else { sx };
                out[ch * h * w + y * w + x] = src[ch * h * w + sy * w + sx];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}
