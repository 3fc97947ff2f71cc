//! Bicubic upsampling of score grids and images.
//!
//! Uses the cubic convolution kernel with `a = -0.5` (Catmull-Rom) and
//! clamps sample indices at the borders.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{SaliencyScores, ScoreSource};
use crate::tensor::{Real, Tensor};

pub const CUBIC_A: f64 = -0.5;

/// How output sample positions map onto the source grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    /// Pixel centers: `src = (dst + 0.5)·g/G − 0.5`.
    #[default]
    HalfPixel,
    /// Corner pixels coincide: `src = dst·(g − 1)/(G − 1)`.
    AlignCorners,
}

/// Cubic convolution weight at distance `x`.
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

fn source_coord(dst: usize, from: usize, to: usize, align: Alignment) -> f64 {
    match align {
        Alignment::HalfPixel => (dst as f64 + 0.5) * from as f64 / to as f64 - 0.5,
        Alignment::AlignCorners => {
            if to == 1 {
                0.0
            } else {
                dst as f64 * (from - 1) as f64 / (to - 1) as f64
            }
        }
    }
}

/// Per output index: four clamped source indices and their weights.
fn taps(from: usize, to: usize, align: Alignment) -> Vec<([usize; 4], [f64; 4])> {
    (0..to)
        .map(|dst| {
            let s = source_coord(dst, from, to, align);
            let base = s.floor();
            let t = s - base;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for j in 0..4 {
                let off = j as f64 - 1.0;
                let i = (base + off).clamp(0.0, (from - 1) as f64) as usize;
                idx[j] = i;
                w[j] = cubic_weight(t - off);
            }
            (idx, w)
        })
        .collect()
}

/// Weighted sum written relative to the nearest-left tap, so constant
/// neighbourhoods reproduce the constant exactly despite rounding in the
/// weights.
fn blend(idx: &[usize; 4], w: &[f64; 4], at: impl Fn(usize) -> f64) -> f64 {
    let p1 = at(idx[1]);
    p1 + (0..4).map(|j| w[j] * (at(idx[j]) - p1)).sum::<f64>()
}

/// Separable bicubic resize of one `from × from` plane to `to × to`.
pub fn resize_plane(src: &[f64], from: usize, to: usize, align: Alignment) -> Vec<f64> {
    debug_assert_eq!(src.len(), from * from);
    let tp = taps(from, to, align);
    // rows first: from × to
    let mut tmp = vec![0.0; from * to];
    for y in 0..from {
        let row = &src[y * from..(y + 1) * from];
        for (x, (idx, w)) in tp.iter().enumerate() {
            tmp[y * to + x] = blend(idx, w, |i| row[i]);
        }
    }
    let mut out = vec![0.0; to * to];
    for (y, (idx, w)) in tp.iter().enumerate() {
        for x in 0..to {
            out[y * to + x] = blend(idx, w, |i| tmp[i * to + x]);
        }
    }
    out
}

/// Upsamples a `g × g` score grid to `side × side`. Negative overshoot is
/// clamped to zero.
pub fn interpolate_scores(
    scores: &SaliencyScores,
    side: usize,
    align: Alignment,
) -> Result<SaliencyScores> {
    let g = scores.grid_side();
    if g < 2 {
        return Err(Error::param("score grid must be at least 2×2"));
    }
    if side < g {
        return Err(Error::param(format!(
            "cannot interpolate a {g}×{g} grid down to {side}×{side}"
        )));
    }
    if side == g {
        return Ok(scores.clone());
    }
    let mut out = resize_plane(scores.values(), g, side, align);
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    SaliencyScores::new(out, ScoreSource::Interpolated)
}

/// Bicubic upsample of a square `channels × h × h` image, clamped to [0, 1].
pub fn upsample_image<T: Real>(image: &Tensor<T>, side: usize, align: Alignment) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("upsample_image", image.shape(), &[0, side, side]));
    };
    if h != w {
        return Err(Error::param(format!("image must be square, got {h}×{w}")));
    }
    if side < h {
        return Err(Error::param(format!("target side {side} is smaller than {h}")));
    }
    if side == h {
        return Ok(image.clone());
    }
    let mut out = Vec::with_capacity(c * side * side);
    for plane in image.data().chunks(h * h) {
        let src: Vec<f64> = plane.iter().map(|v| v.as_f64()).collect();
        out.extend(
            resize_plane(&src, h, side, align)
                .into_iter()
                .map(|v| T::from_f64(v.clamp(0.0, 1.0))),
        );
    }
    Tensor::new(vec![c, side, side], out)
}
