//! CIFAR-10 binary batches: per record one label byte, then 3072 bytes of
//! red, green and blue 32×32 planes in row-major order.

use std::path::Path;

use super::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_CLASSES: usize = 10;
const SIDE: usize = 32;

pub fn load_cifar10(path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    parse_cifar10(&bytes, split)
}

pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
        return Err(Error::Format {
            offset,
            msg: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format {
                offset: (i * CIFAR_RECORD) as u64,
                msg: format!("label {label} is not a CIFAR-10 class"),
            });
        }
        let px = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        images.push(Tensor::new(vec![3, SIDE, SIDE], px)?);
        labels.push(label);
    }
    Dataset::new(images, labels, CIFAR_CLASSES, split)
}

/// Encodes a 3×32×32 dataset, pixels quantized by rounding `v·255`.
pub fn write_cifar10(data: &Dataset) -> Result<Vec<u8>> {
    if data.num_classes > CIFAR_CLASSES {
        return Err(Error::param("CIFAR-10 records hold at most 10 classes"));
    }
    if data.image_shape().is_some_and(|s| s != [3, SIDE, SIDE]) {
        return Err(Error::param("CIFAR-10 records hold 3×32×32 images"));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR_RECORD);
    for (img, &label) in data.images.iter().zip(&data.labels) {
        out.push(label as u8);
        out.extend(img.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}
