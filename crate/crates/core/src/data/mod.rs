//! Datasets, augmentation and image output.

mod augment;
mod cifar;
mod ppm;
mod synthetic;

pub use augment::{augment, augment_with, Crop, PAD};
pub use cifar::{load_cifar10, parse_cifar10, write_cifar10, CIFAR_CLASSES, CIFAR_RECORD};
pub use ppm::{encode_ppm, overlay_ppm, render_mask_overlay, MASK_GRAY};
pub use synthetic::{gen_synthetic, SyntheticSet, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Labelled `channels × H × W` images with pixels in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Vec<Tensor<f32>>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::param(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                op: "dataset label",
                index: l,
                len: num_classes,
            });
        }
        if let Some(first) = images.first() {
            if first.rank() != 3 || images.iter().any(|im| im.shape() != first.shape()) {
                return Err(Error::param("images must share one channels×H×W shape"));
            }
        }
        if images
            .iter()
            .flat_map(|im| im.data())
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::param("pixel values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `[channels, H, W]` of the images, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|im| im.shape())
    }

    /// The first `n` examples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}
