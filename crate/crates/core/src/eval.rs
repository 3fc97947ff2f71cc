//! Top-1 accuracy, optionally with the evaluated model fed only the
//! patches another model ranks highest.
//!
//! When the scorer works on a coarser patch grid than the evaluated model,
//! its scores are bicubically interpolated to the finer grid and the image is
//! upsampled to the evaluated model's resolution before selection.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::interp::{interpolate_scores, upsample_image, Alignment};
use crate::masking::{
    head_mean, random_keep, recovery_rate, select_keep, KeepSet, MaskPolicy, SaliencyScores, ScoreSource,
};
use crate::tensor::{Real, Tensor};
use crate::vit::ViT;

/// How each example's keep set is chosen during evaluation.
#[derive(Clone, Debug)]
pub struct EvalMasking<'a> {
    /// Model whose attention ranks the patches.
    pub scorer: &'a ViT<f32>,
    /// Patches kept, counted on the evaluated model's grid.
    pub keep: usize,
    pub policy: MaskPolicy,
    pub alignment: Alignment,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of a `b × C` logit matrix whose argmax is the label.
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let b = logits.shape()[0];
    if b != labels.len() || logits.rank() != 2 {
        return Err(Error::shape("accuracy", logits.shape(), &[labels.len()]));
    }
    let hits = (0..b).filter(|&i| argmax(logits.row(i)) == labels[i]).count();
    Ok(hits as f64 / b as f64)
}

/// Saliency of one image under `policy`, computed by `scorer`.
pub fn score_image(scorer: &ViT<f32>, image: &Tensor<f32>, policy: &MaskPolicy) -> Result<SaliencyScores> {
    let want_patch = matches!(policy, MaskPolicy::TokenToken);
    let rec = scorer.forward_images(std::slice::from_ref(image), None, want_patch)?;
    if want_patch {
        crate::masking::token_token_scores(&rec, 0)
    } else {
        let att = rec.class_attention.as_ref().expect("forward records attention");
        let (h, n) = (att.shape()[1], att.shape()[2]);
        let source = match policy {
            MaskPolicy::External { .. } => ScoreSource::External,
            _ => ScoreSource::StudentMeanAttention,
        };
        SaliencyScores::new(head_mean(att.data(), h, n), source)
    }
}

/// Keep set and (possibly upsampled) input image for one example.
pub fn masked_example(
    model: &ViT<f32>,
    image: &Tensor<f32>,
    masking: &EvalMasking<'_>,
    stream: u64,
) -> Result<(Tensor<f32>, KeepSet)> {
    let n = model.config.num_patches();
    let side = model.config.image_size;
    let input = if image.shape()[1] == side {
        image.clone()
    } else {
        upsample_image(image, side, masking.alignment)?
    };
    if let MaskPolicy::Random { seed } = masking.policy {
        return Ok((input, random_keep(n, masking.keep, seed, stream)?));
    }
    let scores = score_image(masking.scorer, image, &masking.policy)?;
    let scores = if scores.grid_side() == model.config.grid_side() {
        scores
    } else {
        interpolate_scores(&scores, model.config.grid_side(), masking.alignment)?
    };
    Ok((input, select_keep(&scores, masking.keep, &masking.policy)?))
}

/// Top-1 accuracy of `model` on `data`. Images smaller than the model's
/// input are upsampled.
pub fn evaluate(model: &ViT<f32>, data: &Dataset, masking: Option<&EvalMasking<'_>>) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("cannot evaluate on an empty dataset"));
    }
    if data.num_classes > model.config.num_classes {
        return Err(Error::param("dataset has more classes than the model"));
    }
    let mut hits = 0usize;
    for (i, (image, &label)) in data.images.iter().zip(&data.labels).enumerate() {
        let rec = match masking {
            None => {
                let input = if image.shape()[1] == model.config.image_size {
                    image.clone()
                } else {
                    upsample_image(image, model.config.image_size, Alignment::default())?
                };
                model.forward_images(&[input], None, false)?
            }
            Some(m) => {
                let (input, keep) = masked_example(model, image, m, i as u64)?;
                model.forward_images(&[input], Some(&[keep]), false)?
            }
        };
        if argmax(rec.logits.row(0)) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// One row of a keep sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub fraction: f64,
    pub keep: usize,
    pub accuracy: f64,
}

/// Accuracy of `model` at each keep fraction, with patches ranked by
/// `scorer` under `policy`.
pub fn keep_sweep(
    model: &ViT<f32>,
    scorer: &ViT<f32>,
    data: &Dataset,
    fractions: &[f64],
    policy: &MaskPolicy,
    alignment: Alignment,
) -> Result<Vec<SweepPoint>> {
    let n = model.config.num_patches();
    fractions
        .iter()
        .map(|&f| {
            let keep = crate::pipeline::keep_from_fraction(f, n)?;
            let masking = EvalMasking {
                scorer,
                keep,
                policy: policy.clone(),
                alignment,
            };
            Ok(SweepPoint {
                fraction: f,
                keep,
                accuracy: evaluate(model, data, Some(&masking))?,
            })
        })
        .collect()
}

/// Mean fraction of each image's ground-truth salient patches that appear
/// among the `k` patches `model` ranks highest.
pub fn saliency_recovery(
    model: &ViT<f32>,
    images: &[Tensor<f32>],
    salient: &[Vec<usize>],
    k: usize,
) -> Result<f64> {
    if images.is_empty() || images.len() != salient.len() {
        return Err(Error::param("need one salient set per image"));
    }
    let mut total = 0.0;
    for (image, truth) in images.iter().zip(salient) {
        let scores = score_image(model, image, &MaskPolicy::TopK)?;
        total += recovery_rate(&select_keep(&scores, k, &MaskPolicy::TopK)?, truth);
    }
    Ok(total / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Split, SyntheticSpec};
    use crate::vit::ViTConfig;

    fn cfg(image_size: usize) -> ViTConfig {
        ViTConfig {
            image_size,
            patch_size: 2,
            channels: 3,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            mlp_ratio: 2.0,
            num_classes: 4,
        }
    }

    fn data() -> Dataset {
        let spec = SyntheticSpec {
            seed: 0,
            num_classes: 4,
            grid_side: 4,
            patch_size: 2,
            channels: 3,
            salient_patch_count: 4,
            noise_sigma: 0.2,
            texture_seed: 0,
        };
        gen_synthetic(&spec, 20).unwrap().dataset
    }

    #[test]
    fn accuracy_of_one_hot_logits() {
        let labels = vec![2, 0, 1, 1];
        let mut logits = Tensor::<f32>::zeros(vec![4, 3]);
        for (i, &l) in labels.iter().enumerate() {
            logits.data_mut()[i * 3 + l] = 1.0;
        }
        assert_eq!(accuracy(&logits, &labels).unwrap(), 1.0);
    }

    #[test]
    fn constant_model_is_at_chance() {
        let mut m = ViT::<f32>::new(cfg(8), 1).unwrap();
        m.params.head.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let acc = evaluate(&m, &data(), None).unwrap();
        assert!((acc - 0.25).abs() < 1e-12);
    }

    #[test]
    fn keep_all_masking_matches_plain_evaluation() {
        let m = ViT::<f32>::new(cfg(8), 2).unwrap();
        let scorer = ViT::<f32>::new(cfg(8), 3).unwrap();
        let d = data();
        let plain = evaluate(&m, &d, None).unwrap();
        let masking = EvalMasking {
            scorer: &scorer,
            keep: 16,
            policy: MaskPolicy::TopK,
            alignment: Alignment::HalfPixel,
        };
        assert_eq!(evaluate(&m, &d, Some(&masking)).unwrap(), plain);
        let sweep = keep_sweep(
            &m,
            &scorer,
            &d,
            &[1.0, 0.5, 0.25],
            &MaskPolicy::TopK,
            Alignment::HalfPixel,
        )
        .unwrap();
        assert_eq!(sweep[0].accuracy, plain);
        assert_eq!(sweep.iter().map(|p| p.keep).collect::<Vec<_>>(), vec![16, 8, 4]);
    }

    #[test]
    fn coarse_scorer_drives_fine_model() {
        // scorer on 8×8 images (4×4 grid), model on 16×16 (8×8 grid)
        let scorer = ViT::<f32>::new(cfg(8), 4).unwrap();
        let model = ViT::<f32>::new(cfg(16), 5).unwrap();
        let d = data();
        let masking = EvalMasking {
            scorer: &scorer,
            keep: 16,
            policy: MaskPolicy::External {
                scorer: "coarse".into(),
            },
            alignment: Alignment::HalfPixel,
        };
        let (input, keep) = masked_example(&model, &d.images[0], &masking, 0).unwrap();
        assert_eq!(input.shape(), &[3, 16, 16]);
        assert_eq!(keep.universe(), 64);
        assert_eq!(keep.len(), 16);
        let acc = evaluate(&model, &d, Some(&masking)).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn recovery_of_an_attention_free_scorer() {
        // zero query/key weights give uniform attention, so every score ties
        // and top-k keeps the lowest indices
        let mut m = ViT::<f32>::new(cfg(8), 1).unwrap();
        for b in &mut m.params.blocks {
            b.qkv.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let d = data();
        let truth: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3], vec![0, 1, 14, 15]];
        let r = saliency_recovery(&m, &d.images[..2], &truth, 4).unwrap();
        assert!((r - 0.75).abs() < 1e-12);
        assert!(saliency_recovery(&m, &d.images[..2], &truth[..1], 4).is_err());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let m = ViT::<f32>::new(cfg(8), 1).unwrap();
        let empty = Dataset::new(vec![], vec![], 4, Split::Val).unwrap();
        assert!(evaluate(&m, &empty, None).is_err());
    }
}
