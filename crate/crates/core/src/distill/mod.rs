//! Distillation training: the student runs on full images, the teacher on
//! the patches the student's last-block class attention ranks highest, and
//! the student minimizes `CE + λ·KD`.
//!
//! A teacher-free run (or `λ = 0`) is plain supervised training, which is
//! also how teachers are trained.

mod optim;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub use optim::{cosine_lr, OptimizerState, ADAM_EPS, BETA1, BETA2};

use crate::cost::flops_for;
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::eval::{argmax, evaluate, score_image};
use crate::interp::{interpolate_scores, upsample_image, Alignment};
use crate::masking::{head_mean, select_keep_with_stream, KeepSet, MaskPolicy, SaliencyScores, ScoreSource};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{embed_on_tape, forward_on_tape, ForwardRecord, ViT, ViTParams};

/// Batch size the base learning rate refers to.
pub const LR_REFERENCE_BATCH: f64 = 512.0;

/// How many patches the teacher sees.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum KeepCount {
    /// The whole image with no selection step: ordinary distillation.
    #[default]
    Full,
    /// Exactly this many patches.
    Count(usize),
    /// This fraction of the patches, rounded to nearest and at least one.
    Fraction(f64),
}

impl KeepCount {
    /// Patch count for an `n`-patch teacher; `None` means no masking.
    pub fn resolve(&self, n: usize) -> Result<Option<usize>> {
        match *self {
            KeepCount::Full => Ok(None),
            KeepCount::Count(k) if (1..=n).contains(&k) => Ok(Some(k)),
            KeepCount::Count(k) => Err(Error::param(format!("keep {k} outside 1..={n}"))),
            KeepCount::Fraction(f) => crate::pipeline::keep_from_fraction(f, n).map(Some),
        }
    }
}

/// JSON form: `"full"`, an integer count, or a fractional number in (0, 1].
impl<'de> Deserialize<'de> for KeepCount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Num(f64),
            Word(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(KeepCount::Count(k as usize)),
            Raw::Num(f) if f > 0.0 && f <= 1.0 => Ok(KeepCount::Fraction(f)),
            Raw::Num(f) => Err(serde::de::Error::custom(format!(
                "keep fraction {f} outside (0, 1]"
            ))),
            Raw::Word(w) if w == "full" => Ok(KeepCount::Full),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "keep must be \"full\", a count or a fraction, got \"{w}\""
            ))),
        }
    }
}

/// Command-line form: `full`, an integer count, or a decimal fraction such
/// as `0.5` or `1.0`.
impl std::str::FromStr for KeepCount {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(KeepCount::Full);
        }
        if s.contains('.') {
            let f: f64 = s.parse().map_err(|_| Error::param(format!("bad keep {s:?}")))?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::param(format!("keep fraction {f} outside (0, 1]")));
            }
            return Ok(KeepCount::Fraction(f));
        }
        s.parse()
            .map(KeepCount::Count)
            .map_err(|_| Error::param(format!("bad keep {s:?}")))
    }
}

impl Serialize for KeepCount {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            KeepCount::Full => s.serialize_str("full"),
            KeepCount::Count(k) => s.serialize_u64(k as u64),
            KeepCount::Fraction(f) => s.serialize_f64(f),
        }
    }
}

fn one() -> f64 {
    1.0
}

fn default_wd() -> f64 {
    0.05
}

fn default_policy() -> MaskPolicy {
    MaskPolicy::TopK
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub tau: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub epochs: usize,
    #[serde(default)]
    pub keep: KeepCount,
    #[serde(default = "default_policy")]
    pub policy: MaskPolicy,
    /// Feed the student the masked image too and use those logits for the
    /// KD term. CE stays on the full-image logits.
    #[serde(default)]
    pub student_sees_masked: bool,
    #[serde(default)]
    pub seed: u64,
    /// Random flip and pad-crop, identical for student and teacher.
    #[serde(default)]
    pub augment: bool,
    /// Grid alignment for upsampling images and scores when the teacher
    /// works at a finer resolution than the student.
    #[serde(default)]
    pub alignment: Alignment,
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::param("lambda must be finite and non-negative"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::param("tau must be positive"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::param("base_lr must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::param("weight_decay must be non-negative"));
        }
        if let KeepCount::Fraction(f) = self.keep {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::param(format!("keep fraction {f} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// `base_lr / 512 · batch_size`.
pub fn scaled_lr(cfg: &DistillConfig) -> f64 {
    cfg.base_lr / LR_REFERENCE_BATCH * cfg.batch_size as f64
}

/// Loss terms of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Unweighted KD term; 0 when no teacher was consulted.
    pub kd: f64,
}

struct LossVars {
    total: Var,
    ce: Var,
    kd: Option<Var>,
}

fn loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    kd_logits: Var,
    teacher: Option<&Tensor<T>>,
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<LossVars> {
    let ce = tape.cross_entropy(logits, labels)?;
    let Some(t) = teacher.filter(|_| lambda > 0.0) else {
        return Ok(LossVars {
            total: ce,
            ce,
            kd: None,
        });
    };
    let t = tape.constant(t.clone());
    let kd = tape.kl_soft_targets(kd_logits, t, T::from_f64(tau))?;
    let weighted = tape.scale(kd, T::from_f64(lambda))?;
    let total = tape.add(ce, weighted)?;
    Ok(LossVars {
        total,
        ce,
        kd: Some(kd),
    })
}

fn parts<T: Real>(tape: &Tape<T>, v: &LossVars) -> Result<LossParts> {
    Ok(LossParts {
        total: tape.value(v.total).item()?.as_f64(),
        ce: tape.value(v.ce).item()?.as_f64(),
        kd: v.kd.map(|k| tape.value(k).item()).transpose()?.map_or(0.0, |k| k.as_f64()),
    })
}

/// `CE(student, labels) + λ·τ²·KL(teacher/τ ‖ student/τ)` with the teacher
/// logits treated as constants.
pub fn maskedkd_loss<T: Real>(
    student: &ForwardRecord<T>,
    teacher_logits: &Tensor<T>,
    labels: &[usize],
    lambda: f64,
    tau: f64,
) -> Result<LossParts> {
    if student.logits.shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "maskedkd_loss",
            student.logits.shape(),
            teacher_logits.shape(),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::param("tau must be positive"));
    }
    let mut tape = Tape::new();
    let s = tape.constant(student.logits.clone());
    let v = loss_on_tape(&mut tape, s, s, Some(teacher_logits), labels, lambda, tau)?;
    parts(&tape, &v)
}

/// Frozen models consulted during a step.
#[derive(Clone, Copy, Debug, Default)]
pub struct Models<'a> {
    pub teacher: Option<&'a ViT<f32>>,
    /// Ranks patches for [`MaskPolicy::External`].
    pub scorer: Option<&'a ViT<f32>>,
}

/// What one optimizer step did.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: LossParts,
    /// Examples whose full-image student argmax matched the label.
    pub correct: usize,
    pub batch: usize,
    pub teacher_flops: u64,
    pub student_flops: u64,
    /// Teacher keep set per example; empty when the teacher saw whole
    /// images or was not consulted.
    pub keeps: Vec<KeepSet>,
}

/// One training step on a batch: student forward, patch selection, teacher
/// forward, loss, backward and AdamW update.
#[allow(clippy::too_many_arguments)]
pub fn distill_step(
    student: &mut ViT<f32>,
    models: Models<'_>,
    images: &[Tensor<f32>],
    labels: &[usize],
    cfg: &DistillConfig,
    opt: &mut OptimizerState,
    lr: f64,
    step_index: u64,
) -> Result<StepOutcome> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::param("batch needs matching, non-empty images and labels"));
    }
    let b = images.len();
    let scfg = student.config.clone();
    let use_teacher = cfg.lambda > 0.0;
    let teacher = match (use_teacher, models.teacher) {
        (true, None) => return Err(Error::State("lambda > 0 but no teacher was given".into())),
        (true, Some(t)) => Some(t),
        (false, _) => None,
    };
    if let Some(t) = teacher {
        if t.config.num_classes != scfg.num_classes {
            return Err(Error::param("teacher and student disagree on the class count"));
        }
    }

    let mut tape = Tape::new();
    let w = student.params.bind(&mut tape, true);
    let want_patch = matches!(cfg.policy, MaskPolicy::TokenToken);
    let mut tokens = Vec::with_capacity(b);
    let mut rows = Vec::with_capacity(b);
    let mut saliency = Vec::with_capacity(b);
    for image in images {
        let t = embed_on_tape(&mut tape, &scfg, &w, image)?;
        let pass = forward_on_tape(&mut tape, &scfg, &w, t, None, want_patch)?;
        tokens.push(t);
        rows.push(pass.logits);
        saliency.push(match (&cfg.policy, pass.patch_attention) {
            (MaskPolicy::TokenToken, Some(p)) => {
                crate::masking::column_means(&p, scfg.num_patches())
            }
            _ => head_mean(&pass.class_attention, scfg.heads, scfg.num_patches()),
        });
    }
    let logits = if b == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    let mut student_flops = 3 * flops_for(&scfg, scfg.num_patches()).total * b as u64;

    let mut teacher_flops = 0u64;
    let mut keeps = Vec::new();
    let mut teacher_logits = None;
    let mut kd_logits = logits;
    if let Some(t) = teacher {
        let tn = t.config.num_patches();
        let upsized: Vec<Tensor<f32>> = images
            .iter()
            .map(|im| {
                if im.shape()[1] == t.config.image_size {
                    Ok(im.clone())
                } else {
                    upsample_image(im, t.config.image_size, cfg.alignment)
                }
            })
            .collect::<Result<_>>()?;
        let rec = match cfg.keep.resolve(tn)? {
            None => {
                teacher_flops = flops_for(&t.config, tn).total * b as u64;
                t.forward_images(&upsized, None, false)?
            }
            Some(k) => {
                for (i, image) in images.iter().enumerate() {
                    let scores = match &cfg.policy {
                        MaskPolicy::External { scorer } => {
                            let s = models.scorer.ok_or_else(|| {
                                Error::State(format!("policy needs scorer model {scorer:?}"))
                            })?;
                            score_image(s, image, &cfg.policy)?
                        }
                        MaskPolicy::TokenToken => {
                            SaliencyScores::new(saliency[i].clone(), ScoreSource::TokenToken)?
                        }
                        _ => SaliencyScores::new(
                            saliency[i].clone(),
                            ScoreSource::StudentMeanAttention,
                        )?,
                    };
                    let scores = if scores.grid_side() == t.config.grid_side() {
                        scores
                    } else {
                        interpolate_scores(&scores, t.config.grid_side(), cfg.alignment)?
                    };
                    let stream = step_index * b as u64 + i as u64;
                    keeps.push(select_keep_with_stream(&scores, k, &cfg.policy, stream)?);
                }
                teacher_flops = flops_for(&t.config, k).total * b as u64;
                t.forward_images(&upsized, Some(&keeps), false)?
            }
        };
        teacher_logits = Some(rec.logits);

        if cfg.student_sees_masked && !keeps.is_empty() {
            if t.config.grid_side() != scfg.grid_side() {
                return Err(Error::param(
                    "student_sees_masked needs teacher and student on the same patch grid",
                ));
            }
            let mut masked_rows = Vec::with_capacity(b);
            for (tok, keep) in tokens.iter().zip(&keeps) {
                let kept = tape.gather_rows(*tok, keep.indices())?;
                let pass = forward_on_tape(&mut tape, &scfg, &w, kept, Some(keep), false)?;
                masked_rows.push(pass.logits);
                student_flops += 3 * flops_for(&scfg, keep.len()).total;
            }
            kd_logits = if b == 1 {
                masked_rows[0]
            } else {
                tape.concat_rows(&masked_rows)?
            };
        }
    }

    let loss = loss_on_tape(
        &mut tape,
        logits,
        kd_logits,
        teacher_logits.as_ref(),
        labels,
        cfg.lambda,
        cfg.tau,
    )?;
    let values = parts(&tape, &loss)?;
    if !values.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {step_index} (ce {}, kd {})",
            values.ce, values.kd
        )));
    }
    let correct = (0..b)
        .filter(|&i| argmax(tape.value(logits).row(i)) == labels[i])
        .count();

    let grads = tape.backward(loss.total)?;
    let vars: Vec<Var> = w.entries().into_iter().map(|(_, v)| *v).collect();
    let grads: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| grads.get_or_zeros(v, tape.value(v).numel()))
        .collect();
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at step {step_index}")));
    }
    opt.update(&mut student.params, &grads, lr, cfg.weight_decay)?;

    Ok(StepOutcome {
        loss: values,
        correct,
        batch: b,
        teacher_flops,
        student_flops,
        keeps,
    })
}

/// One row per epoch; row 0 is the model before training.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Running accuracy over the epoch's batches (row 0: evaluation).
    pub train_acc: f64,
    pub val_acc: f64,
    /// Example-weighted means over the epoch; 0 for row 0.
    pub ce_loss: f64,
    pub kd_loss: f64,
    pub teacher_flops_cum: u64,
    pub student_flops_cum: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub epochs: Vec<EpochRecord>,
    /// Total loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    #[serde(skip)]
    pub wall_seconds: f64,
}

pub const REPORT_HEADER: &str =
    "# epoch,train_acc,val_acc,ce_loss,kd_loss,teacher_flops_cum,student_flops_cum";

impl RunReport {
    /// Header plus one comma-separated line per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{},{}",
                r.epoch,
                r.train_acc,
                r.val_acc,
                r.ce_loss,
                r.kd_loss,
                r.teacher_flops_cum,
                r.student_flops_cum
            );
        }
        out
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("report holds the initial row")
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub report: RunReport,
    /// Parameters of the epoch with the best validation accuracy.
    pub best: ViTParams<f32>,
}

/// Runs `cfg.epochs` epochs of shuffled minibatch steps with cosine decay
/// from the scaled learning rate to 0. `student` holds the final weights
/// afterwards.
pub fn train(
    student: &mut ViT<f32>,
    models: Models<'_>,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &DistillConfig,
) -> Result<TrainResult> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let started = Instant::now();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = (steps_per_epoch * cfg.epochs) as u64;
    let peak = scaled_lr(cfg);

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(1);
    let mut opt = OptimizerState::new(&student.params);

    let initial_val = evaluate(student, val_set, None)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_acc: evaluate(student, train_set, None)?,
        val_acc: initial_val,
        ce_loss: 0.0,
        kd_loss: 0.0,
        teacher_flops_cum: 0,
        student_flops_cum: 0,
    }];
    let mut best = student.params.clone();
    let (mut best_epoch, mut best_val) = (0, initial_val);
    let mut step_losses = Vec::with_capacity(total_steps as usize);
    let (mut t_flops, mut s_flops) = (0u64, 0u64);
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut order_rng);
        let (mut correct, mut seen) = (0usize, 0usize);
        let (mut ce_sum, mut kd_sum) = (0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor<f32>> = chunk
                .iter()
                .map(|&i| {
                    let im = &train_set.images[i];
                    if cfg.augment {
                        augment(im, aug_rng.gen())
                    } else {
                        Ok(im.clone())
                    }
                })
                .collect::<Result<_>>()?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let lr = cosine_lr(peak, step, total_steps);
            let out = distill_step(student, models, &images, &labels, cfg, &mut opt, lr, step)?;
            step += 1;
            correct += out.correct;
            seen += out.batch;
            ce_sum += out.loss.ce * out.batch as f64;
            kd_sum += out.loss.kd * out.batch as f64;
            t_flops += out.teacher_flops;
            s_flops += out.student_flops;
            step_losses.push(out.loss.total);
        }
        let val_acc = evaluate(student, val_set, None)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best = student.params.clone();
        }
        epochs.push(EpochRecord {
            epoch,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            ce_loss: ce_sum / seen as f64,
            kd_loss: kd_sum / seen as f64,
            teacher_flops_cum: t_flops,
            student_flops_cum: s_flops,
        });
    }

    Ok(TrainResult {
        report: RunReport {
            epochs,
            step_losses,
            best_epoch,
            best_val_acc: best_val,
            wall_seconds: started.elapsed().as_secs_f64(),
        },
        best,
    })
}
