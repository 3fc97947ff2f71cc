//! Experiment configuration files.
//!
//! Relative paths inside a config are resolved against the directory that
//! holds the config file. Every input file a config names must exist when it
//! is parsed.

use std::path::{Path, PathBuf};

use maskedkd::data::{gen_synthetic, load_cifar10, Dataset, Split, SyntheticSpec, CIFAR_CLASSES};
use maskedkd::distill::{DistillConfig, KeepCount};
use maskedkd::interp::Alignment;
use maskedkd::masking::MaskPolicy;
use maskedkd::vit::ViTConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model_teacher: TeacherSection,
    pub model_student: StudentSection,
    pub data: DataSection,
    pub distill: DistillSection,
    #[serde(default)]
    pub masking: MaskingSection,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    pub architecture: ViTConfig,
    /// Trained weights to distill from. Defaults to `teacher.ckpt` in the
    /// output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub training: TrainingSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentSection {
    pub architecture: ViTConfig,
}

/// Supervised teacher training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub base_lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Falls back to `run.epochs`.
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub augment: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillSection {
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub tau: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub student_sees_masked: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskingSection {
    #[serde(default)]
    pub keep: KeepCount,
    #[serde(default = "top_k")]
    pub policy: MaskPolicy,
    #[serde(default)]
    pub alignment: Alignment,
}

impl Default for MaskingSection {
    fn default() -> Self {
        Self {
            keep: KeepCount::Full,
            policy: MaskPolicy::TopK,
            alignment: Alignment::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub epochs: usize,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSection {
    Synthetic {
        num_classes: usize,
        grid_side: usize,
        #[serde(default = "two")]
        patch_size: usize,
        #[serde(default = "three")]
        channels: usize,
        salient_patch_count: usize,
        noise_sigma: f64,
        #[serde(default)]
        texture_seed: u64,
        train: SyntheticSplit,
        val: SyntheticSplit,
        /// Separate training images for the teacher.
        #[serde(default)]
        teacher_train: Option<SyntheticSplit>,
    },
    Cifar10 {
        train: PathBuf,
        val: PathBuf,
        #[serde(default)]
        teacher_train: Option<PathBuf>,
        /// Use only the first `limit` records of each file.
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSplit {
    pub seed: u64,
    pub count: usize,
}

fn one() -> f64 {
    1.0
}

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

fn default_wd() -> f64 {
    0.05
}

fn top_k() -> MaskPolicy {
    MaskPolicy::TopK
}

/// Which images a command needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    TeacherTrain,
    StudentTrain,
    Val,
}

/// Images plus, for synthetic data, the ground-truth salient patches.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub dataset: Dataset,
    pub salient: Option<Vec<Vec<usize>>>,
}

impl ExperimentConfig {
    /// Reads, parses, resolves paths against the file's directory and
    /// validates.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.model_teacher.checkpoint.as_mut() {
            fix(p);
        }
        fix(&mut self.run.out_dir);
        if let DataSection::Cifar10 {
            train,
            val,
            teacher_train,
            ..
        } = &mut self.data
        {
            fix(train);
            fix(val);
            if let Some(p) = teacher_train.as_mut() {
                fix(p);
            }
        }
        if let MaskPolicy::External { scorer } = &mut self.masking.policy {
            let mut p = PathBuf::from(&*scorer);
            fix(&mut p);
            *scorer = p.to_string_lossy().into_owned();
        }
    }

    /// Checks model/data compatibility and that every named input file
    /// exists.
    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        let t = &self.model_teacher.architecture;
        let s = &self.model_student.architecture;
        t.validate().map_err(|e| CliError::Usage(format!("model_teacher: {e}")))?;
        s.validate().map_err(|e| CliError::Usage(format!("model_student: {e}")))?;
        let (side, channels, classes) = self.data_shape();
        if s.image_size != side || s.channels != channels {
            return usage(format!(
                "model_student expects {}×{}×{} images, data provides {channels}×{side}×{side}",
                s.channels, s.image_size, s.image_size
            ));
        }
        if t.image_size < side || t.channels != channels {
            return usage(format!(
                "model_teacher expects {}×{}×{} images, data provides {channels}×{side}×{side}",
                t.channels, t.image_size, t.image_size
            ));
        }
        if s.num_classes != classes || t.num_classes != classes {
            return usage(format!(
                "data has {classes} classes; teacher has {}, student has {}",
                t.num_classes, s.num_classes
            ));
        }
        self.distill_config(None)
            .validate()
            .map_err(|e| CliError::Usage(format!("distill: {e}")))?;
        self.teacher_config()
            .validate()
            .map_err(|e| CliError::Usage(format!("model_teacher.training: {e}")))?;
        self.masking
            .keep
            .resolve(t.num_patches())
            .map_err(|e| CliError::Usage(format!("masking.keep: {e}")))?;

        let mut inputs: Vec<&Path> = Vec::new();
        if let Some(p) = &self.model_teacher.checkpoint {
            inputs.push(p);
        }
        if let DataSection::Cifar10 {
            train,
            val,
            teacher_train,
            ..
        } = &self.data
        {
            inputs.extend([train.as_path(), val.as_path()]);
            inputs.extend(teacher_train.as_deref());
        }
        if let MaskPolicy::External { scorer } = &self.masking.policy {
            inputs.push(Path::new(scorer));
        }
        for p in inputs {
            if !p.is_file() {
                return usage(format!("referenced file {} does not exist", p.display()));
            }
        }
        if let DataSection::Synthetic {
            train,
            val,
            teacher_train,
            ..
        } = &self.data
        {
            self.synthetic_spec(0)
                .expect("synthetic data")
                .validate()
                .map_err(|e| CliError::Usage(format!("data: {e}")))?;
            for split in [Some(train), Some(val), teacher_train.as_ref()].into_iter().flatten() {
                if split.count == 0 {
                    return usage("data: split counts must be positive".into());
                }
            }
        }
        Ok(())
    }

    /// Image side, channel count and class count of the configured data.
    pub fn data_shape(&self) -> (usize, usize, usize) {
        match &self.data {
            DataSection::Synthetic {
                num_classes,
                grid_side,
                patch_size,
                channels,
                ..
            } => (grid_side * patch_size, *channels, *num_classes),
            DataSection::Cifar10 { .. } => (32, 3, CIFAR_CLASSES),
        }
    }

    fn synthetic_spec(&self, seed: u64) -> Option<SyntheticSpec> {
        match &self.data {
            DataSection::Synthetic {
                num_classes,
                grid_side,
                patch_size,
                channels,
                salient_patch_count,
                noise_sigma,
                texture_seed,
                ..
            } => Some(SyntheticSpec {
                seed,
                num_classes: *num_classes,
                grid_side: *grid_side,
                patch_size: *patch_size,
                channels: *channels,
                salient_patch_count: *salient_patch_count,
                noise_sigma: *noise_sigma,
                texture_seed: *texture_seed,
            }),
            DataSection::Cifar10 { .. } => None,
        }
    }

    /// Generates or loads the images for `role`. The teacher falls back to
    /// the student's training images when no separate set is configured.
    pub fn load_data(&self, role: Role) -> Result<LoadedData, CliError> {
        match &self.data {
            DataSection::Synthetic {
                train,
                val,
                teacher_train,
                ..
            } => {
                let (split, which) = match role {
                    Role::TeacherTrain => (teacher_train.unwrap_or(*train), Split::Train),
                    Role::StudentTrain => (*train, Split::Train),
                    Role::Val => (*val, Split::Val),
                };
                let spec = self.synthetic_spec(split.seed).expect("synthetic data");
                let set = gen_synthetic(&spec, split.count)?;
                Ok(LoadedData {
                    dataset: set.dataset.with_split(which),
                    salient: Some(set.salient),
                })
            }
            DataSection::Cifar10 {
                train,
                val,
                teacher_train,
                limit,
            } => {
                let (path, which) = match role {
                    Role::TeacherTrain => (teacher_train.as_ref().unwrap_or(train), Split::Train),
                    Role::StudentTrain => (train, Split::Train),
                    Role::Val => (val, Split::Val),
                };
                let mut data = load_cifar10(path, which)?;
                if let Some(n) = limit {
                    data = data.take(*n);
                }
                Ok(LoadedData {
                    dataset: data,
                    salient: None,
                })
            }
        }
    }

    /// Teacher checkpoint path, explicit or in the output directory.
    pub fn teacher_checkpoint(&self) -> PathBuf {
        self.model_teacher
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.run.out_dir.join("teacher.ckpt"))
    }

    /// Training settings for the supervised teacher run.
    pub fn teacher_config(&self) -> DistillConfig {
        let t = &self.model_teacher.training;
        DistillConfig {
            lambda: 0.0,
            tau: 1.0,
            base_lr: t.base_lr,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            epochs: t.epochs.unwrap_or(self.run.epochs),
            keep: KeepCount::Full,
            policy: MaskPolicy::TopK,
            student_sees_masked: false,
            seed: self.run.seed,
            augment: t.augment,
            alignment: self.masking.alignment,
        }
    }

    /// Distillation settings; `policy` replaces the configured one when
    /// given.
    pub fn distill_config(&self, policy: Option<MaskPolicy>) -> DistillConfig {
        let d = &self.distill;
        DistillConfig {
            lambda: d.lambda,
            tau: d.tau,
            base_lr: d.base_lr,
            batch_size: d.batch_size,
            weight_decay: d.weight_decay,
            epochs: self.run.epochs,
            keep: self.masking.keep,
            policy: policy.unwrap_or_else(|| self.masking.policy.clone()),
            student_sees_masked: d.student_sees_masked,
            seed: self.run.seed,
            augment: d.augment,
            alignment: self.masking.alignment,
        }
    }
}
