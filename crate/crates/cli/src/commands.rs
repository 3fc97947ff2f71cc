//! Subcommand implementations.

use std::io::Write;
use std::path::{Path, PathBuf};

use maskedkd::checkpoint;
use maskedkd::cost::{flops_model, format_giga, preset, FlopsBreakdown, PRESETS};
use maskedkd::data::{encode_ppm, render_mask_overlay, Dataset};
use maskedkd::distill::{train, KeepCount, Models, RunReport};
use maskedkd::eval::{keep_sweep, masked_example, saliency_recovery, EvalMasking};
use maskedkd::interp::{upsample_image, Alignment};
use maskedkd::masking::{recovery_rate, MaskPolicy};
use maskedkd::pipeline::{derive_timing, simulate, Mode, TaskTiming};
use maskedkd::vit::{ViT, ViTConfig};
use serde::{Deserialize, Serialize};

use crate::config::{DataSection, ExperimentConfig, Role};
use crate::{CliError, DistillArgs, EvalArgs, FlopsArgs, GlobalArgs, PipelineArgs, VisualizeArgs};

type Out<'a> = &'a mut dyn Write;

fn emit(out: Out<'_>, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes()).map_err(|source| CliError::Output {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|source| CliError::Output {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(g: &GlobalArgs) -> Result<ExperimentConfig, CliError> {
    let path = g
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --config PATH".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = g.seed {
        cfg.run.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.run.out_dir = out.clone();
    }
    Ok(cfg)
}

fn prepare_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.run.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Output {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn parse_policy(s: &str) -> Result<MaskPolicy, CliError> {
    s.parse().map_err(|e: maskedkd::Error| CliError::Usage(e.to_string()))
}

/// Upsamples every image to `side` when the data is smaller.
fn fit_images(data: Dataset, side: usize, align: Alignment) -> Result<Dataset, CliError> {
    if data.image_shape().is_none_or(|s| s[1] == side) {
        return Ok(data);
    }
    let images = data
        .images
        .iter()
        .map(|im| upsample_image(im, side, align))
        .collect::<maskedkd::Result<Vec<_>>>()?;
    Ok(Dataset::new(images, data.labels, data.num_classes, data.split)?)
}

fn loaded_scorer(policy: &MaskPolicy) -> Result<Option<ViT<f32>>, CliError> {
    match policy {
        MaskPolicy::External { scorer } => {
            let path = Path::new(scorer);
            require_file(path, "scorer checkpoint")?;
            Ok(Some(checkpoint::load(path)?))
        }
        _ => Ok(None),
    }
}

#[derive(Serialize)]
struct RunSummary {
    model: &'static str,
    policy: String,
    keep: KeepCount,
    teacher_keep: usize,
    teacher_patches: usize,
    lambda: f64,
    epochs: usize,
    seed: u64,
    final_train_acc: f64,
    final_val_acc: f64,
    best_epoch: usize,
    best_val_acc: f64,
    teacher_flops: u64,
    student_flops: u64,
    /// Mean share of ground-truth salient patches among the model's top
    /// `salient_patch_count` patches on the validation images.
    saliency_recovery: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_seconds: Option<f64>,
}

fn summary_json(s: &RunSummary) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(s)
        .map_err(|e| CliError::Usage(format!("cannot encode summary: {e}")))?;
    text.push('\n');
    Ok(text)
}

fn recovery_on_val(
    cfg: &ExperimentConfig,
    model: &ViT<f32>,
    val: &crate::config::LoadedData,
) -> Result<Option<f64>, CliError> {
    let (DataSection::Synthetic {
        salient_patch_count,
        grid_side,
        ..
    }, Some(salient)) = (&cfg.data, &val.salient)
    else {
        return Ok(None);
    };
    if *salient_patch_count == 0 || model.config.grid_side() != *grid_side {
        return Ok(None);
    }
    Ok(Some(saliency_recovery(
        model,
        &val.dataset.images,
        salient,
        *salient_patch_count,
    )?))
}

fn report_tail(report: &RunReport) -> String {
    let last = report.last();
    format!(
        "final train_acc {:.6} val_acc {:.6}; best val_acc {:.6} at epoch {}\n",
        last.train_acc, last.val_acc, report.best_val_acc, report.best_epoch
    )
}

pub fn train_teacher(g: &GlobalArgs, out: Out<'_>) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let arch = cfg.model_teacher.architecture.clone();
    let align = cfg.masking.alignment;
    let train_set = fit_images(cfg.load_data(Role::TeacherTrain)?.dataset, arch.image_size, align)?;
    let val = cfg.load_data(Role::Val)?;
    let val_set = fit_images(val.dataset.clone(), arch.image_size, align)?;
    let dir = prepare_out_dir(&cfg)?;

    let tc = cfg.teacher_config();
    let mut teacher = ViT::new(arch, cfg.run.seed)?;
    let result = train(&mut teacher, Models::default(), &train_set, &val_set, &tc)?;

    let ckpt = dir.join("teacher.ckpt");
    write_file(&ckpt, &checkpoint::encode(&teacher)?)?;
    let csv = result.report.to_csv();
    write_file(&dir.join("teacher_report.csv"), csv.as_bytes())?;
    let last = result.report.last();
    let summary = RunSummary {
        model: "teacher",
        policy: "none".into(),
        keep: KeepCount::Full,
        teacher_keep: 0,
        teacher_patches: teacher.config.num_patches(),
        lambda: 0.0,
        epochs: tc.epochs,
        seed: tc.seed,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        best_epoch: result.report.best_epoch,
        best_val_acc: result.report.best_val_acc,
        teacher_flops: 0,
        student_flops: last.student_flops_cum,
        saliency_recovery: recovery_on_val(&cfg, &teacher, &val)?,
        wall_seconds: (!g.deterministic).then_some(result.report.wall_seconds),
    };
    write_file(&dir.join("teacher_summary.json"), summary_json(&summary)?.as_bytes())?;

    emit(out, &csv)?;
    emit(out, &report_tail(&result.report))?;
    emit(out, &format!("wrote {}\n", ckpt.display()))
}

pub fn distill(g: &GlobalArgs, args: &DistillArgs, out: Out<'_>) -> Result<(), CliError> {
    let mut cfg = load_config(g)?;
    if let Some(k) = &args.keep {
        cfg.masking.keep = k.parse().map_err(|e: maskedkd::Error| CliError::Usage(e.to_string()))?;
    }
    if let Some(p) = &args.policy {
        cfg.masking.policy = parse_policy(p)?;
    }
    if let Some(l) = args.lambda {
        cfg.distill.lambda = l;
    }
    if let Some(e) = args.epochs {
        cfg.run.epochs = e;
    }
    cfg.validate()?;

    let dc = cfg.distill_config(None);
    let train_set = cfg.load_data(Role::StudentTrain)?.dataset;
    let val = cfg.load_data(Role::Val)?;
    let teacher = if dc.lambda > 0.0 {
        let path = cfg.teacher_checkpoint();
        require_file(&path, "teacher checkpoint")?;
        Some(checkpoint::load_expecting(&path, &cfg.model_teacher.architecture)?)
    } else {
        None
    };
    let scorer = loaded_scorer(&dc.policy)?;
    let dir = prepare_out_dir(&cfg)?;

    let mut student = ViT::new(cfg.model_student.architecture.clone(), cfg.run.seed)?;
    let models = Models {
        teacher: teacher.as_ref(),
        scorer: scorer.as_ref(),
    };
    let result = train(&mut student, models, &train_set, &val.dataset, &dc)?;

    write_file(&dir.join("student.ckpt"), &checkpoint::encode(&student)?)?;
    let csv = result.report.to_csv();
    write_file(&dir.join("report.csv"), csv.as_bytes())?;
    let tn = cfg.model_teacher.architecture.num_patches();
    let last = result.report.last();
    let summary = RunSummary {
        model: "student",
        policy: dc.policy.name().into(),
        keep: dc.keep,
        teacher_keep: if teacher.is_some() {
            dc.keep.resolve(tn)?.unwrap_or(tn)
        } else {
            0
        },
        teacher_patches: tn,
        lambda: dc.lambda,
        epochs: dc.epochs,
        seed: dc.seed,
        final_train_acc: last.train_acc,
        final_val_acc: last.val_acc,
        best_epoch: result.report.best_epoch,
        best_val_acc: result.report.best_val_acc,
        teacher_flops: last.teacher_flops_cum,
        student_flops: last.student_flops_cum,
        saliency_recovery: recovery_on_val(&cfg, &student, &val)?,
        wall_seconds: (!g.deterministic).then_some(result.report.wall_seconds),
    };
    write_file(&dir.join("summary.json"), summary_json(&summary)?.as_bytes())?;

    emit(out, &csv)?;
    emit(out, &report_tail(&result.report))?;
    emit(
        out,
        &format!(
            "teacher_flops {} student_flops {}\n",
            last.teacher_flops_cum, last.student_flops_cum
        ),
    )
}

struct FlopsRow {
    name: String,
    depth: u64,
    dim: u64,
    patches: u64,
    keep: u64,
    full: FlopsBreakdown,
    masked: FlopsBreakdown,
}

pub fn flops(args: &FlopsArgs, out: Out<'_>) -> Result<(), CliError> {
    let keep: KeepCount = args
        .keep
        .parse()
        .map_err(|e: maskedkd::Error| CliError::Usage(e.to_string()))?;
    let shapes: Vec<(String, u64, u64, u64)> = if args.all {
        PRESETS.iter().map(|p| (p.name.to_string(), p.depth, p.d, p.patches)).collect()
    } else if let Some(name) = &args.preset {
        let p = preset(name).ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
            CliError::Usage(format!("unknown preset {name:?}; known: {}", names.join(", ")))
        })?;
        vec![(p.name.to_string(), p.depth, p.d, p.patches)]
    } else {
        match (args.depth, args.dim, args.patches) {
            (Some(l), Some(d), Some(n)) if l > 0 && d > 0 && n > 0 => {
                vec![("custom".to_string(), l, d, n)]
            }
            (Some(_), Some(_), Some(_)) => {
                return Err(CliError::Usage("depth, dim and patches must be positive".into()))
            }
            _ => {
                return Err(CliError::Usage(
                    "give --preset NAME, --all, or --depth, --dim and --patches".into(),
                ))
            }
        }
    };

    let mut rows = Vec::with_capacity(shapes.len());
    for (name, depth, dim, patches) in shapes {
        let k = keep
            .resolve(patches as usize)
            .map_err(|e| CliError::Usage(e.to_string()))?
            .map_or(patches, |k| k as u64);
        rows.push(FlopsRow {
            name,
            depth,
            dim,
            patches,
            keep: k,
            full: flops_model(depth, patches + 1, dim),
            masked: flops_model(depth, k + 1, dim),
        });
    }

    let mut text = String::new();
    if args.csv {
        text.push_str(
            "model,depth,dim,patches,keep,full_projections,full_attention,full_mlp,full_total,\
             masked_projections,masked_attention,masked_mlp,masked_total\n",
        );
        for r in &rows {
            text.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.name,
                r.depth,
                r.dim,
                r.patches,
                r.keep,
                r.full.projections,
                r.full.softmax_attention,
                r.full.mlp,
                r.full.total,
                r.masked.projections,
                r.masked.softmax_attention,
                r.masked.mlp,
                r.masked.total
            ));
        }
    } else {
        for (i, r) in rows.iter().enumerate() {
            if i > 0 {
                text.push('\n');
            }
            text.push_str(&format!(
                "{}: L={} d={} patches={} keep={}\n",
                r.name, r.depth, r.dim, r.patches, r.keep
            ));
            text.push_str(&format!("{:<12}{:>9}{:>9}\n", "component", "full", "masked"));
            let cells = [
                ("projections", r.full.projections, r.masked.projections),
                ("attention", r.full.softmax_attention, r.masked.softmax_attention),
                ("mlp", r.full.mlp, r.masked.mlp),
                ("total", r.full.total, r.masked.total),
            ];
            for (label, f, m) in cells {
                text.push_str(&format!(
                    "{label:<12}{:>9}{:>9}\n",
                    format_giga(f) + "G",
                    format_giga(m) + "G"
                ));
            }
            let saving = 100.0 * (1.0 - r.masked.total as f64 / r.full.total as f64);
            text.push_str(&format!("{:<12}{:>18}\n", "saving", format!("{saving:.1}%")));
        }
    }
    emit(out, &text)
}

/// Pipeline scenario file: fixed per-microbatch durations, or durations
/// derived from two model shapes and a device throughput.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub timing: Option<TaskTiming>,
    #[serde(default)]
    pub derive: Option<DerivedTiming>,
    pub microbatches: usize,
    #[serde(default = "all_modes")]
    pub modes: Vec<Mode>,
    #[serde(default)]
    pub single_device: bool,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerivedTiming {
    pub teacher: ModelRef,
    pub student: ModelRef,
    /// Teacher patches: a count, a fraction, or "full".
    pub keep: KeepCount,
    /// FLOPs per time unit.
    pub throughput: f64,
}

/// A preset name or a full architecture.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ModelRef {
    Preset(String),
    Config(ViTConfig),
}

fn all_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

impl ModelRef {
    fn config(&self) -> Result<ViTConfig, CliError> {
        match self {
            ModelRef::Config(c) => {
                c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(c.clone())
            }
            ModelRef::Preset(name) => {
                let p = preset(name)
                    .ok_or_else(|| CliError::Usage(format!("unknown preset {name:?}")))?;
                let grid = (p.patches as f64).sqrt().round() as usize;
                Ok(ViTConfig {
                    image_size: grid * 16,
                    patch_size: 16,
                    channels: 3,
                    embed_dim: p.d as usize,
                    depth: p.depth as usize,
                    heads: p.d as usize / 64,
                    mlp_ratio: 4.0,
                    num_classes: 1000,
                })
            }
        }
    }
}

impl Scenario {
    pub fn timing(&self) -> Result<TaskTiming, CliError> {
        match (&self.timing, &self.derive) {
            (Some(t), None) => {
                t.validate().map_err(|e| CliError::Usage(e.to_string()))?;
                Ok(*t)
            }
            (None, Some(d)) => {
                let teacher = d.teacher.config()?;
                let student = d.student.config()?;
                let n = teacher.num_patches();
                let k = d
                    .keep
                    .resolve(n)
                    .map_err(|e| CliError::Usage(e.to_string()))?
                    .unwrap_or(n);
                derive_timing(&teacher, &student, k, d.throughput)
                    .map_err(|e| CliError::Usage(e.to_string()))
            }
            _ => Err(CliError::Usage(
                "scenario needs exactly one of \"timing\" and \"derive\"".into(),
            )),
        }
    }
}

pub fn simulate_pipeline(g: &GlobalArgs, args: &PipelineArgs, out: Out<'_>) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.scenario).map_err(|e| {
        CliError::Usage(format!("cannot read scenario {}: {e}", args.scenario.display()))
    })?;
    let scenario: Scenario = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid scenario {}: {e}", args.scenario.display())))?;
    if scenario.microbatches == 0 || scenario.modes.is_empty() {
        return Err(CliError::Usage("scenario needs microbatches ≥ 1 and at least one mode".into()));
    }
    if let Some(q) = args.gantt {
        if !(q > 0.0 && q.is_finite()) {
            return Err(CliError::Usage("--gantt quantum must be positive".into()));
        }
    }
    let timing = scenario.timing()?;
    let dir = match &g.out {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|source| CliError::Output {
                path: d.clone(),
                source,
            })?;
            Some(d.clone())
        }
        None => None,
    };

    let mut text = String::new();
    for (i, &mode) in scenario.modes.iter().enumerate() {
        let s = simulate(mode, &timing, scenario.microbatches, scenario.single_device)?;
        if i > 0 {
            text.push('\n');
        }
        let csv = s.to_csv();
        text.push_str(&format!("# {}\n", mode.name()));
        text.push_str(&csv);
        text.push_str(&format!("makespan {}\n", s.makespan));
        text.push_str(&format!("bubble_fraction {:.6}\n", s.bubble_fraction()));
        if let Some(q) = args.gantt {
            text.push_str(&s.gantt(q)?);
        }
        if let Some(d) = &dir {
            write_file(&d.join(format!("schedule_{}.csv", mode.name())), csv.as_bytes())?;
        }
    }
    emit(out, &text)
}

pub fn visualize(g: &GlobalArgs, args: &VisualizeArgs, out: Out<'_>) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    let val = cfg.load_data(Role::Val)?;
    let image = val.dataset.images.get(args.index).ok_or_else(|| {
        CliError::Usage(format!(
            "--index {} outside the {} validation images",
            args.index,
            val.dataset.len()
        ))
    })?;
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.run.out_dir.join("student.ckpt"));
    require_file(&path, "checkpoint")?;
    let model = checkpoint::load(&path)?;
    let external = loaded_scorer(&cfg.masking.policy)?;
    let n = model.config.num_patches();
    let keep = cfg
        .masking
        .keep
        .resolve(n)
        .map_err(|e| CliError::Usage(e.to_string()))?
        .unwrap_or(n);
    let masking = EvalMasking {
        scorer: external.as_ref().unwrap_or(&model),
        keep,
        policy: cfg.masking.policy.clone(),
        alignment: cfg.masking.alignment,
    };
    let (input, kept) = masked_example(&model, image, &masking, args.index as u64)?;
    let dir = prepare_out_dir(&cfg)?;
    let plain = dir.join(format!("visualize_{}_input.ppm", args.index));
    let overlay = dir.join(format!("visualize_{}_mask.ppm", args.index));
    write_file(&plain, &encode_ppm(&input)?)?;
    render_mask_overlay(&input, &kept, model.config.patch_size, &overlay)?;

    let idx: Vec<String> = kept.indices().iter().map(|i| i.to_string()).collect();
    let mut text = format!(
        "label {} policy {} kept {}/{}: {}\n",
        val.dataset.labels[args.index],
        masking.policy.name(),
        kept.len(),
        n,
        idx.join(" ")
    );
    // ground truth lives on the data grid; skip it when the model's differs
    if let (Some(salient), DataSection::Synthetic { grid_side, .. }) = (&val.salient, &cfg.data) {
        if kept.universe() == grid_side * grid_side {
            let truth = &salient[args.index];
            text.push_str(&format!(
                "salient {:?} recovery {:.6}\n",
                truth,
                recovery_rate(&kept, truth)
            ));
        }
    }
    text.push_str(&format!("wrote {}\nwrote {}\n", plain.display(), overlay.display()));
    emit(out, &text)
}

pub fn eval(g: &GlobalArgs, args: &EvalArgs, out: Out<'_>) -> Result<(), CliError> {
    let cfg = load_config(g)?;
    if args.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
        return Err(CliError::Usage("fractions must lie in (0, 1]".into()));
    }
    let policy = match &args.policy {
        Some(p) => parse_policy(p)?,
        None => cfg.masking.policy.clone(),
    };
    require_file(&args.checkpoint, "checkpoint")?;
    let model = checkpoint::load(&args.checkpoint)?;
    let scorer = match (&args.scorer, loaded_scorer(&policy)?) {
        (Some(p), _) => {
            require_file(p, "scorer checkpoint")?;
            checkpoint::load(p)?
        }
        (None, Some(s)) => s,
        (None, None) => model.clone(),
    };
    let val = cfg.load_data(Role::Val)?.dataset;
    let points = keep_sweep(&model, &scorer, &val, &args.fractions, &policy, cfg.masking.alignment)?;

    let mut csv = String::from("fraction,keep,accuracy\n");
    for p in &points {
        csv.push_str(&format!("{},{},{:.6}\n", p.fraction, p.keep, p.accuracy));
    }
    let dir = prepare_out_dir(&cfg)?;
    write_file(&dir.join("eval.csv"), csv.as_bytes())?;
    emit(out, &csv)
}
