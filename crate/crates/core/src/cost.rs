//! Analytical FLOPs of ViT encoder blocks.
//!
//! Per block with `n` tokens (class token included) and width `d`:
//! projections `4nd²`, attention `2n²d`, MLP `8nd²`. One multiply-accumulate
//! counts as one FLOP. Patch embedding, layernorms, positional add and the
//! head are not counted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub projections: u64,
    pub softmax_attention: u64,
    pub mlp: u64,
    pub total: u64,
    pub n: u64,
    pub d: u64,
    pub depth: u64,
}

impl FlopsBreakdown {
    /// `(projections, attention, mlp, total)` in GFLOPs.
    pub fn giga(&self) -> [f64; 4] {
        [self.projections, self.softmax_attention, self.mlp, self.total].map(|v| v as f64 / 1e9)
    }
}

/// One block.
pub fn flops_block(n: u64, d: u64) -> FlopsBreakdown {
    flops_model(1, n, d)
}

/// `depth` identical blocks.
pub fn flops_model(depth: u64, n: u64, d: u64) -> FlopsBreakdown {
    let projections = depth * 4 * n * d * d;
    let softmax_attention = depth * 2 * n * n * d;
    let mlp = depth * 8 * n * d * d;
    FlopsBreakdown {
        projections,
        softmax_attention,
        mlp,
        total: projections + softmax_attention + mlp,
        n,
        d,
        depth,
    }
}

/// Encoder FLOPs of `cfg` fed `patches` patch tokens plus the class token.
pub fn flops_for(cfg: &ViTConfig, patches: usize) -> FlopsBreakdown {
    flops_model(cfg.depth as u64, patches as u64 + 1, cfg.embed_dim as u64)
}

/// Compute of a distillation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DistillBudget {
    pub teacher_flops: u64,
    pub student_fwd_flops: u64,
    /// Modeled as twice the forward.
    pub student_bwd_flops: u64,
    pub total: u64,
}

/// Per-image compute for `steps` images: the teacher sees `keep` patches,
/// the student all of them.
pub fn distill_budget(
    teacher: &ViTConfig,
    student: &ViTConfig,
    keep: usize,
    steps: u64,
) -> Result<DistillBudget> {
    if keep == 0 || keep > teacher.num_patches() {
        return Err(Error::param(format!(
            "keep {keep} outside 1..={}",
            teacher.num_patches()
        )));
    }
    let teacher_flops = flops_for(teacher, keep).total * steps;
    let student_fwd_flops = flops_for(student, student.num_patches()).total * steps;
    let student_bwd_flops = 2 * student_fwd_flops;
    Ok(DistillBudget {
        teacher_flops,
        student_fwd_flops,
        student_bwd_flops,
        total: teacher_flops + student_fwd_flops + student_bwd_flops,
    })
}

/// Named reference shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Preset {
    pub name: &'static str,
    pub depth: u64,
    pub d: u64,
    pub patches: u64,
}

pub const PRESETS: [Preset; 5] = [
    Preset {
        name: "deit-ti",
        depth: 12,
        d: 192,
        patches: 196,
    },
    Preset {
        name: "deit-s",
        depth: 12,
        d: 384,
        patches: 196,
    },
    Preset {
        name: "deit-b",
        depth: 12,
        d: 768,
        patches: 196,
    },
    Preset {
        name: "deit-s-384",
        depth: 12,
        d: 384,
        patches: 576,
    },
    Preset {
        name: "deit-b-384",
        depth: 12,
        d: 768,
        patches: 576,
    },
];

pub fn preset(name: &str) -> Option<Preset> {
    PRESETS.iter().copied().find(|p| p.name.eq_ignore_ascii_case(name))
}

/// Rounds FLOPs to one decimal in GFLOPs, as a display string.
pub fn format_giga(flops: u64) -> String {
    format!("{:.1}", flops as f64 / 1e9)
}
