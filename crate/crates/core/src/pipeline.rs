//! Deterministic timeline simulation of one distillation step split into
//! microbatches.
//!
//! Three kinds of task exist per microbatch: student forward (`S_f`),
//! teacher forward (`T_f`) and student backward (`S_b`). Student tasks run on
//! device A and teacher tasks on device B, unless the serial mode is asked to
//! use a single device.
//!
//! Tasks are placed by greedy list scheduling: among tasks whose
//! dependencies are placed, the one that can start earliest goes next. Ties
//! go to the task that became ready first, then the lower microbatch, then
//! the kind order `S_f, T_f, S_b`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cost::flops_for;
use crate::error::{Error, Result};
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "S_f")]
    StudentForward,
    #[serde(rename = "T_f")]
    TeacherForward,
    #[serde(rename = "S_b")]
    StudentBackward,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::StudentForward => "S_f",
            TaskKind::TeacherForward => "T_f",
            TaskKind::StudentBackward => "S_b",
        }
    }

    fn glyph(self) -> char {
        match self {
            TaskKind::StudentForward => 's',
            TaskKind::TeacherForward => 'T',
            TaskKind::StudentBackward => 'b',
        }
    }

    const ALL: [TaskKind; 3] = [
        TaskKind::StudentForward,
        TaskKind::TeacherForward,
        TaskKind::StudentBackward,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Teacher and student forwards are independent.
    VanillaParallel,
    /// The teacher waits for every student forward of the step, and the
    /// backward waits for every teacher forward.
    MaskedSerial,
    /// Teacher forward of microbatch `i` only waits for student forward `i`.
    MaskedPipelined,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::VanillaParallel, Mode::MaskedSerial, Mode::MaskedPipelined];

    pub fn name(self) -> &'static str {
        match self {
            Mode::VanillaParallel => "vanilla_parallel",
            Mode::MaskedSerial => "masked_serial",
            Mode::MaskedPipelined => "masked_pipelined",
        }
    }
}

/// Per-microbatch task durations in abstract time units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTiming {
    pub s_fwd: f64,
    pub t_fwd: f64,
    pub s_bwd: f64,
}

impl TaskTiming {
    pub fn new(s_fwd: f64, t_fwd: f64, s_bwd: f64) -> Result<Self> {
        let t = Self { s_fwd, t_fwd, s_bwd };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("s_fwd", self.s_fwd), ("t_fwd", self.t_fwd), ("s_bwd", self.s_bwd)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn duration(&self, kind: TaskKind) -> f64 {
        match kind {
            TaskKind::StudentForward => self.s_fwd,
            TaskKind::TeacherForward => self.t_fwd,
            TaskKind::StudentBackward => self.s_bwd,
        }
    }
}

/// Durations from the analytical cost model: FLOPs divided by device
/// throughput, backward at twice the student forward.
pub fn derive_timing(
    teacher: &ViTConfig,
    student: &ViTConfig,
    keep: usize,
    throughput: f64,
) -> Result<TaskTiming> {
    if !(throughput > 0.0 && throughput.is_finite()) {
        return Err(Error::param("throughput must be positive"));
    }
    if keep == 0 || keep > teacher.num_patches() {
        return Err(Error::param(format!(
            "keep {keep} outside 1..={}",
            teacher.num_patches()
        )));
    }
    let s_fwd = flops_for(student, student.num_patches()).total as f64 / throughput;
    let t_fwd = flops_for(teacher, keep).total as f64 / throughput;
    TaskTiming::new(s_fwd, t_fwd, 2.0 * s_fwd)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Entry {
    pub device: usize,
    pub kind: TaskKind,
    pub microbatch: usize,
    pub start: f64,
    pub end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub mode: Mode,
    pub devices: usize,
    pub entries: Vec<Entry>,
    pub makespan: f64,
}

pub const DEVICE_NAMES: [&str; 2] = ["A", "B"];

/// Simulates one step of `microbatches` microbatches. `single_device` only
/// affects [`Mode::MaskedSerial`], placing the teacher on device A too.
pub fn simulate(
    mode: Mode,
    timing: &TaskTiming,
    microbatches: usize,
    single_device: bool,
) -> Result<Schedule> {
    timing.validate()?;
    if microbatches == 0 {
        return Err(Error::param("at least one microbatch is required"));
    }
    let m = microbatches;
    let one_device = single_device && mode == Mode::MaskedSerial;
    let device_of = |kind| match kind {
        TaskKind::TeacherForward if !one_device => 1,
        _ => 0,
    };
    let devices = if one_device { 1 } else { 2 };

    let slot = |kind: TaskKind, i: usize| kind as usize * m + i;
    let mut end: Vec<Option<f64>> = vec![None; 3 * m];
    let mut free = [0.0f64; 2];
    let mut entries = Vec::with_capacity(3 * m);

    // Readiness time if every dependency is placed.
    let ready = |end: &[Option<f64>], kind: TaskKind, i: usize| -> Option<f64> {
        let deps: Vec<usize> = match (kind, mode) {
            (TaskKind::StudentForward, _) => vec![],
            (TaskKind::TeacherForward, Mode::VanillaParallel) => vec![],
            (TaskKind::TeacherForward, Mode::MaskedPipelined) => {
                vec![slot(TaskKind::StudentForward, i)]
            }
            (TaskKind::TeacherForward, Mode::MaskedSerial) => {
                (0..m).map(|j| slot(TaskKind::StudentForward, j)).collect()
            }
            (TaskKind::StudentBackward, Mode::MaskedSerial) => (0..m)
                .map(|j| slot(TaskKind::TeacherForward, j))
                .chain([slot(TaskKind::StudentForward, i)])
                .collect(),
            (TaskKind::StudentBackward, _) => vec![
                slot(TaskKind::StudentForward, i),
                slot(TaskKind::TeacherForward, i),
            ],
        };
        deps.iter()
            .try_fold(0.0f64, |acc, &d| end[d].map(|e| acc.max(e)))
    };

    for _ in 0..3 * m {
        // (start, ready, microbatch, kind)
        let mut best: Option<(f64, f64, usize, TaskKind)> = None;
        for kind in TaskKind::ALL {
            // within a kind, microbatches are dispatched in order
            let Some(i) = (0..m).find(|&i| end[slot(kind, i)].is_none()) else {
                continue;
            };
            let Some(r) = ready(&end, kind, i) else {
                continue;
            };
            let start = r.max(free[device_of(kind)]);
            let cand = (start, r, i, kind);
            let better = match best {
                None => true,
                Some(b) => {
                    start.total_cmp(&b.0)
                        .then(r.total_cmp(&b.1))
                        .then(i.cmp(&b.2))
                        .then(kind.cmp(&b.3))
                        .is_lt()
                }
            };
            if better {
                best = Some(cand);
            }
        }
        let (start, _, i, kind) = best.expect("dependency graph is acyclic");
        let finish = start + timing.duration(kind);
        let dev = device_of(kind);
        free[dev] = finish;
        end[slot(kind, i)] = Some(finish);
        entries.push(Entry {
            device: dev,
            kind,
            microbatch: i,
            start,
            end: finish,
        });
    }

    let makespan = entries.iter().map(|e| e.end).fold(0.0, f64::max);
    Ok(Schedule {
        mode,
        devices,
        entries,
        makespan,
    })
}

impl Schedule {
    pub fn entry(&self, kind: TaskKind, microbatch: usize) -> Option<&Entry> {
        self.entries
            .iter()
            .find(|e| e.kind == kind && e.microbatch == microbatch)
    }

    /// Busy time of a device.
    pub fn busy(&self, device: usize) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.device == device)
            .map(|e| e.end - e.start)
            .sum()
    }

    /// Idle fraction of the device running the teacher.
    pub fn bubble_fraction(&self) -> f64 {
        let dev = self
            .entries
            .iter()
            .find(|e| e.kind == TaskKind::TeacherForward)
            .map_or(0, |e| e.device);
        (self.makespan - self.busy(dev)) / self.makespan
    }

    /// Entries as CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("device,kind,microbatch,start,end\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                DEVICE_NAMES[e.device],
                e.kind.label(),
                e.microbatch,
                e.start,
                e.end
            );
        }
        out
    }

    /// One text row per device, one character per `quantum` time units:
    /// `s` student forward, `T` teacher forward, `b` backward, `.` idle.
    pub fn gantt(&self, quantum: f64) -> Result<String> {
        if !(quantum > 0.0) {
            return Err(Error::param("quantum must be positive"));
        }
        let cols = (self.makespan / quantum).ceil() as usize;
        if cols > 100_000 {
            return Err(Error::param(format!("{cols} columns; use a larger quantum")));
        }
        let mut out = String::new();
        for (dev, name) in DEVICE_NAMES.iter().enumerate().take(self.devices) {
            let mut row = vec!['.'; cols];
            for e in self.entries.iter().filter(|e| e.device == dev) {
                // a cell belongs to the task covering its midpoint
                for (c, cell) in row.iter_mut().enumerate() {
                    let mid = (c as f64 + 0.5) * quantum;
                    if mid >= e.start && mid < e.end {
                        *cell = e.kind.glyph();
                    }
                }
            }
            let _ = writeln!(out, "{} |{}|", name, row.iter().collect::<String>());
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: Mode,
    pub keep: usize,
    pub keep_fraction: f64,
    pub microbatches: usize,
    pub makespan: f64,
    pub bubble_fraction: f64,
    /// Vanilla (full teacher input) makespan at the same microbatch count
    /// divided by this row's makespan.
    pub speedup_vs_vanilla: f64,
}

/// Keep count for a fraction of `n`: rounded to nearest, at least 1.
pub fn keep_from_fraction(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("keep fraction {fraction} outside (0, 1]")));
    }
    Ok(((fraction * n as f64).round() as usize).clamp(1, n))
}

/// Simulates every combination. Vanilla rows always use the full teacher
/// input, whatever the keep fraction.
pub fn sweep(
    teacher: &ViTConfig,
    student: &ViTConfig,
    throughput: f64,
    modes: &[Mode],
    keep_fractions: &[f64],
    microbatches: &[usize],
) -> Result<Vec<SweepRow>> {
    if modes.is_empty() || keep_fractions.is_empty() || microbatches.is_empty() {
        return Err(Error::param("sweep grids must be non-empty"));
    }
    let n = teacher.num_patches();
    let full = derive_timing(teacher, student, n, throughput)?;
    let mut rows = Vec::new();
    for &frac in keep_fractions {
        let keep = keep_from_fraction(frac, n)?;
        let timing = derive_timing(teacher, student, keep, throughput)?;
        for &m in microbatches {
            let vanilla = simulate(Mode::VanillaParallel, &full, m, false)?.makespan;
            for &mode in modes {
                let (t, k) = if mode == Mode::VanillaParallel {
                    (full, n)
                } else {
                    (timing, keep)
                };
                let s = simulate(mode, &t, m, false)?;
                rows.push(SweepRow {
                    mode,
                    keep: k,
                    keep_fraction: k as f64 / n as f64,
                    microbatches: m,
                    makespan: s.makespan,
                    bubble_fraction: s.bubble_fraction(),
                    speedup_vs_vanilla: vanilla / s.makespan,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn span(s: &Schedule, kind: TaskKind, i: usize) -> (f64, f64) {
        let e = s.entry(kind, i).unwrap();
        (e.start, e.end)
    }

    /// Device exclusivity and dependency feasibility.
    fn check_feasible(s: &Schedule, m: usize) {
        assert_eq!(s.entries.len(), 3 * m);
        for a in &s.entries {
            for b in &s.entries {
                if a != b && a.device == b.device {
                    assert!(a.end <= b.start || b.end <= a.start, "{a:?} overlaps {b:?}");
                }
            }
        }
        for i in 0..m {
            let sf = span(s, TaskKind::StudentForward, i);
            let tf = span(s, TaskKind::TeacherForward, i);
            let sb = span(s, TaskKind::StudentBackward, i);
            assert!(sb.0 >= sf.1 && sb.0 >= tf.1);
            if s.mode != Mode::VanillaParallel {
                assert!(tf.0 >= sf.1);
            }
        }
        let max_end = s.entries.iter().map(|e| e.end).fold(0.0, f64::max);
        assert_eq!(s.makespan, max_end);
    }

    #[test]
    fn vanilla_single_microbatch() {
        let t = TaskTiming::new(2.0, 3.0, 4.0).unwrap();
        let s = simulate(Mode::VanillaParallel, &t, 1, false).unwrap();
        assert_eq!(span(&s, TaskKind::StudentForward, 0), (0.0, 2.0));
        assert_eq!(span(&s, TaskKind::TeacherForward, 0), (0.0, 3.0));
        assert_eq!(span(&s, TaskKind::StudentBackward, 0), (3.0, 7.0));
        assert_eq!(s.makespan, 7.0);
    }

    #[test]
    fn serial_single_microbatch() {
        let t = TaskTiming::new(2.0, 3.0, 4.0).unwrap();
        let s = simulate(Mode::MaskedSerial, &t, 1, false).unwrap();
        assert_eq!(span(&s, TaskKind::TeacherForward, 0), (2.0, 5.0));
        assert_eq!(span(&s, TaskKind::StudentBackward, 0), (5.0, 9.0));
        assert_eq!(s.makespan, 9.0);
    }

    #[test]
    fn pipelined_two_microbatches() {
        let t = TaskTiming::new(1.0, 1.0, 2.0).unwrap();
        let s = simulate(Mode::MaskedPipelined, &t, 2, false).unwrap();
        let tf0 = span(&s, TaskKind::TeacherForward, 0);
        let sf1 = span(&s, TaskKind::StudentForward, 1);
        assert!(tf0.0 < sf1.1 && sf1.0 < tf0.1, "T_f(0) overlaps S_f(1)");
        assert_eq!(s.makespan, 6.0);
        check_feasible(&s, 2);
    }

    #[test]
    fn vanishing_teacher_leaves_student_work() {
        let t = TaskTiming::new(2.0, 1e-9, 3.0).unwrap();
        for m in [1, 4, 9] {
            let s = simulate(Mode::MaskedPipelined, &t, m, false).unwrap();
            assert!((s.makespan - m as f64 * 5.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_device_serial_is_sum() {
        let t = TaskTiming::new(2.0, 3.0, 4.0).unwrap();
        let s = simulate(Mode::MaskedSerial, &t, 5, true).unwrap();
        assert_eq!(s.devices, 1);
        assert_eq!(s.makespan, 45.0);
        check_feasible(&s, 5);
    }

    #[test]
    fn rejects_bad_input() {
        let t = TaskTiming::new(2.0, 3.0, 4.0).unwrap();
        assert!(simulate(Mode::MaskedSerial, &t, 0, false).is_err());
        assert!(TaskTiming::new(0.0, 1.0, 1.0).is_err());
        assert!(TaskTiming::new(1.0, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn gantt_rows() {
        let t = TaskTiming::new(2.0, 3.0, 4.0).unwrap();
        let s = simulate(Mode::VanillaParallel, &t, 1, false).unwrap();
        assert_eq!(s.gantt(1.0).unwrap(), "A |ss.bbbb|\nB |TTT....|\n");
        let csv = s.to_csv();
        assert!(csv.starts_with("device,kind,microbatch,start,end\nA,S_f,0,0,2\n"));
    }

    #[test]
    fn bubble_fraction_counts_teacher_idle_time() {
        let t = TaskTiming::new(2.0, 3.0, 4.0).unwrap();
        let s = simulate(Mode::MaskedSerial, &t, 1, false).unwrap();
        assert!((s.bubble_fraction() - 6.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn steady_state_rate() {
        for (sf, tf, sb) in [(1.0, 1.0, 2.0), (1.0, 5.0, 1.0), (2.0, 3.0, 1.0), (0.5, 0.2, 1.0)] {
            let t = TaskTiming::new(sf, tf, sb).unwrap();
            let s = simulate(Mode::MaskedPipelined, &t, 64, false).unwrap();
            let bound = f64::max(sf + sb, tf);
            let rate = s.makespan / 64.0;
            assert!(rate >= bound - 1e-12);
            assert!(rate <= 1.05 * bound, "{rate} vs {bound}");
        }
    }

    proptest! {
        #[test]
        fn schedules_are_feasible(
            sf in 0.1f64..5.0, tf in 0.1f64..5.0, sb in 0.1f64..5.0, m in 1usize..8,
        ) {
            let t = TaskTiming::new(sf, tf, sb).unwrap();
            for mode in Mode::ALL {
                check_feasible(&simulate(mode, &t, m, false).unwrap(), m);
            }
            check_feasible(&simulate(Mode::MaskedSerial, &t, m, true).unwrap(), m);
        }

        #[test]
        fn pipelining_never_loses_to_serial(
            sf in 0.01f64..10.0, tf in 0.01f64..10.0, sb in 0.01f64..10.0, m in 1usize..32,
        ) {
            let t = TaskTiming::new(sf, tf, sb).unwrap();
            let p = simulate(Mode::MaskedPipelined, &t, m, false).unwrap().makespan;
            let s = simulate(Mode::MaskedSerial, &t, m, false).unwrap().makespan;
            prop_assert!(p <= s + 1e-9 * s);
        }

        #[test]
        fn increasing_a_duration_never_helps(
            sf in 1u32..6, tf in 1u32..6, sb in 1u32..6, m in 1usize..7,
            which in 0usize..3, extra in 1u32..4,
        ) {
            let base = TaskTiming::new(sf as f64, tf as f64, sb as f64).unwrap();
            let mut longer = base;
            match which {
                0 => longer.s_fwd += extra as f64,
                1 => longer.t_fwd += extra as f64,
                _ => longer.s_bwd += extra as f64,
            }
            for mode in Mode::ALL {
                let a = simulate(mode, &base, m, false).unwrap().makespan;
                let b = simulate(mode, &longer, m, false).unwrap().makespan;
                prop_assert!(b >= a, "{mode:?}: {a} -> {b}");
            }
        }
    }

    #[test]
    fn serial_keep_all_never_beats_vanilla() {
        let t = TaskTiming::new(1.5, 2.5, 3.0).unwrap();
        for m in 1..10 {
            let v = simulate(Mode::VanillaParallel, &t, m, false).unwrap().makespan;
            let s = simulate(Mode::MaskedSerial, &t, m, false).unwrap().makespan;
            assert!(s >= v);
        }
    }

    #[test]
    fn sweep_reduces_to_simulate() {
        let teacher = ViTConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            num_classes: 1000,
        };
        let student = ViTConfig {
            embed_dim: 192,
            heads: 3,
            ..teacher.clone()
        };
        let rows = sweep(&teacher, &student, 1e9, &[Mode::MaskedPipelined], &[0.5], &[4]).unwrap();
        assert_eq!(rows.len(), 1);
        let timing = derive_timing(&teacher, &student, 98, 1e9).unwrap();
        let direct = simulate(Mode::MaskedPipelined, &timing, 4, false).unwrap();
        assert_eq!(rows[0].makespan, direct.makespan);
        assert_eq!(rows[0].keep, 98);

        let full = derive_timing(&teacher, &student, 196, 1e9).unwrap();
        let ratio = timing.t_fwd / full.t_fwd;
        assert!((ratio - 2.19 / 4.54).abs() < 0.01);
        let fast = derive_timing(&teacher, &student, 98, 2e9).unwrap();
        assert!((fast.t_fwd * 2.0 - timing.t_fwd).abs() < 1e-12 * timing.t_fwd);
        assert!((fast.s_bwd * 2.0 - timing.s_bwd).abs() < 1e-12 * timing.s_bwd);
    }
}
