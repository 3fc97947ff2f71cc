use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maskedkd::checkpoint;
use maskedkd::vit::{ViT, ViTConfig};
use serde_json::Value;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskedkd")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn desk() -> Value {
    serde_json::from_str(&fs::read_to_string(configs().join("desk.json")).unwrap()).unwrap()
}

/// Desk config shrunk to a few seconds of training, written into `dir`.
fn small_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut cfg = desk();
    cfg["model_teacher"]["training"]["epochs"] = Value::from(2);
    cfg["run"]["epochs"] = Value::from(2);
    cfg["run"]["out_dir"] = Value::from("out");
    for split in ["train", "teacher_train"] {
        cfg["data"][split]["count"] = Value::from(32);
    }
    cfg["data"]["val"]["count"] = Value::from(16);
    edit(&mut cfg);
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_usage_errors() {
    for sub in ["train-teacher", "distill", "flops", "simulate-pipeline", "visualize", "eval"] {
        let out = bin(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"), "{sub}");
    }
    assert_eq!(bin(&[]).status.code(), Some(2));
    assert_eq!(bin(&["flops", "--bogus"]).status.code(), Some(2));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(bin(&["flops", "--preset", "deit-q"]).status.code(), Some(2));
}

#[test]
fn flops_for_a_known_shape() {
    let out = ok(&["flops", "--depth", "12", "--dim", "384", "--patches", "196"]);
    let total = out.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total.contains("4.5G") && total.contains("2.2G"), "{out}");

    let csv = ok(&["flops", "--all", "--csv"]);
    assert_eq!(csv.lines().count(), 6);
    let deit_s = csv.lines().find(|l| l.starts_with("deit-s,")).unwrap();
    // 12 blocks of 197 tokens at width 384
    assert!(deit_s.contains(",4540695552,"), "{deit_s}");
}

#[test]
fn pipeline_fixtures() {
    let out = ok(&["simulate-pipeline", "--scenario", s(&configs().join("pipeline_vanilla_m1.json"))]);
    assert!(out.contains("# vanilla_parallel") && out.contains("makespan 7\n"), "{out}");
    assert!(out.contains("# masked_serial") && out.contains("makespan 9\n"), "{out}");
    let out = ok(&["simulate-pipeline", "--scenario", s(&configs().join("pipeline_pipelined_m2.json")), "--gantt"]);
    assert!(out.contains("makespan 6\n"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("A |")), "{out}");
}

#[test]
fn teacher_with_zero_epochs_keeps_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| c["model_teacher"]["training"]["epochs"] = Value::from(0));
    ok(&["train-teacher", "--config", s(&cfg), "--seed", "9"]);
    let saved = checkpoint::load(dir.path().join("out/teacher.ckpt")).unwrap();
    let arch: ViTConfig = serde_json::from_value(desk()["model_teacher"]["architecture"].clone()).unwrap();
    assert_eq!(saved, ViT::<f32>::new(arch, 9).unwrap());
    let report = fs::read_to_string(dir.path().join("out/teacher_report.csv")).unwrap();
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn two_class_teacher_fits_its_training_set() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |c| {
        c["data"]["num_classes"] = Value::from(2);
        c["model_teacher"]["architecture"]["num_classes"] = Value::from(2);
        c["model_student"]["architecture"]["num_classes"] = Value::from(2);
        c["data"]["teacher_train"]["count"] = Value::from(128);
        c["model_teacher"]["training"]["epochs"] = Value::from(15);
    });
    ok(&["train-teacher", "--config", s(&cfg)]);
    let summary = json(&dir.path().join("out/teacher_summary.json"));
    let acc = summary["final_train_acc"].as_f64().unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
}

#[test]
fn distill_variants_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = s(&cfg);
    ok(&["train-teacher", "--config", cfg]);

    let run = |name: &str, extra: &[&str]| {
        let out = dir.path().join(name);
        let mut args = vec!["distill", "--config", cfg, "--out", s(&out)];
        args.extend_from_slice(extra);
        // distill looks for teacher.ckpt in its own out dir
        let teacher = dir.path().join("out/teacher.ckpt");
        fs::create_dir_all(&out).unwrap();
        fs::copy(teacher, out.join("teacher.ckpt")).unwrap();
        let stdout = ok(&args);
        (out, stdout)
    };

    let (a, out_a) = run("a", &[]);
    let (b, out_b) = run("b", &[]);
    assert_eq!(fs::read(a.join("student.ckpt")).unwrap(), fs::read(b.join("student.ckpt")).unwrap());
    assert_eq!(fs::read(a.join("report.csv")).unwrap(), fs::read(b.join("report.csv")).unwrap());
    assert_eq!(out_a.replace(s(&a), ""), out_b.replace(s(&b), ""));
    assert!(json(&a.join("summary.json")).get("wall_seconds").is_none());

    // keeping every patch is ordinary distillation
    let (full, _) = run("full", &["--keep", "full"]);
    let (all, _) = run("all", &["--keep", "1.0"]);
    assert_eq!(fs::read(full.join("student.ckpt")).unwrap(), fs::read(all.join("student.ckpt")).unwrap());
    let (half, full_summary) = (json(&a.join("summary.json")), json(&full.join("summary.json")));
    assert!(half["teacher_flops"].as_u64() < full_summary["teacher_flops"].as_u64());

    let (supervised, _) = run("supervised", &["--lambda", "0"]);
    assert_eq!(json(&supervised.join("summary.json"))["teacher_flops"], 0);

    let (_, timed) = run("timed", &["--deterministic", "false"]);
    assert!(timed.contains("teacher_flops"));
    assert!(json(&dir.path().join("timed/summary.json"))["wall_seconds"].is_number());
}

#[test]
fn supervised_run_needs_no_teacher() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let out = bin(&["distill", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher"));
    ok(&["distill", "--config", s(&cfg), "--lambda", "0"]);
}

#[test]
fn visualize_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), |_| {});
    let cfg = s(&cfg);
    ok(&["distill", "--config", cfg, "--lambda", "0"]);
    let shown = ok(&["visualize", "--config", cfg, "--index", "1"]);
    assert!(shown.contains("recovery"), "{shown}");
    for name in ["visualize_1_input.ppm", "visualize_1_mask.ppm"] {
        let bytes = fs::read(dir.path().join("out").join(name)).unwrap();
        assert!(bytes.starts_with(b"P6\n"), "{name}");
    }

    let ckpt = dir.path().join("out/student.ckpt");
    ok(&["eval", "--config", cfg, "--checkpoint", s(&ckpt), "--fractions", "1.0,0.5"]);
    let csv = fs::read_to_string(dir.path().join("out/eval.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "fraction,keep,accuracy");
    assert_eq!(lines.len(), 3);
    assert!(lines[2].starts_with("0.5,32,"), "{csv}");

    let out = bin(&["eval", "--config", cfg, "--checkpoint", "missing.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bin(&["eval", "--config", cfg, "--checkpoint", s(&ckpt), "--fractions", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_problems_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(&["train-teacher", "--config", s(&dir.path().join("absent.json"))]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = small_config(dir.path(), |c| c["run"]["colour"] = Value::from("blue"));
    let out = bin(&["train-teacher", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));

    let cfg = small_config(dir.path(), |c| c["model_student"]["architecture"]["image_size"] = Value::from(32));
    assert_eq!(bin(&["train-teacher", "--config", s(&cfg)]).status.code(), Some(2));

    let cfg = small_config(dir.path(), |_| {});
    assert_eq!(bin(&["distill", "--config", s(&cfg), "--keep", "0"]).status.code(), Some(2));
    assert_eq!(bin(&["distill", "--config", s(&cfg), "--policy", "best-k"]).status.code(), Some(2));
}
