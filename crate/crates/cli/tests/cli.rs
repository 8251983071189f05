use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "version": 1,
  "seed": 5,
  "data": {"source": "synthetic", "train": 96, "dev": 48},
  "model": {"hidden": 16, "heads": 2, "head_dim": 8, "ffn": 24, "layers": 3},
  "teacher": {"epochs": 2},
  "distill": {"train": {"epochs": 1}},
  "scoring": {"max_examples": 32},
  "pilot": {"trials": 2}
}"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sparse-teacher"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    let out = dir.path().join("out");
    Workspace {
        _dir: dir,
        config,
        out,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(out: &Path, command: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(out.join(format!("manifest-{command}.json"))).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = run(&["bogus"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_teacher_exits_3_with_error_record() {
    let w = workspace();
    let out = run(&["trial", "-c", s(&w.config), "--out-dir", s(&w.out)]);
    assert_eq!(code(&out), 3);
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.out.join("error-trial.json")).unwrap()).unwrap();
    assert_eq!(record["exit_code"], 3);
    assert_eq!(record["kind"], "missing-input");
}

#[test]
fn missing_config_exits_3() {
    let w = workspace();
    let out = run(&["finetune", "-c", "/nonexistent/cfg.json", "--out-dir", s(&w.out)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn invalid_overrides_exit_2_before_any_work() {
    let w = workspace();
    for bad in [["--tau", "0"], ["--lambda", "1.5"], ["--sparsity", "1.0"]] {
        let out = run(&["finetune", "-c", s(&w.config), "--out-dir", s(&w.out), bad[0], bad[1]]);
        assert_eq!(code(&out), 2, "{bad:?}");
    }
    assert!(!w.out.join("teacher.strk").exists());
}

#[test]
fn malformed_config_exits_2() {
    let w = workspace();
    std::fs::write(&w.config, r#"{"version": 9}"#).unwrap();
    let out = run(&["finetune", "-c", s(&w.config), "--out-dir", s(&w.out)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn report_without_runs_exits_3() {
    let w = workspace();
    std::fs::create_dir_all(&w.out).unwrap();
    assert_eq!(code(&run(&["report", "--out-dir", s(&w.out)])), 3);
}

#[test]
fn staged_commands_chain_through_the_out_dir() {
    let w = workspace();
    let common = ["-c", s(&w.config), "--out-dir", s(&w.out)];
    for cmd in ["finetune", "trial", "score", "sparsify"] {
        let out = bin().arg(cmd).args(common).output().unwrap();
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["teacher.strk", "trial_init.strk", "trial_student.strk", "scores.json", "scores.jsonl"] {
        assert!(w.out.join(f).exists(), "{f}");
    }
    let heads = std::fs::read_to_string(w.out.join("density/density_head.csv")).unwrap();
    assert_eq!(heads.lines().count(), 51);
    for i in 0..9 {
        assert!(w.out.join(format!("masks/mask-{i}.json")).exists());
    }
    let mask = w.out.join("masks/mask-4.json");
    let out = bin()
        .args(["distill", "--mask", s(&mask)])
        .args(common)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let m = manifest(&w.out, "distill");
    let listed: Vec<&str> = m["artifacts"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(listed, ["student.strk", "distill_report.jsonl"]);

    // A different seed changes the config digest: rewinding must refuse.
    let out = bin()
        .args(["distill", "--seed", "6"])
        .args(common)
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("rewind"));

    let out = bin().arg("pilot").args(common).output().unwrap();
    assert_eq!(code(&out), 0);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.out.join("pilot.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn stark_grid_is_reproducible_and_lists_every_report() {
    let w = workspace();
    let common = ["-c", s(&w.config), "--out-dir", s(&w.out)];
    assert_eq!(code(&bin().arg("finetune").args(common).output().unwrap()), 0);
    let out = bin().arg("stark").args(common).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let first = std::fs::read(w.out.join("pipeline-grid.json")).unwrap();
    let m = manifest(&w.out, "stark-grid");
    let listed: Vec<String> = m["artifacts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    assert_eq!(listed.iter().filter(|a| a.as_str() == "trial_report.jsonl").count(), 1);
    assert_eq!(listed.iter().filter(|a| a.starts_with("reports/grid-")).count(), 9);
    for a in &listed {
        assert!(w.out.join(a).exists(), "{a}");
    }

    assert_eq!(code(&bin().arg("stark").args(common).output().unwrap()), 0);
    let second = std::fs::read(w.out.join("pipeline-grid.json")).unwrap();
    assert_eq!(first, second);

    let out = bin().args(["stark", "--mode", "random"]).args(common).output().unwrap();
    assert_eq!(code(&out), 0);
    let out = bin().arg("auto").args(common).output().unwrap();
    assert_eq!(code(&out), 0);
    let auto: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.out.join("pipeline-auto.json")).unwrap()).unwrap();
    let runs = auto["actual"].as_array().unwrap().len();
    match auto["auto"]["outcome"].as_str().unwrap() {
        "estimate" => assert_eq!(runs, 1),
        _ => assert_eq!(runs, 9),
    }

    let out = run(&["report", "--out-dir", s(&w.out)]);
    assert_eq!(code(&out), 0);
    let table = String::from_utf8_lossy(&out.stdout);
    for method in ["KD", "StarK ", "StarK-Rand", "StarK-Auto"] {
        assert!(table.contains(method), "{method} missing from\n{table}");
    }
}

#[test]
fn stark_trains_a_teacher_when_none_exists() {
    let w = workspace();
    let out = run(&["stark", "-c", s(&w.config), "--out-dir", s(&w.out), "--sparsity", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(w.out.join("teacher.strk").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(w.out.join("pipeline-grid.json")).unwrap()).unwrap();
    assert_eq!(report["chosen_sparsity"], 0.5);
    assert_eq!(report["actual"].as_array().unwrap().len(), 1);
}
