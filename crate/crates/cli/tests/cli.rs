use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gcprune::{count_cost, load_model, CostConfig, LoadOptions};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(name)
}

/// Writes a config for the toy fixture into `dir` and returns its path.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"model = "{}"
exclusions = ["head_cls", "head_reg"]
output_dir = "out"

[dataset]
kind = "file"
path = "{}"

[oracle]
kind = "builtin"
probe_size = 48
{extra}"#,
        fixture("toy_mt_a.onnx").display(),
        fixture("toy_mt_a_dataset.json").display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn gcprune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcprune")).args(args).output().unwrap()
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn cfg_arg(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn analyze_totals_match_the_cost_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(&gcprune(&["analyze", "-c", &cfg_arg(&cfg)]));
    let cost: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/cost.json")).unwrap()).unwrap();
    let g = load_model(&std::fs::read(fixture("toy_mt_a.onnx")).unwrap(), &LoadOptions::default()).unwrap();
    let expected = count_cost(&g, CostConfig::default());
    assert_eq!(cost["total_flops"].as_u64(), Some(expected.total_flops));
    assert_eq!(cost["total_params"].as_u64(), Some(expected.total_params));

    let saliency = std::fs::read_to_string(dir.path().join("out/saliency.csv")).unwrap();
    let mut lines = saliency.lines();
    assert_eq!(lines.next(), Some("group_id,layer,raw,normalized,probability"));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| !r.contains("head_")), "excluded heads appear in the saliency table");
}

#[test]
fn missing_model_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = gcprune(&["analyze", "-c", &cfg_arg(&cfg), "--set", "model=nowhere.onnx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.onnx"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[prune]\nalpah = 3.0\n");
    let o = gcprune(&["analyze", "-c", &cfg_arg(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpah"));
}

#[test]
fn sequence_rows_follow_the_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = ok(&gcprune(&["sequence", "-c", &cfg_arg(&cfg), "--ratios", "0.3"]));
    assert!(out.starts_with("lambda: "));
    let csv = std::fs::read_to_string(dir.path().join("out/sequence.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("probe_ratio,pos1"));

    ok(&gcprune(&["sequence", "-c", &cfg_arg(&cfg), "--ratios", "0.3,0.3"]));
    let csv = std::fs::read_to_string(dir.path().join("out/sequence.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], lines[2]);
}

#[test]
fn full_reserve_prunes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(&gcprune(&["prune", "-c", &cfg_arg(&cfg), "--set", "prune.reserved_ratio=1.0"]));
    let plan: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/plan.json")).unwrap()).unwrap();
    assert_eq!(plan["iterations"].as_array().map(Vec::len), Some(0));
    assert_eq!(std::fs::read(dir.path().join("out/pruned.onnx")).unwrap(), std::fs::read(fixture("toy_mt_a.onnx")).unwrap());
    let summary = std::fs::read_to_string(dir.path().join("out/summary.csv")).unwrap();
    assert!(summary.contains("flops_reduction_pct,0.00"));
    assert!(summary.contains("final_loss_cls,"));
}

#[test]
fn prune_report_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    ok(&gcprune(&["prune", "-c", &cfg_arg(&cfg)]));
    let out = dir.path().join("out");
    let full = std::fs::read_to_string(out.join("plan.json")).unwrap();
    let iterations = serde_json::from_str::<serde_json::Value>(&full).unwrap()["iterations"].as_array().unwrap().len();
    assert!(iterations >= 1);

    let widths = ok(&gcprune(&["report", "--plan", &out.join("plan.json").display().to_string()]));
    let header = widths.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 2 + iterations);
    assert!(out.join("sensitivity.csv").is_file());

    let partial_dir = tempfile::tempdir().unwrap();
    let partial_cfg = write_config(partial_dir.path(), "");
    ok(&gcprune(&["prune", "-c", &cfg_arg(&partial_cfg), "--set", "run.max_iterations=1"]));
    let ckpt = partial_dir.path().join("out/checkpoint.json");
    ok(&gcprune(&["prune", "-c", &cfg_arg(&partial_cfg), "--resume", &ckpt.display().to_string()]));
    assert_eq!(std::fs::read_to_string(partial_dir.path().join("out/plan.json")).unwrap(), full);
    assert_eq!(std::fs::read(partial_dir.path().join("out/pruned.onnx")).unwrap(), std::fs::read(out.join("pruned.onnx")).unwrap());
}

#[test]
fn malformed_plan_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, "{\"format\": \"something-else\"}").unwrap();
    let o = gcprune(&["report", "--plan", &plan.display().to_string()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn eval_prints_task_losses() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let out = ok(&gcprune(&["eval", "-c", &cfg_arg(&cfg)]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let names: Vec<&str> = v["values"].as_array().unwrap().iter().map(|t| t["task"].as_str().unwrap()).collect();
    assert_eq!(names, ["cls", "reg"]);
    let o = gcprune(&["eval", "-c", &cfg_arg(&cfg), "--mask", "999999"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn toy_reproduces_the_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("toy.onnx");
    let data = dir.path().join("toy.json");
    ok(&gcprune(&["toy", "--out", &model.display().to_string(), "--dataset", &data.display().to_string()]));
    assert_eq!(std::fs::read(&model).unwrap(), std::fs::read(fixture("toy_mt_a.onnx")).unwrap());
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(fixture("toy_mt_a_dataset.json")).unwrap());
}
