use std::path::Path;
use std::process::{Command, Output};

fn batlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_batlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("BATLAB_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL_SYNTH: &str = r#"{
    "data": {"crop_frames": 128, "patch": 16},
    "synth": {"n_clips": 6, "min_seconds": 1.0, "max_seconds": 1.5,
              "layered": true, "layered_task": {"samples": 300}},
    "probe": {"k": 16, "steps": 150, "eval_every": 50}
}"#;

#[test]
fn probe_without_stacks_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = batlab(&["probe", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(code(&batlab(&["train"])), 2);
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&batlab(&["--help"])), 0);
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"pretrain": {"global_weight": 0.5}}"#);
    let out = dir.path().join("run");
    let o = batlab(&["synth", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let o = batlab(&["synth", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_passes_with_few_seeds() {
    let o = batlab(&["selftest", "--seeds", "2", "--instances", "50"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{stdout}");
    assert!(!stdout.contains("FAILED"));
}

#[test]
fn ingest_reports_missing_files_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SYNTH);
    let data = dir.path().join("data");
    let o = batlab(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let manifest = data.join("manifest.json");
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let first = &m["records"][0];
    std::fs::remove_file(data.join(first["path"].as_str().unwrap())).unwrap();

    let out = dir.path().join("ingest");
    let o = batlab(&["ingest", "--config", &cfg, "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ingest.json")).unwrap()).unwrap();
    let errors = summary["errors"].as_array().unwrap();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0]["id"], first["id"]);
    assert_eq!(summary["items"].as_u64().unwrap() as usize, m["records"].as_array().unwrap().len() - 1);
}

#[test]
fn layered_probe_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_SYNTH);
    let data = dir.path().join("data");
    let o = batlab(&["synth", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let run = dir.path().join("probe");
    let o = batlab(&[
        "probe",
        "--config",
        &cfg,
        "--stacks",
        data.join("layered").to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("probe_summary.json").exists());

    let rep = dir.path().join("report");
    let o = batlab(&["report", "--out", rep.to_str().unwrap(), run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = std::fs::read_to_string(rep.join("gate_weights.csv")).unwrap();
    let rows: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(rows.len(), 6);
    let sum: f64 = rows.iter().sum();
    assert!((sum - 1.0).abs() < 1e-9, "{sum}");
    assert!(rows.iter().all(|&a| a > 0.0));
    assert!(rep.join("gate_weights.svg").exists());
}

#[test]
fn report_without_runs_fails() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let o = batlab(&["report", "--out", dir.path().join("r").to_str().unwrap(), empty.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        batlab::harness::RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 2);
}
