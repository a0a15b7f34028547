use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn vmas(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmas"))
        .arg("--work-dir")
        .arg(dir)
        .args(args)
        .env_remove("VMAS_SEED")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = vmas(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

const SMALL_MODEL: &str = r#"
[model.rnn]
nodes_per_layer = 16
layers = 1
dropout = 0.0
"#;

#[test]
fn generate_then_label_reports_five_fractions() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["generate", "--n", "300"]);
    ok(dir.path(), &["ingest"]);
    let summary: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["label"])).unwrap();
    let fractions = summary["fractions"].as_object().unwrap();
    assert_eq!(fractions.len(), 5);
    let total: f64 = fractions.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    assert!(summary["truth_score"]["accuracy"].as_f64().unwrap() > 0.9);
}

#[test]
fn smoke_run_fits_the_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    ok(dir.path(), &["generate", "--n", "500"]);
    ok(dir.path(), &["ingest"]);
    ok(dir.path(), &["label"]);
    ok(dir.path(), &["prep", "--preset", "5-2"]);
    ok(dir.path(), &["train", "--preset", "5-2", "--epochs", "3"]);
    let eval: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["eval", "--preset", "5-2"])).unwrap();
    assert_eq!(eval["metrics"]["rmse"].as_array().unwrap().len(), 2);
    let table = ok(dir.path(), &["report"]);
    assert!(table.contains("TARMSE") && table.contains("gru 5-2"));
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

#[test]
fn every_subcommand_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, SMALL_MODEL).unwrap();
    let cfg = config.to_str().unwrap();
    let steps: [&[&str]; 7] = [
        &["generate", "--n", "150"],
        &["ingest"],
        &["label"],
        &["prep"],
        &["train", "--epochs", "2", "--config", cfg],
        &["eval", "--config", cfg],
        &["report"],
    ];
    for step in steps {
        let first_out = ok(dir.path(), step);
        let first = snapshot(dir.path());
        let second_out = ok(dir.path(), step);
        assert_eq!(first, snapshot(dir.path()), "{step:?} changed its artifacts on rerun");
        assert_eq!(first_out, second_out, "{step:?} printed different output");
    }
}

#[test]
fn eval_with_tau_zero_reports_f1() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, SMALL_MODEL).unwrap();
    let cfg = config.to_str().unwrap();
    ok(dir.path(), &["generate", "--n", "150"]);
    ok(dir.path(), &["ingest"]);
    ok(dir.path(), &["label"]);
    ok(dir.path(), &["prep"]);
    ok(dir.path(), &["train", "--epochs", "1", "--config", cfg]);
    let out: serde_json::Value = serde_json::from_str(&ok(dir.path(), &["eval", "--tau", "0", "--config", cfg])).unwrap();
    assert_eq!(out["metrics"]["cta"], out["metrics"]["f1_mean"]);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["generate", "--n", "ten"],
        &["prep", "--preset", "9-9"],
        &["train", "--arch", "rnn"],
        &["--config", "/nonexistent/run.toml", "label"],
    ] {
        assert_eq!(vmas(dir.path(), args).status.code(), Some(1), "{args:?}");
    }
    assert_eq!(vmas(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two_and_json_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let out = vmas(dir.path(), &["label"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    for line in stderr.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("stderr line is JSON");
        assert!(v["level"].is_string());
    }

    std::fs::write(dir.path().join("cycle_times.csv"), "not,a,header\n").unwrap();
    std::fs::write(dir.path().join("error_reports.csv"), "error_id,start_ts_ms,end_ts_ms,station,area,message\n").unwrap();
    assert_eq!(vmas(dir.path(), &["ingest"]).status.code(), Some(2));
}

#[test]
fn ingest_diagnostics_go_to_stderr_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let csv = "sequence_id,station,vehicle_code,action_id,event,timestamp_ms,duration_ms\n\
               s1,ST,V,AC000,start,0,\ns1,ST,V,AC000,end,1000,1000\n\
               s1,ST,V,AC001,start,1000,\ns1,ST,V,AC002,end,5000,2000\n";
    std::fs::write(dir.path().join("cycle_times.csv"), csv).unwrap();
    std::fs::write(dir.path().join("error_reports.csv"), "error_id,start_ts_ms,end_ts_ms,station,area,message\n").unwrap();
    let out = vmas(dir.path(), &["ingest"]);
    assert!(out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<serde_json::Value> = stderr.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(lines.len() >= 2, "{stderr}");
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["diagnostics"].as_u64().unwrap() as usize, lines.len());
}

#[test]
fn seed_comes_from_the_environment() {
    let run = |seed: Option<&str>| {
        let dir = tempfile::tempdir().unwrap();
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vmas"));
        cmd.args(["generate", "--n", "20", "--out-dir"]).arg(dir.path());
        match seed {
            Some(s) => cmd.env("VMAS_SEED", s),
            None => cmd.env_remove("VMAS_SEED"),
        };
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(dir.path().join("cycle_times.csv")).unwrap()
    };
    assert_eq!(run(Some("7")), run(Some("7")));
    assert_ne!(run(Some("7")), run(None));
}

#[test]
fn replicates_the_published_table() {
    let dir = tempfile::tempdir().unwrap();
    let table = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/data/published_scores.csv");
    let out = vmas(dir.path(), &["report", "--replicate-table2", table]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 12);
    for row in &rows {
        let fields: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(fields[4], "yes", "TARMSE mismatch: {row}");
    }
    let any_mismatch = text.contains("NO");
    let strict = vmas(dir.path(), &["report", "--replicate-table2", table, "--strict"]);
    assert_eq!(strict.status.code(), Some(if any_mismatch { 2 } else { 0 }));
}
