use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kwsnas::config::{DatasetSpec, ExperimentConfig};
use kwsnas::nas::FrontEnd;
use kwsnas::train::RunMetrics;

fn kwsnas(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kwsnas"))
        .args(args)
        .env_remove("KWSNAS_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kwsnas(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = ExperimentConfig::desk(3, 8);
    cfg.name = "tiny".into();
    cfg.dataset = DatasetSpec::Synth {
        classes: 3,
        per_class: 8,
    };
    cfg.frontend = FrontEnd::sinc(8);
    cfg.search.epochs = 2;
    cfg.train.epochs = 2;
    let p = dir.join("tiny.json");
    std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p
}

#[test]
fn count_matches_golden_report() {
    let arch = data("sinc40_fc.arch.json");
    let golden = std::fs::read_to_string(data("sinc40_fc.count.txt")).unwrap();
    let first = ok(&["count", "--arch", s(&arch)]);
    assert_eq!(first, golden);
    assert_eq!(ok(&["count", "--arch", s(&arch)]), first);
    // sinc filters carry two cutoffs each; the classifier reads all 40×98 responses
    let total: Vec<&str> = golden.lines().last().unwrap().split_whitespace().collect();
    assert_eq!(total, ["total", &(80 + 3920 * 12 + 12).to_string(), &(2 * 400 * 40 * 98 + 2 * 3920 * 12).to_string()]);
}

#[test]
fn malformed_config_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"format_version": 1, "name": "x", "surprise": true}"#).unwrap();
    let out = kwsnas(&["search", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid config"));

    let out = kwsnas(&["quantize-fixed", "--bw", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn off_grid_bit_width_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let arch = data("sinc40_fc.arch.json");
    let out = kwsnas(&[
        "quantize-fixed",
        "--config",
        s(&cfg),
        "--arch",
        s(&arch),
        "--out",
        s(&dir.path().join("q")),
        "--bw",
        "3",
        "--ba",
        "8",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_model_is_a_runtime_error() {
    let out = kwsnas(&["export", "--model", "/nonexistent/model.kwsn", "--out", "/tmp/never.kwsn"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn speech_commands_without_data_root_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/speech_commands_full.json");
    let out = kwsnas(&["search", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("KWSNAS_DATA_ROOT"));
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = ExperimentConfig::load(&root.join("desk_synth4.json")).unwrap();
    assert_eq!(desk, ExperimentConfig::desk(4, 60));
    ExperimentConfig::load(&root.join("speech_commands_full.json")).unwrap();
}

fn without_times(mut m: RunMetrics) -> RunMetrics {
    m.epochs.iter_mut().for_each(|e| e.wall_time_s = 0.0);
    m
}

fn metrics(dir: &Path) -> RunMetrics {
    serde_json::from_str(&std::fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let cfg = s(&cfg);

    for run in ["s1", "s2"] {
        ok(&["search", "--config", cfg, "--out", s(&d.join(run)), "--seed", "3"]);
    }
    let arch = std::fs::read(d.join("s1/arch.json")).unwrap();
    assert_eq!(arch, std::fs::read(d.join("s2/arch.json")).unwrap());
    assert_eq!(std::fs::read_to_string(d.join("s1/search.jsonl")).unwrap().lines().count(), 2);
    let arch = d.join("s1/arch.json");
    let arch = s(&arch);

    for run in ["fp1", "fp2"] {
        ok(&["train", "--config", cfg, "--arch", arch, "--out", s(&d.join(run)), "--seed", "3"]);
    }
    assert_eq!(without_times(metrics(&d.join("fp1"))), without_times(metrics(&d.join("fp2"))));
    assert_eq!(
        std::fs::read(d.join("fp1/model.kwsn")).unwrap(),
        std::fs::read(d.join("fp2/model.kwsn")).unwrap()
    );
    assert_eq!(std::fs::read_to_string(d.join("fp1/metrics.jsonl")).unwrap().lines().count(), 2);

    let eval = ok(&["eval", "--config", cfg, "--model", s(&d.join("fp1/model.kwsn")), "--seed", "3"]);
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(eval["accuracy"].as_f64(), metrics(&d.join("fp1")).test_accuracy);

    ok(&[
        "quantize-fixed", "--config", cfg, "--arch", arch, "--out", s(&d.join("w2a2")), "--bw", "2", "--ba", "2", "--seed",
        "3",
    ]);
    ok(&[
        "quantize-trained", "--config", cfg, "--arch", arch, "--out", s(&d.join("tr")), "--lambda-w", "0.04",
        "--lambda-a", "0.04", "--seed", "3",
    ]);
    let m = metrics(&d.join("tr"));
    assert!(m.b_w.is_some() && m.b_a.is_some());
    let csv = std::fs::read_to_string(d.join("tr/bitwidths.csv")).unwrap();
    let model: kwsnas::io::Container = kwsnas::io::Container::read(&d.join("tr/model.kwsn")).unwrap();
    let records: Vec<kwsnas::io::model::LayerRecord> = model.meta_field("layers").unwrap();
    for r in records.iter().filter(|r| r.weight_quant.is_some() || r.act_quant.is_some()) {
        let unit = r.tag.split(".e").next().unwrap();
        assert!(csv.contains(unit), "no bit-width row for {}", r.tag);
    }

    let exported = d.join("tr/model.q.kwsn");
    let report = ok(&["export", "--model", s(&d.join("tr/model.kwsn")), "--out", s(&exported)]);
    assert!(report.contains("\"mismatches\":0"), "{report}");
    let out = kwsnas(&["export", "--model", s(&d.join("fp1/model.kwsn")), "--out", s(&d.join("x.kwsn"))]);
    assert_eq!(out.status.code(), Some(1));

    let pattern = format!("{}/*/metrics.json", s(d));
    let csv_path = d.join("pareto.csv");
    ok(&["pareto", "--metrics", &pattern, "--out", s(&csv_path)]);
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.lines().skip(1).any(|l| l.ends_with(",true")));
}

#[test]
fn resume_continues_a_finished_run_without_change() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let arch = data("sinc40_fc.arch.json");
    let mut c = ExperimentConfig::load(&cfg).unwrap();
    c.dataset = DatasetSpec::Synth {
        classes: 12,
        per_class: 6,
    };
    std::fs::write(&cfg, c.to_json().unwrap()).unwrap();
    let out = d.join("run");
    ok(&["train", "--config", s(&cfg), "--arch", s(&arch), "--out", s(&out)]);
    let first = metrics(&out);
    ok(&["train", "--config", s(&cfg), "--arch", s(&arch), "--out", s(&out), "--resume"]);
    assert_eq!(without_times(metrics(&out)), without_times(first));
}
