use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn earlyexit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_earlyexit"))
        .args(args)
        .output()
        .expect("spawn earlyexit")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    trace: PathBuf,
}

fn fixture(posteriors: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let params = dir.path().join("params.toml");
    std::fs::write(
        &params,
        format!(
            "seed = 3\nn_utterances = 12\nref_len_range = [11, 14]\n\
             degrade_after = 20\ndegrade_rate = 0.05\nemit_posteriors = {posteriors}\n"
        ),
    )
    .unwrap();
    let trace = dir.path().join("corpus.jsonl");
    let out = earlyexit(&["gen", s(&params), "-o", s(&trace)]);
    assert!(out.status.success(), "{}", stderr(&out));
    Fixture { dir, trace }
}

#[test]
fn generated_corpus_validates() {
    let f = fixture(true);
    for extra in [None, Some("--strict")] {
        let mut args = vec!["validate", s(&f.trace)];
        args.extend(extra);
        let out = earlyexit(&args);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
        assert!(stderr(&out).contains("12 of 12 traces valid"));
    }
}

#[test]
fn validate_reports_broken_traces() {
    let f = fixture(false);
    let text = std::fs::read_to_string(&f.trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut broken: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    broken["id"] = "broken".into();
    broken["layers"].as_array_mut().unwrap().pop();
    lines.push(broken.to_string());
    let path = f.dir.path().join("mixed.jsonl");
    std::fs::write(&path, lines.join("\n")).unwrap();

    let out = earlyexit(&["validate", s(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with("broken\t"), "{}", stdout(&out));

    // lenient loading drops the broken trace, strict loading refuses the file
    assert!(earlyexit(&["oracle", s(&path), "--length-filter", "0"]).status.success());
    let strict = earlyexit(&["oracle", s(&path), "--strict"]);
    assert_eq!(strict.status.code(), Some(2));
    assert!(stderr(&strict).contains("error:"));
}

#[test]
fn unparsable_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"id\": 1\n").unwrap();
    let out = earlyexit(&["validate", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
    assert_eq!(earlyexit(&["analyze", "/nonexistent.jsonl"]).status.code(), Some(2));
}

fn decisions(out: &Output) -> Vec<serde_json::Value> {
    stdout(out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn run_emits_one_decision_per_utterance() {
    let f = fixture(true);
    let out = earlyexit(&["run", s(&f.trace), "--strategy", "confidence_entropy:tau=0.004"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let d = decisions(&out);
    assert_eq!(d.len(), 12);
    for x in &d {
        let layer = x["exit_layer"].as_u64().unwrap();
        assert!((10..=24).contains(&layer));
        let saved = x["saved_fraction"].as_f64().unwrap();
        assert!((saved - (24 - layer) as f64 / 24.0).abs() < 1e-12);
        assert!(x["hypothesis"].is_string());
    }
    assert!(stderr(&out).contains("WER"));
}

#[test]
fn repeated_strategies_are_combined() {
    let f = fixture(true);
    let exits = |strategies: &[&str]| -> Vec<u64> {
        let mut args = vec!["run", s(&f.trace)];
        for st in strategies {
            args.extend(["--strategy", st]);
        }
        let out = earlyexit(&args);
        assert!(out.status.success(), "{}", stderr(&out));
        decisions(&out).iter().map(|d| d["exit_layer"].as_u64().unwrap()).collect()
    };
    let a = exits(&["overlang:tau=0.8,rho=2"]);
    let b = exits(&["patience_lev:tau=0.1,rho=2"]);
    let both = exits(&["overlang:tau=0.8,rho=2", "patience_lev:tau=0.1,rho=2"]);
    let expected: Vec<u64> = a.iter().zip(&b).map(|(x, y)| *x.min(y)).collect();
    assert_eq!(both, expected);
}

#[test]
fn confidence_on_hypothesis_only_corpus_fails() {
    let f = fixture(false);
    let out = earlyexit(&["run", s(&f.trace), "--strategy", "confidence_maxprob:tau=0.9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("posteriors"), "{}", stderr(&out));
    let ok = earlyexit(&["run", s(&f.trace), "--strategy", "patience_lev:tau=0.1,rho=2"]);
    assert!(ok.status.success());
}

#[test]
fn bad_strategy_and_out_of_range_layer_are_rejected() {
    let f = fixture(false);
    assert_eq!(
        earlyexit(&["run", s(&f.trace), "--strategy", "nonsense"]).status.code(),
        Some(2)
    );
    let out = earlyexit(&["run", s(&f.trace), "--strategy", "fixed_layer:layer=30"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_writes_csv() {
    let f = fixture(false);
    let csv = f.dir.path().join("oracle.csv");
    let out = earlyexit(&["oracle", s(&f.trace), "-o", s(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("budget,saved_fraction,total_errors,wer"));
    assert_eq!(lines.count(), 12 * 14 + 1);
    assert!(stderr(&out).contains("decreasing"));
}

#[test]
fn analyze_prints_text_and_json() {
    let f = fixture(false);
    let text = earlyexit(&["analyze", s(&f.trace)]);
    assert!(text.status.success());
    assert!(stdout(&text).contains("overthinking:"));
    let json = earlyexit(&["analyze", s(&f.trace), "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    assert_eq!(v["n_utterances"], 12);
    let hist: u64 = v["first_best_histogram"]
        .as_object()
        .unwrap()
        .values()
        .map(|c| c.as_u64().unwrap())
        .sum();
    assert_eq!(hist, 12);
}

#[test]
fn sweep_with_spec_file() {
    let f = fixture(true);
    let spec = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/sweep_default.toml");
    let out_dir = f.dir.path().join("report");
    let out = earlyexit(&["sweep", s(&f.trace), "--spec", s(&spec), "--out", s(&out_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 84 + 15);
    assert_eq!(
        sweep.lines().filter(|l| l.starts_with("overlang+patience_lev,,,")).count(),
        1
    );
    assert!(out_dir.join("oracle.csv").exists());
}

#[test]
fn sweep_filter_that_removes_everything_fails() {
    let f = fixture(false);
    let out = earlyexit(&[
        "sweep",
        s(&f.trace),
        "--length-filter",
        "50",
        "--out",
        s(&f.dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
