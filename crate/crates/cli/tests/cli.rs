//! End-to-end tests against the compiled binary: exit codes, artifact
//! determinism, and the wiring between subcommands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn openset(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_openset"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout should be utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr should be utf-8")
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: status {:?}, stderr: {}",
        out.status.code(),
        stderr(out)
    );
}

fn path_str(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).display().to_string()
}

// ---------------------------------------------------------------------------

#[test]
fn synth_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let a = path_str(&dir, "a.csv");
    let b = path_str(&dir, "b.csv");
    let c = path_str(&dir, "c.csv");

    let args = ["synth", "--classes", "4", "--per-class", "6", "--dim", "5", "--quiet"];
    assert_success(&openset(&[&args[..], &["--out", &a]].concat()), "synth a");
    assert_success(&openset(&[&args[..], &["--out", &b]].concat()), "synth b");
    assert_success(
        &openset(&[&args[..], &["--seed", "99", "--out", &c]].concat()),
        "synth c",
    );

    let a = fs::read(&a).unwrap();
    let b = fs::read(&b).unwrap();
    let c = fs::read(&c).unwrap();
    assert_eq!(a, b, "same seed must reproduce the file byte for byte");
    assert_ne!(a, c, "a different seed should generate different samples");
}

#[test]
fn run_artifacts_are_byte_identical_across_invocations() {
    let dir = TempDir::new().unwrap();
    let args = |out: &str| {
        vec![
            "run".to_string(),
            "--known".into(),
            "4".into(),
            "--set".into(),
            "synth.classes=6".into(),
            "--set".into(),
            "synth.per_class=20".into(),
            "--set".into(),
            "synth.dim=8".into(),
            "--quiet".into(),
            "--out".into(),
            out.to_string(),
        ]
    };
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    for out_dir in [&first, &second] {
        let argv = args(&out_dir.display().to_string());
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        assert_success(&openset(&argv), "run");
    }

    for name in ["session.json", "iterations.csv", "per_category.csv"] {
        let a = fs::read(first.join(name)).unwrap();
        let b = fs::read(second.join(name)).unwrap();
        assert_eq!(a, b, "{name} must be byte-identical across reruns");
    }

    let session = fs::read_to_string(first.join("session.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&session).unwrap();
    assert!(
        json["config"]["split.n_known"] == serde_json::json!("4"),
        "session.json should embed the resolved config, got {}",
        json["config"]
    );
    assert!(
        json["iterations"].as_array().is_some_and(|a| !a.is_empty()),
        "the session should have incorporated at least one category"
    );
}

// ---------------------------------------------------------------------------

#[test]
fn usage_problems_exit_2_and_data_problems_exit_1() {
    let dir = TempDir::new().unwrap();

    // Unknown config key on the command line.
    let out = openset(&["synth", "--set", "nope.key=1", "--out", &path_str(&dir, "x.csv")]);
    assert_eq!(out.status.code(), Some(2), "unknown key: {}", stderr(&out));
    assert!(stderr(&out).contains("nope.key"), "error should name the key");

    // Malformed config file.
    let cfg = dir.path().join("bad.conf");
    fs::write(&cfg, "synth.classes 4\n").unwrap();
    let out = openset(&[
        "synth",
        "--config",
        &cfg.display().to_string(),
        "--out",
        &path_str(&dir, "y.csv"),
    ]);
    assert_eq!(out.status.code(), Some(2), "bad config line: {}", stderr(&out));

    // Unknown report format.
    let out = openset(&["ablate", "--format", "xml", "--out", &path_str(&dir, "z.csv")]);
    assert_eq!(out.status.code(), Some(2), "bad format: {}", stderr(&out));

    // Missing required flag is a clap usage error.
    let out = openset(&["train", "--data", "whatever.csv"]);
    assert_eq!(out.status.code(), Some(2), "missing --out: {}", stderr(&out));

    // A nonexistent data file is a data error, not a usage error.
    let out = openset(&[
        "train",
        "--data",
        &path_str(&dir, "missing.csv"),
        "--out",
        &path_str(&dir, "m.json"),
    ]);
    assert_eq!(out.status.code(), Some(1), "missing file: {}", stderr(&out));

    // So is a file that exists but fails validation.
    let garbled = dir.path().join("garbled.csv");
    fs::write(&garbled, "label,f0\n1,notanumber\n").unwrap();
    let out = openset(&[
        "train",
        "--data",
        &garbled.display().to_string(),
        "--out",
        &path_str(&dir, "g.json"),
    ]);
    assert_eq!(out.status.code(), Some(1), "garbled file: {}", stderr(&out));
    assert!(
        stderr(&out).contains("garbled.csv:2"),
        "parse errors should carry file and line, got: {}",
        stderr(&out)
    );
}

// ---------------------------------------------------------------------------

/// synth -> split -> train -> calibrate -> eval, checking each artifact
/// feeds the next stage.
#[test]
fn pipeline_stages_compose() {
    let dir = TempDir::new().unwrap();
    let data = path_str(&dir, "data.csv");
    let split = path_str(&dir, "split");
    let model = path_str(&dir, "model.json");
    let thresholds = path_str(&dir, "thresholds.json");

    assert_success(
        &openset(&[
            "synth", "--classes", "6", "--per-class", "20", "--dim", "8", "--quiet", "--out",
            &data,
        ]),
        "synth",
    );
    assert_success(
        &openset(&[
            "split", "--data", &data, "--known", "4", "--quiet", "--out", &split,
        ]),
        "split",
    );
    for name in ["train.csv", "known_test.csv", "unknown_pool.csv", "split.json"] {
        assert!(
            Path::new(&split).join(name).exists(),
            "split should write {name}"
        );
    }

    let train_csv = format!("{split}/train.csv");
    assert_success(
        &openset(&["train", "--data", &train_csv, "--quiet", "--out", &model]),
        "train",
    );
    assert_success(
        &openset(&[
            "calibrate", "--model", &model, "--data", &train_csv, "--quiet", "--out", &thresholds,
        ]),
        "calibrate",
    );

    // Closed-set report goes to stdout by default.
    let out = openset(&[
        "eval",
        "--model",
        &model,
        "--closed",
        "--test",
        &format!("{split}/known_test.csv"),
    ]);
    assert_success(&out, "closed eval");
    let text = stdout(&out);
    assert!(
        text.contains("scope,category,correct,total,accuracy"),
        "csv header missing from:\n{text}"
    );
    assert!(text.contains("overall,"), "aggregate row missing from:\n{text}");

    // Open-set eval in JSON form parses and carries the three aggregates.
    let out = openset(&[
        "eval",
        "--model",
        &model,
        "--thresholds",
        &thresholds,
        "--known-test",
        &format!("{split}/known_test.csv"),
        "--unknown-test",
        &format!("{split}/unknown_pool.csv"),
        "--format",
        "json",
    ]);
    assert_success(&out, "open eval");
    let json: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let report = &json["report"];
    assert!(report["known_accuracy"].is_f64(), "report: {report}");
    assert_eq!(
        report["unknown_accuracy"], 0.0,
        "nothing incorporated, so every unknown sample counts wrong"
    );
}

#[test]
fn incorporated_mapping_scores_adopted_categories() {
    let dir = TempDir::new().unwrap();
    let data = path_str(&dir, "data.csv");
    let model = path_str(&dir, "model.json");
    let thresholds = path_str(&dir, "thresholds.json");

    assert_success(
        &openset(&[
            "synth", "--classes", "5", "--per-class", "12", "--dim", "8", "--quiet", "--out",
            &data,
        ]),
        "synth",
    );
    assert_success(
        &openset(&["train", "--data", &data, "--quiet", "--out", &model]),
        "train",
    );
    assert_success(
        &openset(&[
            "calibrate", "--model", &model, "--data", &data, "--quiet", "--out", &thresholds,
        ]),
        "calibrate",
    );

    // Pretend category 5 was adopted from the wild under pool label 7:
    // its samples, relabeled 7, should be accepted by column 5.
    let text = fs::read_to_string(&data).unwrap();
    let mut unknown = String::from(text.lines().next().unwrap());
    unknown.push('\n');
    for line in text.lines().skip(1).filter(|l| l.starts_with("5,")) {
        unknown.push('7');
        unknown.push_str(line.strip_prefix('5').unwrap());
        unknown.push('\n');
    }
    let unknown_csv = path_str(&dir, "unknown.csv");
    fs::write(&unknown_csv, unknown).unwrap();

    let eval = |incorporated: Option<&str>| -> serde_json::Value {
        let mut args = vec![
            "eval",
            "--model",
            &model,
            "--thresholds",
            &thresholds,
            "--known-test",
            &data,
            "--unknown-test",
            &unknown_csv,
            "--format",
            "json",
        ];
        if let Some(pairs) = incorporated {
            args.push("--incorporated");
            args.push(pairs);
        }
        let out = openset(&args);
        assert_success(&out, "open eval");
        serde_json::from_str(&stdout(&out)).unwrap()
    };

    let without = eval(None);
    assert_eq!(
        without["report"]["unknown_accuracy"], 0.0,
        "unmapped categories always count wrong"
    );

    let with = eval(Some("7=5"));
    let acc = with["report"]["unknown_accuracy"].as_f64().unwrap();
    assert!(
        acc > 0.9,
        "mapped category should score nearly perfectly, got {acc}"
    );
}

// ---------------------------------------------------------------------------

#[test]
fn quiet_silences_progress_output() {
    let dir = TempDir::new().unwrap();
    let out = openset(&[
        "synth", "--classes", "3", "--per-class", "4", "--dim", "4", "--quiet", "--out",
        &path_str(&dir, "q.csv"),
    ]);
    assert_success(&out, "synth");
    assert!(
        stdout(&out).is_empty(),
        "--quiet should print nothing, got: {}",
        stdout(&out)
    );
}

#[test]
fn sweep_writes_one_row_per_openness_level() {
    let dir = TempDir::new().unwrap();
    let table = path_str(&dir, "sweep.csv");
    let out = openset(&[
        "sweep",
        "--unknowns",
        "1,2",
        "--known",
        "4",
        "--set",
        "synth.classes=6",
        "--set",
        "synth.per_class=12",
        "--set",
        "synth.dim=8",
        "--quiet",
        "--out",
        &table,
    ]);
    assert_success(&out, "sweep");
    let text = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(
        rows.len(),
        3,
        "expected header plus two rows, got:\n{text}"
    );
    assert_eq!(rows[0], "unknown_count,overall,known,unknown");
    assert!(rows[1].starts_with("1,"), "row: {}", rows[1]);
    assert!(rows[2].starts_with("2,"), "row: {}", rows[2]);
}
