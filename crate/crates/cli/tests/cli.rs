//! End-to-end tests of the `mgtlab` binary: exit-code contract, report
//! determinism, and the committed stats fixture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mgtlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgtlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixture_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/corpus_fixture.jsonl")
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn gradcheck_passes_with_exit_zero_and_one_line_per_check() {
    let out = mgtlab(&["gradcheck"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    let pass_lines = text.lines().filter(|l| l.starts_with("PASS")).count();
    assert!(
        pass_lines >= 30,
        "expected one PASS line per check, got {pass_lines}"
    );
    assert!(text.contains("max_rel_err="));
    assert!(!text.contains("FAIL"));
}

#[test]
fn gradcheck_with_injected_fault_exits_one() {
    let out = mgtlab(&["gradcheck", "--inject-fault"]);
    assert_eq!(out.status.code(), Some(1));
    let text = stdout_of(&out);
    assert!(
        text.contains("FAIL fault/scaled_backward"),
        "output: {text}"
    );
}

#[test]
fn unknown_config_key_exits_two_and_lists_valid_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.conf");
    std::fs::write(&cfg, "learnin_rate = 3e-4\n").unwrap();
    let out = mgtlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr_of(&out);
    assert!(err.contains("unknown key"), "stderr: {err}");
    assert!(
        err.contains("base_lr") && err.contains("pooling"),
        "stderr: {err}"
    );
}

#[test]
fn unreadable_dataset_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.conf");
    std::fs::write(&cfg, "train_data = /nonexistent/corpus.jsonl\n").unwrap();
    let out = mgtlab(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stats_prints_reference_table_layout_and_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let json_path = dir.path().join("stats.json");
    let out = mgtlab(&[
        "stats",
        "--data",
        fixture_path().to_str().unwrap(),
        "--out",
        json_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let text = stdout_of(&out);
    for row in [
        "Statistic",
        "Samples",
        "Avg. Words",
        "Avg. Characters",
        "Max Words",
    ] {
        assert!(text.contains(row), "missing row {row}: {text}");
    }
    // One-decimal means from the committed hand tally.
    assert!(text.contains("9.7"), "human avg words: {text}");
    assert!(text.contains("55.5"), "human avg chars: {text}");
    assert!(text.contains("6.5"), "machine avg words: {text}");
    assert!(text.contains("44.5"), "machine avg chars: {text}");

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let tally: serde_json::Value = serde_json::from_str(include_str!(
        "../../core/tests/fixtures/corpus_fixture_tally.json"
    ))
    .unwrap();
    for class in ["human", "machine"] {
        for field in ["samples", "avg_words", "avg_chars", "max_words"] {
            assert_eq!(
                json[class][field].as_f64().unwrap(),
                tally[class][field].as_f64().unwrap(),
                "{class}.{field}"
            );
        }
    }
}

#[test]
fn stats_on_single_class_dataset_names_the_missing_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("one_class.jsonl");
    std::fs::write(
        &data,
        "{\"id\":\"a\",\"text\":\"only machine text here\",\"label\":\"machine\"}\n",
    )
    .unwrap();
    let out = mgtlab(&["stats", "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("human"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn gen_data_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for (path, seed) in [(&a, "7"), (&b, "7")] {
        let out = mgtlab(&[
            "gen-data",
            "--n-per-class",
            "20",
            "--seed",
            seed,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = dir.path().join("c.jsonl");
    let out = mgtlab(&[
        "gen-data",
        "--n-per-class",
        "20",
        "--seed",
        "8",
        "--out",
        c.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn compare_emits_four_fixed_order_rows() {
    let dir = tempfile::tempdir().unwrap();
    let train = dir.path().join("train.jsonl");
    let eval = dir.path().join("eval.jsonl");
    for (path, seed) in [(&train, "3"), (&eval, "4")] {
        let out = mgtlab(&[
            "gen-data",
            "--n-per-class",
            "16",
            "--seed",
            seed,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let cfg = dir.path().join("cmp.conf");
    std::fs::write(
        &cfg,
        format!(
            "train_data = {}\neval_data = {}\n\
             num_layers = 1\nhidden = 16\nheads = 2\nffn_dim = 32\n\
             vocab_size = 200\nmax_positions = 48\nmax_seq_len = 48\n\
             micro_batch = 8\ngrad_accum = 1\nepochs = 1\nbase_lr = 1e-3\nseed = 2\n",
            train.display(),
            eval.display()
        ),
    )
    .unwrap();
    let json_path = dir.path().join("cmp.json");
    let out = mgtlab(&[
        "compare",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        json_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));

    let text = stdout_of(&out);
    assert!(
        text.contains("Pooling Strategy"),
        "table header missing: {text}"
    );

    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    let rows = v["rows"].as_array().unwrap();
    let kinds: Vec<&str> = rows
        .iter()
        .map(|r| r["pooling"].as_str().unwrap())
        .collect();
    assert_eq!(
        kinds,
        ["mean", "wlp_mean", "wlp_attention", "wlp_attention_gated"]
    );
    let params: Vec<u64> = rows
        .iter()
        .map(|r| r["pooling_params"].as_u64().unwrap())
        .collect();
    assert!(params.windows(2).all(|w| w[0] < w[1]), "params {params:?}");
    for r in rows {
        let f1 = r["f1"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&f1));
    }
}

/// Full workflow on a small corpus: gen-data, train (report + checkpoint),
/// byte-identical rerun, evaluate, probe-length.
#[test]
fn train_evaluate_probe_workflow_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tiny.jsonl");
    let out = mgtlab(&[
        "gen-data",
        "--n-per-class",
        "40",
        "--seed",
        "11",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));

    let cfg = dir.path().join("tiny.conf");
    std::fs::write(
        &cfg,
        format!(
            "train_data = {}\n\
             pooling = mean\n\
             num_layers = 2\n\
             hidden = 32\n\
             heads = 4\n\
             ffn_dim = 64\n\
             vocab_size = 300\n\
             max_positions = 64\n\
             max_seq_len = 64\n\
             base_lr = 2e-3\n\
             epochs = 1\n\
             micro_batch = 8\n\
             grad_accum = 2\n\
             seed = 5\n",
            data.display()
        ),
    )
    .unwrap();

    let report_a = dir.path().join("a.json");
    let report_b = dir.path().join("b.json");
    let ckpt = dir.path().join("tiny.ckpt");
    for report in [&report_a, &report_b] {
        let out = mgtlab(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    }

    // Byte-identical up to the observational wall time.
    let null_wall = |path: &Path| -> String {
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
        v["wall_time_secs"] = serde_json::Value::from(0.0);
        serde_json::to_string_pretty(&v).unwrap()
    };
    assert_eq!(null_wall(&report_a), null_wall(&report_b));

    let out = mgtlab(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(stdout_of(&out).contains("F1"));

    // Unbounded band: full and banded metrics coincide.
    let probe = dir.path().join("probe.json");
    let out = mgtlab(&[
        "probe-length",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--band",
        "0,",
        "--out",
        probe.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&probe).unwrap()).unwrap();
    assert_eq!(v["full"], v["banded"]);
    assert_eq!(v["model_f1_delta"].as_f64().unwrap(), 0.0);

    // A band that empties one class is a usage error naming the class.
    let out = mgtlab(&[
        "probe-length",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--band",
        "100000,",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        stderr_of(&out).contains("human"),
        "stderr: {}",
        stderr_of(&out)
    );
}
