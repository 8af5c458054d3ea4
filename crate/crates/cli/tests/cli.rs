use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn hanme(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hanme"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
}

fn gen(dir: &Path) {
    let out = hanme(&["gen-synth", "--out", dir.to_str().unwrap(), "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: [&str; 10] = [
    "--heads", "1", "--hidden", "8", "--max-epochs", "15", "--patience", "15", "--dropout", "0",
];

fn train_small(data: &Path, run: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--quiet",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    hanme(&args)
}

#[test]
fn help_lists_every_flag() {
    let out = hanme(&["--help"]);
    assert_eq!(code(&out), 0);
    for sub in ["gen-synth", "extract", "train", "eval", "verify"] {
        assert!(stdout(&out).contains(sub), "missing {sub}");
    }
    let out = hanme(&["train", "--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for flag in [
        "--config", "--data", "--out", "--encoder", "--gamma", "--lts", "--lambda0", "--pace-T",
        "--seed", "--heads", "--hidden", "--lr", "--weight-decay", "--dropout", "--patience",
        "--strict",
    ] {
        assert!(text.contains(flag), "train --help lacks {flag}");
    }
    assert!(text.contains("terminal-only") && text.contains("geometric"));
}

#[test]
fn bad_usage_exits_one() {
    let out = hanme(&["train", "--no-such-flag"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&hanme(&["train", "--encoder", "bogus"])), 1);
    assert_eq!(code(&hanme(&["frobnicate"])), 1);
}

#[test]
fn invalid_inputs_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let run = tmp.path().join("run");
    // no dataset given
    assert_eq!(code(&hanme(&["train", "--out", run.to_str().unwrap()])), 1);
    // dataset directory without a manifest
    let out = hanme(&["train", "--data", missing.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    // out-of-range teleport rate
    let data = tmp.path().join("data");
    gen(&data);
    let out = train_small(&data, &run, &["--gamma", "1.5"]);
    assert_eq!(code(&out), 1);
    // unknown metapath type
    let out = hanme(&["extract", "--data", data.to_str().unwrap(), "--metapath", "movie-writer-movie"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gen_extract_train_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    assert!(data.join("manifest.json").exists());

    let stats = tmp.path().join("stats.json");
    let out = hanme(&[
        "extract",
        "--data",
        data.to_str().unwrap(),
        "--out",
        stats.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("movie-director-movie") && text.contains("movie-actor-movie"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), 2);

    let run = tmp.path().join("run");
    let out = train_small(&data, &run, &["--lts", "linear", "--pace-T", "5", "--seed", "483"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = stdout(&out);
    for f in ["checkpoint.bin", "history.csv", "metrics.txt"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert_eq!(fs::read_to_string(run.join("metrics.txt")).unwrap(), metrics);
    let history = fs::read_to_string(run.join("history.csv")).unwrap();
    let mut lines = history.lines();
    assert_eq!(
        lines.next(),
        Some("epoch,lambda_t,num_selected,train_loss,val_micro_f1,val_macro_f1")
    );
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[1].parse::<f64>().unwrap(), 0.1);

    let out = hanme(&[
        "eval",
        "--checkpoint",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--split",
        "val",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = stdout(&out);
    assert_eq!(value(&eval, "split"), "val");
    assert_eq!(value(&eval, "micro_f1"), value(&metrics, "val_micro_f1"));
    assert_eq!(value(&eval, "macro_f1"), value(&metrics, "val_macro_f1"));
}

#[test]
fn strict_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&train_small(&data, &a, &["--strict"])), 0);
    assert_eq!(code(&train_small(&data, &b, &["--strict"])), 0);
    for f in ["checkpoint.bin", "history.csv", "metrics.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    // rerunning into the same directory overwrites with the same bytes
    let before = fs::read(a.join("checkpoint.bin")).unwrap();
    assert_eq!(code(&train_small(&data, &a, &["--strict"])), 0);
    assert_eq!(fs::read(a.join("checkpoint.bin")).unwrap(), before);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"data": {:?}, "encoder": "direct", "heads": 1, "hidden": 8, "max_epochs": 3}}"#,
            data.to_str().unwrap()
        ),
    )
    .unwrap();
    let run = tmp.path().join("run");
    let out = hanme(&[
        "train",
        "--quiet",
        "--config",
        cfg.to_str().unwrap(),
        "--encoder",
        "terminal-only",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = stdout(&out);
    assert_eq!(value(&metrics, "encoder"), "terminal-only");
    assert_eq!(value(&metrics, "stopped_epoch"), "3");
}

#[test]
fn gen_synth_reads_a_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("synth.json");
    fs::write(&cfg, r#"{"target_count": 30, "num_classes": 3, "communities": 3}"#).unwrap();
    let out = hanme(&[
        "gen-synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(value(&stdout(&out), "nodes.movie"), "30");
    fs::write(&cfg, "{ not json").unwrap();
    let out = hanme(&["gen-synth", "--config", cfg.to_str().unwrap(), "--out", "unused"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn quick_verify_passes() {
    let out = hanme(&["verify", "--quick"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.starts_with("PASS ")));
}
