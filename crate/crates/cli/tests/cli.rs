use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Stdio};

use mqseq_core::dataset::write_records;
use mqseq_core::synthetic::{generate_corpus, SyntheticConfig};
use mqseq_core::Split;

fn write_corpus(dir: &Path, config: &SyntheticConfig) {
    fs::create_dir_all(dir).unwrap();
    let records = generate_corpus(config);
    for split in Split::ALL {
        let rows: Vec<_> = records.iter().filter(|r| r.split == split).cloned().collect();
        let mut f = fs::File::create(dir.join(format!("{split}.json"))).unwrap();
        write_records(&rows, &mut f).unwrap();
    }
}

fn small_corpus() -> SyntheticConfig {
    SyntheticConfig {
        classes: 4,
        train_per_class: 12,
        dev_per_class: 5,
        test_per_class: 5,
        ..SyntheticConfig::default()
    }
}

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn mqseq(args: &[&str], env: &[(&str, &str)]) -> Run {
    let env: BTreeMap<String, String> = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["mqseq"];
    argv.extend_from_slice(args);
    let code = mqseq_cli::run(argv, &env, &mut out, &mut err);
    Run {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

struct Workspace {
    _tmp: tempfile::TempDir,
    data: String,
    cache: String,
    out: String,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_corpus(&data, &small_corpus());
    let s = |p: &str| tmp.path().join(p).to_str().unwrap().to_string();
    Workspace {
        data: s("data"),
        cache: s("cache"),
        out: s("out"),
        _tmp: tmp,
    }
}

impl Workspace {
    fn run(&self, sub: &[&str], extra: &[&str]) -> Run {
        let mut args: Vec<&str> = sub.to_vec();
        args.extend_from_slice(&[
            "--data-dir",
            &self.data,
            "--cache-dir",
            &self.cache,
            "--out-dir",
            &self.out,
            "--dim",
            "32",
        ]);
        args.extend_from_slice(extra);
        mqseq(&args, &[])
    }
}

#[test]
fn full_pipeline_writes_expected_files() {
    let ws = workspace();
    let r = ws.run(&["ingest"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("classes=4"));
    let r = ws.run(&["embed"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("train: embedded 48 x 32"));
    let r = ws.run(&["train"], &["--lr", "1e-2", "--epochs", "3"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("steps=300"));
    let r = ws.run(&["eval"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("accuracy"));
    let r = ws.run(&["predict"], &[]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    let r = ws.run(&["project"], &["--perplexity", "5", "--tsne-iterations", "300"]);
    assert_eq!(r.code, 0, "{}", r.stderr);

    let out = Path::new(&ws.out);
    for name in [
        "summary.txt",
        "checkpoint-train_only.mqck",
        "report-dev-train_only.txt",
        "confusion-dev-train_only.csv",
        "predictions-dev-train_only.csv",
        "predicted-test-train_only.csv",
        "projection-dev.csv",
        "kl-dev.csv",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let preds = fs::read_to_string(out.join("predictions-dev-train_only.csv")).unwrap();
    assert_eq!(preds.lines().next(), Some("id,gold,predicted"));
    assert_eq!(preds.lines().count(), 1 + 20);
    let proj = fs::read_to_string(out.join("projection-dev.csv")).unwrap();
    assert_eq!(proj.lines().next(), Some("id,x,y,subject_index,subject_name"));
    assert_eq!(proj.lines().count(), 1 + 20);
    assert_eq!(
        fs::read_to_string(out.join("kl-dev.csv")).unwrap().lines().count(),
        1 + 300
    );
    let runs: Vec<_> = fs::read_dir(out.join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 2);
}

#[test]
fn embed_is_idempotent() {
    let ws = workspace();
    assert_eq!(ws.run(&["ingest"], &[]).code, 0);
    assert_eq!(ws.run(&["embed"], &[]).code, 0);
    let cache = Path::new(&ws.cache).join("embeddings/train.mqsb");
    let before = fs::metadata(&cache).unwrap().modified().unwrap();
    let r = ws.run(&["embed"], &[]);
    assert_eq!(r.code, 0);
    assert_eq!(r.stdout.matches("cache up to date").count(), 3, "{}", r.stdout);
    assert_eq!(fs::metadata(&cache).unwrap().modified().unwrap(), before);
    let r = ws.run(&["embed"], &["--force"]);
    assert!(r.stdout.contains("train: embedded"));
    let r = ws.run(&["embed"], &["--seed", "7"]);
    assert!(
        r.stdout.contains("train: embedded"),
        "changed backend seed must invalidate"
    );
}

#[test]
fn strategies_and_compare() {
    let ws = workspace();
    assert_eq!(ws.run(&["ingest"], &[]).code, 0);
    assert_eq!(ws.run(&["embed"], &[]).code, 0);
    let r = ws.run(&["train"], &["--strategy", "train_plus_dev", "--epochs", "1"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("rows=68"), "{}", r.stdout);
    let r = ws.run(&["eval"], &["--compare"]);
    assert_eq!(r.code, 1, "train_only checkpoint is missing");
    assert_eq!(ws.run(&["train"], &["--epochs", "1"]).code, 0);
    let r = ws.run(&["eval"], &["--compare", "--split", "test"]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert!(r.stdout.contains("train_only") && r.stdout.contains("train_plus_dev"));
}

#[test]
fn training_is_deterministic() {
    let ws = workspace();
    assert_eq!(ws.run(&["ingest"], &[]).code, 0);
    assert_eq!(ws.run(&["embed"], &[]).code, 0);
    let ckpt = Path::new(&ws.out).join("checkpoint-train_only.mqck");
    assert_eq!(ws.run(&["train"], &["--epochs", "1"]).code, 0);
    let a = fs::read(&ckpt).unwrap();
    assert_eq!(ws.run(&["train"], &["--epochs", "1"]).code, 0);
    assert_eq!(a, fs::read(&ckpt).unwrap());
    assert_eq!(ws.run(&["train"], &["--epochs", "1", "--seed", "5"]).code, 0);
    assert_ne!(a, fs::read(&ckpt).unwrap());
}

#[test]
fn exit_codes() {
    let ws = workspace();
    // missing split file
    fs::remove_file(Path::new(&ws.data).join("test.json")).unwrap();
    assert_eq!(ws.run(&["ingest"], &[]).code, 2);

    let ws = workspace();
    fs::write(Path::new(&ws.data).join("dev.json"), "{\"id\": \"x\"\n").unwrap();
    let r = ws.run(&["ingest"], &[]);
    assert_eq!(r.code, 2);
    assert!(
        r.stderr.contains("dev.json") && r.stderr.contains("line 1"),
        "{}",
        r.stderr
    );

    let ws = workspace();
    assert_eq!(ws.run(&["ingest"], &[]).code, 0);
    let r = ws.run(
        &["embed"],
        &["--backend", "loaded", "--model-path", "/nonexistent/model"],
    );
    assert_eq!(r.code, 3);

    assert_eq!(ws.run(&["embed"], &[]).code, 0);
    assert_eq!(ws.run(&["train"], &["--epochs", "1"]).code, 0);
    let r = mqseq(
        &["eval", "--cache-dir", &ws.cache, "--out-dir", &ws.out, "--dim", "64"],
        &[],
    );
    assert_eq!(r.code, 4, "{}", r.stderr);

    let cache = Path::new(&ws.cache).join("embeddings/dev.mqsb");
    let mut bytes = fs::read(&cache).unwrap();
    bytes[0] = b'X';
    fs::write(&cache, bytes).unwrap();
    assert_eq!(ws.run(&["eval"], &[]).code, 3);

    assert_eq!(mqseq(&["train", "--lr", "abc"], &[]).code, 1);
    assert_eq!(mqseq(&["bogus"], &[]).code, 1);
    assert_eq!(mqseq(&["--help"], &[]).code, 0);
}

#[test]
fn precedence_matrix_through_cli() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.conf");
    fs::write(&cfg, "cache_dir=/from/file\nseed=2\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    for mask in 0u8..8 {
        let mut args = vec!["config"];
        if mask & 1 != 0 {
            args.extend_from_slice(&["--cache-dir", "/from/flag"]);
        }
        if mask & 2 != 0 {
            args.extend_from_slice(&["--config", cfg]);
        }
        let env: &[(&str, &str)] = if mask & 4 != 0 {
            &[("MQSEQ_CACHE_DIR", "/from/env")]
        } else {
            &[]
        };
        let r = mqseq(&args, env);
        assert_eq!(r.code, 0, "{}", r.stderr);
        let expected = if mask & 1 != 0 {
            "cache_dir=/from/flag  # flag"
        } else if mask & 2 != 0 {
            "cache_dir=/from/file  # file"
        } else if mask & 4 != 0 {
            "cache_dir=/from/env  # env"
        } else {
            "cache_dir=.mqseq-cache  # default"
        };
        assert!(r.stdout.contains(expected), "mask {mask:03b}: {}", r.stdout);
    }
    let r = mqseq(&["config"], &[("MQSEQ_CONFIG", cfg)]);
    assert!(r.stdout.contains("seed=2  # file"));
    let r = mqseq(&["config"], &[]);
    assert!(r.stdout.contains("seed=42  # default"));
}

#[test]
fn binary_reports_exit_status() {
    let bin = env!("CARGO_BIN_EXE_mqseq");
    let tmp = tempfile::tempdir().unwrap();
    let status = Command::new(bin)
        .args(["ingest", "--data-dir"])
        .arg(tmp.path())
        .arg("--cache-dir")
        .arg(tmp.path().join("cache"))
        .stderr(Stdio::null())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let out = Command::new(bin).arg("config").env("MQSEQ_SEED", "9").output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed=9  # env"));
}
