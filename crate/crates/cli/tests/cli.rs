use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use recall_core::data::{read_feature_file, SequenceManifest};
use recall_core::metrics::{evaluate, MetricsReport};
use recall_core::rng::derive_seed;

fn recall(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recall"))
        .args(args)
        .current_dir(cwd)
        .env_clear()
        .output()
        .unwrap()
}

fn recall_env(cwd: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recall"))
        .args(args)
        .current_dir(cwd)
        .env_clear()
        .envs(env.iter().copied())
        .output()
        .unwrap()
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Every file under `root` with its bytes.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

const SMALL: &[&str] = &["--samples", "8", "--instances", "5", "--dim", "16"];
const FAST: &[&str] = &["--epochs", "2", "--hidden-width", "8"];

fn gen_small(root: &Path, name: &str) -> PathBuf {
    let mut args = vec!["gen", "--out", name];
    args.extend(SMALL);
    ok(recall(root, &args));
    root.join(name).join("manifest.toml")
}

fn train(root: &Path, manifest: &Path, out: &str, extra: &[&str]) -> Output {
    let m = manifest.to_str().unwrap();
    let mut args = vec!["train", "--manifest", m, "--out", out];
    args.extend(FAST);
    args.extend(extra);
    recall(root, &args)
}

#[test]
fn gen_is_reproducible_and_lays_out_sequences() {
    let root = tempfile::tempdir().unwrap();
    let manifest = gen_small(root.path(), "a");
    gen_small(root.path(), "b");
    assert_eq!(snapshot(&root.path().join("a")), snapshot(&root.path().join("b")));
    let m = SequenceManifest::load(&manifest).unwrap();
    assert_eq!(m.sequences.len(), 5);
    assert!(m.sequences.iter().all(|s| s.len() == 2));

    ok(recall(
        root.path(),
        &[
            "gen",
            "--out",
            "long",
            "--categories",
            "25",
            "--layout",
            "hows-long",
            "--format",
            "csv",
            "--samples",
            "2",
            "--instances",
            "5",
            "--dim",
            "4",
        ],
    ));
    let m = SequenceManifest::load(&root.path().join("long/manifest.toml")).unwrap();
    assert_eq!(m.sequences.len(), 12);
    assert!(root.path().join("long/train.csv").is_file());
    let train = read_feature_file(&root.path().join("long/train.csv")).unwrap();
    let val = read_feature_file(&root.path().join("long/val.csv")).unwrap();
    assert_eq!(train.len() + val.len(), 25 * 5 * 2);
}

#[test]
fn training_is_reproducible_and_stays_inside_out() {
    let root = tempfile::tempdir().unwrap();
    let manifest = gen_small(root.path(), "data");
    let before = snapshot(root.path());
    ok(train(root.path(), &manifest, "run1", &["--repeats", "2"]));
    let after = snapshot(root.path());
    for path in after.keys() {
        assert!(
            before.contains_key(path) || path.starts_with("run1"),
            "stray file {}",
            path.display()
        );
    }
    ok(train(root.path(), &manifest, "run2", &["--repeats", "2"]));
    let (a, b) = (snapshot(&root.path().join("run1")), snapshot(&root.path().join("run2")));
    assert_eq!(a, b);
    for seed in ["seed-1", "seed-2"] {
        for f in [
            "accuracy_matrix.csv",
            "variance_trace.csv",
            "overall_accuracy.csv",
            "report.json",
            "checkpoints/seq-4.rck",
        ] {
            assert!(a.contains_key(&Path::new(seed).join(f)), "{seed}/{f} missing");
        }
    }
    let audit = String::from_utf8(a[Path::new("seed-1/access_audit.csv")].clone()).unwrap();
    assert!(audit.lines().skip(1).all(|l| l.ends_with(",0")), "{audit}");
}

#[test]
fn zero_learning_rate_keeps_the_initial_accuracy() {
    let root = tempfile::tempdir().unwrap();
    let manifest_path = gen_small(root.path(), "data");
    ok(train(root.path(), &manifest_path, "run", &["--lr", "0", "--seed", "5"]));
    let report = MetricsReport::load_dir(&root.path().join("run")).unwrap();
    assert!(report.config.zero_lr_diagnostic);

    let manifest = SequenceManifest::load(&manifest_path).unwrap();
    let val = read_feature_file(&manifest.resolve(&manifest_path, &manifest.val)).unwrap();
    let config = &report.config;
    let mut model = config.new_model(val.feature_dim()).unwrap();
    for (s, cats) in manifest.sequences.iter().enumerate() {
        model.expand(cats, derive_seed(config.init_seed, &[s as u64])).unwrap();
    }
    let last = manifest.sequences.len() - 1;
    let untrained = evaluate(&model, &val, &manifest, last, 16).unwrap().overall();
    assert_eq!(report.final_accuracy().unwrap(), untrained);
}

#[test]
fn eval_reproduces_the_training_report() {
    let root = tempfile::tempdir().unwrap();
    let manifest = gen_small(root.path(), "data");
    ok(train(root.path(), &manifest, "run", &[]));
    let report = MetricsReport::load_dir(&root.path().join("run")).unwrap();
    for s in [0, 2, 4] {
        let ck = root.path().join(format!("run/checkpoints/seq-{s}.rck"));
        ok(recall(
            root.path(),
            &[
                "eval",
                "--checkpoint",
                ck.to_str().unwrap(),
                "--manifest",
                manifest.to_str().unwrap(),
                "--out",
                "ev",
            ],
        ));
        let json: serde_json::Value =
            serde_json::from_slice(&fs::read(root.path().join("ev/eval.json")).unwrap()).unwrap();
        assert_eq!(json["sequence"], s);
        assert_eq!(json["overall_accuracy"].as_f64().unwrap(), report.overall_accuracy[s]);
        let per: Vec<f64> = json["per_sequence_accuracy"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert_eq!(per, report.accuracy_matrix[s]);
    }

    let other = gen_small_with_seed(root.path(), "other", "9");
    let ck = root.path().join("run/checkpoints/seq-1.rck");
    let out = recall(
        root.path(),
        &[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--manifest",
            other.to_str().unwrap(),
            "--out",
            "ev2",
        ],
    );
    assert_eq!(code(&out), 3);
}

fn gen_small_with_seed(root: &Path, name: &str, seed: &str) -> PathBuf {
    let mut args = vec!["gen", "--out", name, "--seed", seed];
    args.extend(SMALL);
    ok(recall(root, &args));
    root.join(name).join("manifest.toml")
}

#[test]
fn compare_a_run_with_itself() {
    let root = tempfile::tempdir().unwrap();
    let manifest = gen_small(root.path(), "data");
    ok(train(root.path(), &manifest, "run", &[]));
    ok(train(
        root.path(),
        &manifest,
        "naive",
        &["--mode", "naive", "--repeats", "2"],
    ));
    ok(recall(root.path(), &["compare", "run", "run", "naive", "--out", "cmp"]));
    let comparison = fs::read_to_string(root.path().join("cmp/comparison.csv")).unwrap();
    let mut rows = csv::Reader::from_reader(comparison.as_bytes());
    let header = rows.headers().unwrap().clone();
    assert_eq!(
        header.iter().collect::<Vec<_>>(),
        ["sequence", "run1", "run2", "run3", "run2_minus_run1", "run3_minus_run1"]
    );
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 5);
    for r in &records {
        assert_eq!(&r[1], &r[2]);
        assert_eq!(&r[4], "0.0000");
    }
    let summary = fs::read_to_string(root.path().join("cmp/summary.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert!(lines[1].contains(",1,") && lines[1].ends_with(",0.0000"), "{summary}");
    assert!(lines[3].contains(",2,"), "{summary}");

    let other = gen_small_with_seed(root.path(), "other", "3");
    ok(train(root.path(), &other, "run_other", &[]));
    assert_eq!(
        code(&recall(root.path(), &["compare", "run", "run_other", "--out", "cmp2"])),
        3
    );
    assert_eq!(
        code(&recall(root.path(), &["compare", "run", "data", "--out", "cmp3"])),
        4
    );
    assert_eq!(code(&recall(root.path(), &["compare", "run", "--out", "cmp4"])), 2);
}

#[test]
fn ablation_grid() {
    let root = tempfile::tempdir().unwrap();
    let manifest = gen_small(root.path(), "data");
    let m = manifest.to_str().unwrap();
    let mut args = vec![
        "ablate",
        "--manifest",
        m,
        "--modes",
        "recall,naive",
        "--archs",
        "per-seq-head,expand-last",
        "--activations",
        "relu",
        "--seeds",
        "1,2",
        "--out",
        "abl",
    ];
    args.extend(FAST);
    ok(recall(root.path(), &args));
    let table = fs::read_to_string(root.path().join("abl/ablation.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "strategy,activation,mode,runs,final_accuracy_mean,final_accuracy_std"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("2")));
    let runs = fs::read_to_string(root.path().join("abl/ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 8);
    assert!(root
        .path()
        .join("abl/expand-last_relu_naive/seed-2/report.json")
        .is_file());
}

#[test]
fn configuration_precedence() {
    let root = tempfile::tempdir().unwrap();
    gen_small(root.path(), "data");
    fs::write(
        root.path().join("run.toml"),
        "manifest = \"data/manifest.toml\"\nmode = \"recall-var\"\nepochs_per_sequence = 2\nhidden_width = 8\nbatch_size = 32\nseed = 4\n",
    )
    .unwrap();

    let echo = |dir: &str| -> toml::Table {
        toml::from_str(&fs::read_to_string(root.path().join(dir).join("config.toml")).unwrap()).unwrap()
    };

    ok(recall(root.path(), &["train", "--config", "run.toml", "--out", "file"]));
    let e = echo("file");
    assert_eq!(e["mode"].as_str(), Some("recall-var"));
    assert_eq!(e["batch_size"].as_integer(), Some(32));
    assert_eq!(e["seed"].as_integer(), Some(4));

    ok(recall_env(
        root.path(),
        &["train", "--config", "run.toml", "--out", "env"],
        &[("RECALL_MODE", "naive"), ("RECALL_BATCH_SIZE", "16")],
    ));
    let e = echo("env");
    assert_eq!(e["mode"].as_str(), Some("naive"));
    assert_eq!(e["batch_size"].as_integer(), Some(16));
    assert_eq!(e["hidden_width"].as_integer(), Some(8));

    ok(recall_env(
        root.path(),
        &["train", "--config", "run.toml", "--mode", "recall-reg", "--out", "flag"],
        &[("RECALL_MODE", "naive")],
    ));
    assert_eq!(echo("flag")["mode"].as_str(), Some("recall-reg"));

    // the echo replays the same run
    ok(recall(
        root.path(),
        &["train", "--config", "flag/config.toml", "--out", "replay"],
    ));
    assert_eq!(
        snapshot(&root.path().join("flag")),
        snapshot(&root.path().join("replay"))
    );
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let manifest = gen_small(root.path(), "data");
    let m = manifest.to_str().unwrap();

    assert_eq!(code(&recall(root.path(), &[])), 2);
    assert_eq!(code(&recall(root.path(), &["train", "--manifest", m])), 2);
    assert_eq!(
        code(&recall(
            root.path(),
            &["train", "--manifest", m, "--mode", "fancy", "--out", "x"]
        )),
        2
    );
    assert_eq!(code(&recall(root.path(), &["train", "--out", "x"])), 2);
    assert_eq!(code(&recall(root.path(), &["--help"])), 0);

    assert_eq!(
        code(&recall(root.path(), &["gen", "--out", "g", "--layout", "equal:0"])),
        3
    );
    assert_eq!(
        code(&recall(root.path(), &["gen", "--out", "g", "--categories", "0"])),
        3
    );
    assert_eq!(code(&train(root.path(), &manifest, "x", &["--batch-size", "0"])), 3);
    assert_eq!(
        code(&train(root.path(), &manifest, "x", &["--deterministic", "false"])),
        3
    );
    assert_eq!(code(&train(root.path(), &manifest, "x", &["--hidden-layers", "9"])), 3);

    assert_eq!(
        code(&train(root.path(), &root.path().join("missing.toml"), "x", &[])),
        4
    );
    fs::write(root.path().join("bad.toml"), "sequences = 3").unwrap();
    assert_eq!(code(&train(root.path(), &root.path().join("bad.toml"), "x", &[])), 4);
    fs::write(root.path().join("data/val.fcl"), b"FCL1\x01").unwrap();
    assert_eq!(code(&train(root.path(), &manifest, "x", &[])), 4);
    assert_eq!(
        code(&recall(
            root.path(),
            &["eval", "--checkpoint", m, "--manifest", m, "--out", "x"]
        )),
        4
    );
    fs::write(root.path().join("cfg.toml"), "unknown_key = 1").unwrap();
    assert_eq!(
        code(&recall(root.path(), &["train", "--config", "cfg.toml", "--out", "x"])),
        4
    );
}
