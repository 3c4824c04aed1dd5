use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_bicir");

fn bicir(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = bicir(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    bicir(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = "corpus_size = 60\ntrain_triplets = 48\nval_triplets = 20\ntest_triplets = 0\n";
const FAST: [&str; 10] = [
    "--set",
    "encoder.layers=1",
    "--set",
    "encoder.embed_dim=16",
    "--set",
    "encoder.ff_dim=32",
    "--set",
    "stage1.epochs=2",
    "--set",
    "stage2.epochs=2",
];

fn gen(dir: &Path, seed: &str) -> std::path::PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SMALL_SPEC).unwrap();
    let data = dir.join(format!("data{seed}"));
    ok(&["gen-data", "--spec", p(&spec), "--seed", seed, "--out", p(&data)]);
    data
}

#[test]
fn gen_data_writes_every_file_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "7");
    for f in [
        "images.bcir",
        "vocab.txt",
        "subsets.jsonl",
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "oracle_val.jsonl",
        "spec.toml",
    ] {
        assert!(a.join(f).exists(), "{f} missing");
    }
    let b = dir.path().join("again");
    ok(&["gen-data", "--spec", p(&dir.path().join("spec.toml")), "--seed", "7", "--out", p(&b)]);
    for e in std::fs::read_dir(&a).unwrap() {
        let e = e.unwrap();
        assert_eq!(
            std::fs::read(e.path()).unwrap(),
            std::fs::read(b.join(e.file_name())).unwrap(),
            "{:?} differs",
            e.file_name()
        );
    }
    assert!(std::fs::read(&a.join("images.bcir")).unwrap().starts_with(b"BCIR"));
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "1");
    let out = dir.path().join("o");
    // stage 2 needs a stage-1 checkpoint
    assert_eq!(code(&["train", "--data", p(&data), "--stage", "2", "--out", p(&out)]), 2);
    // unknown configuration key
    assert_eq!(
        code(&["train", "--data", p(&data), "--stage", "1", "--set", "loss.beta=1", "--out", p(&out)]),
        2
    );
    assert_eq!(code(&["train", "--data", p(&data), "--stage", "3", "--out", p(&out)]), 2);
    assert_eq!(code(&["ablate", "--axes", "depth", "--out", p(&out)]), 2);
    assert_eq!(code(&["train", "--data", "/nonexistent", "--stage", "1", "--out", p(&out)]), 3);

    let mut train = vec!["train", "--data", p(&data), "--stage", "1", "--out", p(&out)];
    train.extend(FAST);
    ok(&train);
    let ckpt = out.join("model.bckp");
    // the test split is empty
    assert_eq!(
        code(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "test", "--out", p(&out)]),
        3
    );
}

#[test]
fn divergence_exits_with_4_and_still_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "2");
    let out = dir.path().join("div");
    let mut args = vec!["train", "--data", p(&data), "--stage", "1", "--out", p(&out)];
    args.extend(FAST);
    args.extend(["--set", "stage1.lr=1e30", "--set", "stage1.projection_lr=1e30", "--set", "train.batch_size=8"]);
    assert_eq!(code(&args), 4);
    assert!(out.join("model.bckp").exists());
    assert!(out.join("config.toml").exists());
}

#[test]
fn two_stage_pipeline_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "3");
    let s1 = dir.path().join("s1");
    let s2 = dir.path().join("s2");
    let mut a = vec!["train", "--data", p(&data), "--stage", "1", "--out", p(&s1)];
    a.extend(FAST);
    ok(&a);
    let ck1 = s1.join("model.bckp");
    let mut b = vec!["train", "--data", p(&data), "--stage", "2", "--from-stage1", p(&ck1), "--out", p(&s2)];
    b.extend(FAST);
    ok(&b);

    let log = std::fs::read_to_string(s2.join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "split", "loss_f", "loss_b", "recall@5", "subset_recall@1"] {
            assert!(v.get(key).is_some(), "{key} missing from {line}");
        }
    }
    let snapshot = std::fs::read_to_string(s1.join("config.toml")).unwrap();
    assert!(snapshot.contains("epochs = 2"));

    let fwd = dir.path().join("fwd");
    let rev = dir.path().join("rev");
    let ck2 = s2.join("model.bckp");
    ok(&["eval", "--checkpoint", p(&ck2), "--data", p(&data), "--out", p(&fwd)]);
    ok(&[
        "eval", "--checkpoint", p(&ck2), "--data", p(&data), "--direction", "reversed", "--oracle", "--out", p(&rev),
    ]);
    let f: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fwd.join("report.json")).unwrap()).unwrap();
    assert_eq!(f["direction"], "forward");
    assert_eq!(f["split"], "val");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(rev.join("report.json")).unwrap()).unwrap();
    assert!(r["oracle_recall"].as_object().is_some_and(|m| !m.is_empty()));

    let table = dir.path().join("table.csv");
    ok(&["report", p(&fwd), p(&rev.join("report.json")), "--out", p(&table)]);
    let t = std::fs::read_to_string(table).unwrap();
    assert_eq!(t.lines().count(), 3);
    assert!(t.lines().next().unwrap().starts_with("source,split,direction"));
}

#[test]
fn baseline_flags_and_paper_preset() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "4");
    let out = dir.path().join("base");
    let mut a = vec![
        "train", "--data", p(&data), "--stage", "1", "--alpha", "0", "--no-bidirectional", "--out", p(&out),
    ];
    a.extend(FAST);
    ok(&a);
    let cfg = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(cfg.contains("alpha = 0.0"));
    assert!(cfg.contains("bidirectional = false"));

    let paper = dir.path().join("paper");
    ok(&[
        "train", "--data", p(&data), "--stage", "1", "--preset", "paper-cirr", "--set", "stage1.epochs=1", "--set",
        "encoder.layers=1", "--out", p(&paper),
    ]);
    let table: toml::Table = std::fs::read_to_string(paper.join("config.toml")).unwrap().parse().unwrap();
    assert_eq!(table["loss"]["temperature"].as_float(), Some(100.0));
    assert_eq!(table["loss"]["alpha"].as_float(), Some(0.1));
    assert_eq!(table["stage2"]["epochs"].as_integer(), Some(200));
    assert_eq!(table["stage1"]["lr"].as_float(), Some(5e-5));
}

#[test]
fn ablate_emits_table_and_alpha_curve() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen(dir.path(), "5");
    let out = dir.path().join("abl");
    let mut a = vec![
        "ablate", "--data", p(&data), "--axes", "neg-sampling,alpha", "--alphas", "0,1", "--seeds", "0", "--out",
        p(&out),
    ];
    a.extend(FAST);
    ok(&a);
    let table = std::fs::read_to_string(out.join("table.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(rows.iter().any(|r| r.contains("no-neg-sampling")));
    assert!(rows.iter().any(|r| r.contains("fully-configured")));
    let curve = std::fs::read_to_string(out.join("alpha_curve.csv")).unwrap();
    assert!(curve.starts_with("alpha,seed,metric\n"));
    assert_eq!(curve.lines().count(), 1 + 2 * 2);
    assert_eq!(std::fs::read_to_string(out.join("runs.jsonl")).unwrap().lines().count(), 4);
}
