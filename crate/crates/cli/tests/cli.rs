use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf")
}

fn doll(run_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_doll"))
        .arg("--run-dir")
        .arg(run_dir)
        .arg("--config")
        .arg(smoke_config())
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn doll")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const STAGES: [&[&str]; 7] = [
    &["gen-data"],
    &["train-classifiers"],
    &["boost-weights"],
    &["gen-doll"],
    &["pretrain"],
    &["finetune"],
    &["finetune", "--init", "scratch", "--freeze-backbone", "off"],
];

#[test]
fn staged_pipeline_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    for args in STAGES {
        assert!(ok(&doll(tmp.path(), args)).contains("done"), "{args:?}");
    }
    for args in STAGES {
        assert!(ok(&doll(tmp.path(), args)).contains("up to date"), "{args:?}");
    }
    let mut forced = STAGES[1].to_vec();
    forced.push("--force");
    assert!(ok(&doll(tmp.path(), &forced)).contains("done"));

    let eval = ok(&doll(tmp.path(), &["eval"]));
    assert!(eval.contains("miou"));
    ok(&doll(tmp.path(), &["eval", "--init", "scratch", "--freeze-backbone", "off"]));

    let root = tmp.path().join("smoke");
    for f in [
        "corpus/corpus.json",
        "classifiers/auc.txt",
        "classifiers/model-m0-cnn-s.ckpt",
        "classifiers/model-m1-mlp.ckpt",
        "weights/weights.json",
        "doll-boosted/quality.json",
        "pretrain-boosted/model.ckpt",
        "finetune-multi-doll-boosted-frozen-8shot/best.ckpt",
        "finetune-multi-doll-boosted-frozen-8shot/history.jsonl",
        "eval/finetune-multi-scratch-full-8shot.json",
    ] {
        assert!(root.join(f).exists(), "{f}");
    }
    let n_doll = std::fs::read_dir(root.join("doll-boosted"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "doll"))
        .count();
    assert_eq!(n_doll, 120 + 40);

    // outputs carry the resolved config digest
    let shown = ok(&doll(tmp.path(), &["show-config"]));
    let digest = shown.lines().last().unwrap().trim_start_matches("# digest ").to_string();
    for f in ["weights/weights.json", "eval/finetune-multi-doll-boosted-frozen-8shot.json"] {
        assert!(std::fs::read_to_string(root.join(f)).unwrap().contains(&digest), "{f}");
    }

    let report = ok(&doll(tmp.path(), &["report"]));
    assert!(report.contains("smoke/finetune-multi-scratch-full-8shot"));
    for f in ["table.txt", "table.csv", "curves.csv", "curves.svg"] {
        assert!(tmp.path().join("report").join(f).exists(), "{f}");
    }
}

#[test]
fn averaged_ablation_gets_its_own_masks() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [&["gen-data"][..], &["train-classifiers"], &["boost-weights"], &["gen-doll", "--aggregation", "averaged"]] {
        ok(&doll(tmp.path(), args));
    }
    assert!(tmp.path().join("smoke/doll-averaged/quality.json").exists());
    // the boosted arm has not been generated yet
    let out = doll(tmp.path(), &["pretrain"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("doll-boosted"));
    ok(&doll(tmp.path(), &["pretrain", "--aggregation", "averaged"]));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = doll(tmp.path(), &["train-classifiers"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corpus"));

    assert_eq!(doll(tmp.path(), &["--set", "pipeline.tau=1.5", "gen-data"]).status.code(), Some(2));
    assert_eq!(doll(tmp.path(), &["--set", "no.such=1", "gen-data"]).status.code(), Some(2));
    assert_eq!(doll(tmp.path(), &["gen-doll", "--aggregation", "median"]).status.code(), Some(2));
    assert_eq!(doll(tmp.path(), &["finetune", "--freeze-backbone", "maybe"]).status.code(), Some(2));
    assert_eq!(doll(tmp.path(), &["eval", "--checkpoint", "/nonexistent/x.ckpt"]).status.code(), Some(3));

    // stale upstream: corpus built with one seed, classifiers asked for another
    ok(&doll(tmp.path(), &["gen-data"]));
    let out = doll(tmp.path(), &["--set", "corpus.seed=9", "train-classifiers"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gen-data"));
}

#[test]
fn report_refuses_mixed_corpora() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&doll(tmp.path(), &["--set", "run_id=a", "run"]));
    ok(&doll(tmp.path(), &["--set", "run_id=b", "--set", "corpus.seed=5", "run"]));
    ok(&doll(tmp.path(), &["--set", "run_id=c", "run"]));
    let out = doll(tmp.path(), &["report", "a", "b"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different corpora"));

    // same config under another run id: identical metric rows
    let table = ok(&doll(tmp.path(), &["report", "a", "c"]));
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("a/") || l.starts_with("c/")).collect();
    assert_eq!(rows.len(), 2);
    let strip = |r: &str| r.split_whitespace().skip(1).map(String::from).collect::<Vec<_>>();
    assert_eq!(strip(rows[0]), strip(rows[1]));
}
