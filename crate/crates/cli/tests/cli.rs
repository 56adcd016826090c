use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hydra_peft::{Checkpoint, TrainReport};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydra-peft"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn hydra-peft")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = run(dir, args);
    assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    stdout(&o)
}

fn synth(dir: &Path, docs: &str, seed: &str) {
    ok(
        dir,
        &[
            "synth",
            "--clusters",
            "3",
            "--docs-per-cluster",
            docs,
            "--seed",
            seed,
            "--tag-tasks",
            "--out",
            "corpus.jsonl",
        ],
    );
}

const SMALL_MODEL: &str = "
[model]
d_model = 8
seq_len = 8
pretrain_steps = 4
";

fn config(dir: &Path, name: &str, body: &str) {
    fs::write(dir.join(name), format!("{body}{SMALL_MODEL}")).unwrap();
}

fn params(scheme: &str, rank: &str, extra: &[&str]) -> String {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["params", "--scheme", scheme, "--rank", rank];
    args.extend_from_slice(extra);
    args.extend_from_slice(&[
        "--d",
        "4096",
        "--k",
        "4096",
        "--layers",
        "32",
        "--matrices-per-layer",
        "2",
        "--base-total",
        "6738000000",
    ]);
    ok(dir.path(), &args).trim().to_string()
}

#[test]
fn params_match_published_columns() {
    assert_eq!(params("lora", "8", &[]), "4194304 (0.062%)");
    assert_eq!(
        params("hydra", "8", &["--experts", "10"]),
        "23073792 (0.342%)"
    );
    assert_eq!(
        params("split", "8", &["--heads", "4"]),
        params("lora", "32", &[])
    );
}

#[test]
fn cluster_selects_planted_count_and_honours_override() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "50", "1");
    let out = ok(
        dir.path(),
        &[
            "cluster",
            "--corpus",
            "corpus.jsonl",
            "--k-max",
            "8",
            "--seed",
            "1",
            "--out",
            "c.json",
        ],
    );
    assert_eq!(out.trim(), "k_selected: 3");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    assert_eq!(report["k_selected"], 3);
    assert_eq!(report["assignments"].as_object().unwrap().len(), 150);

    let out = ok(
        dir.path(),
        &[
            "cluster",
            "--corpus",
            "corpus.jsonl",
            "--seed",
            "1",
            "--k",
            "4",
            "--out",
            "c4.json",
        ],
    );
    assert_eq!(out.trim(), "k_selected: 4");
}

#[test]
fn exit_codes_follow_the_mapping() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let missing = run(p, &["cluster", "--corpus", "nope.jsonl", "--out", "c.json"]);
    assert_eq!(missing.status.code(), Some(2));

    assert_eq!(run(p, &["cluster", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        run(p, &["params", "--scheme", "lora"]).status.code(),
        Some(1)
    );
    assert_eq!(run(p, &["--help"]).status.code(), Some(0));

    fs::write(
        p.join("bad.jsonl"),
        "{\"id\":\"a\",\"text\":\"fine\"}\n{not json\n",
    )
    .unwrap();
    let bad = run(p, &["cluster", "--corpus", "bad.jsonl", "--out", "c.json"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("line 2"), "{}", stderr(&bad));

    synth(p, "6", "0");
    config(
        p,
        "zero.toml",
        "scheme = \"lora\"\nrank = 2\nlearning_rate = 0.1\nsteps = 0\ndataset = \"corpus.jsonl\"\n",
    );
    let zero = run(p, &["train", "--config", "zero.toml", "--out", "run"]);
    assert_eq!(zero.status.code(), Some(1), "{}", stderr(&zero));

    config(p, "wide.toml", "scheme = \"lora\"\nrank = 99\nlearning_rate = 0.1\nsteps = 2\ndataset = \"corpus.jsonl\"\n");
    let wide = run(p, &["train", "--config", "wide.toml", "--out", "run"]);
    assert_eq!(wide.status.code(), Some(1));
    assert!(stderr(&wide).contains("rank"), "{}", stderr(&wide));

    config(p, "nosplit.toml", "scheme = \"split\"\nrank = 2\nlearning_rate = 0.1\nsteps = 2\ndataset = \"corpus.jsonl\"\n");
    assert_eq!(
        run(p, &["train", "--config", "nosplit.toml", "--out", "run"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn zero_learning_rate_gives_flat_curve() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "8", "2");
    config(p, "flat.toml", "scheme = \"lora\"\nrank = 2\nlearning_rate = 0.0\nsteps = 6\neval_interval = 2\nseed = 2\ndataset = \"corpus.jsonl\"\n");
    ok(p, &["train", "--config", "flat.toml", "--out", "run"]);
    let report: TrainReport =
        serde_json::from_str(&fs::read_to_string(p.join("run/report.json")).unwrap()).unwrap();
    assert!(report.curve.len() >= 3);
    assert!(report.curve.iter().all(|pt| pt.loss == report.initial_loss));
    assert_eq!(report.base_hash_before, report.base_hash_after);
}

#[test]
fn clustered_hydra_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "12", "4");
    ok(
        p,
        &[
            "cluster",
            "--corpus",
            "corpus.jsonl",
            "--k-max",
            "6",
            "--seed",
            "4",
            "--out",
            "clusters.json",
        ],
    );
    config(
        p,
        "hydra.toml",
        "scheme = \"hydra\"\nrank = 4\nlearning_rate = 0.1\nsteps = 10\nbatch_size = 8\nseed = 4\ndataset = \"corpus.jsonl\"\nexperts_from = \"clusters.json\"\n",
    );
    let out = ok(p, &["train", "--config", "hydra.toml", "--out", "run"]);
    assert!(out.starts_with("final_loss: "), "{out}");

    let report: TrainReport =
        serde_json::from_str(&fs::read_to_string(p.join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report.gate_usage.len(), 3);
    assert!(report.final_loss < report.initial_loss);
    let csv = fs::read_to_string(p.join("run/report.csv")).unwrap();
    assert!(
        csv.starts_with("step,loss,acc,gate_0,gate_1,gate_2"),
        "{csv}"
    );

    let ck = Checkpoint::load(p.join("run/checkpoint.txt")).unwrap();
    assert_eq!(ck.meta.get("train.experts").map(String::as_str), Some("3"));

    let merge = run(
        p,
        &[
            "merge-infer",
            "--checkpoint",
            "run/checkpoint.txt",
            "--random",
            "32",
            "--seed",
            "9",
        ],
    );
    assert!(merge.status.success(), "{}", stderr(&merge));
    let line = stdout(&merge);
    let err: f64 = line.trim().rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err <= 1e-12, "{line}");

    let eval = ok(
        p,
        &[
            "eval",
            "--config",
            "hydra.toml",
            "--checkpoint",
            "run/checkpoint.txt",
        ],
    );
    let eval: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert!((eval["loss"].as_f64().unwrap() - report.final_loss).abs() < 1e-12);
}

#[test]
fn analyze_needs_two_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    synth(p, "6", "5");
    for (name, seed) in [("a", 1), ("b", 2)] {
        config(
            p,
            &format!("{name}.toml"),
            &format!("scheme = \"lora\"\nrank = 2\nlearning_rate = 0.2\nsteps = 4\nseed = {seed}\ndataset = \"corpus.jsonl\"\n"),
        );
        ok(
            p,
            &["train", "--config", &format!("{name}.toml"), "--out", name],
        );
    }
    let one = run(
        p,
        &["analyze", "--checkpoint", "a/checkpoint.txt", "--out", "an"],
    );
    assert_eq!(one.status.code(), Some(1));

    let out = ok(
        p,
        &[
            "analyze",
            "--checkpoint",
            "a/checkpoint.txt",
            "--checkpoint",
            "b/checkpoint.txt",
            "--out",
            "an",
            "--svg",
        ],
    );
    assert!(out.starts_with("D_A: "), "{out}");
    for f in [
        "distances.csv",
        "embedding.csv",
        "cost.csv",
        "summary.json",
        "embedding.svg",
    ] {
        assert!(p.join("an").join(f).exists(), "{f}");
    }
    let emb = fs::read_to_string(p.join("an/embedding.csv")).unwrap();
    assert!(
        emb.lines().any(|l| l.starts_with("a:layer0.q_proj.A,A,0,")),
        "{emb}"
    );
}

#[test]
fn reruns_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let p = d.path();
        synth(p, "8", "6");
        config(p, "split.toml", "scheme = \"split\"\nrank = 2\nexperts = 2\nlearning_rate = 0.1\nsteps = 5\nseed = 6\ndataset = \"corpus.jsonl\"\n");
        ok(p, &["train", "--config", "split.toml", "--out", "run"]);
    }
    for f in [
        "corpus.jsonl",
        "run/checkpoint.txt",
        "run/report.csv",
        "run/report.json",
    ] {
        assert_eq!(
            fs::read(dirs[0].path().join(f)).unwrap(),
            fs::read(dirs[1].path().join(f)).unwrap(),
            "{f}"
        );
    }
}
