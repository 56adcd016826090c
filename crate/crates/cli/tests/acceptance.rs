//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. Exits non-zero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hydra_peft::adapters::{
    hydra_forward, merge_infer, route, Adapter, AdapterConfig, HydraAdapter,
};
use hydra_peft::analysis::{cost, CostDims, CostSpec};
use hydra_peft::autodiff::grad_check;
use hydra_peft::clustering::{
    init_hydra_from_corpus, kmeans, DEFAULT_MAX_ITER, DEFAULT_RESTARTS, SSE_SLACK,
};
use hydra_peft::corpus::{synth_corpus, SynthSpec};
use hydra_peft::model::{token_mixture, ModelSpec, ToyModel, TrainMask};
use hydra_peft::params::{param_count, ParamQuery};
use hydra_peft::trainer::{
    run_heterogeneity_seeds, run_observation1, run_observation2, HetConfig, Obs1Config, Obs2Config,
};
use hydra_peft::{Scheme, SeededRng, TfIdfModel};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("parameter accounting", Duration::from_secs(1), c1_params),
        ("zero-init contract", Duration::from_secs(5), c2_zero_init),
        ("gradient fidelity", Duration::from_secs(30), c3_gradients),
        ("gate and merge", Duration::from_secs(10), c4_gate_merge),
        (
            "clustering pipeline",
            Duration::from_secs(30),
            c5_clustering,
        ),
        (
            "split beats single at equal params",
            Duration::from_secs(120),
            c6_observation1,
        ),
        (
            "B separates more than A",
            Duration::from_secs(120),
            c7_observation2,
        ),
        (
            "heterogeneity gap widens",
            Duration::from_secs(180),
            c8_heterogeneity,
        ),
        ("cost proxy ratio", Duration::from_secs(1), c9_cost),
        ("CLI determinism", Duration::from_secs(600), c10_determinism),
    ];
    let mut failures = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = check();
        let elapsed = start.elapsed();
        let in_time = elapsed <= *budget;
        let pass = result.pass && in_time;
        if !pass {
            failures += 1;
        }
        println!(
            "[{}] criterion {:>2} {name}: {} ({:.2}s, budget {}s{})",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failures,
        criteria.len()
    );
    if failures > 0 {
        std::process::exit(1);
    }
}

fn c1_params() -> Outcome {
    let q = |scheme, rank, count| ParamQuery {
        scheme,
        d: 4096,
        k: 4096,
        rank,
        count,
        matrices_per_layer: 2,
        layers: 32,
        base_total: 6_738_000_000,
    };
    let milli = |scheme, rank, count| param_count(&q(scheme, rank, count)).unwrap().percent_milli;
    let lora = [
        milli(Scheme::Lora, 8, 1),
        milli(Scheme::Lora, 16, 1),
        milli(Scheme::Lora, 32, 1),
    ];
    let hydra3 = milli(Scheme::Hydra, 8, 3);
    let hydra10 = milli(Scheme::Hydra, 8, 10);
    let split = param_count(&q(Scheme::Split, 8, 4)).unwrap().trainable;
    let wide = param_count(&q(Scheme::Lora, 32, 1)).unwrap().trainable;
    let pass =
        lora == [62, 124, 248] && hydra3 == 124 && hydra10.abs_diff(341) <= 2 && split == wide;
    outcome(
        pass,
        format!(
            "LoRA r8/16/32 = {:.3}/{:.3}/{:.3}%, Hydra N=3 {:.3}%, N=10 {:.3}% (target 0.341 +- 0.002), Split 8x4 {split} vs LoRA 32 {wide}",
            lora[0] as f64 / 1000.0,
            lora[1] as f64 / 1000.0,
            lora[2] as f64 / 1000.0,
            hydra3 as f64 / 1000.0,
            hydra10 as f64 / 1000.0
        ),
    )
}

fn c2_zero_init() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for scheme in [Scheme::Lora, Scheme::Split, Scheme::Hydra] {
        for _ in 0..1000 {
            let (d, k) = (1 + rng.below(24), 1 + rng.below(24));
            let rank = 1 + rng.below(d.min(k));
            let cfg = AdapterConfig {
                scheme,
                rank,
                count: 1 + rng.below(4),
                alpha: Some(rng.uniform_in(0.5, 32.0)),
            };
            let adapter = cfg.build(d, k, &mut rng).unwrap();
            let w0 = rng.normal_matrix(d, k, 1.0);
            let x: Vec<f64> = (0..k).map(|_| rng.normal() * 3.0).collect();
            let base = w0.matvec(&x).unwrap();
            let y = adapter.forward(&x, &w0).unwrap();
            worst = y
                .iter()
                .zip(&base)
                .fold(worst, |m, (a, b)| m.max((a - b).abs()));
            count += 1;
        }
    }
    outcome(
        worst == 0.0,
        format!("{count} fresh adapters, max |adapted - base| = {worst:e}"),
    )
}

fn c3_gradients() -> Outcome {
    let mut rng = SeededRng::new(3);
    let mut worst: f64 = 0.0;
    let mut worst_coordinate: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..20 {
        let vocab = 6 + rng.below(10);
        let d_model = 4 + rng.below(5);
        let spec = ModelSpec::Attention {
            vocab,
            d_model,
            classes: 2 + rng.below(3),
            layers: 1 + rng.below(2),
        };
        let mut model = ToyModel::new(spec, &mut rng).unwrap();
        for point in spec.adaptable_points() {
            let cfg = AdapterConfig::hydra(1 + rng.below(d_model), 2 + rng.below(3));
            model.attach(&point, &cfg, &mut rng).unwrap();
            // trained-looking experts and router so every path carries gradient
            let mut adapter = model.adapter(&point).unwrap().clone();
            for (_, t) in adapter.tensors_mut() {
                *t = rng.normal_matrix(t.rows(), t.cols(), 0.5);
            }
            model.attach_adapter(&point, adapter).unwrap();
        }
        let ModelSpec::Attention { classes, .. } = spec else {
            unreachable!()
        };
        let batch =
            token_mixture(vocab, classes, 3 + rng.below(3), 2 + rng.below(3), &mut rng).unwrap();
        let mut graph = model.record(&batch, TrainMask::adapters(true)).unwrap();
        let report = grad_check(&mut graph.tape, graph.loss, &mut rng, 1e-6).unwrap();
        worst = worst.max(report.max_relative_error());
        worst_coordinate = worst_coordinate.max(report.worst_coordinate);
        coords += report.coordinates_checked;
    }
    outcome(worst <= 1e-6, format!(
            "20 configs, {coords} coordinates, max per-parameter relative error {worst:.3e} (limit 1e-6); worst single coordinate {worst_coordinate:.3e}"
        ))
}

fn noisy_hydra(rng: &mut SeededRng) -> HydraAdapter {
    let (d, k) = (1 + rng.below(16), 1 + rng.below(16));
    let cfg = AdapterConfig::hydra(1 + rng.below(d.min(k)), 1 + rng.below(5));
    let Adapter::Hydra(h) = cfg.build(d, k, rng).unwrap() else {
        unreachable!()
    };
    let a = rng.normal_matrix(h.a().rows(), h.a().cols(), 1.0);
    let experts = h
        .experts()
        .iter()
        .map(|b| rng.normal_matrix(b.rows(), b.cols(), 1.0))
        .collect();
    let router = rng.normal_matrix(h.router().rows(), h.router().cols(), 2.0);
    HydraAdapter::from_parts(a, experts, router, rng.uniform_in(1.0, 16.0)).unwrap()
}

fn c4_gate_merge() -> Outcome {
    let mut rng = SeededRng::new(4);
    let mut gate_err: f64 = 0.0;
    for _ in 0..100_000 {
        let (r, n) = (1 + rng.below(16), 1 + rng.below(8));
        let router = rng.normal_matrix(r, n, 3.0);
        let z: Vec<f64> = (0..r).map(|_| rng.normal() * 3.0).collect();
        let g = route(&z, &router).unwrap();
        gate_err = gate_err.max((g.weights.iter().sum::<f64>() - 1.0).abs());
    }
    let mut merge_err: f64 = 0.0;
    for _ in 0..1000 {
        let h = noisy_hydra(&mut rng);
        let w0 = rng.normal_matrix(h.out_dim(), h.in_dim(), 1.0);
        let x: Vec<f64> = (0..h.in_dim()).map(|_| rng.normal()).collect();
        let (moe, _) = hydra_forward(&x, &w0, &h).unwrap();
        let merged = merge_infer(&x, &w0, &h).unwrap();
        merge_err = moe
            .iter()
            .zip(&merged)
            .fold(merge_err, |m, (a, b)| m.max((a - b).abs()));
    }
    outcome(
        gate_err <= 1e-12 && merge_err <= 1e-12,
        format!("100000 routings max |sum - 1| = {gate_err:.3e}; 1000 merges max diff = {merge_err:.3e} (limits 1e-12)"),
    )
}

fn c5_clustering() -> Outcome {
    let mut hits = 0;
    let mut iterations = 0;
    let mut violations = 0;
    for seed in 0..20u64 {
        let corpus = synth_corpus(&SynthSpec::new(3, 50, 0.8, seed))
            .unwrap()
            .corpus;
        if init_hydra_from_corpus(&corpus, 8, seed, None)
            .unwrap()
            .k_selected
            == 3
        {
            hits += 1;
        }
        let vectors = TfIdfModel::fit(&corpus).unwrap().transform_corpus(&corpus);
        for k in 1..=8 {
            let r = kmeans(&vectors, k, seed, DEFAULT_MAX_ITER, DEFAULT_RESTARTS).unwrap();
            for h in &r.sse_histories {
                iterations += h.len() - 1;
                violations += h.windows(2).filter(|w| w[1] > w[0] + SSE_SLACK).count();
            }
        }
    }
    outcome(
        hits >= 19 && violations == 0,
        format!("elbow chose k=3 in {hits}/20 seeds (need 19); {violations} SSE increases in {iterations} Lloyd iterations"),
    )
}

fn c6_observation1() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let r = run_observation1(&seeds, &Obs1Config::default()).unwrap();
    outcome(
        r.wins >= 8,
        format!(
            "Split(4x2) beat LoRA(8) in {}/10 seeds at {} parameters each (need 8)",
            r.wins, r.params
        ),
    )
}

fn c7_observation2() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let r = run_observation2(&seeds, &Obs2Config::default()).unwrap();
    let median = {
        let mut v: Vec<f64> = r.rows.iter().map(|row| row.separation.ratio).collect();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    outcome(
        r.wins >= 8,
        format!(
            "D_B/D_A > 1 in {}/10 seeds (need 8), median ratio {median:.2}",
            r.wins
        ),
    )
}

fn c8_heterogeneity() -> Outcome {
    let seeds: Vec<u64> = (0..10).collect();
    let cfg = HetConfig::default();
    let curves = run_heterogeneity_seeds(&seeds, &cfg).unwrap();
    let wins = curves
        .iter()
        .filter(|(_, rows)| rows.last().unwrap().gap > rows.first().unwrap().gap)
        .count();
    let mean =
        |i: usize| curves.iter().map(|(_, rows)| rows[i].gap).sum::<f64>() / curves.len() as f64;
    outcome(
        wins >= 8,
        format!(
            "gap at {} components exceeded gap at 1 in {wins}/10 seeds (need 8); mean gaps {:.3} -> {:.3}",
            cfg.levels.last().unwrap(),
            mean(0),
            mean(cfg.levels.len() - 1)
        ),
    )
}

fn c9_cost() -> Outcome {
    let dims = CostDims {
        d: 4096,
        k: 4096,
        matrices: 64,
    };
    let reference = CostSpec {
        scheme: Scheme::Lora,
        rank: 32,
        count: 1,
    };
    let r = cost(
        &CostSpec {
            scheme: Scheme::Hydra,
            rank: 8,
            count: 3,
        },
        &dims,
        &reference,
    )
    .unwrap();
    outcome(
        (r.ratio - 0.5).abs() <= 0.005,
        format!(
            "Hydra(8,3)/LoRA(32) trainable ratio {:.5} (target 0.500 +- 0.005)",
            r.ratio
        ),
    )
}

fn hydra_peft(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_hydra-peft"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

const PIPELINE_CONFIG: &str = "scheme = \"hydra\"
rank = 4
learning_rate = 0.1
steps = 12
batch_size = 8
eval_interval = 4
seed = 11
dataset = \"corpus.jsonl\"
experts_from = \"clusters.json\"

[model]
d_model = 8
seq_len = 8
pretrain_steps = 4
";

fn pipeline(dir: &Path) -> Result<(), String> {
    std::fs::write(dir.join("train.toml"), PIPELINE_CONFIG).map_err(|e| e.to_string())?;
    hydra_peft(
        dir,
        &[
            "synth",
            "--clusters",
            "3",
            "--docs-per-cluster",
            "12",
            "--seed",
            "5",
            "--tag-tasks",
            "--out",
            "corpus.jsonl",
        ],
    )?;
    hydra_peft(
        dir,
        &[
            "cluster",
            "--corpus",
            "corpus.jsonl",
            "--k-max",
            "6",
            "--seed",
            "5",
            "--out",
            "clusters.json",
        ],
    )?;
    hydra_peft(dir, &["train", "--config", "train.toml", "--out", "run"])?;
    hydra_peft(
        dir,
        &[
            "bench",
            "--suite",
            "obs2",
            "--seeds",
            "2",
            "--out",
            "obs2.json",
        ],
    )
}

fn c10_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        if let Err(e) = pipeline(d.path()) {
            return outcome(false, e);
        }
    }
    let files = [
        "corpus.jsonl",
        "clusters.json",
        "run/checkpoint.txt",
        "run/report.csv",
        "run/report.json",
        "obs2.json",
    ];
    let mismatched: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| {
            std::fs::read(dirs[0].path().join(f)).ok() != std::fs::read(dirs[1].path().join(f)).ok()
        })
        .collect();
    outcome(
        mismatched.is_empty(),
        if mismatched.is_empty() {
            format!(
                "two runs of synth -> cluster -> train -> bench produced byte-identical {}",
                files.join(", ")
            )
        } else {
            format!("outputs differ between reruns: {}", mismatched.join(", "))
        },
    )
}
