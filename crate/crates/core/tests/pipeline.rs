use hydra_peft::adapters::{hydra_forward, merge_infer};
use hydra_peft::trainer::{prepare, run_config};
use hydra_peft::{Adapter, AdapterConfig, Checkpoint, Matrix, Scheme, SeededRng, TrainConfig};
use proptest::prelude::*;

const SYNTHETIC: &str = r#"
scheme = "hydra"
rank = 3
experts = 3
learning_rate = 0.1
steps = 8
batch_size = 8
seed = 21

[synthetic]
clusters = 3
docs_per_cluster = 8
disjointness = 0.8
seed = 21

[model]
d_model = 8
seq_len = 8
pretrain_steps = 4
"#;

#[test]
fn trained_checkpoint_reloads_into_a_fresh_model() {
    let cfg = TrainConfig::parse(SYNTHETIC).unwrap();
    let run = run_config(&cfg).unwrap();
    assert_eq!(run.report.base_hash_before, run.report.base_hash_after);
    assert!(run.report.final_loss.is_finite());

    let text = run.checkpoint.to_text();
    let parsed = Checkpoint::parse(&text).unwrap();
    assert_eq!(parsed.to_text(), text);

    let mut fresh = prepare(&cfg).unwrap();
    let before = fresh.model.forward(&fresh.data.eval).unwrap().loss;
    fresh.model.load_checkpoint(&parsed).unwrap();
    let after = fresh.model.forward(&fresh.data.eval).unwrap();
    assert_eq!(after.loss, run.report.final_loss);
    assert_ne!(before, after.loss);
    assert_eq!(after.gate_usage.len(), 2);
}

#[test]
fn identical_configs_give_identical_checkpoints() {
    let cfg = TrainConfig::parse(SYNTHETIC).unwrap();
    let a = run_config(&cfg).unwrap();
    let b = run_config(&cfg).unwrap();
    assert_eq!(a.checkpoint.to_text(), b.checkpoint.to_text());
    assert_eq!(a.report.to_json(), b.report.to_json());
}

fn perturbed(adapter: &mut Adapter, rng: &mut SeededRng) {
    for (_, t) in adapter.tensors_mut() {
        *t = rng.normal_matrix(t.rows(), t.cols(), 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fresh_adapters_leave_the_base_untouched(d in 1usize..12, k in 1usize..12, r in 1usize..6, n in 1usize..4, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let w0 = rng.normal_matrix(d, k, 1.0);
        let x: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        for scheme in [Scheme::Lora, Scheme::Split, Scheme::Hydra] {
            let cfg = AdapterConfig { scheme, rank: r.min(d).min(k), count: n, alpha: None };
            let adapter = cfg.build(d, k, &mut rng).unwrap();
            prop_assert_eq!(adapter.forward(&x, &w0).unwrap(), w0.matvec(&x).unwrap());
        }
    }

    #[test]
    fn merged_expert_matches_mixture(d in 1usize..10, k in 1usize..10, n in 1usize..5, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let mut adapter = AdapterConfig::hydra(d.min(k), n).build(d, k, &mut rng).unwrap();
        perturbed(&mut adapter, &mut rng);
        let Adapter::Hydra(h) = adapter else { unreachable!() };
        let w0 = rng.normal_matrix(d, k, 1.0);
        let x: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let (moe, gates) = hydra_forward(&x, &w0, &h).unwrap();
        let merged = merge_infer(&x, &w0, &h).unwrap();
        prop_assert!((gates.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        for (a, b) in moe.iter().zip(&merged) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn adapters_survive_checkpoint_text(scheme_ix in 0usize..3, d in 1usize..8, k in 1usize..8, n in 1usize..4, seed: u64) {
        let scheme = [Scheme::Lora, Scheme::Split, Scheme::Hydra][scheme_ix];
        let mut rng = SeededRng::new(seed);
        let cfg = AdapterConfig { scheme, rank: d.min(k), count: n, alpha: Some(4.0) };
        let mut adapter = cfg.build(d, k, &mut rng).unwrap();
        perturbed(&mut adapter, &mut rng);
        let mut ck = Checkpoint::default();
        ck.insert_adapter("layer0.fc", &adapter);
        let back = Checkpoint::parse(&ck.to_text()).unwrap().adapters().unwrap();
        prop_assert_eq!(back.len(), 1);
        let restored = &back[0].1;
        let x: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let w0 = Matrix::zeros(d, k);
        prop_assert_eq!(restored.forward(&x, &w0).unwrap(), adapter.forward(&x, &w0).unwrap());
    }
}
