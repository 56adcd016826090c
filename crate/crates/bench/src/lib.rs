//! Shared inputs for the benchmarks.

use hydra_peft::adapters::{Adapter, AdapterConfig};
use hydra_peft::corpus::{synth_corpus, SynthSpec};
use hydra_peft::{Corpus, SeededRng, TfIdfModel};

/// An adapter of the given shape with every tensor filled with Gaussian noise,
/// so that no branch is skipped for being zero.
pub fn noisy_adapter(cfg: AdapterConfig, d: usize, k: usize, seed: u64) -> Adapter {
    let mut rng = SeededRng::new(seed);
    let mut adapter = cfg.build(d, k, &mut rng).expect("valid adapter shape");
    for (_, t) in adapter.tensors_mut() {
        *t = rng.normal_matrix(t.rows(), t.cols(), 0.1);
    }
    adapter
}

pub fn input(k: usize, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    (0..k).map(|_| rng.normal()).collect()
}

/// TF-IDF vectors of a planted corpus.
pub fn planted_vectors(
    clusters: usize,
    docs_per_cluster: usize,
    seed: u64,
) -> (Corpus, Vec<Vec<f64>>) {
    let corpus = synth_corpus(&SynthSpec::new(clusters, docs_per_cluster, 0.8, seed))
        .expect("valid spec")
        .corpus;
    let model = TfIdfModel::fit(&corpus).expect("non-empty corpus");
    let vectors = model.transform_corpus(&corpus);
    (corpus, vectors)
}
