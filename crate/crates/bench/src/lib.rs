//! Shared fixtures for the benchmarks.

use owis_core::synth::generate_scene;
use owis_core::{CostMatrix, InitConfig, Sample, SceneSpec, ToyModel, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_costs(n: usize, seed: u64) -> CostMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n * n).map(|_| rng.gen_range(0.0..100.0)).collect();
    CostMatrix::new(n, n, entries).expect("square matrix")
}

pub fn scenes(n: usize, seed: u64) -> Vec<Sample> {
    let spec = SceneSpec::default();
    (0..n)
        .map(|i| {
            let mut s = generate_scene(seed ^ i as u64, &spec).expect("default scene");
            s.index = i;
            s
        })
        .collect()
}

pub fn model(config: &TrainConfig) -> ToyModel {
    ToyModel::init(
        config.num_queries,
        owis_core::synth::FEATURE_CHANNELS,
        7,
        &InitConfig { scale: 0.5, mask_bias: 0.0 },
    )
}
