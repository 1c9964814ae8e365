#![allow(dead_code)]

use remocap::harness::RunConfig;
use remocap::parallel::Execution;
use remocap::synth::{generate_dataset, Sample};

/// A run small enough to train in well under a second.
pub fn tiny_run(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        epochs: 2,
        batch: 2,
        eval_every: 1,
        train_sequences: 4,
        test_sequences: 2,
        ..RunConfig::default()
    };
    cfg.scene.frames = 4;
    cfg.scene.height = 16;
    cfg.scene.width = 16;
    cfg.scene.vertices = 6;
    cfg.scene.seed = seed;
    cfg.model.backbone = vec![4, 8];
    cfg.model.groups = 2;
    cfg.model.dim = 8;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg
}

pub fn datasets(cfg: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    let exec = Execution::default();
    let train = generate_dataset(&cfg.scene, 0, cfg.train_sequences, exec).unwrap();
    let test = generate_dataset(&cfg.scene, cfg.train_sequences as u64, cfg.test_sequences, exec).unwrap();
    (train, test)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}
