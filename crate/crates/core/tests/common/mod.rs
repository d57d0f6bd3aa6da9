//! Small shared fixtures for the integration tests.
#![allow(dead_code)]

use pinmem::domains::{build_pools, default_domains, DatasetConfig, DomainPool, SceneConfig};
use pinmem::episodic::{TrainConfig, TrainMode};
use pinmem::nets::SegNetConfig;

pub fn small_net() -> SegNetConfig {
    SegNetConfig { feature_channels: 6, hidden_channels: 5, encoder_depth: 2, output_stride: 2, ..Default::default() }
}

pub fn small_pools() -> Vec<DomainPool> {
    let data = DatasetConfig {
        seed: 3,
        train_per_domain: 8,
        test_per_domain: 4,
        scene: SceneConfig { height: 16, width: 16, ..Default::default() },
    };
    build_pools(&default_domains(), &data).unwrap()
}

pub fn sources() -> Vec<String> {
    vec!["vivid".into(), "dusk".into()]
}

pub fn train_config(mode: TrainMode, iterations: usize) -> TrainConfig {
    TrainConfig { mode, iterations, batch_per_domain: 2, seed: 5, ..Default::default() }
}
