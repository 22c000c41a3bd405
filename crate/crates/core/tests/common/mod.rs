#![allow(dead_code)]

use speeder_core::corpus::{generate_dataset, CatalogConfig, CorpusConfig, Dataset, Rule};
use speeder_core::model::{ModelConfig, SpeederModel};
use speeder_core::mpo::{build_model, TrainConfig};

pub fn small_dataset(rule: Rule, seed: u64) -> Dataset {
    let cfg = CorpusConfig {
        rule,
        seqs: 90,
        catalog: CatalogConfig { size: 60, ..Default::default() },
        ..Default::default()
    };
    generate_dataset(&cfg, seed).unwrap()
}

pub fn small_model(ds: &Dataset, seed: u64) -> SpeederModel {
    build_model(ds, &ModelConfig::default(), None, seed).unwrap()
}

pub fn short_schedule() -> TrainConfig {
    TrainConfig { stage_epochs: [1, 1, 1], eval_limit: 8, ..Default::default() }
}
