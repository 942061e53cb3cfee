#![allow(dead_code)]

use kgcm::config::ComponentSet;
use kgcm::data::{generate_synthetic, DemandDataset, GeneratorConfig, PreparedData, SeriesWindow, Split};
use kgcm::pipeline::{initial_params, make_encoder};
use kgcm::params::ModelParams;
use kgcm::TrainConfig;

pub fn tiny_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        regions: 2,
        days: 6,
        slots_per_day: 12,
        event_rate: 0.08,
        seed,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_dataset(seed: u64) -> DemandDataset {
    generate_synthetic(&tiny_generator(seed)).unwrap()
}

pub fn tiny_config(components: ComponentSet) -> TrainConfig {
    TrainConfig {
        d: 8,
        n: 3,
        layers: 1,
        window: 8,
        horizon: 2,
        blocks: 1,
        slots_per_day: 12,
        epochs_stage1: 2,
        epochs_stage2: 2,
        batch_size: 16,
        components,
        ..TrainConfig::default()
    }
}

/// Fresh parameters plus the training windows they were fitted on.
pub fn params_and_windows(ds: &DemandDataset, cfg: &TrainConfig, split: Split) -> (ModelParams, Vec<SeriesWindow>) {
    let scaler = kgcm::data::Scaler::fit(ds).unwrap();
    let params = initial_params(cfg, &scaler);
    let encoder = make_encoder(cfg).unwrap();
    let prepared = PreparedData::new(ds, scaler, &encoder, false, cfg.window, cfg.horizon).unwrap();
    (params, prepared.windows(split).unwrap())
}
