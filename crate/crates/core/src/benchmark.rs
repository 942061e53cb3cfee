//! Desk-scale benchmark settings shared by the acceptance run, the examples
//! and the README numbers.
//!
//! The library defaults (`T = 48`, `d = 32`, 100 + 200 epochs, 48 slots a
//! day) describe a full-size run. On one core that is hours per fit, and the
//! ablation needs thirty fits, so the benchmark below shrinks the series
//! and the model while keeping every component and the event/text
//! mechanism intact.

use crate::config::{ComponentSet, TrainConfig};
use crate::data::synthetic::{GeneratorConfig, TextMode};

/// Seeds used for every median reported by the benchmark.
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Three regions, 40 days of hourly slots, frequent text-announced events.
pub fn generator(seed: u64, text_mode: TextMode) -> GeneratorConfig {
    GeneratorConfig {
        regions: 3,
        days: 40,
        slots_per_day: 24,
        noise_sigma: 0.5,
        event_rate: 0.05,
        text_mode,
        seed,
        ..GeneratorConfig::default()
    }
}

/// Half-day input window, four-step horizon, ten epochs per stage.
pub fn train_config(seed: u64, components: ComponentSet) -> TrainConfig {
    TrainConfig {
        d: 16,
        n: 4,
        layers: 1,
        window: 12,
        horizon: 4,
        blocks: 1,
        slots_per_day: 24,
        epochs_stage1: 10,
        epochs_stage2: 10,
        batch_size: 8,
        components,
        seed,
        ..TrainConfig::default()
    }
}

/// The same settings in config-file form, for the CLI.
pub fn config_text(seed: u64) -> String {
    let g = generator(seed, TextMode::Full);
    format!(
        "{}\n[data]\nregions = {}\ndays = {}\nslots_per_day = {}\nnoise_sigma = {}\nevent_rate = {}\nseed = {seed}\n",
        train_config(seed, ComponentSet::all()).to_config_text(),
        g.regions,
        g.days,
        g.slots_per_day,
        g.noise_sigma,
        g.event_rate,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    #[test]
    fn config_text_round_trips() {
        let cfg = parse_config_str(&config_text(3)).unwrap();
        assert_eq!(cfg.train, train_config(3, ComponentSet::all()));
        assert_eq!(cfg.generator, generator(3, TextMode::Full));
    }
}
