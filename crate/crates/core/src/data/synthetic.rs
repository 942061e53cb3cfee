//! Seasonal demand with text-announced event spikes.
//!
//! Every event spike is announced by a templated local text one slot before
//! it starts. Events shared by two or more regions also produce a global
//! text. Shuffling the texts after generation removes that signal.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use chrono::{DateTime, Datelike, TimeDelta, TimeZone, Utc, Weekday};

use crate::data::dataset::{DemandDataset, DemandRow, RegionSeries};
use crate::error::{KgcmError, Result};
use crate::rng::{SeededRng, Stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TextMode {
    #[default]
    Full,
    Shuffled,
    Empty,
}

impl std::fmt::Display for TextMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TextMode::Full => "full",
            TextMode::Shuffled => "shuffled",
            TextMode::Empty => "empty",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub regions: usize,
    pub days: usize,
    pub slots_per_day: usize,
    pub base_demand: f64,
    pub daily_amp: f64,
    pub weekly_amp: f64,
    pub noise_sigma: f64,
    /// Per-slot event probability.
    pub event_rate: f64,
    pub event_amp_range: (f64, f64),
    /// Share of the event rate spent on citywide events hitting several
    /// regions at once; the rest are single-region events.
    pub shared_event_fraction: f64,
    pub text_mode: TextMode,
    pub start: DateTime<Utc>,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            regions: 4,
            days: 28,
            slots_per_day: 48,
            base_demand: 20.0,
            daily_amp: 10.0,
            weekly_amp: 3.0,
            noise_sigma: 1.0,
            event_rate: 0.02,
            event_amp_range: (10.0, 30.0),
            shared_event_fraction: 0.3,
            text_mode: TextMode::Full,
            start: Utc.with_ymd_and_hms(2024, 10, 1, 0, 0, 0).unwrap(),
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KgcmError::Config(msg));
        if self.regions == 0 || self.days == 0 || self.slots_per_day == 0 {
            return bad("data.regions, data.days and data.slots_per_day must be positive".into());
        }
        if 86_400 % self.slots_per_day != 0 {
            return bad(format!(
                "data.slots_per_day = {} does not divide a day evenly",
                self.slots_per_day
            ));
        }
        let amps = [
            ("data.base_demand", self.base_demand),
            ("data.daily_amp", self.daily_amp),
            ("data.weekly_amp", self.weekly_amp),
            ("data.noise_sigma", self.noise_sigma),
            ("data.event_amp_lo", self.event_amp_range.0),
            ("data.event_amp_hi", self.event_amp_range.1),
        ];
        for (name, v) in amps {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.event_rate) {
            return bad(format!("data.event_rate must lie in [0, 1], got {}", self.event_rate));
        }
        if !(0.0..=1.0).contains(&self.shared_event_fraction) {
            return bad(format!(
                "data.shared_event_fraction must lie in [0, 1], got {}",
                self.shared_event_fraction
            ));
        }
        if self.event_amp_range.0 > self.event_amp_range.1 {
            return bad(format!(
                "event amplitude range is empty: {} > {}",
                self.event_amp_range.0, self.event_amp_range.1
            ));
        }
        Ok(())
    }

    pub fn slot_width(&self) -> TimeDelta {
        TimeDelta::seconds(86_400 / self.slots_per_day as i64)
    }

    /// Noise-free, event-free demand at global slot index `k`.
    pub fn seasonal(&self, k: usize) -> f64 {
        let slot = k % self.slots_per_day;
        let day = k / self.slots_per_day;
        let s = self.slots_per_day as f64;
        self.base_demand
            + self.daily_amp * (2.0 * PI * slot as f64 / s).sin()
            + self.weekly_amp * (2.0 * PI * day as f64 / 7.0).sin()
    }

    fn level(&self, amp: f64) -> &'static str {
        let (lo, hi) = self.event_amp_range;
        let third = (hi - lo) / 3.0;
        if amp < lo + third {
            "moderate"
        } else if amp < lo + 2.0 * third {
            "high"
        } else {
            "very high"
        }
    }
}

/// Generated data plus the ground-truth event mask, `[region][slot]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    pub dataset: DemandDataset,
    pub event_slots: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
struct Event {
    start: usize,
    duration: usize,
    amplitude: f64,
    regions: Vec<usize>,
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<DemandDataset> {
    Ok(generate_with_events(cfg)?.dataset)
}

pub fn generate_with_events(cfg: &GeneratorConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let total = cfg.days * cfg.slots_per_day;
    let mut rng = SeededRng::stream(cfg.seed, Stream::Data);

    let events = draw_events(cfg, total, &mut rng);
    let mut extra = vec![vec![0.0; total]; cfg.regions];
    let mut event_slots = vec![vec![false; total]; cfg.regions];
    let mut local: Vec<Vec<Vec<String>>> = vec![vec![Vec::new(); total]; cfg.regions];
    let mut global: Vec<Vec<String>> = vec![Vec::new(); total];
    for ev in &events {
        let level = cfg.level(ev.amplitude);
        for &r in &ev.regions {
            for k in ev.start..(ev.start + ev.duration).min(total) {
                extra[r][k] += ev.amplitude;
                event_slots[r][k] = true;
            }
            local[r][ev.start - 1].push(format!(
                "large concert near region {r}; expect {level} extra demand"
            ));
        }
        if ev.regions.len() >= 2 {
            global[ev.start - 1].push(format!(
                "large concert across {} regions; expect {level} extra demand citywide",
                ev.regions.len()
            ));
        }
    }

    let width = cfg.slot_width();
    let timestamps: Vec<DateTime<Utc>> = (0..total).map(|k| cfg.start + width * k as i32).collect();
    let s = cfg.slots_per_day as f64;
    let mut regions = Vec::with_capacity(cfg.regions);
    for r in 0..cfg.regions {
        let mut rows = Vec::with_capacity(total);
        for k in 0..total {
            let slot = (k % cfg.slots_per_day) as f64;
            let noise = rng.normal(0.0, 1.0);
            let n_pass = rng.normal(0.0, 1.0);
            let n_dist = rng.normal(0.0, 1.0);
            let demand = (cfg.seasonal(k) + extra[r][k] + cfg.noise_sigma * noise).max(0.0);
            let phase = 2.0 * PI * slot / s;
            let ts = timestamps[k];
            rows.push(DemandRow {
                timestamp: ts,
                demand,
                avg_passengers: 1.5 + 0.3 * (phase + 1.0).sin() + 0.05 * n_pass * cfg.noise_sigma,
                avg_distance: 3.0 + 0.8 * phase.cos() + 0.1 * n_dist * cfg.noise_sigma,
                is_holiday: false,
                is_weekend: matches!(ts.weekday(), Weekday::Sat | Weekday::Sun),
            });
        }
        let local_text = local[r].iter().map(|t| t.join("; ")).collect();
        regions.push(RegionSeries {
            id: format!("r{r}"),
            rows,
            local_text,
        });
    }
    let mut global_text: Vec<String> = global.iter().map(|t| t.join("; ")).collect();

    match cfg.text_mode {
        TextMode::Full => {}
        TextMode::Shuffled => {
            let mut shuffle = SeededRng::stream(cfg.seed, Stream::Shuffle);
            for region in &mut regions {
                shuffle.shuffle(&mut region.local_text);
            }
            shuffle.shuffle(&mut global_text);
        }
        TextMode::Empty => {
            for region in &mut regions {
                region.local_text.iter_mut().for_each(String::clear);
            }
            global_text.iter_mut().for_each(String::clear);
        }
    }

    let global_text: BTreeMap<_, _> = timestamps
        .iter()
        .zip(global_text)
        .filter(|(_, t)| !t.is_empty())
        .map(|(ts, t)| (*ts, t))
        .collect();
    let dataset = DemandDataset { regions, global_text };
    dataset.validate()?;
    Ok(SyntheticData { dataset, event_slots })
}

fn draw_events(cfg: &GeneratorConfig, total: usize, rng: &mut SeededRng) -> Vec<Event> {
    let mut events = Vec::new();
    let shared_rate = if cfg.regions >= 2 {
        cfg.event_rate * cfg.shared_event_fraction
    } else {
        0.0
    };
    let local_rate = cfg.event_rate - shared_rate;
    let (lo, hi) = cfg.event_amp_range;
    // Slot 0 has no preceding slot to carry the announcement.
    for k in 1..total {
        if rng.bernoulli(shared_rate) {
            let count = rng.int_in(2, cfg.regions);
            let mut ids: Vec<usize> = (0..cfg.regions).collect();
            rng.shuffle(&mut ids);
            ids.truncate(count);
            ids.sort_unstable();
            events.push(Event {
                start: k,
                duration: rng.int_in(1, 4),
                amplitude: rng.uniform_in(lo, hi),
                regions: ids,
            });
        }
        for r in 0..cfg.regions {
            if rng.bernoulli(local_rate) {
                events.push(Event {
                    start: k,
                    duration: rng.int_in(1, 4),
                    amplitude: rng.uniform_in(lo, hi),
                    regions: vec![r],
                });
            }
        }
    }
    events
}
