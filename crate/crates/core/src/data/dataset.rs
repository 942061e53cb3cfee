use std::collections::BTreeMap;

use chrono::{DateTime, Datelike, TimeDelta, Timelike, Utc};

use crate::error::{KgcmError, Result};
use crate::model::ssa::StepTime;

/// Structured input columns, in model order.
pub const FEATURE_NAMES: [&str; 5] = ["demand", "avg_passengers", "avg_distance", "is_holiday", "is_weekend"];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

#[derive(Clone, Debug, PartialEq)]
pub struct DemandRow {
    pub timestamp: DateTime<Utc>,
    pub demand: f64,
    pub avg_passengers: f64,
    pub avg_distance: f64,
    pub is_holiday: bool,
    pub is_weekend: bool,
}

impl DemandRow {
    pub fn features(&self) -> [f64; NUM_FEATURES] {
        [
            self.demand,
            self.avg_passengers,
            self.avg_distance,
            f64::from(u8::from(self.is_holiday)),
            f64::from(u8::from(self.is_weekend)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionSeries {
    pub id: String,
    pub rows: Vec<DemandRow>,
    /// One entry per row; blank when the slot has no local text.
    pub local_text: Vec<String>,
}

impl RegionSeries {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Stable id of the local text at `row`, used by embedding files.
    pub fn text_id(&self, row: usize) -> String {
        format!("{}_t{row}", self.id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DemandDataset {
    pub regions: Vec<RegionSeries>,
    /// Non-empty global texts by slot timestamp.
    pub global_text: BTreeMap<DateTime<Utc>, String>,
}

impl DemandDataset {
    /// Checks ordering, slot width, value ranges, and text alignment.
    pub fn validate(&self) -> Result<()> {
        if self.regions.is_empty() {
            return Err(KgcmError::Data("dataset has no regions".into()));
        }
        let mut width: Option<TimeDelta> = None;
        for r in &self.regions {
            if r.rows.is_empty() {
                return Err(KgcmError::Data(format!("region `{}` has no rows", r.id)));
            }
            if r.local_text.len() != r.rows.len() {
                return Err(KgcmError::Data(format!(
                    "region `{}`: {} local texts for {} rows",
                    r.id,
                    r.local_text.len(),
                    r.rows.len()
                )));
            }
            for (i, row) in r.rows.iter().enumerate() {
                let vals = row.features();
                if vals.iter().any(|v| !v.is_finite()) {
                    return Err(KgcmError::Data(format!("region `{}` row {i}: non-finite value", r.id)));
                }
                if row.demand < 0.0 {
                    return Err(KgcmError::Data(format!(
                        "region `{}` row {i}: negative demand {}",
                        r.id, row.demand
                    )));
                }
            }
            for (i, pair) in r.rows.windows(2).enumerate() {
                let step = pair[1].timestamp - pair[0].timestamp;
                if step <= TimeDelta::zero() {
                    return Err(KgcmError::Data(format!(
                        "region `{}` row {}: timestamps not strictly increasing",
                        r.id,
                        i + 1
                    )));
                }
                match width {
                    None => width = Some(step),
                    Some(w) if w != step => {
                        return Err(KgcmError::Data(format!(
                            "region `{}` row {}: slot width {}s differs from {}s",
                            r.id,
                            i + 1,
                            step.num_seconds(),
                            w.num_seconds()
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        if let Some(w) = width {
            let secs = w.num_seconds();
            if secs <= 0 || 86_400 % secs != 0 {
                return Err(KgcmError::Data(format!(
                    "slot width of {secs}s does not divide a day"
                )));
            }
        }
        Ok(())
    }

    /// Slot width; a single-row dataset is treated as daily.
    pub fn slot_width(&self) -> TimeDelta {
        self.regions
            .iter()
            .find(|r| r.rows.len() >= 2)
            .map(|r| r.rows[1].timestamp - r.rows[0].timestamp)
            .unwrap_or(TimeDelta::days(1))
    }

    pub fn slots_per_day(&self) -> usize {
        (86_400 / self.slot_width().num_seconds().max(1)) as usize
    }

    pub fn start(&self) -> DateTime<Utc> {
        self.regions
            .iter()
            .filter_map(|r| r.rows.first())
            .map(|r| r.timestamp)
            .min()
            .expect("validated dataset has rows")
    }

    pub fn step_time(&self, ts: DateTime<Utc>) -> StepTime {
        let width = self.slot_width().num_seconds().max(1);
        let secs = i64::from(ts.num_seconds_from_midnight());
        StepTime {
            slot: (secs / width) as usize,
            weekday: ts.weekday().num_days_from_monday() as usize,
        }
    }

    /// Stable id of the global text at `ts`: `global_t{k}` where `k` counts
    /// slots from the dataset start.
    pub fn global_text_id(&self, ts: DateTime<Utc>) -> String {
        let width = self.slot_width().num_seconds().max(1);
        let k = (ts - self.start()).num_seconds() / width;
        format!("global_t{k}")
    }

    pub fn global_text_at(&self, ts: DateTime<Utc>) -> &str {
        self.global_text.get(&ts).map(String::as_str).unwrap_or("")
    }

    pub fn num_rows(&self) -> usize {
        self.regions.iter().map(RegionSeries::len).sum()
    }
}
