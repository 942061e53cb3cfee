//! Normalization, chronological splits, and model-ready windows.

use std::collections::HashMap;
use std::sync::Arc;

use chrono::{DateTime, Utc};

use crate::data::dataset::{DemandDataset, NUM_FEATURES};
use crate::error::{KgcmError, Result};
use crate::model::ssa::StepTime;
use crate::params::ModelParams;
use crate::tensor::Tensor;
use crate::text::{TextEncoder, TextRecord, TokenEmbeddings};

pub const SCALER_FEATURE_MEAN: &str = "scaler.feature_mean";
pub const SCALER_FEATURE_STD: &str = "scaler.feature_std";
pub const SCALER_TARGET: &str = "scaler.target";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Row ranges of the 70/15/15 chronological split of a series of `len` rows.
pub fn split_range(len: usize, split: Split) -> std::ops::Range<usize> {
    let train_end = len * 70 / 100;
    let val_end = len * 85 / 100;
    match split {
        Split::Train => 0..train_end,
        Split::Val => train_end..val_end,
        Split::Test => val_end..len,
    }
}

/// Z-score normalization of the structured features; demand doubles as the
/// target.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaler {
    pub mean: [f64; NUM_FEATURES],
    pub std: [f64; NUM_FEATURES],
}

impl Scaler {
    /// Fits on the training split of every region. Columns with (near) zero
    /// spread get unit scale.
    pub fn fit(ds: &DemandDataset) -> Result<Self> {
        let mut sum = [0.0; NUM_FEATURES];
        let mut count = 0usize;
        for r in &ds.regions {
            for row in &r.rows[split_range(r.len(), Split::Train)] {
                for (s, v) in sum.iter_mut().zip(row.features()) {
                    *s += v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(KgcmError::Data("training split is empty".into()));
        }
        let mean = sum.map(|s| s / count as f64);
        let mut var = [0.0; NUM_FEATURES];
        for r in &ds.regions {
            for row in &r.rows[split_range(r.len(), Split::Train)] {
                for ((acc, v), m) in var.iter_mut().zip(row.features()).zip(mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var.map(|v| {
            let s = (v / count as f64).sqrt();
            if s > 1e-12 { s } else { 1.0 }
        });
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, features: [f64; NUM_FEATURES]) -> [f64; NUM_FEATURES] {
        let mut out = features;
        for j in 0..NUM_FEATURES {
            out[j] = (features[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.mean[0]) / self.std[0]
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.std[0] + self.mean[0]
    }

    pub fn store(&self, params: &mut ModelParams) {
        params.insert(SCALER_FEATURE_MEAN, Tensor::from_parts(vec![NUM_FEATURES], self.mean.to_vec()));
        params.insert(SCALER_FEATURE_STD, Tensor::from_parts(vec![NUM_FEATURES], self.std.to_vec()));
        params.insert(SCALER_TARGET, Tensor::from_parts(vec![2], vec![self.mean[0], self.std[0]]));
    }

    pub fn load(params: &ModelParams) -> Result<Self> {
        let get = |name: &str| -> Result<[f64; NUM_FEATURES]> {
            let t = params.get(name)?;
            t.data()
                .try_into()
                .map_err(|_| KgcmError::Format(format!("`{name}` must hold {NUM_FEATURES} values")))
        };
        Ok(Self {
            mean: get(SCALER_FEATURE_MEAN)?,
            std: get(SCALER_FEATURE_STD)?,
        })
    }
}

/// One model input/target pair.
#[derive(Clone, Debug)]
pub struct SeriesWindow {
    pub region: usize,
    pub region_id: String,
    /// First input row within the region series.
    pub start: usize,
    /// `T x F`, normalized.
    pub features: Tensor,
    pub times: Vec<StepTime>,
    pub local: Vec<Arc<TokenEmbeddings>>,
    /// Pooled global prompt of the last input step.
    pub global: Arc<Vec<f64>>,
    /// Normalized demand at steps `1..=T`, one ahead of each input row.
    pub next_step: Vec<f64>,
    /// Normalized demand over the horizon.
    pub targets: Vec<f64>,
    pub targets_raw: Vec<f64>,
    pub target_times: Vec<DateTime<Utc>>,
}

impl SeriesWindow {
    pub fn steps(&self) -> usize {
        self.times.len()
    }

    pub fn local_refs(&self) -> Vec<&TokenEmbeddings> {
        self.local.iter().map(Arc::as_ref).collect()
    }
}

/// Encoded, normalized view of a dataset from which windows are cut.
pub struct PreparedData<'a> {
    dataset: &'a DemandDataset,
    scaler: Scaler,
    window: usize,
    horizon: usize,
    normalized: Vec<Vec<[f64; NUM_FEATURES]>>,
    local: Vec<Vec<Arc<TokenEmbeddings>>>,
    global: Vec<Vec<Arc<Vec<f64>>>>,
    times: Vec<Vec<StepTime>>,
}

#[derive(Default)]
struct EncodeCache {
    by_key: HashMap<String, Arc<TokenEmbeddings>>,
    pooled: HashMap<String, Arc<Vec<f64>>>,
}

impl EncodeCache {
    fn key(file_mode: bool, record: &TextRecord) -> String {
        if record.text.trim().is_empty() {
            String::new()
        } else if file_mode {
            format!("id:{}", record.id.as_deref().unwrap_or(""))
        } else {
            format!("text:{}", record.text)
        }
    }

    fn tokens(&mut self, enc: &TextEncoder, file_mode: bool, record: &TextRecord) -> Result<Arc<TokenEmbeddings>> {
        let key = Self::key(file_mode, record);
        if let Some(e) = self.by_key.get(&key) {
            return Ok(Arc::clone(e));
        }
        let e = Arc::new(enc.encode(record)?);
        self.by_key.insert(key, Arc::clone(&e));
        Ok(e)
    }

    fn pooled(&mut self, enc: &TextEncoder, file_mode: bool, record: &TextRecord) -> Result<Arc<Vec<f64>>> {
        let key = Self::key(file_mode, record);
        if let Some(p) = self.pooled.get(&key) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(self.tokens(enc, file_mode, record)?.pooled().to_vec());
        self.pooled.insert(key, Arc::clone(&p));
        Ok(p)
    }
}

impl<'a> PreparedData<'a> {
    /// Normalizes with `scaler` and encodes every text once.
    pub fn new(
        dataset: &'a DemandDataset,
        scaler: Scaler,
        encoder: &TextEncoder,
        file_mode: bool,
        window: usize,
        horizon: usize,
    ) -> Result<Self> {
        dataset.validate()?;
        let mut cache = EncodeCache::default();
        let mut normalized = Vec::new();
        let mut local = Vec::new();
        let mut global = Vec::new();
        let mut times = Vec::new();
        for r in &dataset.regions {
            normalized.push(r.rows.iter().map(|row| scaler.normalize(row.features())).collect());
            local.push(
                r.local_text
                    .iter()
                    .enumerate()
                    .map(|(i, t)| cache.tokens(encoder, file_mode, &TextRecord::new(r.text_id(i), t.clone())))
                    .collect::<Result<Vec<_>>>()?,
            );
            global.push(
                r.rows
                    .iter()
                    .map(|row| {
                        let rec = TextRecord::new(
                            dataset.global_text_id(row.timestamp),
                            dataset.global_text_at(row.timestamp),
                        );
                        cache.pooled(encoder, file_mode, &rec)
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            times.push(r.rows.iter().map(|row| dataset.step_time(row.timestamp)).collect());
        }
        Ok(Self {
            dataset,
            scaler,
            window,
            horizon,
            normalized,
            local,
            global,
            times,
        })
    }

    pub fn scaler(&self) -> &Scaler {
        &self.scaler
    }

    pub fn dataset(&self) -> &DemandDataset {
        self.dataset
    }

    /// Window starts of `split` in region `r`, stride 1.
    pub fn starts(&self, r: usize, split: Split) -> std::ops::Range<usize> {
        let range = split_range(self.dataset.regions[r].len(), split);
        let span = self.window + self.horizon;
        if range.len() < span {
            return range.start..range.start;
        }
        range.start..range.end - span + 1
    }

    pub fn window(&self, r: usize, start: usize) -> Result<SeriesWindow> {
        let region = &self.dataset.regions[r];
        let (t, h) = (self.window, self.horizon);
        if start + t + h > region.len() {
            return Err(KgcmError::Data(format!(
                "window at row {start} of region `{}` needs {} rows, series has {}",
                region.id,
                t + h,
                region.len()
            )));
        }
        let mut feats = Vec::with_capacity(t * NUM_FEATURES);
        for row in &self.normalized[r][start..start + t] {
            feats.extend_from_slice(row);
        }
        let target_rows = &region.rows[start + t..start + t + h];
        Ok(SeriesWindow {
            region: r,
            region_id: region.id.clone(),
            start,
            features: Tensor::from_parts(vec![t, NUM_FEATURES], feats),
            times: self.times[r][start..start + t].to_vec(),
            local: self.local[r][start..start + t].to_vec(),
            global: Arc::clone(&self.global[r][start + t - 1]),
            next_step: self.normalized[r][start + 1..start + t + 1].iter().map(|f| f[0]).collect(),
            targets: target_rows.iter().map(|row| self.scaler.normalize_target(row.demand)).collect(),
            targets_raw: target_rows.iter().map(|row| row.demand).collect(),
            target_times: target_rows.iter().map(|row| row.timestamp).collect(),
        })
    }

    pub fn windows(&self, split: Split) -> Result<Vec<SeriesWindow>> {
        let mut out = Vec::new();
        for r in 0..self.dataset.regions.len() {
            for s in self.starts(r, split) {
                out.push(self.window(r, s)?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_ranges_cover_series() {
        let n = 101;
        let a = split_range(n, Split::Train);
        let b = split_range(n, Split::Val);
        let c = split_range(n, Split::Test);
        assert_eq!((a.start, a.end, b.end, c.end), (0, 70, 85, 101));
        assert_eq!(b.start, a.end);
        assert_eq!(c.start, b.end);
    }

    #[test]
    fn scaler_round_trip() {
        let s = Scaler {
            mean: [10.0, 1.0, 2.0, 0.0, 0.3],
            std: [4.0, 1.0, 1.0, 1.0, 0.5],
        };
        let z = s.normalize_target(18.0);
        assert_eq!(z, 2.0);
        assert_eq!(s.denormalize_target(z), 18.0);
        let mut p = ModelParams::new();
        s.store(&mut p);
        assert_eq!(Scaler::load(&p).unwrap(), s);
    }
}
