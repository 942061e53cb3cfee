//! Error metrics, test-split evaluation, and the component ablation.

use std::fmt::Write as _;

use crate::config::{ComponentSet, TrainConfig};
use crate::data::csv_io::{format_float, PredictionRow};
use crate::data::dataset::DemandDataset;
use crate::data::windows::{SeriesWindow, Split};
use crate::error::{KgcmError, Result};
use crate::pipeline::{fit, TrainedModel};

pub const DEFAULT_MAPE_FLOOR: f64 = 1.0;
pub const REPORT_HEADER: &str = "scope,mape_percent,mae,rmse,n_points,n_floored";
pub const ABLATION_HEADER: &str = "variant,seed,mape_percent,mae,rmse,n_points,n_floored";
pub const VARIANTS: [&str; 6] = ["backbone", "+SSA", "+RCPG", "+DGSO", "+ACMFW", "+LPO"];

fn check_lengths(op: &str, pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(KgcmError::Metric(format!(
            "{op} needs equal nonzero lengths, got {} and {}",
            pred.len(),
            truth.len()
        )));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths("mae", pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    check_lengths("rmse", pred, truth)?;
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64;
    Ok(mse.sqrt())
}

/// Percent error with denominators floored at `floor`. Returns the MAPE and
/// the number of floored points.
pub fn mape(pred: &[f64], truth: &[f64], floor: f64) -> Result<(f64, usize)> {
    check_lengths("mape", pred, truth)?;
    if floor.is_nan() || floor <= 0.0 {
        return Err(KgcmError::Metric(format!("mape floor must be positive, got {floor}")));
    }
    let mut floored = 0;
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let denom = if t.abs() < floor {
            floored += 1;
            floor
        } else {
            t.abs()
        };
        sum += (p - t).abs() / denom;
    }
    Ok((100.0 * sum / pred.len() as f64, floored))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
    pub n_points: usize,
    pub n_floored: usize,
}

impl MetricReport {
    pub fn compute(pred: &[f64], truth: &[f64], floor: f64) -> Result<Self> {
        let (mape_percent, n_floored) = mape(pred, truth, floor)?;
        Ok(Self {
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            mape_percent,
            n_points: pred.len(),
            n_floored,
        })
    }

    fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{}",
            format_float(self.mape_percent),
            format_float(self.mae),
            format_float(self.rmse),
            self.n_points,
            self.n_floored
        )
    }
}

/// Every forecast point plus aggregate and per-horizon metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    pub points: Vec<PredictionRow>,
    pub overall: MetricReport,
    /// Index `k` is horizon step `k + 1`.
    pub per_horizon: Vec<MetricReport>,
}

impl ForecastReport {
    pub fn from_points(points: Vec<PredictionRow>, horizon: usize, floor: f64) -> Result<Self> {
        let pred: Vec<f64> = points.iter().map(|p| p.y_pred).collect();
        let truth: Vec<f64> = points.iter().map(|p| p.y_true).collect();
        let overall = MetricReport::compute(&pred, &truth, floor)?;
        let per_horizon = (1..=horizon)
            .map(|h| {
                let (p, t): (Vec<f64>, Vec<f64>) = points
                    .iter()
                    .filter(|pt| pt.horizon_step == h)
                    .map(|pt| (pt.y_pred, pt.y_true))
                    .unzip();
                MetricReport::compute(&p, &t, floor)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            points,
            overall,
            per_horizon,
        })
    }

    /// `scope,mape_percent,mae,rmse,n_points,n_floored` with scopes `all`
    /// and `h1..hT'`.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\nall,{}\n", self.overall.csv_fields());
        for (k, m) in self.per_horizon.iter().enumerate() {
            let _ = writeln!(s, "h{},{}", k + 1, m.csv_fields());
        }
        s
    }
}

/// Anything that maps a window to a `T'` forecast in demand units.
pub trait Forecaster {
    fn forecast(&self, window: &SeriesWindow) -> Result<Vec<f64>>;
}

impl Forecaster for TrainedModel {
    fn forecast(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        self.predict(window)
    }
}

/// Returns the true targets.
pub struct OracleForecaster;

impl Forecaster for OracleForecaster {
    fn forecast(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        Ok(window.targets_raw.clone())
    }
}

/// Predicts the same value for every step.
pub struct ConstantForecaster(pub f64);

impl Forecaster for ConstantForecaster {
    fn forecast(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        Ok(vec![self.0; window.targets_raw.len()])
    }
}

pub fn evaluate_windows(f: &dyn Forecaster, windows: &[SeriesWindow], floor: f64) -> Result<ForecastReport> {
    let horizon = windows.first().map(|w| w.targets_raw.len()).unwrap_or(0);
    let mut points = Vec::with_capacity(windows.len() * horizon);
    for w in windows {
        let pred = f.forecast(w)?;
        if pred.len() != w.targets_raw.len() {
            return Err(KgcmError::Metric(format!(
                "forecaster returned {} values for a horizon of {}",
                pred.len(),
                w.targets_raw.len()
            )));
        }
        for (k, (p, (t, ts))) in pred.iter().zip(w.targets_raw.iter().zip(&w.target_times)).enumerate() {
            points.push(PredictionRow {
                region_id: w.region_id.clone(),
                timestamp: *ts,
                horizon_step: k + 1,
                y_true: *t,
                y_pred: *p,
            });
        }
    }
    if points.is_empty() {
        return Err(KgcmError::Data("no evaluation windows fit in the split".into()));
    }
    ForecastReport::from_points(points, horizon, floor)
}

/// Forecasts every window of `split` with `model`.
pub fn evaluate(model: &TrainedModel, dataset: &DemandDataset, split: Split, floor: f64) -> Result<ForecastReport> {
    let prepared = model.prepare(dataset)?;
    let windows = prepared.windows(split)?;
    evaluate_windows(model, &windows, floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    /// Index into [`VARIANTS`].
    pub variant: usize,
    pub seed: u64,
    pub components: ComponentSet,
    pub metrics: MetricReport,
}

/// Median metrics of one variant over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: usize,
    pub mape_percent: f64,
    pub mae: f64,
    pub rmse: f64,
    pub runs: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

/// Trains and evaluates the six cumulative variants for every seed, using up
/// to `jobs` threads. Runs are returned sorted by `(variant, seed)`.
pub fn run_ablation(
    dataset: &DemandDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    jobs: usize,
    floor: f64,
) -> Result<Vec<AblationRun>> {
    if seeds.is_empty() {
        return Err(KgcmError::Config("ablation needs at least one seed".into()));
    }
    let tasks: Vec<(usize, u64)> = (0..VARIANTS.len())
        .flat_map(|v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run_one = |&(variant, seed): &(usize, u64)| -> Result<AblationRun> {
        let components = ComponentSet::cumulative(variant);
        let cfg = TrainConfig {
            components,
            seed,
            ..cfg.clone()
        };
        let model = fit(dataset, &cfg)?;
        let report = evaluate(&model, dataset, Split::Test, floor)?;
        log::info!(
            "ablation {} seed {seed}: mape {:.3}%",
            VARIANTS[variant],
            report.overall.mape_percent
        );
        Ok(AblationRun {
            variant,
            seed,
            components,
            metrics: report.overall,
        })
    };
    let jobs = jobs.max(1).min(tasks.len());
    let mut runs = if jobs == 1 {
        tasks.iter().map(run_one).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = tasks.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = tasks
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run_one).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(tasks.len());
            for h in handles {
                all.extend(h.join().expect("ablation worker panicked")?);
            }
            Ok::<_, KgcmError>(all)
        })?
    };
    runs.sort_by_key(|r| (r.variant, r.seed));
    Ok(runs)
}

pub fn summarize(runs: &[AblationRun]) -> Vec<VariantSummary> {
    (0..VARIANTS.len())
        .filter_map(|v| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v).collect();
            let col = |f: fn(&MetricReport) -> f64| median(&mine.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
            Some(VariantSummary {
                variant: v,
                mape_percent: col(|m| m.mape_percent)?,
                mae: col(|m| m.mae)?,
                rmse: col(|m| m.rmse)?,
                runs: mine.len(),
            })
        })
        .collect()
}

/// Number of steps where the median MAPE goes up from one variant to the next.
pub fn count_inversions(summary: &[VariantSummary]) -> usize {
    summary
        .windows(2)
        .filter(|w| w[1].mape_percent > w[0].mape_percent)
        .count()
}

pub fn ablation_csv(runs: &[AblationRun]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in runs {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            VARIANTS[r.variant],
            r.seed,
            format_float(m.mape_percent),
            format_float(m.mae),
            format_float(m.rmse),
            m.n_points,
            m.n_floored
        );
    }
    s
}

pub fn parse_ablation_csv(content: &str) -> Result<Vec<AblationRun>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(content.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let bad = || KgcmError::Data(format!("ablation csv row {}: malformed", i + 2));
        let rec = rec.map_err(|_| bad())?;
        let f = |c: usize| rec.get(c).ok_or_else(bad);
        let variant = VARIANTS.iter().position(|v| *v == f(0).unwrap_or("")).ok_or_else(bad)?;
        let num = |c: usize| f(c)?.parse::<f64>().map_err(|_| bad());
        let int = |c: usize| f(c)?.parse::<usize>().map_err(|_| bad());
        out.push(AblationRun {
            variant,
            seed: f(1)?.parse().map_err(|_| bad())?,
            components: ComponentSet::cumulative(variant),
            metrics: MetricReport {
                mape_percent: num(2)?,
                mae: num(3)?,
                rmse: num(4)?,
                n_points: int(5)?,
                n_floored: int(6)?,
            },
        });
    }
    Ok(out)
}

/// Median table with each row's change from the row above, for example
/// `35.62(-2.33%)` in the MAPE column.
pub fn render_table(summary: &[VariantSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<10} | {:>16} | {:>14} | {:>14}", "variant", "MAPE", "MAE", "RMSE");
    let _ = writeln!(s, "{}", "-".repeat(64));
    let mut prev: Option<&VariantSummary> = None;
    for row in summary {
        let (mape, mae, rmse) = match prev {
            None => (
                format!("{:.2}", row.mape_percent),
                format!("{:.2}", row.mae),
                format!("{:.2}", row.rmse),
            ),
            Some(p) => (
                format!("{:.2}({:+.2}%)", row.mape_percent, row.mape_percent - p.mape_percent),
                format!("{:.2}({:+.2})", row.mae, row.mae - p.mae),
                format!("{:.2}({:+.2})", row.rmse, row.rmse - p.rmse),
            ),
        };
        let _ = writeln!(s, "{:<10} | {:>16} | {:>14} | {:>14}", VARIANTS[row.variant], mape, mae, rmse);
        prev = Some(row);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(mae(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 1.5);
        assert!((rmse(&[2.0, 4.0], &[1.0, 2.0]).unwrap() - 2.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(mape(&[2.0, 4.0], &[1.0, 2.0], 1.0).unwrap(), (100.0, 0));
        assert_eq!(mape(&[3.0], &[1.0], 1.0).unwrap(), (200.0, 0));
        assert_eq!(mape(&[1.0], &[0.0], 1.0).unwrap(), (100.0, 1));
        assert_eq!(mae(&[5.0], &[5.0]).unwrap(), 0.0);
        assert!(mae(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn table_deltas() {
        let rows = vec![
            VariantSummary { variant: 0, mape_percent: 37.95, mae: 3.9, rmse: 5.3, runs: 1 },
            VariantSummary { variant: 1, mape_percent: 35.62, mae: 3.75, rmse: 5.14, runs: 1 },
        ];
        let t = render_table(&rows);
        assert!(t.contains("35.62(-2.33%)"), "{t}");
        assert!(t.contains("3.75(-0.15)"), "{t}");
        assert_eq!(count_inversions(&rows), 0);
    }
}
