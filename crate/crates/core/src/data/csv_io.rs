//! CSV ingestion and emission for datasets and predictions.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};

use crate::data::dataset::{DemandDataset, DemandRow, RegionSeries};
use crate::error::{KgcmError, Result};

pub const DEMAND_FILE: &str = "demand.csv";
pub const LOCAL_TEXT_FILE: &str = "local_text.csv";
pub const GLOBAL_TEXT_FILE: &str = "global_text.csv";
pub const DEMAND_HEADER: &str = "region_id,timestamp,demand,avg_passengers,avg_distance,is_holiday,is_weekend";
pub const LOCAL_TEXT_HEADER: &str = "region_id,timestamp,description";
pub const GLOBAL_TEXT_HEADER: &str = "timestamp,description";
pub const PREDICTION_HEADER: &str = "region_id,timestamp,horizon_step,y_true,y_pred";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        KgcmError::io(path, e)
    })
}

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Secs, true)
}

pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    DateTime::parse_from_rfc3339(s.trim()).ok().map(|t| t.with_timezone(&Utc))
}

/// 17 significant digits, which round-trips every finite `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_bytes<F>(header: &str, fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(&mut buf);
        w.write_record(header.split(','))
            .and_then(|_| fill(&mut w))
            .and_then(|_| w.flush().map_err(csv::Error::from))
            .map_err(|e| KgcmError::Format(format!("csv encoding failed: {e}")))?;
    }
    Ok(buf)
}

pub fn demand_csv(ds: &DemandDataset) -> Result<Vec<u8>> {
    csv_bytes(DEMAND_HEADER, |w| {
        for r in &ds.regions {
            for row in &r.rows {
                w.write_record([
                    r.id.clone(),
                    format_timestamp(row.timestamp),
                    format_float(row.demand),
                    format_float(row.avg_passengers),
                    format_float(row.avg_distance),
                    u8::from(row.is_holiday).to_string(),
                    u8::from(row.is_weekend).to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

pub fn local_text_csv(ds: &DemandDataset) -> Result<Vec<u8>> {
    csv_bytes(LOCAL_TEXT_HEADER, |w| {
        for r in &ds.regions {
            for (row, text) in r.rows.iter().zip(&r.local_text) {
                if !text.is_empty() {
                    w.write_record([r.id.as_str(), &format_timestamp(row.timestamp), text])?;
                }
            }
        }
        Ok(())
    })
}

pub fn global_text_csv(ds: &DemandDataset) -> Result<Vec<u8>> {
    csv_bytes(GLOBAL_TEXT_HEADER, |w| {
        for (ts, text) in &ds.global_text {
            if !text.is_empty() {
                w.write_record([format_timestamp(*ts).as_str(), text])?;
            }
        }
        Ok(())
    })
}

/// Writes `demand.csv`, `local_text.csv` and `global_text.csv` under `dir`.
pub fn write_dataset(ds: &DemandDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| KgcmError::io(dir, e))?;
    atomic_write(&dir.join(DEMAND_FILE), &demand_csv(ds)?)?;
    atomic_write(&dir.join(LOCAL_TEXT_FILE), &local_text_csv(ds)?)?;
    atomic_write(&dir.join(GLOBAL_TEXT_FILE), &global_text_csv(ds)?)?;
    Ok(())
}

/// Reads the three files written by [`write_dataset`]. Text files are
/// optional.
pub fn load_dir(dir: &Path) -> Result<DemandDataset> {
    let local = dir.join(LOCAL_TEXT_FILE);
    let global = dir.join(GLOBAL_TEXT_FILE);
    load_csv(
        &dir.join(DEMAND_FILE),
        local.exists().then_some(local.as_path()),
        global.exists().then_some(global.as_path()),
    )
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| KgcmError::io(path, e))
}

fn reader(content: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(content.as_bytes())
}

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn require_columns(path: &Path, headers: &csv::StringRecord, names: &[&str]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            column(headers, n).ok_or_else(|| {
                KgcmError::Data(format!("{}: missing column `{n}`", path.display()))
            })
        })
        .collect()
}

pub fn load_csv(demand: &Path, local_text: Option<&Path>, global_text: Option<&Path>) -> Result<DemandDataset> {
    let content = read_file(demand)?;
    let mut rdr = reader(&content);
    let headers = rdr
        .headers()
        .map_err(|e| KgcmError::Data(format!("{}: {e}", demand.display())))?
        .clone();
    let cols = require_columns(
        demand,
        &headers,
        &["region_id", "timestamp", "demand", "avg_passengers", "avg_distance"],
    )?;
    let holiday = column(&headers, "is_holiday");
    let weekend = column(&headers, "is_weekend");

    let mut order: Vec<String> = Vec::new();
    let mut by_region: HashMap<String, Vec<DemandRow>> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let where_ = || format!("{} row {line}", demand.display());
        let rec = rec.map_err(|e| KgcmError::Data(format!("{}: {e}", where_())))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let num = |c: usize, name: &str| -> Result<f64> {
            field(c).parse::<f64>().map_err(|_| {
                KgcmError::Data(format!("{}: unparsable {name} `{}`", where_(), field(c)))
            })
        };
        let flag = |c: Option<usize>, name: &str| -> Result<bool> {
            match c.map(field) {
                None | Some("") | Some("0") => Ok(false),
                Some("1") => Ok(true),
                Some(other) => Err(KgcmError::Data(format!(
                    "{}: {name} must be 0 or 1, got `{other}`",
                    where_()
                ))),
            }
        };
        let region = field(cols[0]).to_string();
        let timestamp = parse_timestamp(field(cols[1])).ok_or_else(|| {
            KgcmError::Data(format!("{}: unparsable timestamp `{}`", where_(), field(cols[1])))
        })?;
        let row = DemandRow {
            timestamp,
            demand: num(cols[2], "demand")?,
            avg_passengers: num(cols[3], "avg_passengers")?,
            avg_distance: num(cols[4], "avg_distance")?,
            is_holiday: flag(holiday, "is_holiday")?,
            is_weekend: flag(weekend, "is_weekend")?,
        };
        if !row.demand.is_finite() || row.demand < 0.0 {
            return Err(KgcmError::Data(format!("{}: demand must be finite and >= 0", where_())));
        }
        let rows = by_region.entry(region.clone()).or_insert_with(|| {
            order.push(region.clone());
            Vec::new()
        });
        if let Some(prev) = rows.last() {
            if row.timestamp <= prev.timestamp {
                return Err(KgcmError::Data(format!(
                    "{}: timestamp {} for region `{region}` is not after {}",
                    where_(),
                    format_timestamp(row.timestamp),
                    format_timestamp(prev.timestamp)
                )));
            }
        }
        rows.push(row);
    }

    let mut regions: Vec<RegionSeries> = order
        .into_iter()
        .map(|id| {
            let rows = by_region.remove(&id).unwrap_or_default();
            RegionSeries {
                local_text: vec![String::new(); rows.len()],
                id,
                rows,
            }
        })
        .collect();

    if let Some(path) = local_text {
        let content = read_file(path)?;
        let mut rdr = reader(&content);
        let headers = rdr.headers().map_err(|e| KgcmError::Data(format!("{}: {e}", path.display())))?.clone();
        let cols = require_columns(path, &headers, &["region_id", "timestamp", "description"])?;
        let index: HashMap<String, usize> = regions.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| KgcmError::Data(format!("{} row {line}: {e}", path.display())))?;
            let region = rec.get(cols[0]).unwrap_or("");
            let Some(&r) = index.get(region) else {
                return Err(KgcmError::Data(format!(
                    "{} row {line}: unknown region `{region}`",
                    path.display()
                )));
            };
            let ts_str = rec.get(cols[1]).unwrap_or("");
            let ts = parse_timestamp(ts_str).ok_or_else(|| {
                KgcmError::Data(format!("{} row {line}: unparsable timestamp `{ts_str}`", path.display()))
            })?;
            let series = &mut regions[r];
            let pos = series.rows.binary_search_by_key(&ts, |row| row.timestamp).map_err(|_| {
                KgcmError::Data(format!(
                    "{} row {line}: region `{region}` has no row at {ts_str}",
                    path.display()
                ))
            })?;
            series.local_text[pos] = rec.get(cols[2]).unwrap_or("").to_string();
        }
    }

    let mut global = BTreeMap::new();
    if let Some(path) = global_text {
        let content = read_file(path)?;
        let mut rdr = reader(&content);
        let headers = rdr.headers().map_err(|e| KgcmError::Data(format!("{}: {e}", path.display())))?.clone();
        let cols = require_columns(path, &headers, &["timestamp", "description"])?;
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| KgcmError::Data(format!("{} row {line}: {e}", path.display())))?;
            let ts_str = rec.get(cols[0]).unwrap_or("");
            let ts = parse_timestamp(ts_str).ok_or_else(|| {
                KgcmError::Data(format!("{} row {line}: unparsable timestamp `{ts_str}`", path.display()))
            })?;
            let text = rec.get(cols[1]).unwrap_or("").to_string();
            if !text.is_empty() {
                global.insert(ts, text);
            }
        }
    }

    let ds = DemandDataset {
        regions,
        global_text: global,
    };
    ds.validate()?;
    Ok(ds)
}

/// One forecast value with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRow {
    pub region_id: String,
    /// Timestamp of the predicted slot.
    pub timestamp: DateTime<Utc>,
    /// 1-based.
    pub horizon_step: usize,
    pub y_true: f64,
    pub y_pred: f64,
}

pub fn predictions_csv(rows: &[PredictionRow]) -> Result<Vec<u8>> {
    csv_bytes(PREDICTION_HEADER, |w| {
        for p in rows {
            w.write_record([
                p.region_id.clone(),
                format_timestamp(p.timestamp),
                p.horizon_step.to_string(),
                format_float(p.y_true),
                format_float(p.y_pred),
            ])?;
        }
        Ok(())
    })
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    atomic_write(path, &predictions_csv(rows)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let content = read_file(path)?;
    let mut rdr = reader(&content);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = || KgcmError::Data(format!("{} row {line}: malformed prediction row", path.display()));
        let rec = rec.map_err(|_| bad())?;
        let f = |c: usize| rec.get(c).ok_or_else(bad);
        out.push(PredictionRow {
            region_id: f(0)?.to_string(),
            timestamp: parse_timestamp(f(1)?).ok_or_else(bad)?,
            horizon_step: f(2)?.parse().map_err(|_| bad())?,
            y_true: f(3)?.parse().map_err(|_| bad())?,
            y_pred: f(4)?.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, 123456.789, 5e-300, 0.0, f64::MAX] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn minimal_file_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(
            &p,
            "region_id,timestamp,demand,avg_passengers,avg_distance\n\
             a,2024-10-01T00:00:00Z,3,1.5,2\n\
             a,2024-10-01T00:30:00Z,4,1.5,2\n",
        )
        .unwrap();
        let ds = load_csv(&p, None, None).unwrap();
        assert_eq!(ds.num_rows(), 2);
        assert!(!ds.regions[0].rows[0].is_weekend);
        assert_eq!(ds.slots_per_day(), 48);
    }

    #[test]
    fn out_of_order_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(
            &p,
            "region_id,timestamp,demand,avg_passengers,avg_distance\n\
             a,2024-10-01T01:00:00Z,3,1.5,2\n\
             a,2024-10-01T00:30:00Z,4,1.5,2\n",
        )
        .unwrap();
        let e = load_csv(&p, None, None).unwrap_err().to_string();
        assert!(e.contains("row 3"), "{e}");
    }

    #[test]
    fn unknown_text_region_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let t = dir.path().join("t.csv");
        fs::write(&p, "region_id,timestamp,demand,avg_passengers,avg_distance\na,2024-10-01T00:00:00Z,3,1.5,2\n").unwrap();
        fs::write(&t, "region_id,timestamp,description\nzz,2024-10-01T00:00:00Z,hello\n").unwrap();
        let e = load_csv(&p, Some(&t), None).unwrap_err().to_string();
        assert!(e.contains("unknown region `zz`"), "{e}");
    }
}
