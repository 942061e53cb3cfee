//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KGCM1"
//! u32 record count, then per parameter in name order:
//!     u32 name length, UTF-8 name, u8 rank, u32 per dim, f64 values
//! u8 1 if a frozen relation matrix follows, else 0
//!     record as above, u32 provenance length, UTF-8 provenance
//! u32 config length, config text
//! u32 count + f64 values: stage-1 losses, then stage-2 losses
//! ```

use std::path::Path;

use crate::config::parse_config_str;
use crate::data::csv_io::{atomic_write, format_float};
use crate::error::{KgcmError, Result};
use crate::model::dgso::StructuralMatrix;
use crate::model::global::FrozenStructure;
use crate::params::ModelParams;
use crate::pipeline::TrainedModel;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"KGCM1";
const STRUCTURE_RECORD: &str = "a_star";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| KgcmError::Format(format!("length {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_record(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    put_str(out, name)?;
    out.push(t.rank() as u8);
    for &d in t.dims() {
        put_u32(out, d)?;
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    put_u32(out, values.len())?;
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn model_to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(64 + model.params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, model.params.len())?;
    for (name, t) in model.params.iter() {
        put_record(&mut out, name, t)?;
    }
    match &model.structure {
        None => out.push(0),
        Some(s) => {
            out.push(1);
            put_record(&mut out, STRUCTURE_RECORD, s.tensor())?;
            put_str(&mut out, s.provenance())?;
        }
    }
    put_str(&mut out, &model.config.to_config_text())?;
    put_f64s(&mut out, &model.stage1_losses)?;
    put_f64s(&mut out, &model.stage2_losses)?;
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(KgcmError::Format(format!(
                "truncated file at offset {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| KgcmError::Format(format!("invalid UTF-8 in {what} at offset {at}")))
    }

    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u32(what)?;
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn record(&mut self) -> Result<(String, Tensor)> {
        let at = self.pos;
        let name = self.string("parameter name")?;
        let rank = self.u8("rank")? as usize;
        let dims = (0..rank).map(|_| self.u32("dims")).collect::<Result<Vec<_>>>()?;
        let len = dims.iter().product::<usize>();
        if rank == 0 || rank > 3 || len == 0 {
            return Err(KgcmError::Format(format!(
                "record `{name}` at offset {at} has invalid dims {dims:?}"
            )));
        }
        let values = (0..len).map(|_| self.f64("values")).collect::<Result<Vec<_>>>()?;
        Ok((name, Tensor::new(&dims, values)?))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(KgcmError::Format("bad magic: not a KGCM1 model file".into()));
    }
    let count = r.u32("record count")?;
    let mut params = ModelParams::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let at = r.pos;
        let (name, t) = r.record()?;
        if last.as_deref().is_some_and(|l| l >= name.as_str()) {
            return Err(KgcmError::Format(format!(
                "record `{name}` at offset {at} is out of order"
            )));
        }
        last = Some(name.clone());
        params.insert(name, t);
    }
    let structure = match r.u8("structure flag")? {
        0 => None,
        1 => {
            let (_, t) = r.record()?;
            let provenance = r.string("provenance")?;
            Some(FrozenStructure::new(StructuralMatrix::new(t)?, provenance))
        }
        other => {
            return Err(KgcmError::Format(format!(
                "invalid structure flag {other} at offset {}",
                r.pos - 1
            )))
        }
    };
    let config = parse_config_str(&r.string("config")?)
        .map_err(|e| KgcmError::Format(format!("embedded config: {e}")))?
        .train;
    let stage1_losses = r.f64s("stage-1 losses")?;
    let stage2_losses = r.f64s("stage-2 losses")?;
    if r.pos != bytes.len() {
        return Err(KgcmError::Format(format!(
            "{} trailing bytes at offset {}",
            bytes.len() - r.pos,
            r.pos
        )));
    }
    Ok(TrainedModel {
        params,
        structure,
        config,
        stage1_losses,
        stage2_losses,
    })
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    atomic_write(path, &model_to_bytes(model)?)
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path).map_err(|e| KgcmError::io(path, e))?;
    model_from_bytes(&bytes).map_err(|e| match e {
        KgcmError::Format(m) => KgcmError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// `d x d` CSV of the relation matrix, one row per line.
pub fn structure_csv(s: &StructuralMatrix) -> String {
    s.matrix()
        .to_rows()
        .iter()
        .map(|row| row.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;

    fn tiny() -> TrainedModel {
        let mut params = ModelParams::new();
        params.insert("b", Tensor::vector(vec![1.5, -0.25]).unwrap());
        params.insert("a", Tensor::matrix(1, 1, vec![2.0]).unwrap());
        TrainedModel {
            params,
            structure: Some(FrozenStructure::new(StructuralMatrix::uniform(2), "test")),
            config: TrainConfig::default(),
            stage1_losses: vec![0.5],
            stage2_losses: vec![],
        }
    }

    #[test]
    fn byte_layout() {
        let bytes = model_to_bytes(&tiny()).unwrap();
        assert_eq!(&bytes[..5], b"KGCM1");
        assert_eq!(&bytes[5..9], &2u32.to_le_bytes());
        // first record is "a": len, name, rank 2, dims 1 1, value 2.0
        assert_eq!(&bytes[9..13], &1u32.to_le_bytes());
        assert_eq!(bytes[13], b'a');
        assert_eq!(bytes[14], 2);
        assert_eq!(&bytes[15..19], &1u32.to_le_bytes());
        assert_eq!(&bytes[19..23], &1u32.to_le_bytes());
        assert_eq!(&bytes[23..31], &[0, 0, 0, 0, 0, 0, 0, 0x40]);
    }

    #[test]
    fn round_trip_and_corruption() {
        let m = tiny();
        let bytes = model_to_bytes(&m).unwrap();
        assert_eq!(model_from_bytes(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let e = model_from_bytes(&bytes[..20]).unwrap_err().to_string();
        assert!(e.contains("offset"), "{e}");
    }
}
