//! Text-to-vector encoding.
//!
//! The default encoder is deterministic sign feature hashing over lowercase
//! alphanumeric tokens. Externally computed embeddings (for example from a
//! pretrained language model) can be supplied as a CSV file instead.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::error::{KgcmError, Result};
use crate::tensor::Tensor;

pub const FNV_OFFSET_BASIS: u64 = 14695981039346656037;
pub const FNV_PRIME: u64 = 1099511628211;

/// A piece of prior-knowledge text with an optional stable id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TextRecord {
    pub id: Option<String>,
    pub text: String,
}

impl TextRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: Some(id.into()),
            text: text.into(),
        }
    }

    pub fn anonymous(text: impl Into<String>) -> Self {
        Self {
            id: None,
            text: text.into(),
        }
    }
}

/// Token-level rows plus a pooled summary vector.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenEmbeddings {
    /// `m x d`, row-major; `m` may be zero.
    tokens: Vec<f64>,
    pooled: Vec<f64>,
}

impl TokenEmbeddings {
    pub fn empty(d: usize) -> Self {
        Self {
            tokens: Vec::new(),
            pooled: vec![0.0; d],
        }
    }

    pub fn from_rows(tokens: Vec<f64>, pooled: Vec<f64>) -> Self {
        debug_assert!(pooled.is_empty() || tokens.len().is_multiple_of(pooled.len()));
        Self { tokens, pooled }
    }

    pub fn dim(&self) -> usize {
        self.pooled.len()
    }

    pub fn num_tokens(&self) -> usize {
        if self.pooled.is_empty() {
            0
        } else {
            self.tokens.len() / self.pooled.len()
        }
    }

    pub fn token_rows(&self) -> &[f64] {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.tokens[i * d..(i + 1) * d]
    }

    pub fn pooled(&self) -> &[f64] {
        &self.pooled
    }

    /// Token rows as an `m x d` array, or `None` when there are no tokens.
    pub fn token_matrix(&self) -> Option<Tensor> {
        let m = self.num_tokens();
        (m > 0).then(|| Tensor::from_parts(vec![m, self.dim()], self.tokens.clone()))
    }
}

/// Lowercases and splits on every non-alphanumeric codepoint.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET_BASIS, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Sign-hashed bag of tokens. Each token becomes a `±1` one-hot row at
/// `hash mod d` (negative when the hash's top bit is set); the pooled vector
/// is the L2-normalized row sum, or zero when there are no tokens.
pub fn encode_hashed(text: &str, d: usize) -> Result<TokenEmbeddings> {
    if d < 2 {
        return Err(KgcmError::Config(format!(
            "hashed encoder needs dimension >= 2, got {d}"
        )));
    }
    let tokens = tokenize(text);
    let mut rows = vec![0.0; tokens.len() * d];
    let mut pooled = vec![0.0; d];
    for (i, tok) in tokens.iter().enumerate() {
        let h = fnv1a64(tok.as_bytes());
        let idx = (h % d as u64) as usize;
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        rows[i * d + idx] = sign;
        pooled[idx] += sign;
    }
    let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in &mut pooled {
            *v /= norm;
        }
    }
    Ok(TokenEmbeddings::from_rows(rows, pooled))
}

/// Reads `id,v1,...,vd` lines. Each vector becomes both the pooled vector
/// and the single token row of its id.
pub fn load_embedding_file(path: &Path) -> Result<HashMap<String, TokenEmbeddings>> {
    let content = std::fs::read_to_string(path).map_err(|e| KgcmError::io(path, e))?;
    parse_embeddings(&content, &path.display().to_string())
}

pub(crate) fn parse_embeddings(content: &str, source: &str) -> Result<HashMap<String, TokenEmbeddings>> {
    let mut map = HashMap::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in content.lines().enumerate().map(|(i, l)| (i + 1, l)) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default().trim().to_string();
        let values = fields
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| {
                    KgcmError::Format(format!(
                        "{source}: line {lineno}: non-numeric field `{}`",
                        f.trim()
                    ))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if id.is_empty() || values.is_empty() {
            return Err(KgcmError::Format(format!(
                "{source}: line {lineno}: expected `id,v1,...,vd`"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(KgcmError::Format(format!(
                "{source}: line {lineno}: non-finite value {v}"
            )));
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(KgcmError::Format(format!(
                    "{source}: line {lineno}: ragged embedding, {} values where earlier lines have {d}",
                    values.len()
                )))
            }
            Some(_) => {}
        }
        if map.contains_key(&id) {
            return Err(KgcmError::Format(format!(
                "{source}: line {lineno}: duplicate id `{id}`"
            )));
        }
        map.insert(id, TokenEmbeddings::from_rows(values.clone(), values));
    }
    Ok(map)
}

/// Which encoder backs [`TextEncoder`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Hashed,
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    dim: usize,
    table: Option<HashMap<String, TokenEmbeddings>>,
}

impl TextEncoder {
    pub fn hashed(dim: usize) -> Result<Self> {
        encode_hashed("", dim)?;
        Ok(Self { dim, table: None })
    }

    pub fn from_table(dim: usize, table: HashMap<String, TokenEmbeddings>) -> Result<Self> {
        if let Some((id, e)) = table.iter().find(|(_, e)| e.dim() != dim) {
            return Err(KgcmError::Config(format!(
                "embedding `{id}` has dimension {} but the model dimension is {dim}",
                e.dim()
            )));
        }
        Ok(Self {
            dim,
            table: Some(table),
        })
    }

    pub fn from_kind(kind: &EncoderKind, dim: usize) -> Result<Self> {
        match kind {
            EncoderKind::Hashed => Self::hashed(dim),
            EncoderKind::File(path) => Self::from_table(dim, load_embedding_file(path)?),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Hashed mode encodes the text; file mode looks the record up by id.
    /// Blank texts encode to no tokens in either mode.
    pub fn encode(&self, record: &TextRecord) -> Result<TokenEmbeddings> {
        match &self.table {
            None => encode_hashed(&record.text, self.dim),
            Some(_) if record.text.trim().is_empty() => Ok(TokenEmbeddings::empty(self.dim)),
            Some(table) => {
                let id = record.id.as_deref().unwrap_or("");
                table
                    .get(id)
                    .cloned()
                    .ok_or_else(|| KgcmError::MissingEmbedding(id.to_string()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_rules() {
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("Rush-hour DEMAND!"), ["rush", "hour", "demand"]);
        assert_eq!(tokenize("a  b"), ["a", "b"]);
    }

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn empty_text_is_zero() {
        let e = encode_hashed("", 8).unwrap();
        assert_eq!(e.num_tokens(), 0);
        assert_eq!(e.pooled(), &[0.0; 8]);
        assert!(encode_hashed("x", 1).is_err());
    }

    #[test]
    fn pooled_is_unit_norm() {
        let e = encode_hashed("holiday surge citywide", 16).unwrap();
        let n: f64 = e.pooled().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(e.num_tokens(), 3);
    }

    #[test]
    fn embedding_file_errors() {
        let m = parse_embeddings("r1_t0,0,0,0,0\n", "t").unwrap();
        assert_eq!(m["r1_t0"].pooled(), &[0.0; 4]);
        assert_eq!(m["r1_t0"].num_tokens(), 1);

        let dup = parse_embeddings("r1_t0,1,2\nr1_t0,3,4\n", "t").unwrap_err();
        assert!(dup.to_string().contains("duplicate"), "{dup}");

        let ragged = parse_embeddings("a,1,2,3\nb,1,2,3,4\n", "t").unwrap_err();
        assert!(ragged.to_string().contains("line 2"), "{ragged}");

        let bad = parse_embeddings("a,1,x\n", "t").unwrap_err();
        assert!(bad.to_string().contains("line 1"), "{bad}");
    }

    #[test]
    fn file_mode_dispatch() {
        let table = parse_embeddings("r1_t0,1,0\n", "t").unwrap();
        let enc = TextEncoder::from_table(2, table).unwrap();
        let hit = enc.encode(&TextRecord::new("r1_t0", "anything")).unwrap();
        assert_eq!(hit.pooled(), &[1.0, 0.0]);
        let miss = enc.encode(&TextRecord::new("r9_t3", "text")).unwrap_err();
        assert!(matches!(miss, KgcmError::MissingEmbedding(ref id) if id == "r9_t3"));
        assert_eq!(enc.encode(&TextRecord::new("r9_t3", "")).unwrap().num_tokens(), 0);
    }
}
