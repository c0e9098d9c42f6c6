//! Unit-norm embedding vectors and the `embeddings.bin` / `embeddings.jsonl`
//! sidecar stores.
//!
//! Stores normalise raw vectors when they are read; everything downstream
//! (indexes, composition) requires unit norm and rejects anything else.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;
pub const STORE_MAGIC: &[u8; 6] = b"AFEMB1";

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding is empty")]
    Empty,
    #[error("embedding contains non-finite values")]
    NonFinite,
    #[error("embedding has zero norm")]
    ZeroNorm,
    #[error("embedding norm {0} is not 1")]
    NotUnit(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("unknown source tag {0}")]
    UnknownSource(u8),
    #[error("malformed embedding store: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    Image,
    Text,
    Composed,
}

impl EmbeddingSource {
    pub fn tag(self) -> u8 {
        match self {
            EmbeddingSource::Image => 0,
            EmbeddingSource::Text => 1,
            EmbeddingSource::Composed => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self, EmbeddingError> {
        match tag {
            0 => Ok(EmbeddingSource::Image),
            1 => Ok(EmbeddingSource::Text),
            2 => Ok(EmbeddingSource::Composed),
            other => Err(EmbeddingError::UnknownSource(other)),
        }
    }
}

fn l2_norm(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt()
}

/// Dense L2-unit vector tagged with what produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f32>,
    source: EmbeddingSource,
}

impl EmbeddingVector {
    /// Accepts `values` only if already unit-norm.
    pub fn new(values: Vec<f32>, source: EmbeddingSource) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(EmbeddingError::NotUnit(norm));
        }
        Ok(Self { values, source })
    }

    /// Scales `values` to unit norm.
    pub fn normalized(values: &[f32], source: EmbeddingSource) -> Result<Self, EmbeddingError> {
        let as_f64: Vec<f64> = values.iter().map(|&v| f64::from(v)).collect();
        Self::normalized_f64(&as_f64, source)
    }

    pub fn normalized_f64(values: &[f64], source: EmbeddingSource) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EmbeddingError::ZeroNorm);
        }
        Ok(Self {
            values: values.iter().map(|v| (v / norm) as f32).collect(),
            source,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn with_source(mut self, source: EmbeddingSource) -> Self {
        self.source = source;
        self
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Dot product accumulated in f64.
    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f64::from(a) * f64::from(b))
            .sum())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlEntry {
    id: String,
    source: EmbeddingSource,
    values: Vec<f32>,
}

/// Id-addressed embedding table with a fixed dimension. Insertion order is
/// preserved and determines file layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: Vec<(String, EmbeddingVector)>,
    by_id: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(
        &mut self,
        id: impl Into<String>,
        vector: EmbeddingVector,
    ) -> Result<(), EmbeddingError> {
        let id = id.into();
        if vector.dim() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                got: vector.dim(),
            });
        }
        if self.by_id.contains_key(&id) {
            return Err(EmbeddingError::DuplicateId(id));
        }
        self.by_id.insert(id.clone(), self.entries.len());
        self.entries.push((id, vector));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.by_id.get(id).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.entries.iter().map(|(id, v)| (id.as_str(), v))
    }

    /// Copy restricted to `ids`, in the order given. Unknown ids are skipped.
    pub fn subset<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Self {
        let mut out = Self::new(self.dim);
        for id in ids {
            if let Some(v) = self.get(id) {
                // ids are unique in the source store
                let _ = out.insert(id, v.clone());
            }
        }
        out
    }

    pub fn to_bin_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + self.entries.len() * (self.dim * 4 + 16));
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for (id, v) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            out.push(v.source.tag());
            for x in &v.values {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parses the binary layout; vectors are normalised on the way in.
    pub fn from_bin_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut cur = bytes;
        let magic = take(&mut cur, 6)?;
        if magic != STORE_MAGIC {
            return Err(EmbeddingError::Malformed("bad magic".into()));
        }
        let count = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(take(&mut cur, 4)?.try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(EmbeddingError::Malformed("zero dimension".into()));
        }
        let mut store = Self::new(dim);
        for _ in 0..count {
            let id_len = u16::from_le_bytes(take(&mut cur, 2)?.try_into().unwrap()) as usize;
            let id = std::str::from_utf8(take(&mut cur, id_len)?)
                .map_err(|_| EmbeddingError::Malformed("id is not UTF-8".into()))?
                .to_string();
            let source = EmbeddingSource::from_tag(take(&mut cur, 1)?[0])?;
            let raw = take(&mut cur, dim * 4)?;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(id, EmbeddingVector::normalized(&values, source)?)?;
        }
        if !cur.is_empty() {
            return Err(EmbeddingError::Malformed(format!(
                "{} trailing bytes",
                cur.len()
            )));
        }
        Ok(store)
    }

    /// Parses JSON lines of `{id, source, values}`. Blank lines are ignored.
    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut store: Option<Self> = None;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|source| EmbeddingError::Io {
                path: "<jsonl>".into(),
                source,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: JsonlEntry = serde_json::from_str(&line)
                .map_err(|e| EmbeddingError::Malformed(format!("line {}: {e}", lineno + 1)))?;
            let store = store.get_or_insert_with(|| Self::new(entry.values.len()));
            store.insert(
                entry.id,
                EmbeddingVector::normalized(&entry.values, entry.source)?,
            )?;
        }
        store.ok_or_else(|| EmbeddingError::Malformed("no entries".into()))
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (id, v) in &self.entries {
            let line = serde_json::to_string(&JsonlEntry {
                id: id.clone(),
                source: v.source,
                values: v.values.clone(),
            })?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }

    /// Loads `.bin` or `.jsonl` by extension.
    pub fn load(path: &Path) -> Result<Self, EmbeddingError> {
        let io = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        if path.extension().is_some_and(|e| e == "jsonl") {
            Self::from_jsonl(BufReader::new(file))
        } else {
            let mut bytes = Vec::new();
            BufReader::new(file).read_to_end(&mut bytes).map_err(io)?;
            Self::from_bin_bytes(&bytes)
        }
    }

    /// Looks for `embeddings.bin`, then `embeddings.jsonl`, in `dir`.
    pub fn load_from_dir(dir: &Path) -> Result<Self, EmbeddingError> {
        let bin = dir.join("embeddings.bin");
        if bin.exists() {
            return Self::load(&bin);
        }
        Self::load(&dir.join("embeddings.jsonl"))
    }

    pub fn save(&self, path: &Path) -> Result<(), EmbeddingError> {
        let io = |source| EmbeddingError::Io {
            path: path.display().to_string(),
            source,
        };
        if path.extension().is_some_and(|e| e == "jsonl") {
            let mut w = BufWriter::new(File::create(path).map_err(io)?);
            self.write_jsonl(&mut w).map_err(io)?;
            w.flush().map_err(io)
        } else {
            std::fs::write(path, self.to_bin_bytes()).map_err(io)
        }
    }
}

fn take<'a>(cur: &mut &'a [u8], n: usize) -> Result<&'a [u8], EmbeddingError> {
    if cur.len() < n {
        return Err(EmbeddingError::Malformed("truncated".into()));
    }
    let (head, tail) = cur.split_at(n);
    *cur = tail;
    Ok(head)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::normalized(v, EmbeddingSource::Image).unwrap()
    }

    #[test]
    fn rejects_non_unit() {
        assert!(matches!(
            EmbeddingVector::new(vec![1.0, 1.0], EmbeddingSource::Text),
            Err(EmbeddingError::NotUnit(_))
        ));
        assert!(EmbeddingVector::new(vec![0.6, 0.8], EmbeddingSource::Text).is_ok());
        assert!(matches!(
            EmbeddingVector::normalized(&[0.0, 0.0], EmbeddingSource::Text),
            Err(EmbeddingError::ZeroNorm)
        ));
        assert!(matches!(
            EmbeddingVector::new(vec![], EmbeddingSource::Text),
            Err(EmbeddingError::Empty)
        ));
    }

    #[test]
    fn bin_layout_is_exact() {
        let mut s = EmbeddingStore::new(2);
        s.insert(
            "ab",
            EmbeddingVector::new(vec![0.6, 0.8], EmbeddingSource::Text).unwrap(),
        )
        .unwrap();
        let bytes = s.to_bin_bytes();
        let mut expected = b"AFEMB1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&0.6f32.to_le_bytes());
        expected.extend_from_slice(&0.8f32.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn bin_loader_normalizes_and_validates() {
        let mut raw = b"AFEMB1".to_vec();
        raw.extend_from_slice(&1u32.to_le_bytes());
        raw.extend_from_slice(&2u32.to_le_bytes());
        raw.extend_from_slice(&1u16.to_le_bytes());
        raw.push(b'x');
        raw.push(0);
        raw.extend_from_slice(&3.0f32.to_le_bytes());
        raw.extend_from_slice(&4.0f32.to_le_bytes());
        let s = EmbeddingStore::from_bin_bytes(&raw).unwrap();
        let v = s.get("x").unwrap();
        assert!((v.values()[0] - 0.6).abs() < 1e-6);
        assert!((v.norm() - 1.0).abs() < 1e-6);

        let mut truncated = raw.clone();
        truncated.pop();
        assert!(matches!(
            EmbeddingStore::from_bin_bytes(&truncated),
            Err(EmbeddingError::Malformed(_))
        ));
        raw[0] = b'Z';
        assert!(EmbeddingStore::from_bin_bytes(&raw).is_err());
    }

    #[test]
    fn jsonl_fallback_loads() {
        let text = "{\"id\":\"a\",\"source\":\"image\",\"values\":[2.0,0.0]}\n\n{\"id\":\"b\",\"source\":\"composed\",\"values\":[0.0,1.0]}\n";
        let s = EmbeddingStore::from_jsonl(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.get("a").unwrap().values(), &[1.0, 0.0]);
        assert_eq!(s.get("b").unwrap().source(), EmbeddingSource::Composed);
    }

    #[test]
    fn duplicate_and_dim_errors() {
        let mut s = EmbeddingStore::new(2);
        s.insert("a", unit(&[1.0, 0.0])).unwrap();
        assert!(matches!(
            s.insert("a", unit(&[0.0, 1.0])),
            Err(EmbeddingError::DuplicateId(_))
        ));
        assert!(matches!(
            s.insert("b", unit(&[1.0, 0.0, 0.0])),
            Err(EmbeddingError::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn bin_round_trip(vals in proptest::collection::vec(
            proptest::collection::vec(-10.0f32..10.0, 4), 1..8)) {
            let mut s = EmbeddingStore::new(4);
            for (i, v) in vals.iter().enumerate() {
                if let Ok(e) = EmbeddingVector::normalized(v, EmbeddingSource::Image) {
                    s.insert(format!("img-{i}"), e).unwrap();
                }
            }
            let back = EmbeddingStore::from_bin_bytes(&s.to_bin_bytes()).unwrap();
            prop_assert_eq!(back.len(), s.len());
            for (id, v) in s.iter() {
                let w = back.get(id).unwrap();
                for (a, b) in v.values().iter().zip(w.values()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}
