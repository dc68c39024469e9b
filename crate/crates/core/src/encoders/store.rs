use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EncoderError;

/// Id-keyed vectors of one fixed dimension.
///
/// On disk: a `{"dim": n}` header line followed by one
/// `{"id": ..., "vector": [...]}` line per entry, ids ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct Entry<'a> {
    #[serde(borrow)]
    id: std::borrow::Cow<'a, str>,
    vector: std::borrow::Cow<'a, [f64]>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.vectors.get(id).map(Vec::as_slice)
    }

    pub fn require(&self, id: &str) -> Result<&[f64], EncoderError> {
        self.get(id).ok_or_else(|| EncoderError::MissingId(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.vectors.contains_key(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.vectors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.vectors.iter()
    }

    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<(), EncoderError> {
        if vector.len() != self.dim {
            return Err(EncoderError::DimMismatch {
                id,
                expected: self.dim,
                got: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite(id));
        }
        if self.vectors.contains_key(&id) {
            return Err(EncoderError::DuplicateId(id));
        }
        self.vectors.insert(id, vector);
        Ok(())
    }

    /// Adds every entry of `other`; dimensions must agree and ids must not
    /// collide.
    pub fn extend(&mut self, other: &EmbeddingStore) -> Result<(), EncoderError> {
        for (id, v) in other.iter() {
            self.insert(id.clone(), v.clone())?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&Header { dim: self.dim }).expect("header");
        out.push('\n');
        for (id, v) in &self.vectors {
            let e = Entry {
                id: id.as_str().into(),
                vector: v.as_slice().into(),
            };
            out.push_str(&serde_json::to_string(&e).expect("entry"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), EncoderError> {
        let io = |source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, EncoderError> {
        let io = |source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        };
        let reader = BufReader::new(fs::File::open(path).map_err(io)?);
        let fmt = |line: usize, reason: String| EncoderError::Format {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut store: Option<Self> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            match &mut store {
                None => {
                    let h: Header = serde_json::from_str(&line).map_err(|e| fmt(i + 1, e.to_string()))?;
                    store = Some(Self::new(h.dim));
                }
                Some(s) => {
                    let e: Entry = serde_json::from_str(&line).map_err(|e| fmt(i + 1, e.to_string()))?;
                    s.insert(e.id.into_owned(), e.vector.into_owned())?;
                }
            }
        }
        store.ok_or_else(|| fmt(0, "missing header line".into()))
    }
}
