//! Text encoders and the embedding store holding every initial feature
//! vector, plus the chat-completion summarizer used for fact views.

mod llm;
mod store;

use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::tokenize;

pub use llm::{LlmBackendConfig, LlmMode, Summarizer, DEFAULT_PROMPT_TEMPLATE, DEFAULT_WORD_LIMIT};
pub use store::EmbeddingStore;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding file {path} line {line}: {reason}")]
    Format {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("dimension mismatch for `{id}`: expected {expected}, got {got}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("non-finite value in vector `{0}`")]
    NonFinite(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("no embedding for id `{0}`")]
    MissingId(String),
    #[error("unknown encoder `{0}` (expected toy-hash or external-file)")]
    UnknownEncoder(String),
    #[error("nothing to encode")]
    EmptyInput,
    #[error("llm request failed after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Http {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("llm returned an empty completion")]
    EmptyCompletion,
    #[error("llm configuration: {0}")]
    Config(String),
}

/// Which encoder produces the vectors.
#[derive(Debug, Clone, PartialEq)]
pub enum Encoder {
    /// Feature hashing of token counts into `dim` buckets, L2-normalized.
    ToyHash { dim: usize },
    /// Vectors read verbatim from an [`EmbeddingStore`] file.
    ExternalFile { path: PathBuf },
}

impl Encoder {
    /// Parses `toy-hash` or `external-file` with the matching setting.
    pub fn from_id(encoder_id: &str, dim: usize, path: Option<PathBuf>) -> Result<Self, EncoderError> {
        match encoder_id {
            "toy-hash" => Ok(Encoder::ToyHash { dim }),
            "external-file" => path
                .map(|path| Encoder::ExternalFile { path })
                .ok_or_else(|| EncoderError::Config("external-file encoder needs a path".into())),
            other => Err(EncoderError::UnknownEncoder(other.to_string())),
        }
    }
}

/// FNV-1a, 64 bit.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Bucket a token lands in under the toy-hash encoder.
pub fn toy_hash_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

const BIAS_TOKEN: &str = "\u{0}bias";

/// Toy-hash embedding of one text. A text without tokens maps to a unit
/// vector on the bias bucket, so the result is never zero.
pub fn toy_hash(text: &str, dim: usize) -> Vec<f64> {
    assert!(dim > 0, "toy-hash dimension must be positive");
    let mut v = vec![0.0; dim];
    let tokens = tokenize(text);
    if tokens.is_empty() {
        v[toy_hash_bucket(BIAS_TOKEN, dim)] = 1.0;
        return v;
    }
    for t in &tokens {
        v[toy_hash_bucket(t, dim)] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Encodes `(id, text)` pairs into a store.
pub fn encode_texts(encoder: &Encoder, texts: &[(String, String)]) -> Result<EmbeddingStore, EncoderError> {
    if texts.is_empty() {
        return Err(EncoderError::EmptyInput);
    }
    match encoder {
        Encoder::ToyHash { dim } => {
            let mut store = EmbeddingStore::new(*dim);
            for (id, text) in texts {
                store.insert(id.clone(), toy_hash(text, *dim))?;
            }
            Ok(store)
        }
        Encoder::ExternalFile { path } => {
            let full = EmbeddingStore::read(path)?;
            let mut store = EmbeddingStore::new(full.dim());
            for (id, _) in texts {
                let v = full.get(id).ok_or_else(|| EncoderError::MissingId(id.clone()))?;
                store.insert(id.clone(), v.to_vec())?;
            }
            Ok(store)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::tensor::{cosine, l2_norm};

    #[test]
    fn toy_hash_is_deterministic_and_unit_norm() {
        let a = toy_hash("The court dismissed the appeal", 64);
        let b = toy_hash("The court dismissed the appeal", 64);
        assert_eq!(a, b);
        assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        assert!((l2_norm(&toy_hash("?!", 64)) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_vocabularies_are_orthogonal() {
        let dim = 4096;
        let left = ["appeal", "court", "statute"];
        let right = ["zoning", "permit", "levy"];
        // brute force: confirm no bucket is shared before asserting orthogonality
        let lb: Vec<usize> = left.iter().map(|t| toy_hash_bucket(t, dim)).collect();
        assert!(right.iter().all(|t| !lb.contains(&toy_hash_bucket(t, dim))));
        let c = cosine(&toy_hash(&left.join(" "), dim), &toy_hash(&right.join(" "), dim)).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn encoder_ids() {
        assert_eq!(Encoder::from_id("toy-hash", 8, None).unwrap(), Encoder::ToyHash { dim: 8 });
        assert!(matches!(Encoder::from_id("sailer", 8, None), Err(EncoderError::UnknownEncoder(_))));
        assert!(Encoder::from_id("external-file", 8, None).is_err());
    }

    #[test]
    fn external_file_missing_id_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        let mut s = EmbeddingStore::new(2);
        s.insert("a".into(), vec![1.0, 0.0]).unwrap();
        s.write(&path).unwrap();
        let enc = Encoder::ExternalFile { path };
        let ok = encode_texts(&enc, &[("a".into(), "x".into())]).unwrap();
        assert_eq!(ok.get("a").unwrap(), &[1.0, 0.0]);
        let err = encode_texts(&enc, &[("b".into(), "y".into())]).unwrap_err();
        assert!(err.to_string().contains("`b`"));
    }
}
