//! Three-view case representation: an LLM fact summary, the sentences
//! carrying suppression placeholders (issues), and the full text. The view
//! embeddings are concatenated in that order.

use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_whitespace, CaseDocument};
use crate::encoders::{toy_hash, EmbeddingStore, Encoder, EncoderError, Summarizer, DEFAULT_WORD_LIMIT};

pub const DEFAULT_PLACEHOLDERS: [&str; 4] = [
    "FRAGMENT_SUPPRESSED",
    "REFERENCE_SUPPRESSED",
    "CITATION_SUPPRESSED",
    "DATE_SUPPRESSED",
];

/// Stand-in text embedded for an empty view.
pub const EMPTY_VIEW_MARKER: &str = "EMPTYVIEW";

pub const DEFAULT_MAX_FULL_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum ViewError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("case {0} has empty text")]
    EmptyCase(String),
    #[error("invalid fact-section pattern: {0}")]
    Pattern(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed view file {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseViews {
    pub case_id: String,
    pub fact_text: String,
    pub issue_text: String,
    pub full_text: String,
}

#[derive(Debug, Clone)]
pub struct ViewOptions {
    pub placeholders: Vec<String>,
    pub word_limit: usize,
    /// When set and matching, the first capture group (or the whole match)
    /// is the factual section handed to the summarizer.
    pub fact_section: Option<Regex>,
    /// Token budget of the full-text view at encoding time.
    pub max_full_tokens: usize,
}

impl Default for ViewOptions {
    fn default() -> Self {
        Self {
            placeholders: DEFAULT_PLACEHOLDERS.iter().map(|s| s.to_string()).collect(),
            word_limit: DEFAULT_WORD_LIMIT,
            fact_section: None,
            max_full_tokens: DEFAULT_MAX_FULL_TOKENS,
        }
    }
}

impl ViewOptions {
    pub fn with_fact_section(mut self, pattern: &str) -> Result<Self, ViewError> {
        self.fact_section = Some(Regex::new(pattern).map_err(|e| ViewError::Pattern(e.to_string()))?);
        Ok(self)
    }
}

/// Splits after `.`, `?` or `!` when followed by whitespace or the end of
/// the text. Sentences keep their terminal punctuation.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '?' | '!') {
            let at_break = match chars.peek() {
                None => true,
                Some(&(_, next)) => next.is_whitespace(),
            };
            if at_break {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Sentences mentioning any placeholder, in document order, joined by
/// single spaces.
pub fn extract_issues(text: &str, placeholders: &[String]) -> String {
    split_sentences(text)
        .into_iter()
        .filter(|s| placeholders.iter().any(|p| s.contains(p.as_str())))
        .map(normalize_whitespace)
        .collect::<Vec<_>>()
        .join(" ")
}

fn fact_section<'a>(text: &'a str, opts: &ViewOptions) -> &'a str {
    if let Some(re) = &opts.fact_section {
        if let Some(caps) = re.captures(text) {
            let m = caps.get(1).or_else(|| caps.get(0)).expect("match exists");
            if !m.as_str().trim().is_empty() {
                return m.as_str();
            }
        }
    }
    text
}

pub fn build_views(case: &CaseDocument, summarizer: &Summarizer, opts: &ViewOptions) -> Result<CaseViews, ViewError> {
    let full_text = normalize_whitespace(&case.text);
    if full_text.is_empty() {
        return Err(ViewError::EmptyCase(case.id.clone()));
    }
    let fact_text = summarizer.summarize(&normalize_whitespace(fact_section(&case.text, opts)), opts.word_limit)?;
    Ok(CaseViews {
        case_id: case.id.clone(),
        fact_text,
        issue_text: extract_issues(&case.text, &opts.placeholders),
        full_text,
    })
}

/// Encodes view texts with a fixed encoder. External stores are keyed
/// `<case id>#fact`, `<case id>#issue` and `<case id>#full`.
pub enum ViewEncoder {
    ToyHash { dim: usize },
    Store(EmbeddingStore),
}

impl ViewEncoder {
    pub fn new(encoder: &Encoder) -> Result<Self, EncoderError> {
        Ok(match encoder {
            Encoder::ToyHash { dim } => ViewEncoder::ToyHash { dim: *dim },
            Encoder::ExternalFile { path } => ViewEncoder::Store(EmbeddingStore::read(path)?),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            ViewEncoder::ToyHash { dim } => *dim,
            ViewEncoder::Store(s) => s.dim(),
        }
    }

    fn embed(&self, case_id: &str, view: &str, text: &str) -> Result<Vec<f64>, EncoderError> {
        match self {
            ViewEncoder::ToyHash { dim } => {
                let text = if text.trim().is_empty() { EMPTY_VIEW_MARKER } else { text };
                Ok(toy_hash(text, *dim))
            }
            ViewEncoder::Store(s) => Ok(s.require(&format!("{case_id}#{view}"))?.to_vec()),
        }
    }
}

fn truncate_tokens(text: &str, budget: usize) -> String {
    text.split_whitespace().take(budget).collect::<Vec<_>>().join(" ")
}

/// `[emb(fact) | emb(issue) | emb(full)]`, length `3 * dim`.
pub fn encode_views(views: &CaseViews, encoder: &ViewEncoder, opts: &ViewOptions) -> Result<Vec<f64>, EncoderError> {
    let dim = encoder.dim();
    let mut out = Vec::with_capacity(3 * dim);
    let full = truncate_tokens(&views.full_text, opts.max_full_tokens);
    for (name, text) in [("fact", views.fact_text.as_str()), ("issue", views.issue_text.as_str()), ("full", full.as_str())] {
        let v = encoder.embed(&views.case_id, name, text)?;
        if v.len() != dim {
            return Err(EncoderError::DimMismatch {
                id: format!("{}#{name}", views.case_id),
                expected: dim,
                got: v.len(),
            });
        }
        out.extend(v);
    }
    Ok(out)
}

pub fn encode_all_views(
    views: &[CaseViews],
    encoder: &ViewEncoder,
    opts: &ViewOptions,
) -> Result<EmbeddingStore, EncoderError> {
    let mut store = EmbeddingStore::new(3 * encoder.dim());
    for v in views {
        store.insert(v.case_id.clone(), encode_views(v, encoder, opts)?)?;
    }
    Ok(store)
}

/// One `<case id>.json` per case.
pub fn write_views(dir: &Path, views: &[CaseViews]) -> Result<(), ViewError> {
    fs::create_dir_all(dir).map_err(|source| ViewError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for v in views {
        let p = dir.join(format!("{}.json", v.case_id));
        fs::write(&p, serde_json::to_string_pretty(v).expect("views serialize"))
            .map_err(|source| ViewError::Io { path: p, source })?;
    }
    Ok(())
}

pub fn read_views(dir: &Path) -> Result<Vec<CaseViews>, ViewError> {
    let io = |source| ViewError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let raw = fs::read_to_string(p).map_err(|source| ViewError::Io {
                path: p.clone(),
                source,
            })?;
            serde_json::from_str(&raw).map_err(|e| ViewError::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}
