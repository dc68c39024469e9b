//! Case documents, charges, relevance labels and the on-disk dataset layout.
//!
//! A dataset root holds one directory per split:
//!
//! ```text
//! <root>/<split>/queries/<id>.txt
//! <root>/<split>/candidates/<id>.txt
//! <root>/<split>/labels.json        {"<query id>": ["<candidate id>", ...]}
//! <root>/<split>/meta.json          optional {"<id>": {"year": 2019}}
//! <root>/charges.tsv                one `name<TAB>description` per line
//! ```

mod synth;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{generate_synthetic, SynthConfig, SynthSummary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing directory {0}")]
    MissingDirectory(PathBuf),
    #[error("empty candidate pool in {0}")]
    EmptyCandidatePool(PathBuf),
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("invalid charge list line {line}: {reason}")]
    ChargeLine { line: usize, reason: String },
    #[error("invalid synthetic corpus configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Lowercased tokens split on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Collapses every whitespace run to a single space and trims the ends.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaseRole {
    Query,
    Candidate,
    Both,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseDocument {
    pub id: String,
    pub text: String,
    pub year: Option<i32>,
    pub role: CaseRole,
}

impl CaseDocument {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            year: None,
            role: CaseRole::Candidate,
        }
    }

    pub fn with_year(mut self, year: i32) -> Self {
        self.year = Some(year);
        self
    }

    pub fn with_role(mut self, role: CaseRole) -> Self {
        self.role = role;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChargeEntry {
    pub name: String,
    pub description: String,
}

/// Query id to the set of relevant candidate ids.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RelevanceLabels(pub BTreeMap<String, BTreeSet<String>>);

impl RelevanceLabels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: impl Into<String>, candidate: impl Into<String>) {
        self.0.entry(query.into()).or_default().insert(candidate.into());
    }

    pub fn relevant(&self, query: &str) -> Option<&BTreeSet<String>> {
        self.0.get(query)
    }

    pub fn is_relevant(&self, query: &str, candidate: &str) -> bool {
        self.0.get(query).is_some_and(|s| s.contains(candidate))
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&String, &String)> {
        self.0.iter().flat_map(|(q, cs)| cs.iter().map(move |c| (q, c)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: String,
    pub queries: Vec<CaseDocument>,
    pub candidates: Vec<CaseDocument>,
    pub labels: RelevanceLabels,
}

impl DatasetSplit {
    /// Checks id uniqueness, non-empty texts and label consistency,
    /// collecting every offence.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut problems = Vec::new();
        let mut check_pool = |pool: &[CaseDocument], what: &str| {
            let mut seen = HashSet::new();
            for d in pool {
                if d.id.is_empty() {
                    problems.push(format!("empty {what} id"));
                } else if !seen.insert(d.id.as_str()) {
                    problems.push(format!("duplicate {what} id {}", d.id));
                }
                if normalize_whitespace(&d.text).is_empty() {
                    problems.push(format!("{what} {} has empty text", d.id));
                }
            }
        };
        check_pool(&self.queries, "query");
        check_pool(&self.candidates, "candidate");

        let queries: HashSet<&str> = self.queries.iter().map(|d| d.id.as_str()).collect();
        let candidates: HashSet<&str> = self.candidates.iter().map(|d| d.id.as_str()).collect();
        for (q, rel) in &self.labels.0 {
            if !queries.contains(q.as_str()) {
                problems.push(format!("labels reference unknown query {q}"));
            }
            for c in rel {
                if !candidates.contains(c.as_str()) {
                    problems.push(format!("labels reference unknown candidate {c}"));
                }
                if c == q {
                    problems.push(format!("query {q} is labelled relevant to itself"));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CorpusError::Validation(problems))
        }
    }

    /// Queries followed by candidates not already listed as queries.
    pub fn pool(&self) -> Vec<&CaseDocument> {
        let query_ids: HashSet<&str> = self.queries.iter().map(|d| d.id.as_str()).collect();
        self.queries
            .iter()
            .chain(self.candidates.iter().filter(|d| !query_ids.contains(d.id.as_str())))
            .collect()
    }

    pub fn case_ids(&self) -> BTreeSet<String> {
        self.pool().into_iter().map(|d| d.id.clone()).collect()
    }
}

/// Fails when two splits share any case id.
pub fn check_disjoint(a: &DatasetSplit, b: &DatasetSplit) -> Result<(), CorpusError> {
    let ids_a = a.case_ids();
    let shared: Vec<String> = b
        .case_ids()
        .into_iter()
        .filter(|id| ids_a.contains(id))
        .map(|id| format!("id {id} appears in splits {} and {}", a.name, b.name))
        .collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(CorpusError::Validation(shared))
    }
}

#[derive(Debug, Deserialize)]
struct MetaEntry {
    year: Option<i32>,
}

fn read_text_dir(dir: &Path) -> Result<Vec<(String, String)>, CorpusError> {
    if !dir.is_dir() {
        return Err(CorpusError::MissingDirectory(dir.to_path_buf()));
    }
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .par_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            Ok((id, text))
        })
        .collect()
}

/// Loads and validates `<root>/<split>`.
pub fn load_dataset(root: &Path, split: &str) -> Result<DatasetSplit, CorpusError> {
    let base = root.join(split);
    if !base.is_dir() {
        return Err(CorpusError::MissingDirectory(base));
    }
    let query_files = read_text_dir(&base.join("queries"))?;
    let candidate_files = read_text_dir(&base.join("candidates"))?;
    if candidate_files.is_empty() {
        return Err(CorpusError::EmptyCandidatePool(base.join("candidates")));
    }

    let meta_path = base.join("meta.json");
    let meta: BTreeMap<String, MetaEntry> = if meta_path.is_file() {
        let raw = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        serde_json::from_str(&raw).map_err(|source| CorpusError::Json {
            path: meta_path.clone(),
            source,
        })?
    } else {
        BTreeMap::new()
    };

    let labels_path = base.join("labels.json");
    let raw = fs::read_to_string(&labels_path).map_err(io_err(&labels_path))?;
    let labels: RelevanceLabels = serde_json::from_str(&raw).map_err(|source| CorpusError::Json {
        path: labels_path.clone(),
        source,
    })?;

    let query_ids: HashSet<&str> = query_files.iter().map(|(id, _)| id.as_str()).collect();
    let candidate_ids: HashSet<&str> = candidate_files.iter().map(|(id, _)| id.as_str()).collect();
    let build = |(id, text): &(String, String), default: CaseRole| {
        let role = if query_ids.contains(id.as_str()) && candidate_ids.contains(id.as_str()) {
            CaseRole::Both
        } else {
            default
        };
        CaseDocument {
            id: id.clone(),
            text: text.clone(),
            year: meta.get(id).and_then(|m| m.year),
            role,
        }
    };

    let split = DatasetSplit {
        name: split.to_string(),
        queries: query_files.iter().map(|f| build(f, CaseRole::Query)).collect(),
        candidates: candidate_files
            .iter()
            .map(|f| build(f, CaseRole::Candidate))
            .collect(),
        labels,
    };
    split.validate()?;
    Ok(split)
}

/// Writes a split in the layout [`load_dataset`] reads.
pub fn write_dataset(root: &Path, split: &DatasetSplit) -> Result<(), CorpusError> {
    let base = root.join(&split.name);
    for (dir, docs) in [("queries", &split.queries), ("candidates", &split.candidates)] {
        let d = base.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
        for doc in docs {
            let p = d.join(format!("{}.txt", doc.id));
            fs::write(&p, &doc.text).map_err(io_err(&p))?;
        }
    }
    let labels_path = base.join("labels.json");
    let labels = serde_json::to_string_pretty(&split.labels).expect("labels serialize");
    fs::write(&labels_path, labels).map_err(io_err(&labels_path))?;

    let mut meta = BTreeMap::new();
    for d in split.queries.iter().chain(&split.candidates) {
        if let Some(y) = d.year {
            meta.insert(d.id.clone(), serde_json::json!({ "year": y }));
        }
    }
    if !meta.is_empty() {
        let p = base.join("meta.json");
        let raw = serde_json::to_string_pretty(&meta).expect("meta serialize");
        fs::write(&p, raw).map_err(io_err(&p))?;
    }
    Ok(())
}

/// Parses `name<TAB>description` lines; blank lines and `#` comments are
/// skipped. A line without a tab uses the name as its description.
pub fn parse_charges(raw: &str) -> Result<Vec<ChargeEntry>, CorpusError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (name, description) = match line.split_once('\t') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (line.trim(), line.trim()),
        };
        if name.is_empty() {
            return Err(CorpusError::ChargeLine {
                line: i + 1,
                reason: "empty charge name".into(),
            });
        }
        if !seen.insert(name.to_lowercase()) {
            return Err(CorpusError::ChargeLine {
                line: i + 1,
                reason: format!("duplicate charge name `{name}`"),
            });
        }
        out.push(ChargeEntry {
            name: name.to_string(),
            description: description.to_string(),
        });
    }
    Ok(out)
}

pub fn load_charges(path: &Path) -> Result<Vec<ChargeEntry>, CorpusError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    parse_charges(&raw)
}

pub fn format_charges(charges: &[ChargeEntry]) -> String {
    charges
        .iter()
        .map(|c| format!("{}\t{}\n", c.name, c.description))
        .collect()
}

/// Restricts the candidate pool to `year <= max_year` and prunes labels to
/// match. Candidates without a year are kept; each one yields a warning.
pub fn filter_by_year(split: &DatasetSplit, max_year: i32) -> (DatasetSplit, Vec<String>) {
    let mut warnings = Vec::new();
    let candidates: Vec<CaseDocument> = split
        .candidates
        .iter()
        .filter(|d| match d.year {
            Some(y) => y <= max_year,
            None => {
                warnings.push(format!("candidate {} has no year; kept", d.id));
                true
            }
        })
        .cloned()
        .collect();
    if candidates.is_empty() {
        warnings.push(format!(
            "no candidate of split {} is dated {max_year} or earlier; pool is empty",
            split.name
        ));
    }
    let kept: HashSet<&str> = candidates.iter().map(|d| d.id.as_str()).collect();
    let mut labels = RelevanceLabels::new();
    for (q, rel) in &split.labels.0 {
        let rel: BTreeSet<String> = rel.iter().filter(|c| kept.contains(c.as_str())).cloned().collect();
        if !rel.is_empty() {
            labels.0.insert(q.clone(), rel);
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    (
        DatasetSplit {
            name: split.name.clone(),
            queries: split.queries.clone(),
            candidates,
            labels,
        },
        warnings,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatisticsReport {
    pub split: String,
    pub num_queries: usize,
    pub num_candidates: usize,
    pub avg_relevant_per_query: f64,
    pub avg_case_length: f64,
    pub max_case_length: usize,
}

/// Counts and token-length statistics over the split's distinct cases.
pub fn dataset_statistics(split: &DatasetSplit) -> StatisticsReport {
    let lengths: Vec<usize> = split.pool().iter().map(|d| tokenize(&d.text).len()).collect();
    let avg_relevant = if split.labels.is_empty() {
        0.0
    } else {
        split.labels.0.values().map(|s| s.len()).sum::<usize>() as f64 / split.labels.len() as f64
    };
    StatisticsReport {
        split: split.name.clone(),
        num_queries: split.queries.len(),
        num_candidates: split.candidates.len(),
        avg_relevant_per_query: avg_relevant,
        avg_case_length: if lengths.is_empty() {
            0.0
        } else {
            lengths.iter().sum::<usize>() as f64 / lengths.len() as f64
        },
        max_case_length: lengths.iter().copied().max().unwrap_or(0),
    }
}
