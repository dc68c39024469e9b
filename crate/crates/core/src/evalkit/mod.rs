//! Retrieval metrics at a cutoff, a Monte-Carlo random baseline and the
//! subset-level paired t-test used to compare runs.

mod metrics;
mod ttest;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::lexical::RankingLine;

pub use metrics::{evaluate, evaluate_with, random_baseline, EvalOptions, Metric, MetricReport, QueryMetrics};
pub use ttest::{paired_ttest, partition_queries, subset_ttest, PairedTTest, TestReport};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("query {0} has no relevance labels")]
    MissingLabels(String),
    #[error("query {query} ranks candidate {candidate} twice")]
    DuplicateCandidate { query: String, candidate: String },
    #[error("scores for query {0} are not in non-increasing order")]
    NotSorted(String),
    #[error("runs cover different query sets ({only_a} only in the first, {only_b} only in the second)")]
    QueryMismatch { only_a: usize, only_b: usize },
    #[error("{queries} queries cannot be split into {subsets} subsets")]
    TooFewQueries { queries: usize, subsets: usize },
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run file line {line}: {reason}")]
    Format { line: usize, reason: String },
}

/// Per-query ranked candidates with scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalRun {
    rankings: BTreeMap<String, Vec<(String, f64)>>,
}

impl RetrievalRun {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one query's ranking; rejects duplicates and increasing scores.
    pub fn insert(&mut self, query: impl Into<String>, ranking: Vec<(String, f64)>) -> Result<(), EvalError> {
        let query = query.into();
        let mut seen = HashSet::new();
        for (c, _) in &ranking {
            if !seen.insert(c.as_str()) {
                return Err(EvalError::DuplicateCandidate {
                    query,
                    candidate: c.clone(),
                });
            }
        }
        if ranking.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(EvalError::NotSorted(query));
        }
        self.rankings.insert(query, ranking);
        Ok(())
    }

    /// Builds a run from ids alone, scoring by descending position.
    pub fn from_ids(rankings: BTreeMap<String, Vec<String>>) -> Result<Self, EvalError> {
        let mut run = Self::new();
        for (q, ids) in rankings {
            let n = ids.len();
            let scored = ids.into_iter().enumerate().map(|(i, id)| (id, (n - i) as f64)).collect();
            run.insert(q, scored)?;
        }
        Ok(run)
    }

    pub fn ranking(&self, query: &str) -> Option<&[(String, f64)]> {
        self.rankings.get(query).map(Vec::as_slice)
    }

    pub fn queries(&self) -> impl Iterator<Item = &String> {
        self.rankings.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<(String, f64)>)> {
        self.rankings.iter()
    }

    pub fn len(&self) -> usize {
        self.rankings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rankings.is_empty()
    }

    /// Restriction to the given queries.
    pub fn subset<'a>(&self, queries: impl IntoIterator<Item = &'a String>) -> Self {
        let rankings = queries
            .into_iter()
            .filter_map(|q| self.rankings.get(q).map(|r| (q.clone(), r.clone())))
            .collect();
        Self { rankings }
    }

    /// One [`RankingLine`] JSON object per query, ids ascending.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (q, r) in &self.rankings {
            let line = RankingLine {
                query: q.clone(),
                ranking: r.iter().map(|(c, _)| c.clone()).collect(),
                scores: r.iter().map(|(_, s)| *s).collect(),
            };
            out.push_str(&serde_json::to_string(&line).expect("ranking line"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(raw: &str) -> Result<Self, EvalError> {
        let mut run = Self::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: RankingLine = serde_json::from_str(line).map_err(|e| EvalError::Format {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if l.ranking.len() != l.scores.len() {
                return Err(EvalError::Format {
                    line: i + 1,
                    reason: "ranking and scores differ in length".into(),
                });
            }
            run.insert(l.query, l.ranking.into_iter().zip(l.scores).collect())?;
        }
        Ok(run)
    }

    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_jsonl()).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, EvalError> {
        let raw = fs::read_to_string(path).map_err(|source| EvalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_jsonl(&raw)
    }
}
