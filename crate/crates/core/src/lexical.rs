//! Okapi BM25 over the corpus tokenizer.
//!
//! Scores use `idf = ln(1 + (N - df + 0.5) / (df + 0.5))`, which keeps every
//! score non-negative, and sum over the distinct terms of the query text.
//! Rankings break score ties by ascending document id.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, CaseDocument, RelevanceLabels};

pub const DEFAULT_K1: f64 = 1.5;
pub const DEFAULT_B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum LexicalError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("duplicate document id {0}")]
    DuplicateId(String),
    #[error("unknown document id {0}")]
    UnknownId(String),
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    k1: f64,
    b: f64,
    ids: Vec<String>,
    position: HashMap<String, usize>,
    doc_len: Vec<usize>,
    avgdl: f64,
    /// term -> (doc index, term frequency), doc indices ascending.
    postings: HashMap<String, Vec<(usize, u32)>>,
}

impl Bm25Index {
    pub fn build(docs: &[CaseDocument], k1: f64, b: f64) -> Result<Self, LexicalError> {
        Self::build_from(docs.iter().map(|d| (d.id.as_str(), d.text.as_str())), k1, b)
    }

    /// Indexes `(id, text)` pairs.
    pub fn build_from<'a>(
        docs: impl IntoIterator<Item = (&'a str, &'a str)>,
        k1: f64,
        b: f64,
    ) -> Result<Self, LexicalError> {
        let mut ids = Vec::new();
        let mut position = HashMap::new();
        let mut doc_len = Vec::new();
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        for (id, text) in docs {
            let idx = ids.len();
            if position.insert(id.to_string(), idx).is_some() {
                return Err(LexicalError::DuplicateId(id.to_string()));
            }
            ids.push(id.to_string());
            let tokens = tokenize(text);
            doc_len.push(tokens.len());
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((idx, f));
            }
        }
        if ids.is_empty() {
            return Err(LexicalError::EmptyCorpus);
        }
        let avgdl = doc_len.iter().sum::<usize>() as f64 / ids.len() as f64;
        Ok(Self {
            k1,
            b,
            ids,
            position,
            doc_len,
            avgdl,
            postings,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.ids.len()
    }

    pub fn avgdl(&self) -> f64 {
        self.avgdl
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn doc_len(&self, id: &str) -> Option<usize> {
        self.position.get(id).map(|&i| self.doc_len[i])
    }

    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.num_docs() as f64;
        let df = self.doc_freq(term) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, idf: f64, tf: f64, len: usize) -> f64 {
        let norm = self.k1 * (1.0 - self.b + self.b * len as f64 / self.avgdl);
        idf * tf * (self.k1 + 1.0) / (tf + norm)
    }

    /// BM25 of `query_text` against one indexed document.
    pub fn score(&self, query_text: &str, doc_id: &str) -> Result<f64, LexicalError> {
        let idx = *self
            .position
            .get(doc_id)
            .ok_or_else(|| LexicalError::UnknownId(doc_id.to_string()))?;
        let terms: BTreeSet<String> = tokenize(query_text).into_iter().collect();
        let mut s = 0.0;
        for t in &terms {
            if let Some(list) = self.postings.get(t) {
                if let Ok(p) = list.binary_search_by_key(&idx, |&(d, _)| d) {
                    s += self.term_score(self.idf(t), list[p].1 as f64, self.doc_len[idx]);
                }
            }
        }
        Ok(s)
    }

    /// Scores of `query_text` against every document, in index order.
    pub fn score_all(&self, query_text: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.num_docs()];
        let terms: BTreeSet<String> = tokenize(query_text).into_iter().collect();
        for t in &terms {
            if let Some(list) = self.postings.get(t) {
                let idf = self.idf(t);
                for &(d, tf) in list {
                    scores[d] += self.term_score(idf, tf as f64, self.doc_len[d]);
                }
            }
        }
        scores
    }

    /// Every document ranked by descending score, ids ascending on ties.
    pub fn ranked(&self, query_text: &str) -> Vec<(String, f64)> {
        let scores = self.score_all(query_text);
        let mut order: Vec<usize> = (0..self.num_docs()).collect();
        order.sort_by(|&a, &b| by_score_then_id((&self.ids[a], scores[a]), (&self.ids[b], scores[b])));
        order.into_iter().map(|i| (self.ids[i].clone(), scores[i])).collect()
    }
}

/// Descending score, then ascending id.
pub fn by_score_then_id(a: (&String, f64), b: (&String, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

pub fn build_index(docs: &[CaseDocument], k1: f64, b: f64) -> Result<Bm25Index, LexicalError> {
    Bm25Index::build(docs, k1, b)
}

/// Per-case top-`k` most similar other cases in `pool`, as undirected
/// pairs `(a, b)` with `a < b`. `index` must cover the pool.
pub fn top_k_pairs(
    index: &Bm25Index,
    pool: &[CaseDocument],
    k: usize,
) -> Result<BTreeSet<(String, String)>, LexicalError> {
    for d in pool {
        if index.doc_len(&d.id).is_none() {
            return Err(LexicalError::UnknownId(d.id.clone()));
        }
    }
    let in_pool: BTreeSet<&str> = pool.iter().map(|d| d.id.as_str()).collect();
    let per_case: Vec<Vec<String>> = pool
        .par_iter()
        .map(|d| {
            index
                .ranked(&d.text)
                .into_iter()
                .filter(|(id, _)| id != &d.id && in_pool.contains(id.as_str()))
                .take(k)
                .map(|(id, _)| id)
                .collect()
        })
        .collect();
    let mut pairs = BTreeSet::new();
    for (d, nbrs) in pool.iter().zip(per_case) {
        for n in nbrs {
            let pair = if d.id < n { (d.id.clone(), n) } else { (n, d.id.clone()) };
            pairs.insert(pair);
        }
    }
    Ok(pairs)
}

/// The top `n` indexed documents for `query` (never the query itself).
pub fn rank_candidates(index: &Bm25Index, query: &CaseDocument, n: usize) -> Vec<(String, f64)> {
    index
        .ranked(&query.text)
        .into_iter()
        .filter(|(id, _)| id != &query.id)
        .take(n)
        .collect()
}

/// The `n_hard` best-scoring candidates that are not relevant to `query`.
/// Returns fewer, with a warning, when the pool runs out.
pub fn mine_hard_negatives(
    index: &Bm25Index,
    query: &CaseDocument,
    labels: &RelevanceLabels,
    n_hard: usize,
) -> Vec<String> {
    if n_hard == 0 {
        return Vec::new();
    }
    let out: Vec<String> = index
        .ranked(&query.text)
        .into_iter()
        .filter(|(id, _)| id != &query.id && !labels.is_relevant(&query.id, id))
        .take(n_hard)
        .map(|(id, _)| id)
        .collect();
    if out.len() < n_hard {
        log::warn!(
            "query {}: only {} of {} hard negatives available",
            query.id,
            out.len(),
            n_hard
        );
    }
    out
}

/// One line of a ranked-list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingLine {
    pub query: String,
    pub ranking: Vec<String>,
    pub scores: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(texts: &[(&str, &str)]) -> Vec<CaseDocument> {
        texts.iter().map(|(i, t)| CaseDocument::new(*i, *t)).collect()
    }

    fn toy() -> Vec<CaseDocument> {
        docs(&[("D1", "a b"), ("D2", "b c"), ("D3", "c d c")])
    }

    #[test]
    fn index_statistics() {
        let idx = build_index(&toy(), DEFAULT_K1, DEFAULT_B).unwrap();
        assert_eq!(idx.num_docs(), 3);
        assert!((idx.avgdl() - 7.0 / 3.0).abs() < 1e-12);
        assert_eq!(build_index(&[], 1.5, 0.75).unwrap_err(), LexicalError::EmptyCorpus);
        let dup = docs(&[("x", "a"), ("x", "b")]);
        assert_eq!(build_index(&dup, 1.5, 0.75).unwrap_err(), LexicalError::DuplicateId("x".into()));
    }

    #[test]
    fn hand_evaluated_score() {
        // idf(c) = ln(1 + 1.5/2.5); tf = 2, dl = 3, avgdl = 7/3
        let idf = (1.6f64).ln();
        let norm = 1.5 * (0.25 + 0.75 * 3.0 / (7.0 / 3.0));
        let expected = idf * 2.0 * 2.5 / (2.0 + norm);
        let idx = build_index(&toy(), DEFAULT_K1, DEFAULT_B).unwrap();
        let s = idx.score("c", "D3").unwrap();
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.615).abs() < 5e-4);
        assert_eq!(idx.score("c", "D1").unwrap(), 0.0);
        assert!(matches!(idx.score("c", "D9"), Err(LexicalError::UnknownId(_))));
    }

    #[test]
    fn score_all_agrees_with_score() {
        let idx = build_index(&toy(), DEFAULT_K1, DEFAULT_B).unwrap();
        let all = idx.score_all("b c c");
        for (i, id) in idx.ids().iter().enumerate() {
            assert!((all[i] - idx.score("b c c", id).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_top_k_is_complete() {
        let pool = docs(&[("a", "x y"), ("b", "y z"), ("c", "z w"), ("d", "q")]);
        let idx = build_index(&pool, DEFAULT_K1, DEFAULT_B).unwrap();
        let pairs = top_k_pairs(&idx, &pool, 3).unwrap();
        assert_eq!(pairs.len(), 6);
        assert!(pairs.iter().all(|(a, b)| a < b));
    }

    #[test]
    fn dominant_pair_survives_k1() {
        let pool = docs(&[("D1", "tort claim damages"), ("D2", "tort claim damages"), ("D3", "zoning permit")]);
        let idx = build_index(&pool, DEFAULT_K1, DEFAULT_B).unwrap();
        let pairs = top_k_pairs(&idx, &pool, 1).unwrap();
        assert!(pairs.contains(&("D1".to_string(), "D2".to_string())));
        let single = docs(&[("only", "text")]);
        let idx = build_index(&single, DEFAULT_K1, DEFAULT_B).unwrap();
        assert!(top_k_pairs(&idx, &single, 5).unwrap().is_empty());
    }

    #[test]
    fn ranking_ties_fall_back_to_id_order() {
        let pool = docs(&[("c", "x"), ("a", "y"), ("b", "z")]);
        let idx = build_index(&pool, DEFAULT_K1, DEFAULT_B).unwrap();
        let q = CaseDocument::new("q", "nothing shared");
        let r = rank_candidates(&idx, &q, 10);
        let ids: Vec<&str> = r.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(rank_candidates(&idx, &q, 2).len(), 2);
    }

    #[test]
    fn hard_negatives() {
        let pool = docs(&[("r1", "land title deed"), ("n1", "land title dispute"), ("n2", "tax levy")]);
        let idx = build_index(&pool, DEFAULT_K1, DEFAULT_B).unwrap();
        let q = CaseDocument::new("q", "land title deed transfer");
        let mut labels = RelevanceLabels::new();
        labels.insert("q", "r1");
        // brute force: best-scoring candidate outside the relevant set
        let best = ["n1", "n2"]
            .into_iter()
            .max_by(|a, b| idx.score(&q.text, a).unwrap().total_cmp(&idx.score(&q.text, b).unwrap()))
            .unwrap();
        assert_eq!(mine_hard_negatives(&idx, &q, &labels, 1), vec![best.to_string()]);
        assert!(mine_hard_negatives(&idx, &q, &labels, 0).is_empty());
        for c in ["n1", "n2"] {
            labels.insert("q", c);
        }
        assert!(mine_hard_negatives(&idx, &q, &labels, 3).is_empty());
    }

    proptest! {
        #[test]
        fn score_monotone_in_tf(tf in 1usize..20, filler in 0usize..10) {
            // Two docs of equal length; the one with more query-term hits scores higher.
            let total = tf + 1 + filler;
            let make = |hits: usize| {
                let mut w = vec!["t"; hits];
                w.extend(std::iter::repeat_n("f", total - hits));
                w.join(" ")
            };
            let pool = vec![
                CaseDocument::new("lo", make(tf)),
                CaseDocument::new("hi", make(tf + 1)),
                CaseDocument::new("other", "u v w"),
            ];
            let idx = build_index(&pool, DEFAULT_K1, DEFAULT_B).unwrap();
            prop_assert!(idx.score("t", "hi").unwrap() > idx.score("t", "lo").unwrap());
        }

        #[test]
        fn scores_nonnegative_and_zero_iff_disjoint(
            texts in proptest::collection::vec("[a-e]{1,2}( [a-e]{1,2}){0,6}", 2..6),
            query in "[a-f]{1,2}( [a-f]{1,2}){0,3}",
        ) {
            let pool: Vec<CaseDocument> = texts
                .iter()
                .enumerate()
                .map(|(i, t)| CaseDocument::new(format!("d{i}"), t.clone()))
                .collect();
            let idx = build_index(&pool, DEFAULT_K1, DEFAULT_B).unwrap();
            let qt: BTreeSet<String> = tokenize(&query).into_iter().collect();
            for d in &pool {
                let s = idx.score(&query, &d.id).unwrap();
                let dt: BTreeSet<String> = tokenize(&d.text).into_iter().collect();
                prop_assert!(s >= 0.0);
                prop_assert_eq!(s == 0.0, qt.is_disjoint(&dt));
            }
            let pairs = top_k_pairs(&idx, &pool, 2).unwrap();
            prop_assert!(pairs.iter().all(|(a, b)| a < b));
            let q = CaseDocument::new("q", query.clone());
            let ranked = rank_candidates(&idx, &q, 100);
            let uniq: BTreeSet<&String> = ranked.iter().map(|(i, _)| i).collect();
            prop_assert_eq!(uniq.len(), ranked.len());
            prop_assert_eq!(ranked.len(), pool.len());
        }
    }
}
