use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, RetrievalRun};
use crate::corpus::RelevanceLabels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Precision,
    Recall,
    MicroF1,
    MacroF1,
    Mrr,
    Map,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Precision,
        Metric::Recall,
        Metric::MicroF1,
        Metric::MacroF1,
        Metric::Mrr,
        Metric::Map,
        Metric::Ndcg,
    ];

    /// Parses names such as `NDCG@5`, `P@10`, `MAP` or `Mi-F1`. Returns the
    /// metric and the cutoff, if one was given.
    pub fn parse(name: &str) -> Result<(Metric, Option<usize>), EvalError> {
        let (base, k) = match name.split_once('@') {
            Some((b, k)) => (
                b,
                Some(k.parse::<usize>().map_err(|_| EvalError::UnknownMetric(name.to_string()))?),
            ),
            None => (name, None),
        };
        let m = match base.to_ascii_lowercase().as_str() {
            "p" | "precision" => Metric::Precision,
            "r" | "recall" => Metric::Recall,
            "mi-f1" | "micro-f1" => Metric::MicroF1,
            "ma-f1" | "macro-f1" => Metric::MacroF1,
            "mrr" => Metric::Mrr,
            "map" => Metric::Map,
            "ndcg" => Metric::Ndcg,
            _ => return Err(EvalError::UnknownMetric(name.to_string())),
        };
        if k == Some(0) {
            return Err(EvalError::UnknownMetric(name.to_string()));
        }
        Ok((m, k))
    }

    pub fn label(self, k: usize) -> String {
        match self {
            Metric::Precision => format!("P@{k}"),
            Metric::Recall => format!("R@{k}"),
            Metric::MicroF1 => "Mi-F1".into(),
            Metric::MacroF1 => "Ma-F1".into(),
            Metric::Mrr => format!("MRR@{k}"),
            Metric::Map => "MAP".into(),
            Metric::Ndcg => format!("NDCG@{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    /// Truncate average precision at `k` instead of the full ranking.
    pub map_at_k: bool,
}

impl EvalOptions {
    pub fn at(k: usize) -> Self {
        Self { k, map_at_k: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query: String,
    pub relevant: usize,
    pub hits: usize,
    pub retrieved: usize,
    pub precision: f64,
    pub recall: f64,
    pub reciprocal_rank: f64,
    pub average_precision: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub num_queries: usize,
    pub precision: f64,
    pub recall: f64,
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub mrr: f64,
    pub map: f64,
    pub ndcg: f64,
    pub per_query: Vec<QueryMetrics>,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl MetricReport {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::MicroF1 => self.micro_f1,
            Metric::MacroF1 => self.macro_f1,
            Metric::Mrr => self.mrr,
            Metric::Map => self.map,
            Metric::Ndcg => self.ndcg,
        }
    }

    /// Aggregate values keyed by display label, without the per-query table.
    pub fn summary(&self) -> BTreeMap<String, f64> {
        Metric::ALL.iter().map(|&m| (m.label(self.k), self.get(m))).collect()
    }

    /// Header plus one row, values in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let labels: Vec<String> = Metric::ALL.iter().map(|m| m.label(self.k)).collect();
        for l in &labels {
            let _ = write!(out, "{l:>8}");
        }
        out.push('\n');
        for m in Metric::ALL {
            let _ = write!(out, "{:>8.1}", 100.0 * self.get(m));
        }
        out.push('\n');
        out
    }
}

fn query_metrics(query: &str, ranking: &[(String, f64)], relevant: &BTreeSet<String>, opts: EvalOptions) -> QueryMetrics {
    let k = opts.k;
    let top = &ranking[..ranking.len().min(k)];
    let hits = top.iter().filter(|(c, _)| relevant.contains(c)).count();
    let n_rel = relevant.len();

    let reciprocal_rank = top
        .iter()
        .position(|(c, _)| relevant.contains(c))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64);

    let ap_depth = if opts.map_at_k { top.len() } else { ranking.len() };
    let mut found = 0usize;
    let mut ap_sum = 0.0;
    for (i, (c, _)) in ranking[..ap_depth].iter().enumerate() {
        if relevant.contains(c) {
            found += 1;
            ap_sum += found as f64 / (i + 1) as f64;
        }
    }
    let ap_norm = if opts.map_at_k { n_rel.min(k) } else { n_rel };

    let dcg: f64 = top
        .iter()
        .enumerate()
        .filter(|(_, (c, _))| relevant.contains(c))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..n_rel.min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();

    QueryMetrics {
        query: query.to_string(),
        relevant: n_rel,
        hits,
        retrieved: top.len(),
        precision: hits as f64 / k as f64,
        recall: if n_rel == 0 { 0.0 } else { hits as f64 / n_rel as f64 },
        reciprocal_rank,
        average_precision: if ap_norm == 0 { 0.0 } else { ap_sum / ap_norm as f64 },
        ndcg: if idcg == 0.0 { 0.0 } else { dcg / idcg },
    }
}

/// All seven metrics at cutoff `k`, MAP over the full ranking.
pub fn evaluate(run: &RetrievalRun, labels: &RelevanceLabels, k: usize) -> Result<MetricReport, EvalError> {
    evaluate_with(run, labels, EvalOptions::at(k))
}

pub fn evaluate_with(run: &RetrievalRun, labels: &RelevanceLabels, opts: EvalOptions) -> Result<MetricReport, EvalError> {
    if opts.k == 0 {
        return Err(EvalError::Invalid("cutoff k must be positive".into()));
    }
    let mut per_query = Vec::with_capacity(run.len());
    for (q, ranking) in run.iter() {
        let relevant = labels.relevant(q).ok_or_else(|| EvalError::MissingLabels(q.clone()))?;
        per_query.push(query_metrics(q, ranking, relevant, opts));
    }
    let n = per_query.len();
    let mean = |f: fn(&QueryMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_query.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let precision = mean(|m| m.precision);
    let recall = mean(|m| m.recall);

    let tp: usize = per_query.iter().map(|m| m.hits).sum();
    let retrieved: usize = per_query.iter().map(|m| m.retrieved).sum();
    let relevant: usize = per_query.iter().map(|m| m.relevant).sum();
    let micro_p = if retrieved == 0 { 0.0 } else { tp as f64 / retrieved as f64 };
    let micro_r = if relevant == 0 { 0.0 } else { tp as f64 / relevant as f64 };

    Ok(MetricReport {
        k: opts.k,
        num_queries: n,
        precision,
        recall,
        micro_f1: harmonic(micro_p, micro_r),
        macro_f1: harmonic(precision, recall),
        mrr: mean(|m| m.reciprocal_rank),
        map: mean(|m| m.average_precision),
        ndcg: mean(|m| m.ndcg),
        per_query,
    })
}

/// Expected metrics under uniformly random rankings of a `pool_size`
/// candidate pool, estimated over `trials` shuffles.
pub fn random_baseline(
    labels: &RelevanceLabels,
    pool_size: usize,
    k: usize,
    trials: usize,
    seed: u64,
) -> Result<MetricReport, EvalError> {
    if trials == 0 {
        return Err(EvalError::Invalid("trials must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut synthetic = RelevanceLabels::new();
    for (q, rel) in &labels.0 {
        let n_rel = rel.len().min(pool_size);
        synthetic.0.insert(q.clone(), (0..n_rel).map(|i| format!("r{i:06}")).collect());
    }
    let mut acc: Option<MetricReport> = None;
    for _ in 0..trials {
        let mut run = RetrievalRun::new();
        for (q, rel) in &synthetic.0 {
            let mut ids: Vec<String> = rel.iter().cloned().collect();
            ids.extend((ids.len()..pool_size).map(|i| format!("n{i:06}")));
            ids.shuffle(&mut rng);
            let n = ids.len();
            run.insert(q.clone(), ids.into_iter().enumerate().map(|(i, c)| (c, (n - i) as f64)).collect())?;
        }
        let r = evaluate(&run, &synthetic, k)?;
        acc = Some(match acc {
            None => r,
            Some(mut a) => {
                a.precision += r.precision;
                a.recall += r.recall;
                a.micro_f1 += r.micro_f1;
                a.macro_f1 += r.macro_f1;
                a.mrr += r.mrr;
                a.map += r.map;
                a.ndcg += r.ndcg;
                a
            }
        });
    }
    let mut a = acc.expect("trials >= 1");
    let t = trials as f64;
    for v in [
        &mut a.precision,
        &mut a.recall,
        &mut a.micro_f1,
        &mut a.macro_f1,
        &mut a.mrr,
        &mut a.map,
        &mut a.ndcg,
    ] {
        *v /= t;
    }
    a.per_query.clear();
    Ok(a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(pairs: &[(&str, &[&str])]) -> RelevanceLabels {
        let mut l = RelevanceLabels::new();
        for (q, cs) in pairs {
            l.0.insert(q.to_string(), cs.iter().map(|c| c.to_string()).collect());
        }
        l
    }

    fn run(rows: &[(&str, &[&str])]) -> RetrievalRun {
        RetrievalRun::from_ids(
            rows.iter()
                .map(|(q, ids)| (q.to_string(), ids.iter().map(|s| s.to_string()).collect()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn precision_and_recall_counts() {
        let r = run(&[("q", &["a", "x", "b", "y", "z", "c"])]);
        let l = labels(&[("q", &["a", "b", "c", "d"])]);
        let m = evaluate(&r, &l, 5).unwrap();
        assert!((m.precision - 0.4).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rel_non_rel_fixture() {
        let r = run(&[("q", &["r1", "n1", "r2", "n2", "n3"])]);
        let l = labels(&[("q", &["r1", "r2"])]);
        let m = evaluate(&r, &l, 5).unwrap();
        let dcg = 1.0 + 1.0 / 4f64.log2();
        let idcg = 1.0 + 1.0 / 3f64.log2();
        assert!((m.ndcg - dcg / idcg).abs() < 1e-12);
        assert!((m.ndcg - 0.9197).abs() < 1e-4);
        assert!((m.map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking() {
        let r = run(&[("q", &["a", "b", "x"])]);
        let l = labels(&[("q", &["a", "b"])]);
        let m = evaluate(&r, &l, 5).unwrap();
        assert_eq!(m.ndcg, 1.0);
        assert_eq!(m.mrr, 1.0);
    }

    #[test]
    fn pooled_micro_f1() {
        let r = run(&[("q1", &["a", "b", "x1", "x2", "x3"]), ("q2", &["d", "y1", "y2", "y3", "y4"])]);
        let l = labels(&[("q1", &["a", "b", "c"]), ("q2", &["d"])]);
        let m = evaluate(&r, &l, 5).unwrap();
        let (p, rc) = (3.0 / 10.0, 3.0 / 4.0);
        assert!((m.micro_f1 - 2.0 * p * rc / (p + rc)).abs() < 1e-12);
        assert!((m.micro_f1 - 0.4286).abs() < 1e-4);
    }

    #[test]
    fn missing_labels_name_the_query() {
        let r = run(&[("qx", &["a"])]);
        let err = evaluate(&r, &RelevanceLabels::new(), 5).unwrap_err();
        assert!(err.to_string().contains("qx"));
    }

    #[test]
    fn map_cutoff_flag() {
        let r = run(&[("q", &["n", "a", "n2", "b"])]);
        let l = labels(&[("q", &["a", "b"])]);
        let full = evaluate(&r, &l, 2).unwrap().map;
        let cut = evaluate_with(&r, &l, EvalOptions { k: 2, map_at_k: true }).unwrap().map;
        assert!((full - (0.5 + 0.5) / 2.0).abs() < 1e-12);
        assert!((cut - 0.5 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn metric_names() {
        assert_eq!(Metric::parse("NDCG@5").unwrap(), (Metric::Ndcg, Some(5)));
        assert_eq!(Metric::parse("MAP").unwrap(), (Metric::Map, None));
        assert_eq!(Metric::parse("Mi-F1").unwrap(), (Metric::MicroF1, None));
        assert!(Metric::parse("BLEU").is_err());
        assert!(Metric::parse("P@0").is_err());
    }

    #[test]
    fn random_baseline_recall_matches_hypergeometric_mean() {
        // one relevant item in a pool of 10: P(in top 5) = 5/10
        let l = labels(&[("q", &["a"])]);
        let m = random_baseline(&l, 10, 5, 4000, 1).unwrap();
        assert!((m.recall - 0.5).abs() < 0.03, "{}", m.recall);
        let full = random_baseline(&l, 10, 10, 20, 1).unwrap();
        assert_eq!(full.recall, 1.0);
        assert_eq!(random_baseline(&l, 10, 5, 50, 9).unwrap(), random_baseline(&l, 10, 5, 50, 9).unwrap());
    }
}
