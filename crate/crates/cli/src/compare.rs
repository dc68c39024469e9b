//! Side-by-side comparison of two finished runs on the same test split.

use std::collections::BTreeMap;
use std::path::Path;

use caselink_core::evalkit::{evaluate_with, subset_ttest, EvalOptions, Metric};
use caselink_core::{DatasetSplit, EvalError, RetrievalRun, TestReport};
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::manifest::{RunManifest, Stage};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub metric: String,
    pub a: f64,
    pub b: f64,
    /// `a - b`.
    pub delta: f64,
    pub test: TestReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub run_a: String,
    pub run_b: String,
    pub split: String,
    pub num_queries: usize,
    pub n_subsets: usize,
    pub alpha: f64,
    pub comparisons: usize,
    pub metrics: Vec<MetricComparison>,
}

impl CompareReport {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{} vs {} on {} ({} queries, {} subsets, alpha {} / {})\n",
            self.run_a, self.run_b, self.split, self.num_queries, self.n_subsets, self.alpha, self.comparisons
        );
        out += &format!(
            "{:<8} {:>8} {:>8} {:>9} {:>8} {:>9}  {}\n",
            "metric", "a", "b", "delta", "t", "p", "verdict"
        );
        for m in &self.metrics {
            out += &format!(
                "{:<8} {:>8.4} {:>8.4} {:>+9.4} {:>8.3} {:>9.4}  {}\n",
                m.metric,
                m.a,
                m.b,
                m.delta,
                m.test.test.t,
                m.test.test.p_value,
                if m.test.significant { "significant" } else { "-" }
            );
        }
        out
    }
}

struct LoadedRun {
    id: String,
    config: PipelineConfig,
    split: DatasetSplit,
    run: RetrievalRun,
}

fn load(manifest_path: &Path) -> Result<LoadedRun, CliError> {
    let manifest = RunManifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let config = PipelineConfig::from_flat(&manifest.config)?;
    let synthetic = config.data.root.is_none();
    if !manifest.stages.contains_key(&Stage::Retrieve) {
        return Err(CliError::Upstream {
            stage: Stage::Retrieve,
            reason: format!("{} has no retrieval output", manifest_path.display()),
        });
    }
    manifest.verify_stage(Stage::Retrieve, synthetic, &manifest.config, dir)?;
    manifest.verify_upstream(Stage::Retrieve, synthetic, &manifest.config, dir)?;
    let name = &config.data.test_split;
    let split_path = dir.join(format!("corpus/{name}.json"));
    let raw = std::fs::read_to_string(&split_path).map_err(|e| CliError::io(&split_path, e))?;
    let split: DatasetSplit =
        serde_json::from_str(&raw).map_err(|e| CliError::Other(format!("{}: {e}", split_path.display())))?;
    let run = RetrievalRun::read(&dir.join(format!("retrieval/{name}.run.jsonl")))?;
    Ok(LoadedRun {
        id: manifest.run_id,
        config,
        split,
        run,
    })
}

/// Metric deltas and subset t-tests of run A against run B. Subset count,
/// alpha and cutoff come from run A's configuration; `comparisons` is the
/// Bonferroni divisor (defaults to the configured `eval.comparisons`).
pub fn compare_runs(manifest_a: &Path, manifest_b: &Path, comparisons: Option<usize>) -> Result<CompareReport, CliError> {
    let a = load(manifest_a)?;
    let b = load(manifest_b)?;
    if a.split.name != b.split.name {
        return Err(CliError::Other(format!(
            "runs were evaluated on different splits (`{}` vs `{}`)",
            a.split.name, b.split.name
        )));
    }
    if a.split.labels != b.split.labels {
        return Err(CliError::Other(format!(
            "split `{}` has different relevance labels in the two runs",
            a.split.name
        )));
    }
    let qa: Vec<&String> = a.run.queries().collect();
    let qb: Vec<&String> = b.run.queries().collect();
    if qa != qb {
        let only_a = qa.iter().filter(|q| b.run.ranking(q).is_none()).count();
        let only_b = qb.iter().filter(|q| a.run.ranking(q).is_none()).count();
        return Err(EvalError::QueryMismatch { only_a, only_b }.into());
    }

    let e = &a.config.eval;
    let comparisons = comparisons.unwrap_or(e.comparisons);
    let opts = EvalOptions {
        k: e.k,
        map_at_k: e.map_at_k,
    };
    let labels = &a.split.labels;
    let ra = evaluate_with(&a.run, labels, opts)?;
    let rb = evaluate_with(&b.run, labels, opts)?;
    let mut metrics = Vec::new();
    for m in Metric::ALL {
        let label = m.label(e.k);
        let metric_name = if label.contains('@') { label.clone() } else { format!("{label}@{}", e.k) };
        let test = subset_ttest(&a.run, &b.run, labels, &metric_name, e.subsets, e.alpha, comparisons)?;
        let (va, vb) = (ra.get(m), rb.get(m));
        metrics.push(MetricComparison {
            metric: label,
            a: va,
            b: vb,
            delta: va - vb,
            test,
        });
    }
    Ok(CompareReport {
        run_a: a.id,
        run_b: b.id,
        split: a.split.name.clone(),
        num_queries: ra.num_queries,
        n_subsets: e.subsets,
        alpha: e.alpha,
        comparisons,
        metrics,
    })
}

/// Metric label to value, for quick inspection.
pub fn deltas(report: &CompareReport) -> BTreeMap<String, f64> {
    report.metrics.iter().map(|m| (m.metric.clone(), m.delta)).collect()
}
