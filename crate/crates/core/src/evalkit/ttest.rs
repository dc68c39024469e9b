use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::metrics::{evaluate, Metric};
use super::{EvalError, RetrievalRun};
use crate::corpus::RelevanceLabels;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub n: usize,
    pub mean_diff: f64,
    pub sd_diff: f64,
    pub t: f64,
    pub df: f64,
    /// Two-sided.
    pub p_value: f64,
    /// The differences have (numerically) zero variance; `t` is reported
    /// as 0 and `p_value` as 1.
    pub degenerate: bool,
}

/// Paired t-test on `a[i] - b[i]`. Needs at least two pairs.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<PairedTTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Invalid("paired samples differ in length".into()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::Invalid("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let df = (n - 1) as f64;
    let scale = d.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    if sd <= 1e-12 * scale {
        return Ok(PairedTTest {
            n,
            mean_diff: mean,
            sd_diff: sd,
            t: 0.0,
            df,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let t = mean / (sd / (n as f64).sqrt());
    // P(|T| > |t|) = I_{df/(df+t^2)}(df/2, 1/2)
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t));
    Ok(PairedTTest {
        n,
        mean_diff: mean,
        sd_diff: sd,
        t,
        df,
        p_value: p.clamp(0.0, 1.0),
        degenerate: false,
    })
}

/// Sorted query ids split into `n_subsets` contiguous blocks whose sizes
/// differ by at most one (earlier blocks take the remainder).
pub fn partition_queries(queries: &[String], n_subsets: usize) -> Result<Vec<Vec<String>>, EvalError> {
    if n_subsets == 0 || queries.len() < n_subsets {
        return Err(EvalError::TooFewQueries {
            queries: queries.len(),
            subsets: n_subsets,
        });
    }
    let mut sorted = queries.to_vec();
    sorted.sort();
    let base = sorted.len() / n_subsets;
    let extra = sorted.len() % n_subsets;
    let mut out = Vec::with_capacity(n_subsets);
    let mut it = sorted.into_iter();
    for i in 0..n_subsets {
        let size = base + usize::from(i < extra);
        out.push(it.by_ref().take(size).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub metric: String,
    pub n_subsets: usize,
    pub subset_scores_a: Vec<f64>,
    pub subset_scores_b: Vec<f64>,
    pub test: PairedTTest,
    pub alpha: f64,
    pub comparisons: usize,
    pub corrected_alpha: f64,
    pub significant: bool,
}

/// Splits the shared query set into subsets, scores `metric` per subset
/// for both runs and runs a paired t-test on the subset scores, judged
/// at `alpha / comparisons`.
pub fn subset_ttest(
    run_a: &RetrievalRun,
    run_b: &RetrievalRun,
    labels: &RelevanceLabels,
    metric: &str,
    n_subsets: usize,
    alpha: f64,
    comparisons: usize,
) -> Result<TestReport, EvalError> {
    let (m, k) = Metric::parse(metric)?;
    let k = k.unwrap_or(5);
    if comparisons == 0 {
        return Err(EvalError::Invalid("comparisons must be at least 1".into()));
    }
    let qa: Vec<String> = run_a.queries().cloned().collect();
    let qb: Vec<String> = run_b.queries().cloned().collect();
    if qa != qb {
        let only_a = qa.iter().filter(|q| run_b.ranking(q).is_none()).count();
        let only_b = qb.iter().filter(|q| run_a.ranking(q).is_none()).count();
        return Err(EvalError::QueryMismatch { only_a, only_b });
    }
    let blocks = partition_queries(&qa, n_subsets)?;
    let mut sa = Vec::with_capacity(n_subsets);
    let mut sb = Vec::with_capacity(n_subsets);
    for block in &blocks {
        sa.push(evaluate(&run_a.subset(block), labels, k)?.get(m));
        sb.push(evaluate(&run_b.subset(block), labels, k)?.get(m));
    }
    let test = paired_ttest(&sa, &sb)?;
    let corrected_alpha = alpha / comparisons as f64;
    Ok(TestReport {
        metric: metric.to_string(),
        n_subsets,
        subset_scores_a: sa,
        subset_scores_b: sb,
        significant: !test.degenerate && test.p_value < corrected_alpha,
        test,
        alpha,
        comparisons,
        corrected_alpha,
    })
}
