//! The contrastive objective, negative sampling, the optimization loop with
//! early stopping on validation NDCG@5, and cosine retrieval.

mod loss;
mod optim;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{
    combined_loss_on_tape, combined_loss_value, deg_reg, deg_reg_on_tape, info_nce, info_nce_on_tape,
    ContrastiveItem,
};
pub use optim::Adam;

use crate::corpus::{CaseDocument, DatasetSplit, RelevanceLabels};
use crate::evalkit::{evaluate, EvalError, RetrievalRun};
use crate::graph::{CaseLinkGraph, NodeKind};
use crate::lexical::{by_score_then_id, mine_hard_negatives, Bm25Index, LexicalError, DEFAULT_B, DEFAULT_K1};
use crate::neural::{bind_layer, cosine, forward_on_tape, ModelParams, NeuralError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("state row {0} has zero norm; cosine similarity is undefined")]
    ZeroNorm(usize),
    #[error("loss became non-finite ({loss}) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, loss: f64 },
    #[error("case `{0}` is not a node of the graph")]
    MissingNode(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Lexical(#[from] LexicalError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Optimization and sampling settings. Defaults follow the CaseLink setup:
/// Adam at 1e-5 without weight decay, batch 128, 1000 epochs, tau 0.1,
/// lambda 0.001, one easy and five hard negatives, k 5, delta 0.9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub tau: f64,
    pub lambda: f64,
    pub n_easy: usize,
    pub n_hard: usize,
    pub k_pairs: usize,
    pub delta: f64,
    pub seed: u64,
    pub early_stop_metric: String,
    /// Non-improving epochs tolerated before stopping; 0 disables stopping.
    pub patience: usize,
    pub validation_fraction: f64,
    pub hidden_dim: usize,
    pub num_layers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.0,
            epochs: 1000,
            batch_size: 128,
            tau: 0.1,
            lambda: 0.001,
            n_easy: 1,
            n_hard: 5,
            k_pairs: 5,
            delta: 0.9,
            seed: 0,
            early_stop_metric: "NDCG@5".into(),
            patience: 50,
            validation_fraction: 0.1,
            hidden_dim: 64,
            num_layers: 2,
        }
    }
}

impl TrainConfig {
    /// Settings for the CaseGNN feature stage: 5e-6 learning rate, 5e-5
    /// weight decay, batch 32.
    pub fn casegnn_defaults() -> Self {
        Self {
            lr: 5e-6,
            weight_decay: 5e-5,
            batch_size: 32,
            ..Self::default()
        }
    }

    /// Collects every offending field.
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if !(self.tau > 0.0) {
            bad.push(format!("tau must be > 0 (got {})", self.tau));
        }
        if !(self.lambda >= 0.0) {
            bad.push(format!("lambda must be >= 0 (got {})", self.lambda));
        }
        if !(self.lr >= 0.0) {
            bad.push(format!("lr must be >= 0 (got {})", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            bad.push(format!("weight_decay must be >= 0 (got {})", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bad.push(format!("validation_fraction must lie in [0, 1) (got {})", self.validation_fraction));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            bad.push(format!("delta must lie in (0, 1] (got {})", self.delta));
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1".into());
        }
        if self.hidden_dim == 0 {
            bad.push("hidden_dim must be >= 1".into());
        }
        if self.num_layers == 0 {
            bad.push("num_layers must be >= 1".into());
        }
        if self.early_stop_metric != "NDCG@5" {
            bad.push(format!("early_stop_metric must be NDCG@5 (got {})", self.early_stop_metric));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Negatives {
    pub easy: Vec<String>,
    pub hard: Vec<String>,
}

/// Hard negatives are the top non-relevant BM25 hits; easy negatives are
/// drawn uniformly from what is left of `pool` after removing the query,
/// its relevant cases and the hard negatives.
pub fn sample_negatives(
    query: &CaseDocument,
    labels: &RelevanceLabels,
    pool: &[String],
    n_easy: usize,
    n_hard: usize,
    bm25: &Bm25Index,
    rng: &mut impl Rng,
) -> Negatives {
    let hard = mine_hard_negatives(bm25, query, labels, n_hard);
    let easy = sample_easy(query, labels, pool, &hard, n_easy, rng);
    Negatives { easy, hard }
}

fn sample_easy(
    query: &CaseDocument,
    labels: &RelevanceLabels,
    pool: &[String],
    hard: &[String],
    n_easy: usize,
    rng: &mut impl Rng,
) -> Vec<String> {
    if n_easy == 0 {
        return Vec::new();
    }
    let hard: HashSet<&str> = hard.iter().map(String::as_str).collect();
    let eligible: Vec<&String> = pool
        .iter()
        .filter(|c| *c != &query.id && !labels.is_relevant(&query.id, c) && !hard.contains(c.as_str()))
        .collect();
    if eligible.len() < n_easy {
        log::warn!(
            "query {}: only {} of {} easy negatives available",
            query.id,
            eligible.len(),
            n_easy
        );
    }
    eligible
        .choose_multiple(rng, n_easy.min(eligible.len()))
        .map(|s| (*s).clone())
        .collect()
}

/// Everything the contrastive loop needs about a split: which queries are
/// labelled, which candidates can be negatives, and the mined hard
/// negatives per query.
pub struct ContrastiveSetup {
    pub queries: Vec<String>,
    pub candidates: Vec<String>,
    docs: BTreeMap<String, CaseDocument>,
    hard: BTreeMap<String, Vec<String>>,
    labels: RelevanceLabels,
}

impl ContrastiveSetup {
    pub fn new(split: &DatasetSplit, n_hard: usize) -> Result<Self, TrainError> {
        let candidates: Vec<String> = split.candidates.iter().map(|d| d.id.clone()).collect();
        let docs: BTreeMap<String, CaseDocument> = split.queries.iter().map(|d| (d.id.clone(), d.clone())).collect();
        let queries: Vec<String> = docs
            .keys()
            .filter(|q| split.labels.relevant(q).is_some_and(|r| !r.is_empty()))
            .cloned()
            .collect();
        let mut hard = BTreeMap::new();
        if n_hard > 0 && !split.candidates.is_empty() {
            let index = Bm25Index::build(&split.candidates, DEFAULT_K1, DEFAULT_B)?;
            for q in &queries {
                hard.insert(q.clone(), mine_hard_negatives(&index, &docs[q], &split.labels, n_hard));
            }
        }
        Ok(Self {
            queries,
            candidates,
            docs,
            hard,
            labels: split.labels.clone(),
        })
    }

    /// One item per (query, relevant candidate) pair of `queries`, with
    /// fresh easy negatives, shuffled.
    pub fn items(
        &self,
        queries: &[String],
        row_of: &HashMap<&str, usize>,
        n_easy: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<ContrastiveItem>, TrainError> {
        let row = |id: &str| row_of.get(id).copied().ok_or_else(|| TrainError::MissingNode(id.to_string()));
        let empty = Vec::new();
        let mut items = Vec::new();
        for q in queries {
            let doc = &self.docs[q];
            let hard = self.hard.get(q).unwrap_or(&empty);
            let relevant = self.labels.relevant(q).expect("setup keeps labelled queries only");
            for pos in relevant {
                let easy = sample_easy(doc, &self.labels, &self.candidates, hard, n_easy, rng);
                let negatives = easy.iter().chain(hard).map(|c| row(c)).collect::<Result<_, _>>()?;
                items.push(ContrastiveItem {
                    query: row(q)?,
                    positive: row(pos)?,
                    negatives,
                });
            }
        }
        items.shuffle(rng);
        Ok(items)
    }
}

/// Holds out `fraction` of the queries (at least one when there are two or
/// more and the fraction is positive).
pub fn split_validation(queries: &[String], fraction: f64, rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
    let mut shuffled = queries.to_vec();
    shuffled.shuffle(rng);
    let mut n_val = (fraction * queries.len() as f64).round() as usize;
    if fraction > 0.0 && queries.len() >= 2 {
        n_val = n_val.clamp(1, queries.len() - 1);
    } else {
        n_val = 0;
    }
    let val: Vec<String> = shuffled.split_off(queries.len() - n_val);
    let mut train = shuffled;
    train.sort();
    let mut val = val;
    val.sort();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_ndcg5: Option<f64>,
    pub lr: f64,
}

pub fn log_to_jsonl(log: &[EpochLog]) -> String {
    log.iter()
        .map(|e| serde_json::to_string(e).expect("epoch log") + "\n")
        .collect()
}

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<(), TrainError> {
    fs::write(path, log_to_jsonl(log)).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// 0 when the initial parameters were never beaten.
    pub best_epoch: usize,
    pub best_val: Option<f64>,
}

/// Ranks `candidates` for every query by cosine of the rows of `states`,
/// ties broken by ascending id, the query itself excluded. `cutoff` keeps
/// only the head of each ranking.
pub fn rank_by_states(
    states: &Tensor,
    row_of: &HashMap<&str, usize>,
    queries: &[String],
    candidates: &[String],
    cutoff: Option<usize>,
) -> Result<RetrievalRun, TrainError> {
    let row = |id: &str| row_of.get(id).copied().ok_or_else(|| TrainError::MissingNode(id.to_string()));
    let cand_rows: Vec<(&String, usize)> = candidates.iter().map(|c| Ok((c, row(c)?))).collect::<Result<_, TrainError>>()?;
    let mut run = RetrievalRun::new();
    for q in queries {
        let qv = states.row(row(q)?);
        let mut scored: Vec<(String, f64)> = cand_rows
            .iter()
            .filter(|(c, _)| *c != q)
            .map(|(c, r)| ((*c).clone(), cosine(qv, states.row(*r)).unwrap_or(0.0)))
            .collect();
        scored.sort_by(|a, b| by_score_then_id((&a.0, a.1), (&b.0, b.1)));
        if let Some(k) = cutoff {
            scored.truncate(k);
        }
        run.insert(q.clone(), scored)?;
    }
    Ok(run)
}

/// One forward pass over `graph`, then cosine ranking.
pub fn retrieve(
    graph: &CaseLinkGraph,
    params: &ModelParams,
    queries: &[String],
    candidates: &[String],
    cutoff: Option<usize>,
) -> Result<RetrievalRun, TrainError> {
    let states = graph.forward(params)?;
    rank_by_states(&states, &graph.index_map(), queries, candidates, cutoff)
}

/// Trains the CaseLink model on one split's graph.
pub fn train_caselink(split: &DatasetSplit, graph: &CaseLinkGraph, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let params = graph.init_params(config.hidden_dim, config.num_layers, config.seed);
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            params,
            log: Vec::new(),
            best_epoch: 0,
            best_val: None,
        });
    }
    let row_of = graph.index_map();
    for d in split.pool() {
        if !row_of.contains_key(d.id.as_str()) {
            return Err(TrainError::MissingNode(d.id.clone()));
        }
    }
    let setup = ContrastiveSetup::new(split, config.n_hard)?;
    if setup.queries.is_empty() {
        return Err(TrainError::Config(vec!["split has no labelled queries".into()]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (train_q, val_q) = split_validation(&setup.queries, config.validation_fraction, &mut rng);

    let reg_rows: Vec<usize> = setup.candidates.iter().map(|c| row_of[c.as_str()]).collect();
    let reg_cols: Vec<usize> = graph
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.kind == NodeKind::Case)
        .map(|(i, _)| i)
        .collect();
    let attn = graph.to_attention_graph();
    let features = graph.features();

    let validate = |p: &ModelParams| -> Result<Option<f64>, TrainError> {
        if val_q.is_empty() {
            return Ok(None);
        }
        let states = graph.forward(p)?;
        let run = rank_by_states(&states, &row_of, &val_q, &setup.candidates, None)?;
        Ok(Some(evaluate(&run, &split.labels, 5)?.ndcg))
    };

    let mut params = params;
    let mut best = (params.clone(), 0usize, validate(&params)?);
    let mut since_best = 0usize;
    let mut opt = Adam::new(config.lr, config.weight_decay);
    let mut log = Vec::new();

    for epoch in 1..=config.epochs {
        let items = setup.items(&train_q, &row_of, config.n_easy, &mut rng)?;
        let mut total = 0.0;
        let n_batches = items.len().div_ceil(config.batch_size);
        for (b, batch) in items.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let x = tape.constant(features.clone());
            let bound: Vec<_> = params.layers.iter().map(|l| bind_layer(&mut tape, l)).collect();
            let states = forward_on_tape(&mut tape, x, &attn, &bound)?;
            let loss = combined_loss_on_tape(&mut tape, states, batch, &reg_rows, &reg_cols, config.tau, config.lambda)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged { epoch, batch: b, loss: value });
            }
            total += value;
            let grads = tape.backward(loss);
            let grads: Vec<Tensor> = bound
                .iter()
                .flat_map(|l| l.named().into_iter().map(|(_, v)| grads.wrt(*v)))
                .collect();
            opt.step(params.tensors_mut(), &grads);
        }
        let val = validate(&params)?;
        log.push(EpochLog {
            epoch,
            train_loss: total / n_batches.max(1) as f64,
            val_ndcg5: val,
            lr: config.lr,
        });
        match (val, best.2) {
            (Some(v), Some(b)) if v > b => {
                best = (params.clone(), epoch, Some(v));
                since_best = 0;
            }
            (None, _) => best = (params.clone(), epoch, None),
            _ => since_best += 1,
        }
        if config.patience > 0 && since_best >= config.patience {
            log::info!("early stop at epoch {epoch}; best epoch {}", best.1);
            break;
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        log,
        best_epoch: best.1,
        best_val: best.2,
    })
}
