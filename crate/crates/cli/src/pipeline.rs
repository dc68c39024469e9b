//! Stage implementations. Each stage owns one directory under the run
//! directory, clears it before running and records every file it leaves
//! there in the manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use caselink_core::casegnn::{build_case_graphs, build_charge_graphs, embed_cases, train_casegnn};
use caselink_core::corpus::{
    check_disjoint, dataset_statistics, filter_by_year, generate_synthetic, load_charges, load_dataset,
};
use caselink_core::encoders::Summarizer;
use caselink_core::evalkit::{evaluate_with, random_baseline, EvalOptions};
use caselink_core::graph::{build_graph, graph_stats};
use caselink_core::lexical::{by_score_then_id, DEFAULT_B, DEFAULT_K1};
use caselink_core::promptcase::{build_views, encode_all_views, read_views, write_views, CaseViews, ViewEncoder};
use caselink_core::training::{retrieve, train_caselink, write_log};
use caselink_core::{
    Bm25Index, CaseDocument, CaseLinkGraph, ChargeEntry, DatasetSplit, EmbeddingStore, MetricReport, ModelParams,
    RetrievalRun,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{to_flat_text, PipelineConfig};
use crate::manifest::{list_files, sha256_file, RunManifest, Stage, StageRecord};
use crate::CliError;

pub const LOCK_FILE: &str = ".lock";

impl Stage {
    /// Directory (relative to the run directory) the stage writes.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Synth => "data",
            Stage::Ingest => "corpus",
            Stage::Summarize => "summaries",
            Stage::Views => "views",
            Stage::Casegnn => "casegnn",
            Stage::Graph => "graph",
            Stage::Train => "model",
            Stage::Retrieve => "retrieval",
            Stage::Evaluate => "eval",
            Stage::Stats => "stats",
        }
    }
}

/// Held while a stage runs; removes the lock file on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, CliError> {
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Headline numbers the evaluate stage writes to `eval/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub split: String,
    pub model: BTreeMap<String, f64>,
    pub random: BTreeMap<String, f64>,
    pub bm25: BTreeMap<String, f64>,
    pub bm25_shuffled: BTreeMap<String, f64>,
}

pub struct RunContext {
    pub dir: PathBuf,
    pub run_id: String,
    pub values: BTreeMap<String, String>,
    pub cfg: PipelineConfig,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).expect("artifact serializes") + "\n";
    fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let raw = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

impl RunContext {
    pub fn new(runs_root: &Path, run_id: &str, values: BTreeMap<String, String>) -> Result<Self, CliError> {
        let cfg = PipelineConfig::from_flat(&values)?;
        Ok(Self {
            dir: runs_root.join(run_id),
            run_id: run_id.to_string(),
            values,
            cfg,
        })
    }

    pub fn synthetic(&self) -> bool {
        self.cfg.data.root.is_none()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn splits(&self) -> [&str; 2] {
        [&self.cfg.data.train_split, &self.cfg.data.test_split]
    }

    pub fn manifest(&self) -> Result<RunManifest, CliError> {
        RunManifest::load_or_new(&self.dir, &self.run_id, self.cfg.seed, &self.values)
    }

    /// Human-readable plan for `stages` without running anything.
    pub fn plan(&self, stages: &[Stage]) -> Result<String, CliError> {
        let manifest = self.manifest()?;
        let mut out = format!("run directory: {}\nseed: {}\nstages:\n", self.dir.display(), self.cfg.seed);
        for &s in stages {
            let ups: Vec<String> = s
                .upstream(self.synthetic())
                .into_iter()
                .map(|u| {
                    let status = if stages.contains(&u) {
                        "planned".to_string()
                    } else {
                        match manifest.verify_stage(u, self.synthetic(), &self.values, &self.dir) {
                            Ok(()) => "ok".to_string(),
                            Err(CliError::Upstream { reason, .. }) => reason,
                            Err(e) => e.to_string(),
                        }
                    };
                    format!("{u} [{status}]")
                })
                .collect();
            out += &format!(
                "  {s:<9} -> {}/  config {}  needs: {}\n",
                s.dir(),
                &s.config_hash(&self.values)[..12],
                if ups.is_empty() { "-".into() } else { ups.join(", ") }
            );
        }
        out += "resolved configuration:\n";
        for line in to_flat_text(&self.values).lines() {
            out += &format!("  {line}\n");
        }
        Ok(out)
    }

    /// Verifies upstream artifacts, runs the stage and appends its record
    /// to the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord, CliError> {
        mkdir(&self.dir)?;
        let _lock = RunLock::acquire(&self.dir)?;
        let mut manifest = self.manifest()?;
        manifest.verify_upstream(stage, self.synthetic(), &self.values, &self.dir)?;

        let out_dir = self.path(stage.dir());
        if out_dir.exists() {
            fs::remove_dir_all(&out_dir).map_err(|e| CliError::io(&out_dir, e))?;
        }
        mkdir(&out_dir)?;
        log::info!("stage {stage}: start");
        let started = Instant::now();
        let inputs = match stage {
            Stage::Synth => self.synth()?,
            Stage::Ingest => self.ingest()?,
            Stage::Summarize => self.summarize()?,
            Stage::Views => self.views()?,
            Stage::Casegnn => self.casegnn()?,
            Stage::Graph => self.graph()?,
            Stage::Train => self.train()?,
            Stage::Retrieve => self.retrieve()?,
            Stage::Evaluate => self.evaluate()?,
            Stage::Stats => self.stats()?,
        };
        let wall_clock_secs = started.elapsed().as_secs_f64();

        let mut outputs = BTreeMap::new();
        for rel in list_files(&out_dir, &self.dir).map_err(|e| CliError::io(&out_dir, e))? {
            let p = self.dir.join(&rel);
            outputs.insert(rel, sha256_file(&p).map_err(|e| CliError::io(&p, e))?);
        }
        let config_hash = stage.config_hash(&self.values);
        let ups = manifest.upstream_chains(stage, self.synthetic());
        let record = StageRecord {
            upstream: stage.upstream(self.synthetic()),
            chain: StageRecord::compute_chain(stage, &config_hash, &inputs, &outputs, &ups),
            config_hash,
            inputs,
            outputs,
            wall_clock_secs,
        };
        manifest.seed = self.cfg.seed;
        manifest.config = self.values.clone();
        manifest.stages.insert(stage, record.clone());
        manifest.save(&self.dir)?;
        log::info!("stage {stage}: done in {wall_clock_secs:.2}s");
        Ok(record)
    }

    /// Runs the whole pipeline in order.
    pub fn run_all(&self) -> Result<(), CliError> {
        for s in self.pipeline_stages() {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn pipeline_stages(&self) -> Vec<Stage> {
        Stage::PIPELINE
            .into_iter()
            .filter(|s| *s != Stage::Synth || self.synthetic())
            .collect()
    }

    fn data_root(&self) -> PathBuf {
        self.cfg.data.root.clone().unwrap_or_else(|| self.path(Stage::Synth.dir()))
    }

    fn load_split(&self, name: &str) -> Result<DatasetSplit, CliError> {
        read_json(&self.path(&format!("corpus/{name}.json")))
    }

    fn load_charges(&self) -> Result<Vec<ChargeEntry>, CliError> {
        read_json(&self.path("corpus/charges.json"))
    }

    // ---- stages -------------------------------------------------------

    fn synth(&self) -> Result<BTreeMap<String, String>, CliError> {
        let summary = generate_synthetic(&self.cfg.synth, self.cfg.seed, &self.path("data"))?;
        log::info!(
            "synthetic corpus: {} candidates, {} queries, {} charges",
            summary.num_candidates,
            summary.num_queries,
            summary.num_charges
        );
        Ok(BTreeMap::new())
    }

    fn ingest(&self) -> Result<BTreeMap<String, String>, CliError> {
        let root = self.data_root();
        let mut splits = Vec::new();
        for name in self.splits() {
            let mut split = load_dataset(&root, name)?;
            if let Some(y) = self.cfg.data.max_year {
                split = filter_by_year(&split, y).0;
            }
            splits.push(split);
        }
        check_disjoint(&splits[0], &splits[1])?;
        let charges_path = self
            .cfg
            .data
            .charges
            .clone()
            .or_else(|| Some(root.join("charges.tsv")).filter(|p| p.is_file()));
        let charges = match &charges_path {
            Some(p) => load_charges(p)?,
            None => {
                log::warn!("no charge list found; the graph will have case nodes only");
                Vec::new()
            }
        };
        let mut stats = Vec::new();
        for s in &splits {
            write_json(&self.path(&format!("corpus/{}.json", s.name)), s)?;
            stats.push(dataset_statistics(s));
        }
        write_json(&self.path("corpus/charges.json"), &charges)?;
        write_json(&self.path("corpus/stats.json"), &stats)?;

        // Files outside the run directory are pinned by content hash.
        let mut inputs = BTreeMap::new();
        if !self.synthetic() {
            let abs = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
            for name in self.splits() {
                let base = abs(&root.join(name));
                for rel in list_files(&base, &base).map_err(|e| CliError::io(&base, e))? {
                    let p = base.join(&rel);
                    inputs.insert(p.display().to_string(), sha256_file(&p).map_err(|e| CliError::io(&p, e))?);
                }
            }
            if let Some(p) = charges_path {
                let p = abs(&p);
                inputs.insert(p.display().to_string(), sha256_file(&p).map_err(|e| CliError::io(&p, e))?);
            }
        }
        Ok(inputs)
    }

    fn summarize(&self) -> Result<BTreeMap<String, String>, CliError> {
        let summarizer = Summarizer::new(self.cfg.llm.clone(), self.path("cache/llm"))?;
        for name in self.splits() {
            let split = self.load_split(name)?;
            let pool: Vec<&CaseDocument> = split.pool();
            let views: Vec<CaseViews> = pool
                .par_iter()
                .map(|d| build_views(d, &summarizer, &self.cfg.views))
                .collect::<Result<_, _>>()?;
            write_views(&self.path(&format!("summaries/{name}")), &views)?;
        }
        log::info!("summarizer made {} backend calls", summarizer.network_calls());
        Ok(BTreeMap::new())
    }

    fn views(&self) -> Result<BTreeMap<String, String>, CliError> {
        let encoder = ViewEncoder::new(&self.cfg.encoder)?;
        for name in self.splits() {
            let views = read_views(&self.path(&format!("summaries/{name}")))?;
            let store = encode_all_views(&views, &encoder, &self.cfg.views)?;
            store.write(&self.path(&format!("views/{name}.emb.jsonl")))?;
        }
        Ok(BTreeMap::new())
    }

    fn casegnn(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut views = Vec::new();
        let mut view_emb: Option<EmbeddingStore> = None;
        for name in self.splits() {
            views.extend(read_views(&self.path(&format!("summaries/{name}")))?);
            let store = EmbeddingStore::read(&self.path(&format!("views/{name}.emb.jsonl")))?;
            match &mut view_emb {
                Some(all) => all.extend(&store)?,
                None => view_emb = Some(store),
            }
        }
        let view_emb = view_emb.expect("two splits were read");
        let graphs = build_case_graphs(&views, &view_emb, &self.cfg.encoder)?;
        let charge_graphs = build_charge_graphs(&self.load_charges()?, &self.cfg.encoder)?;

        let train = self.load_split(&self.cfg.data.train_split)?;
        let outcome = train_casegnn(&train, &graphs, &self.cfg.casegnn)?;
        let charge_emb = if charge_graphs.is_empty() {
            EmbeddingStore::new(outcome.params.output_dim())
        } else {
            embed_cases(&charge_graphs, &outcome.params)?
        };
        fs::write(self.path("casegnn/params.json"), outcome.params.to_json())
            .map_err(|e| CliError::io(&self.path("casegnn/params.json"), e))?;
        outcome.embeddings.write(&self.path("casegnn/cases.emb.jsonl"))?;
        charge_emb.write(&self.path("casegnn/charges.emb.jsonl"))?;
        write_log(&self.path("casegnn/log.jsonl"), &outcome.log)?;
        Ok(BTreeMap::new())
    }

    fn graph(&self) -> Result<BTreeMap<String, String>, CliError> {
        let case_emb = EmbeddingStore::read(&self.path("casegnn/cases.emb.jsonl"))?;
        let charge_emb = EmbeddingStore::read(&self.path("casegnn/charges.emb.jsonl"))?;
        let charges = self.load_charges()?;
        let g = &self.cfg.graph;
        for name in self.splits() {
            let split = self.load_split(name)?;
            let pool: Vec<CaseDocument> = split.pool().into_iter().cloned().collect();
            let graph = build_graph(&pool, &charges, &case_emb, &charge_emb, g.k, g.delta, g.mode)?;
            graph.write(&self.path(&format!("graph/{name}.json")))?;
            write_json(&self.path(&format!("graph/{name}.stats.json")), &graph_stats(&graph))?;
        }
        Ok(BTreeMap::new())
    }

    fn train(&self) -> Result<BTreeMap<String, String>, CliError> {
        let name = &self.cfg.data.train_split;
        let split = self.load_split(name)?;
        let graph = CaseLinkGraph::read(&self.path(&format!("graph/{name}.json")))?;
        let outcome = train_caselink(&split, &graph, &self.cfg.training)?;
        outcome.params.save(&self.path("model/params.json"))?;
        write_log(&self.path("model/log.jsonl"), &outcome.log)?;
        write_json(
            &self.path("model/summary.json"),
            &serde_json::json!({
                "best_epoch": outcome.best_epoch,
                "best_val_ndcg5": outcome.best_val,
                "epochs_run": outcome.log.len(),
            }),
        )?;
        Ok(BTreeMap::new())
    }

    fn retrieve(&self) -> Result<BTreeMap<String, String>, CliError> {
        let name = &self.cfg.data.test_split;
        let split = self.load_split(name)?;
        let graph = CaseLinkGraph::read(&self.path(&format!("graph/{name}.json")))?;
        let params = ModelParams::load(&self.path("model/params.json"))?;
        let (queries, candidates) = labelled_queries(&split);
        let run = retrieve(&graph, &params, &queries, &candidates, None)?;
        run.write(&self.path(&format!("retrieval/{name}.run.jsonl")))?;
        Ok(BTreeMap::new())
    }

    fn evaluate(&self) -> Result<BTreeMap<String, String>, CliError> {
        let name = &self.cfg.data.test_split;
        let e = &self.cfg.eval;
        let opts = EvalOptions {
            k: e.k,
            map_at_k: e.map_at_k,
        };
        let split = self.load_split(name)?;
        let run = RetrievalRun::read(&self.path(&format!("retrieval/{name}.run.jsonl")))?;
        let model = evaluate_with(&run, &split.labels, opts)?;
        let random = random_baseline(&split.labels, split.candidates.len(), e.k, e.baseline_trials, self.cfg.seed)?;
        let bm25 = evaluate_with(&bm25_run(&split, None)?, &split.labels, opts)?;
        let shuffled = evaluate_with(&bm25_run(&split, Some(self.cfg.seed))?, &split.labels, opts)?;

        write_json(&self.path("eval/metrics.json"), &model)?;
        let table = model.to_table();
        fs::write(self.path("eval/table.txt"), &table).map_err(|err| CliError::io(&self.path("eval/table.txt"), err))?;
        write_json(&self.path("eval/random_baseline.json"), &random)?;
        write_json(&self.path("eval/bm25.json"), &bm25)?;
        write_json(&self.path("eval/bm25_shuffled.json"), &shuffled)?;
        let summary = EvalSummary {
            split: name.clone(),
            model: model.summary(),
            random: random.summary(),
            bm25: bm25.summary(),
            bm25_shuffled: shuffled.summary(),
        };
        write_json(&self.path("eval/summary.json"), &summary)?;
        println!("{table}");
        Ok(BTreeMap::new())
    }

    fn stats(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut report = Vec::new();
        for name in self.splits() {
            let split = self.load_split(name)?;
            let s = dataset_statistics(&split);
            println!(
                "{:<8} queries {:>5}  candidates {:>6}  relevant/query {:>6.2}  avg length {:>8.1}  max length {:>6}",
                s.split, s.num_queries, s.num_candidates, s.avg_relevant_per_query, s.avg_case_length, s.max_case_length
            );
            report.push(s);
        }
        write_json(&self.path("stats/dataset.json"), &report)?;
        Ok(BTreeMap::new())
    }

    // ---- readers for finished runs -------------------------------------

    pub fn read_metrics(&self) -> Result<MetricReport, CliError> {
        read_json(&self.path("eval/metrics.json"))
    }

    pub fn read_summary(&self) -> Result<EvalSummary, CliError> {
        read_json(&self.path("eval/summary.json"))
    }

    pub fn run_file(&self) -> PathBuf {
        self.path(&format!("retrieval/{}.run.jsonl", self.cfg.data.test_split))
    }
}

/// Sorted ids of the queries with labels, and the candidate ids.
pub fn labelled_queries(split: &DatasetSplit) -> (Vec<String>, Vec<String>) {
    let queries: Vec<String> = split
        .queries
        .iter()
        .filter(|q| split.labels.relevant(&q.id).is_some_and(|r| !r.is_empty()))
        .map(|q| q.id.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let candidates = split.candidates.iter().map(|c| c.id.clone()).collect();
    (queries, candidates)
}

/// BM25 over the candidate pool. With `shuffle_seed`, candidate texts are
/// permuted across ids first: same vocabulary statistics, no signal.
pub fn bm25_run(split: &DatasetSplit, shuffle_seed: Option<u64>) -> Result<RetrievalRun, CliError> {
    let mut docs: Vec<CaseDocument> = split.candidates.clone();
    if let Some(seed) = shuffle_seed {
        let mut texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
        texts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (d, t) in docs.iter_mut().zip(texts) {
            d.text = t;
        }
    }
    let index = Bm25Index::build(&docs, DEFAULT_K1, DEFAULT_B)?;
    let (queries, _) = labelled_queries(split);
    let text_of: BTreeMap<&str, &str> = split.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
    let mut run = RetrievalRun::new();
    for q in &queries {
        let mut ranked: Vec<(String, f64)> = index
            .ranked(text_of[q.as_str()])
            .into_iter()
            .filter(|(id, _)| id != q)
            .collect();
        ranked.sort_by(|a, b| by_score_then_id((&a.0, a.1), (&b.0, b.1)));
        run.insert(q.clone(), ranked)?;
    }
    Ok(run)
}
