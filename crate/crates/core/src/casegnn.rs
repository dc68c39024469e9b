//! Simplified CaseGNN feature stage.
//!
//! Each case gets a fact graph and an issue graph whose nodes are entity
//! strings pulled out of the view texts by a rule-based triplet extractor.
//! A virtual node carrying the view embedding is wired to every other node
//! and serves as the readout of a two-layer graph attention encoder. The
//! case embedding is `[fact readout | issue readout]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, ChargeEntry, DatasetSplit};
use crate::encoders::{toy_hash, EmbeddingStore, Encoder, EncoderError};
use crate::neural::{gat_layer, AttentionGraph, GatWeights, NeuralError, Tape, Tensor, Var};
use crate::promptcase::{split_sentences, CaseViews};
use crate::training::{info_nce_on_tape, split_validation, Adam, ContrastiveItem, ContrastiveSetup, EpochLog, TrainConfig, TrainError};

/// Id of the readout node in every text graph.
pub const VIRTUAL_NODE_ID: &str = "<virtual>";

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "in", "on", "at", "by", "for", "with", "from", "and", "or", "but", "as", "that",
    "this", "these", "those", "it", "its", "is", "was", "were", "be", "been", "are", "has", "had", "have", "his",
    "her", "their", "there", "which", "who", "whom", "not", "no", "so", "such", "into", "upon", "than",
];

const VERBS: &[&str] = &[
    "held", "found", "ruled", "allowed", "granted", "denied", "dismissed", "ordered", "rejected", "affirmed",
    "considered", "reviewed", "argued", "claimed", "sought", "made", "filed", "appealed", "refused", "applied",
    "quashed", "upheld", "set", "heard", "gave", "took", "said", "accepted", "concluded", "determined",
];

#[derive(Debug, Error)]
pub enum CaseGnnError {
    #[error("text-graph node features need the toy-hash encoder; {0} cannot embed free text")]
    UnsupportedEncoder(String),
    #[error("view embedding of length {len} cannot be split into three views of dimension {dim}")]
    ViewDim { len: usize, dim: usize },
    #[error("no text graphs for case `{0}`")]
    MissingGraph(String),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("text graph file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed text graph file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Clone, Copy, PartialEq)]
enum Word {
    Noun,
    Verb,
}

fn classify(token: &str) -> Option<Word> {
    if STOPWORDS.contains(&token) || token.chars().all(|c| c.is_ascii_digit()) {
        None
    } else if VERBS.contains(&token) || (token.len() > 4 && token.ends_with("ed")) {
        Some(Word::Verb)
    } else {
        Some(Word::Noun)
    }
}

/// Rule-based `(subject, relation, object)` extraction. Within a sentence,
/// stopwords are dropped, the remaining tokens are grouped into runs of
/// noun-ish and verb-ish words (verb-ish: a fixed list or an `-ed` ending),
/// and every noun run / verb run / noun run sequence yields one triplet.
pub fn extract_triplets(text: &str) -> Vec<Triplet> {
    let mut out = Vec::new();
    for sentence in split_sentences(text) {
        let mut runs: Vec<(Word, Vec<String>)> = Vec::new();
        for tok in tokenize(sentence) {
            let Some(kind) = classify(&tok) else { continue };
            match runs.last_mut() {
                Some((k, words)) if *k == kind => words.push(tok),
                _ => runs.push((kind, vec![tok])),
            }
        }
        for w in runs.windows(3) {
            if let [(Word::Noun, s), (Word::Verb, r), (Word::Noun, o)] = w {
                out.push(Triplet {
                    subject: s.join(" "),
                    relation: r.join(" "),
                    object: o.join(" "),
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphTag {
    Fact,
    Issue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextNode {
    pub id: String,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextEdgeKind {
    Relation,
    Virtual,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TextEdge {
    pub src: usize,
    pub dst: usize,
    pub kind: TextEdgeKind,
}

/// Entity nodes followed by the virtual node. Relation edges point from
/// subject to object; each virtual edge is stored once as
/// `(virtual, node)` and carries messages both ways.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextGraph {
    pub tag: GraphTag,
    pub nodes: Vec<TextNode>,
    pub edges: Vec<TextEdge>,
    pub virtual_node: usize,
}

impl TextGraph {
    pub fn feature_dim(&self) -> usize {
        self.nodes[self.virtual_node].feature.len()
    }

    pub fn virtual_degree(&self) -> usize {
        self.edges.iter().filter(|e| e.kind == TextEdgeKind::Virtual).count()
    }

    pub fn to_attention_graph(&self) -> AttentionGraph {
        let mut pairs = Vec::new();
        for e in &self.edges {
            pairs.push((e.src, e.dst));
            if e.kind == TextEdgeKind::Virtual {
                pairs.push((e.dst, e.src));
            }
        }
        AttentionGraph::untyped(self.nodes.len(), &pairs)
    }

    pub fn features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.nodes.iter().map(|n| n.feature.as_slice()).collect();
        Tensor::from_rows(&rows)
    }

    /// Copy with entity nodes reordered: old entity `i` moves to `perm[i]`.
    /// The virtual node stays last.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.virtual_node;
        let map = |i: usize| if i == n { n } else { perm[i] };
        let mut nodes = self.nodes.clone();
        for (i, node) in self.nodes.iter().enumerate().take(n) {
            nodes[perm[i]] = node.clone();
        }
        let mut edges: Vec<TextEdge> = self
            .edges
            .iter()
            .map(|e| TextEdge {
                src: map(e.src),
                dst: map(e.dst),
                kind: e.kind,
            })
            .collect();
        edges.sort();
        Self {
            tag: self.tag,
            nodes,
            edges,
            virtual_node: n,
        }
    }
}

fn node_encoder(encoder: &Encoder) -> Result<usize, CaseGnnError> {
    match encoder {
        Encoder::ToyHash { dim } => Ok(*dim),
        Encoder::ExternalFile { path } => Err(CaseGnnError::UnsupportedEncoder(path.display().to_string())),
    }
}

/// View embedding slice for `tag`, assuming `[fact | issue | full]` layout.
pub fn view_slice(views_embedding: &[f64], tag: GraphTag) -> Result<&[f64], CaseGnnError> {
    let len = views_embedding.len();
    if len == 0 || len % 3 != 0 {
        return Err(CaseGnnError::ViewDim { len, dim: len / 3 });
    }
    let d = len / 3;
    Ok(match tag {
        GraphTag::Fact => &views_embedding[..d],
        GraphTag::Issue => &views_embedding[d..2 * d],
    })
}

/// Builds one text graph. `views_embedding` is the case's full
/// three-view embedding; the slice for `tag` becomes the virtual node's
/// feature. Entity features come from the toy-hash encoder, whose
/// dimension must match the slice.
pub fn build_text_graph(
    views_embedding: &[f64],
    triplets: &[Triplet],
    encoder: &Encoder,
    tag: GraphTag,
) -> Result<TextGraph, CaseGnnError> {
    let dim = node_encoder(encoder)?;
    let slice = view_slice(views_embedding, tag)?;
    if slice.len() != dim {
        return Err(CaseGnnError::ViewDim {
            len: views_embedding.len(),
            dim,
        });
    }
    let mut index: BTreeMap<&str, usize> = BTreeMap::new();
    let mut nodes = Vec::new();
    let mut relation = BTreeSet::new();
    for t in triplets {
        let s = intern(&t.subject, &mut index, &mut nodes, dim);
        let o = intern(&t.object, &mut index, &mut nodes, dim);
        if s != o {
            relation.insert((s, o));
        }
    }
    let v = nodes.len();
    nodes.push(TextNode {
        id: VIRTUAL_NODE_ID.into(),
        feature: slice.to_vec(),
    });
    let mut edges: Vec<TextEdge> = relation
        .into_iter()
        .map(|(src, dst)| TextEdge {
            src,
            dst,
            kind: TextEdgeKind::Relation,
        })
        .collect();
    edges.extend((0..v).map(|i| TextEdge {
        src: v,
        dst: i,
        kind: TextEdgeKind::Virtual,
    }));
    Ok(TextGraph {
        tag,
        nodes,
        edges,
        virtual_node: v,
    })
}

fn intern<'t>(name: &'t str, index: &mut BTreeMap<&'t str, usize>, nodes: &mut Vec<TextNode>, dim: usize) -> usize {
    if let Some(&i) = index.get(name) {
        return i;
    }
    nodes.push(TextNode {
        id: name.to_string(),
        feature: toy_hash(name, dim),
    });
    index.insert(name, nodes.len() - 1);
    nodes.len() - 1
}

/// Fact and issue graphs of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseGraphs {
    pub fact: TextGraph,
    pub issue: TextGraph,
}

/// Builds both graphs for every case, in parallel.
pub fn build_case_graphs(
    views: &[CaseViews],
    view_emb: &EmbeddingStore,
    encoder: &Encoder,
) -> Result<BTreeMap<String, CaseGraphs>, CaseGnnError> {
    views
        .par_iter()
        .map(|v| {
            let emb = view_emb.require(&v.case_id)?;
            let fact = build_text_graph(emb, &extract_triplets(&v.fact_text), encoder, GraphTag::Fact)?;
            let issue = build_text_graph(emb, &extract_triplets(&v.issue_text), encoder, GraphTag::Issue)?;
            Ok((v.case_id.clone(), CaseGraphs { fact, issue }))
        })
        .collect()
}

/// Charges pass through the same encoder with their description standing
/// in for both views, so charge and case embeddings share one space.
pub fn build_charge_graphs(charges: &[ChargeEntry], encoder: &Encoder) -> Result<BTreeMap<String, CaseGraphs>, CaseGnnError> {
    let dim = node_encoder(encoder)?;
    charges
        .iter()
        .map(|c| {
            let text = if c.description.trim().is_empty() { &c.name } else { &c.description };
            let v = toy_hash(text, dim);
            let emb: Vec<f64> = v.iter().chain(&v).chain(&v).copied().collect();
            let triplets = extract_triplets(text);
            Ok((
                c.name.clone(),
                CaseGraphs {
                    fact: build_text_graph(&emb, &triplets, encoder, GraphTag::Fact)?,
                    issue: build_text_graph(&emb, &triplets, encoder, GraphTag::Issue)?,
                },
            ))
        })
        .collect()
}

pub fn write_case_graphs(path: &Path, graphs: &BTreeMap<String, CaseGraphs>) -> Result<(), CaseGnnError> {
    let raw = serde_json::to_string(graphs).expect("text graphs serialize");
    fs::write(path, raw).map_err(|source| CaseGnnError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_case_graphs(path: &Path) -> Result<BTreeMap<String, CaseGraphs>, CaseGnnError> {
    let raw = fs::read_to_string(path).map_err(|source| CaseGnnError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&raw).map_err(|e| CaseGnnError::Format(e.to_string()))
}

/// Separate two-layer attention stacks for fact and issue graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseGnnParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub fact: Vec<GatWeights<Tensor>>,
    pub issue: Vec<GatWeights<Tensor>>,
}

impl CaseGnnParams {
    pub fn init(input_dim: usize, hidden_dim: usize, num_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stack = |rng: &mut ChaCha8Rng| -> Vec<GatWeights<Tensor>> {
            (0..num_layers)
                .map(|i| GatWeights::init(rng, if i == 0 { input_dim } else { hidden_dim }, hidden_dim))
                .collect()
        };
        let fact = stack(&mut rng);
        let issue = stack(&mut rng);
        Self {
            input_dim,
            hidden_dim,
            seed,
            fact,
            issue,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    /// All tensors, fact stack first.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.fact
            .iter_mut()
            .chain(self.issue.iter_mut())
            .flat_map(|w| [&mut w.weight, &mut w.attn_dst, &mut w.attn_src])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundCaseGnn {
        let mut bind = |ws: &[GatWeights<Tensor>]| -> Vec<GatWeights<Var>> {
            ws.iter()
                .map(|w| GatWeights {
                    weight: tape.param(w.weight.clone()),
                    attn_dst: tape.param(w.attn_dst.clone()),
                    attn_src: tape.param(w.attn_src.clone()),
                })
                .collect()
        };
        BoundCaseGnn {
            fact: bind(&self.fact),
            issue: bind(&self.issue),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("casegnn params serialize")
    }

    pub fn from_json(raw: &str) -> Result<Self, CaseGnnError> {
        serde_json::from_str(raw).map_err(|e| CaseGnnError::Format(e.to_string()))
    }
}

/// Parameters recorded on a tape.
pub struct BoundCaseGnn {
    pub fact: Vec<GatWeights<Var>>,
    pub issue: Vec<GatWeights<Var>>,
}

impl BoundCaseGnn {
    /// Leaves in the order of [`CaseGnnParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        self.fact
            .iter()
            .chain(&self.issue)
            .flat_map(|w| [w.weight, w.attn_dst, w.attn_src])
            .collect()
    }
}

/// Disjoint union of several text graphs with the readout row of each.
struct Union {
    graph: AttentionGraph,
    features: Tensor,
    readout: Vec<usize>,
}

fn union<'a>(graphs: impl Iterator<Item = &'a TextGraph>, dim: usize) -> Result<Union, CaseGnnError> {
    let mut pairs = Vec::new();
    let mut data = Vec::new();
    let mut readout = Vec::new();
    let mut offset = 0;
    for g in graphs {
        if g.feature_dim() != dim {
            return Err(NeuralError::ShapeMismatch {
                what: "text graph features".into(),
                expected: (g.nodes.len(), dim),
                got: (g.nodes.len(), g.feature_dim()),
            }
            .into());
        }
        let a = g.to_attention_graph();
        pairs.extend(a.edges.iter().map(|&(s, d, _)| (s + offset, d + offset)));
        for n in &g.nodes {
            data.extend_from_slice(&n.feature);
        }
        readout.push(offset + g.virtual_node);
        offset += g.nodes.len();
    }
    Ok(Union {
        graph: AttentionGraph::untyped(offset, &pairs),
        features: Tensor::from_vec(offset, dim, data),
        readout,
    })
}

fn stack_on_tape(tape: &mut Tape, u: &Union, layers: &[GatWeights<Var>]) -> Result<Var, CaseGnnError> {
    let mut h = tape.constant(u.features.clone());
    for (i, w) in layers.iter().enumerate() {
        h = gat_layer(tape, h, &u.graph, w, i + 1 < layers.len())?;
    }
    Ok(tape.gather_rows(h, Rc::from(u.readout.clone())))
}

/// Embeddings of many cases at once, one row per case: `[fact | issue]`.
pub fn casegnn_batch_on_tape(
    tape: &mut Tape,
    cases: &[&CaseGraphs],
    input_dim: usize,
    params: &BoundCaseGnn,
) -> Result<Var, CaseGnnError> {
    let fu = union(cases.iter().map(|c| &c.fact), input_dim)?;
    let iu = union(cases.iter().map(|c| &c.issue), input_dim)?;
    let f = stack_on_tape(tape, &fu, &params.fact)?;
    let i = stack_on_tape(tape, &iu, &params.issue)?;
    Ok(tape.concat_cols(&[f, i]))
}

/// Embedding of a single case.
pub fn casegnn_forward(fact: &TextGraph, issue: &TextGraph, params: &CaseGnnParams) -> Result<Vec<f64>, CaseGnnError> {
    let cg = CaseGraphs {
        fact: fact.clone(),
        issue: issue.clone(),
    };
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = casegnn_batch_on_tape(&mut tape, &[&cg], params.input_dim, &bound)?;
    Ok(tape.value(out).row(0).to_vec())
}

/// Embeds every case in `graphs` into a store.
pub fn embed_cases(graphs: &BTreeMap<String, CaseGraphs>, params: &CaseGnnParams) -> Result<EmbeddingStore, CaseGnnError> {
    let mut store = EmbeddingStore::new(params.output_dim());
    let ids: Vec<&String> = graphs.keys().collect();
    for chunk in ids.chunks(256) {
        let cases: Vec<&CaseGraphs> = chunk.iter().map(|id| &graphs[*id]).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = casegnn_batch_on_tape(&mut tape, &cases, params.input_dim, &bound)?;
        let v = tape.value(out);
        for (r, id) in chunk.iter().enumerate() {
            store.insert((*id).clone(), v.row(r).to_vec())?;
        }
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub struct CaseGnnOutcome {
    pub params: CaseGnnParams,
    pub embeddings: EmbeddingStore,
    pub log: Vec<EpochLog>,
    /// Mean loss of the first epoch's batches under the initial parameters
    /// and again after that epoch's updates (`None` when no epoch ran).
    pub first_epoch_losses: Option<(f64, f64)>,
}

/// Loss of `items` (rows index `cases`) with only the involved cases
/// encoded.
fn batch_loss(
    tape: &mut Tape,
    bound: &BoundCaseGnn,
    cases: &[&CaseGraphs],
    items: &[ContrastiveItem],
    input_dim: usize,
    tau: f64,
) -> Result<Var, CaseGnnError> {
    let mut used: Vec<usize> = items
        .iter()
        .flat_map(|it| std::iter::once(it.query).chain(std::iter::once(it.positive)).chain(it.negatives.iter().copied()))
        .collect();
    used.sort_unstable();
    used.dedup();
    let local: BTreeMap<usize, usize> = used.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let sub: Vec<&CaseGraphs> = used.iter().map(|&r| cases[r]).collect();
    let remapped: Vec<ContrastiveItem> = items
        .iter()
        .map(|it| ContrastiveItem {
            query: local[&it.query],
            positive: local[&it.positive],
            negatives: it.negatives.iter().map(|n| local[n]).collect(),
        })
        .collect();
    let states = casegnn_batch_on_tape(tape, &sub, input_dim, bound)?;
    Ok(info_nce_on_tape(tape, states, &remapped, tau)?)
}

fn mean_loss(
    params: &CaseGnnParams,
    cases: &[&CaseGraphs],
    batches: &[Vec<ContrastiveItem>],
    tau: f64,
) -> Result<f64, CaseGnnError> {
    let mut total = 0.0;
    for b in batches {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = batch_loss(&mut tape, &bound, cases, b, params.input_dim, tau)?;
        total += tape.value(l).item();
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Trains the encoder with InfoNCE on one split and embeds every case of
/// `graphs` with the final parameters. `config.hidden_dim` is the width of
/// each readout.
pub fn train_casegnn(
    split: &DatasetSplit,
    graphs: &BTreeMap<String, CaseGraphs>,
    config: &TrainConfig,
) -> Result<CaseGnnOutcome, CaseGnnError> {
    config.validate()?;
    let input_dim = graphs
        .values()
        .next()
        .map(|g| g.fact.feature_dim())
        .ok_or_else(|| CaseGnnError::MissingGraph("<any>".into()))?;
    let mut params = CaseGnnParams::init(input_dim, config.hidden_dim, config.num_layers, config.seed);

    let order: Vec<String> = split.pool().into_iter().map(|d| d.id.clone()).collect();
    let cases: Vec<&CaseGraphs> = order
        .iter()
        .map(|id| graphs.get(id).ok_or_else(|| CaseGnnError::MissingGraph(id.clone())))
        .collect::<Result<_, _>>()?;
    let row_of = order.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();

    let mut log = Vec::new();
    let mut first = None;
    if config.epochs > 0 {
        let setup = ContrastiveSetup::new(split, config.n_hard)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_ca5e);
        // Same held-out queries as the CaseLink stage would see; they are
        // simply left out of the contrastive stream here.
        let (train_q, _val) = split_validation(&setup.queries, config.validation_fraction, &mut rng.clone());
        let mut opt = Adam::new(config.lr, config.weight_decay);
        for epoch in 1..=config.epochs {
            let items = setup.items(&train_q, &row_of, config.n_easy, &mut rng)?;
            let batches: Vec<Vec<ContrastiveItem>> = items.chunks(config.batch_size).map(<[_]>::to_vec).collect();
            let before = if epoch == 1 { Some(mean_loss(&params, &cases, &batches, config.tau)?) } else { None };
            let mut total = 0.0;
            for (b, batch) in batches.iter().enumerate() {
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let loss = batch_loss(&mut tape, &bound, &cases, batch, input_dim, config.tau)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::Diverged { epoch, batch: b, loss: value }.into());
                }
                total += value;
                let grads = tape.backward(loss);
                let grads: Vec<Tensor> = bound.vars().into_iter().map(|v| grads.wrt(v)).collect();
                opt.step(params.tensors_mut(), &grads);
            }
            if let Some(b) = before {
                first = Some((b, mean_loss(&params, &cases, &batches, config.tau)?));
            }
            log.push(EpochLog {
                epoch,
                train_loss: total / batches.len().max(1) as f64,
                val_ndcg5: None,
                lr: config.lr,
            });
            log::debug!("casegnn epoch {epoch}: mean loss {}", total / batches.len().max(1) as f64);
        }
    }
    let embeddings = embed_cases(graphs, &params)?;
    Ok(CaseGnnOutcome {
        params,
        embeddings,
        log,
        first_epoch_losses: first,
    })
}
