//! The case-charge graph: case nodes linked by lexical top-k pairs, charge
//! nodes linked by embedding similarity, and case-charge links from charge
//! names mentioned in case text.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_whitespace, CaseDocument, ChargeEntry};
use crate::encoders::EmbeddingStore;
use crate::lexical::{top_k_pairs, Bm25Index, LexicalError, DEFAULT_B, DEFAULT_K1};
use crate::neural::{caselink_forward, cosine, AttentionGraph, ModelParams, NeuralError, Tensor};

pub use crate::neural::GraphMode;

/// Node type names as seen by typed layers.
pub const NODE_TYPES: [&str; 2] = ["case", "charge"];
/// Edge type names as seen by typed layers.
pub const EDGE_TYPES: [&str; 3] = ["case-case", "charge-charge", "case-charge"];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("no embedding for {kind} `{id}`")]
    MissingEmbedding { kind: &'static str, id: String },
    #[error("embedding for `{id}` has dimension {got}, expected {expected}")]
    DimMismatch { id: String, expected: usize, got: usize },
    #[error("delta must lie in (0, 1], got {0}")]
    InvalidDelta(f64),
    #[error("node id `{0}` appears more than once")]
    DuplicateNode(String),
    #[error("edge {u}-{v} of type {edge_type:?} does not match its endpoint kinds")]
    BadEdge { u: usize, v: usize, edge_type: EdgeType },
    #[error(transparent)]
    Lexical(#[from] LexicalError),
    #[error("graph file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed graph file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Case,
    Charge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    #[serde(rename = "case-case")]
    CaseCase,
    #[serde(rename = "charge-charge")]
    ChargeCharge,
    #[serde(rename = "case-charge")]
    CaseCharge,
}

impl EdgeType {
    pub fn name(self) -> &'static str {
        match self {
            EdgeType::CaseCase => EDGE_TYPES[0],
            EdgeType::ChargeCharge => EDGE_TYPES[1],
            EdgeType::CaseCharge => EDGE_TYPES[2],
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// The only edge type allowed between nodes of these kinds.
    pub fn between(a: NodeKind, b: NodeKind) -> Self {
        match (a, b) {
            (NodeKind::Case, NodeKind::Case) => EdgeType::CaseCase,
            (NodeKind::Charge, NodeKind::Charge) => EdgeType::ChargeCharge,
            _ => EdgeType::CaseCharge,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub feature: Vec<f64>,
}

/// Undirected edge stored once with `u < v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphEdge {
    pub u: usize,
    pub v: usize,
    #[serde(rename = "type")]
    pub edge_type: EdgeType,
}

/// Node table plus typed undirected edges. In homogeneous mode the types
/// are kept for auditing but hidden from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseLinkGraph {
    pub mode: GraphMode,
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

impl CaseLinkGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.feature.len())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Id to node position.
    pub fn index_map(&self) -> HashMap<&str, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (u, v) = if a < b { (a, b) } else { (b, a) };
        self.edges.iter().any(|e| e.u == u && e.v == v)
    }

    /// Node features as a matrix aligned with `nodes`.
    pub fn features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.nodes.iter().map(|n| n.feature.as_slice()).collect();
        Tensor::from_rows(&rows)
    }

    /// Both directions of every edge, typed only in heterogeneous mode.
    pub fn to_attention_graph(&self) -> AttentionGraph {
        let both: Vec<(usize, usize, usize)> = self
            .edges
            .iter()
            .flat_map(|e| [(e.u, e.v, e.edge_type.index()), (e.v, e.u, e.edge_type.index())])
            .collect();
        match self.mode {
            GraphMode::Homogeneous => {
                let pairs: Vec<(usize, usize)> = both.iter().map(|&(s, d, _)| (s, d)).collect();
                AttentionGraph::untyped(self.num_nodes(), &pairs)
            }
            GraphMode::Heterogeneous => AttentionGraph {
                num_nodes: self.num_nodes(),
                node_type: self
                    .nodes
                    .iter()
                    .map(|n| match n.kind {
                        NodeKind::Case => 0,
                        NodeKind::Charge => 1,
                    })
                    .collect(),
                node_type_names: NODE_TYPES.iter().map(|s| s.to_string()).collect(),
                edge_type_names: EDGE_TYPES.iter().map(|s| s.to_string()).collect(),
                edges: both,
            },
        }
    }

    /// Freshly initialized parameters of the right kind for this graph.
    pub fn init_params(&self, hidden_dim: usize, num_layers: usize, seed: u64) -> ModelParams {
        match self.mode {
            GraphMode::Homogeneous => ModelParams::homogeneous(self.feature_dim(), hidden_dim, num_layers, seed),
            GraphMode::Heterogeneous => {
                let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
                ModelParams::heterogeneous(
                    &names(&NODE_TYPES),
                    &names(&EDGE_TYPES),
                    self.feature_dim(),
                    hidden_dim,
                    num_layers,
                    seed,
                )
            }
        }
    }

    /// Final node states `[h_L | x]`.
    pub fn forward(&self, params: &ModelParams) -> Result<Tensor, NeuralError> {
        caselink_forward(&self.features(), &self.to_attention_graph(), self.mode, params)
    }

    /// Checks node-id uniqueness, canonical edge order and typed endpoints.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(n.id.as_str()) {
                return Err(GraphError::DuplicateNode(n.id.clone()));
            }
        }
        let dim = self.feature_dim();
        for n in &self.nodes {
            if n.feature.len() != dim {
                return Err(GraphError::DimMismatch {
                    id: n.id.clone(),
                    expected: dim,
                    got: n.feature.len(),
                });
            }
        }
        for e in &self.edges {
            let ok = e.u < e.v
                && e.v < self.nodes.len()
                && EdgeType::between(self.nodes[e.u].kind, self.nodes[e.v].kind) == e.edge_type;
            if !ok {
                return Err(GraphError::BadEdge {
                    u: e.u,
                    v: e.v,
                    edge_type: e.edge_type,
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(raw: &str) -> Result<Self, GraphError> {
        let g: Self = serde_json::from_str(raw).map_err(|e| GraphError::Format(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn write(&self, path: &Path) -> Result<(), GraphError> {
        fs::write(path, self.to_json()).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, GraphError> {
        let raw = fs::read_to_string(path).map_err(|source| GraphError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&raw)
    }
}

fn lookup(store: &EmbeddingStore, kind: &'static str, id: &str) -> Result<Vec<f64>, GraphError> {
    store
        .get(id)
        .map(<[f64]>::to_vec)
        .ok_or_else(|| GraphError::MissingEmbedding { kind, id: id.to_string() })
}

/// Builds the graph with case-case pairs from a BM25 index over `pool`.
pub fn build_graph(
    pool: &[CaseDocument],
    charges: &[ChargeEntry],
    case_emb: &EmbeddingStore,
    charge_emb: &EmbeddingStore,
    k: usize,
    delta: f64,
    mode: GraphMode,
) -> Result<CaseLinkGraph, GraphError> {
    let pairs = if pool.is_empty() {
        BTreeSet::new()
    } else {
        let index = Bm25Index::build(pool, DEFAULT_K1, DEFAULT_B)?;
        top_k_pairs(&index, pool, k)?
    };
    build_graph_with_pairs(pool, charges, case_emb, charge_emb, &pairs, delta, mode)
}

/// Same as [`build_graph`] with precomputed case-case pairs.
pub fn build_graph_with_pairs(
    pool: &[CaseDocument],
    charges: &[ChargeEntry],
    case_emb: &EmbeddingStore,
    charge_emb: &EmbeddingStore,
    case_pairs: &BTreeSet<(String, String)>,
    delta: f64,
    mode: GraphMode,
) -> Result<CaseLinkGraph, GraphError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(GraphError::InvalidDelta(delta));
    }
    let mut nodes = Vec::with_capacity(pool.len() + charges.len());
    for d in pool {
        nodes.push(GraphNode {
            id: d.id.clone(),
            kind: NodeKind::Case,
            feature: lookup(case_emb, "case", &d.id)?,
        });
    }
    for c in charges {
        nodes.push(GraphNode {
            id: c.name.clone(),
            kind: NodeKind::Charge,
            feature: lookup(charge_emb, "charge", &c.name)?,
        });
    }
    let mut graph = CaseLinkGraph {
        mode,
        nodes,
        edges: Vec::new(),
    };
    graph.validate()?;
    let index = graph.index_map();
    let n_cases = pool.len();

    let mut edges = BTreeSet::new();
    for (a, b) in case_pairs {
        let (Some(&i), Some(&j)) = (index.get(a.as_str()), index.get(b.as_str())) else {
            continue;
        };
        if i != j {
            edges.insert(GraphEdge {
                u: i.min(j),
                v: i.max(j),
                edge_type: EdgeType::CaseCase,
            });
        }
    }

    for i in 0..charges.len() {
        for j in i + 1..charges.len() {
            let (a, b) = (&graph.nodes[n_cases + i].feature, &graph.nodes[n_cases + j].feature);
            if cosine(a, b).is_some_and(|c| c >= delta) {
                edges.insert(GraphEdge {
                    u: n_cases + i,
                    v: n_cases + j,
                    edge_type: EdgeType::ChargeCharge,
                });
            }
        }
    }

    let names: Vec<String> = charges.iter().map(|c| normalize_whitespace(&c.name).to_lowercase()).collect();
    let mentions: Vec<Vec<usize>> = pool
        .par_iter()
        .map(|d| {
            let text = normalize_whitespace(&d.text).to_lowercase();
            names
                .iter()
                .enumerate()
                .filter(|(_, n)| !n.is_empty() && text.contains(n.as_str()))
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    for (i, js) in mentions.into_iter().enumerate() {
        for j in js {
            edges.insert(GraphEdge {
                u: i,
                v: n_cases + j,
                edge_type: EdgeType::CaseCharge,
            });
        }
    }

    graph.edges = edges.into_iter().collect();
    Ok(graph)
}

/// Same topology and features, one node and edge type for the model.
pub fn collapse_to_homogeneous(g: &CaseLinkGraph) -> CaseLinkGraph {
    CaseLinkGraph {
        mode: GraphMode::Homogeneous,
        ..g.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub mode: GraphMode,
    pub num_nodes: usize,
    pub num_cases: usize,
    pub num_charges: usize,
    pub total_edges: usize,
    pub edges_by_type: BTreeMap<String, usize>,
    /// Node kind -> degree -> node count.
    pub degree_histograms: BTreeMap<String, BTreeMap<usize, usize>>,
    pub isolated: Vec<String>,
}

pub fn graph_stats(g: &CaseLinkGraph) -> GraphStats {
    let mut degree = vec![0usize; g.num_nodes()];
    let mut edges_by_type: BTreeMap<String, usize> = EDGE_TYPES.iter().map(|t| (t.to_string(), 0)).collect();
    for e in &g.edges {
        degree[e.u] += 1;
        degree[e.v] += 1;
        *edges_by_type.entry(e.edge_type.name().to_string()).or_default() += 1;
    }
    let mut degree_histograms: BTreeMap<String, BTreeMap<usize, usize>> = BTreeMap::new();
    for (n, d) in g.nodes.iter().zip(&degree) {
        let kind = NODE_TYPES[n.kind as usize].to_string();
        *degree_histograms.entry(kind).or_default().entry(*d).or_default() += 1;
    }
    GraphStats {
        mode: g.mode,
        num_nodes: g.num_nodes(),
        num_cases: g.nodes.iter().filter(|n| n.kind == NodeKind::Case).count(),
        num_charges: g.nodes.iter().filter(|n| n.kind == NodeKind::Charge).count(),
        total_edges: g.edges.len(),
        edges_by_type,
        degree_histograms,
        isolated: g
            .nodes
            .iter()
            .zip(&degree)
            .filter(|(_, &d)| d == 0)
            .map(|(n, _)| n.id.clone())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Vec<f64>)]) -> EmbeddingStore {
        let mut s = EmbeddingStore::new(entries[0].1.len());
        for (id, v) in entries {
            s.insert(id.to_string(), v.clone()).unwrap();
        }
        s
    }

    fn charge(name: &str) -> ChargeEntry {
        ChargeEntry {
            name: name.into(),
            description: String::new(),
        }
    }

    #[test]
    fn charge_edges_follow_threshold() {
        let pool = vec![CaseDocument::new("c1", "the court found Negligence in the matter")];
        let cases = store(&[("c1", vec![1.0, 0.0])]);
        let charges = store(&[
            ("negligence", vec![0.0, 1.0]),
            ("nuisance", vec![0.0, 1.0]),
            ("theft", vec![1.0, 0.0]),
        ]);
        let list = [charge("negligence"), charge("nuisance"), charge("theft")];
        let g = build_graph(&pool, &list, &cases, &charges, 5, 0.9, GraphMode::Heterogeneous).unwrap();
        let stats = graph_stats(&g);
        assert_eq!(stats.edges_by_type["charge-charge"], 1);
        assert!(g.has_edge(1, 2));
        assert!(!g.has_edge(1, 3));
        assert_eq!(stats.edges_by_type["case-charge"], 1);
        assert!(g.has_edge(0, 1));
    }

    #[test]
    fn missing_embedding_names_the_id() {
        let pool = vec![CaseDocument::new("c1", "text"), CaseDocument::new("c2", "more text")];
        let cases = store(&[("c1", vec![1.0])]);
        let err = build_graph(&pool, &[], &cases, &cases, 5, 0.9, GraphMode::Homogeneous).unwrap_err();
        assert!(err.to_string().contains("c2"));
    }

    #[test]
    fn saturated_case_pairs_form_a_clique() {
        let texts = ["alpha beta", "beta gamma", "gamma delta", "delta alpha", "alpha gamma"];
        let pool: Vec<CaseDocument> = texts.iter().enumerate().map(|(i, t)| CaseDocument::new(format!("c{i}"), *t)).collect();
        let emb = store(&pool.iter().map(|d| (d.id.as_str(), vec![1.0, 2.0])).collect::<Vec<_>>());
        let g = build_graph(&pool, &[], &emb, &emb, 10, 0.9, GraphMode::Homogeneous).unwrap();
        let stats = graph_stats(&g);
        assert_eq!(stats.edges_by_type["case-case"], 5 * 4 / 2);
        assert_eq!(stats.edges_by_type["case-charge"], 0);
        assert_eq!(stats.edges_by_type["charge-charge"], 0);
    }

    #[test]
    fn collapse_keeps_topology_and_is_idempotent() {
        let pool = vec![CaseDocument::new("a", "x y"), CaseDocument::new("b", "y z")];
        let emb = store(&[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let g = build_graph(&pool, &[], &emb, &emb, 5, 0.5, GraphMode::Heterogeneous).unwrap();
        let c = collapse_to_homogeneous(&g);
        assert_eq!(c.mode, GraphMode::Homogeneous);
        assert_eq!(graph_stats(&c).total_edges, graph_stats(&g).total_edges);
        assert_eq!(collapse_to_homogeneous(&c), c);
    }

    #[test]
    fn json_round_trip_preserves_stats() {
        let pool = vec![CaseDocument::new("a", "x y negligence"), CaseDocument::new("b", "y z")];
        let emb = store(&[("a", vec![0.3, 0.1]), ("b", vec![0.1, 0.7]), ("negligence", vec![0.2, 0.2])]);
        let g = build_graph(&pool, &[charge("negligence")], &emb, &emb, 5, 0.9, GraphMode::Heterogeneous).unwrap();
        let back = CaseLinkGraph::from_json(&g.to_json()).unwrap();
        assert_eq!(back, g);
        assert_eq!(graph_stats(&back), graph_stats(&g));
    }

    #[test]
    fn case_and_charge_ids_must_be_disjoint() {
        let pool = vec![CaseDocument::new("theft", "text")];
        let emb = store(&[("theft", vec![1.0])]);
        let err = build_graph(&pool, &[charge("theft")], &emb, &emb, 5, 0.9, GraphMode::Homogeneous).unwrap_err();
        assert!(matches!(err, GraphError::DuplicateNode(_)));
    }

    #[test]
    fn invalid_delta_is_rejected() {
        let emb = EmbeddingStore::new(2);
        for d in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                build_graph(&[], &[], &emb, &emb, 5, d, GraphMode::Homogeneous),
                Err(GraphError::InvalidDelta(_))
            ));
        }
    }
}
