//! Graph attention layers over an [`AttentionGraph`].

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::NeuralError;

/// Slope of the leaky-relu applied to attention logits.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Relation key used for the self-loop every node receives at model time.
pub const SELF_RELATION: &str = "self";

/// The model-facing view of a graph: typed nodes and directed typed edges.
///
/// Self-loops are never stored; layers add one per node.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGraph {
    pub num_nodes: usize,
    pub node_type: Vec<usize>,
    pub node_type_names: Vec<String>,
    pub edge_type_names: Vec<String>,
    /// `(src, dst, edge_type)`; messages flow from `src` into `dst`.
    pub edges: Vec<(usize, usize, usize)>,
}

impl AttentionGraph {
    /// Single node type, single edge type.
    pub fn untyped(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        Self {
            num_nodes,
            node_type: vec![0; num_nodes],
            node_type_names: vec!["node".into()],
            edge_type_names: vec!["edge".into()],
            edges: edges.iter().map(|&(s, d)| (s, d, 0)).collect(),
        }
    }

    /// Edge lists with one self-loop appended per node, type ignored.
    fn with_self_loops(&self) -> (Vec<usize>, Vec<usize>) {
        let mut src: Vec<usize> = self.edges.iter().map(|e| e.0).collect();
        let mut dst: Vec<usize> = self.edges.iter().map(|e| e.1).collect();
        src.extend(0..self.num_nodes);
        dst.extend(0..self.num_nodes);
        (src, dst)
    }

    /// Returns a copy with nodes relabelled so that old node `i` becomes
    /// `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut node_type = vec![0; self.num_nodes];
        for (i, &p) in perm.iter().enumerate() {
            node_type[p] = self.node_type[i];
        }
        Self {
            num_nodes: self.num_nodes,
            node_type,
            node_type_names: self.node_type_names.clone(),
            edge_type_names: self.edge_type_names.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(s, d, t)| (perm[s], perm[d], t))
                .collect(),
        }
    }
}

/// Single-head graph attention weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatWeights<T> {
    pub weight: T,
    pub attn_dst: T,
    pub attn_src: T,
}

/// Typed attention weights: one projection per node type, one relation
/// matrix and attention vector pair per edge type (self-loops included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HgtWeights<T> {
    pub node_types: Vec<String>,
    pub edge_types: Vec<String>,
    pub proj: Vec<T>,
    pub rel: Vec<T>,
    pub attn_dst: Vec<T>,
    pub attn_src: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerWeights<T> {
    Gat(GatWeights<T>),
    Hgt(HgtWeights<T>),
}

impl<T> LayerWeights<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LayerWeights<U> {
        match self {
            LayerWeights::Gat(w) => LayerWeights::Gat(GatWeights {
                weight: f(&w.weight),
                attn_dst: f(&w.attn_dst),
                attn_src: f(&w.attn_src),
            }),
            LayerWeights::Hgt(w) => LayerWeights::Hgt(HgtWeights {
                node_types: w.node_types.clone(),
                edge_types: w.edge_types.clone(),
                proj: w.proj.iter().map(&mut *f).collect(),
                rel: w.rel.iter().map(&mut *f).collect(),
                attn_dst: w.attn_dst.iter().map(&mut *f).collect(),
                attn_src: w.attn_src.iter().map(&mut *f).collect(),
            }),
        }
    }

    /// Flat `(name, value)` listing in a fixed order.
    pub fn named(&self) -> Vec<(String, &T)> {
        match self {
            LayerWeights::Gat(w) => vec![
                ("weight".into(), &w.weight),
                ("attn_dst".into(), &w.attn_dst),
                ("attn_src".into(), &w.attn_src),
            ],
            LayerWeights::Hgt(w) => {
                let mut out = Vec::new();
                for (n, t) in w.node_types.iter().zip(&w.proj) {
                    out.push((format!("proj.{n}"), t));
                }
                for (i, e) in w.edge_types.iter().enumerate() {
                    out.push((format!("rel.{e}"), &w.rel[i]));
                    out.push((format!("attn_dst.{e}"), &w.attn_dst[i]));
                    out.push((format!("attn_src.{e}"), &w.attn_src[i]));
                }
                out
            }
        }
    }

    /// Mutable values in the same order as [`LayerWeights::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        match self {
            LayerWeights::Gat(w) => vec![&mut w.weight, &mut w.attn_dst, &mut w.attn_src],
            LayerWeights::Hgt(w) => {
                let mut out: Vec<&mut T> = w.proj.iter_mut().collect();
                for ((r, d), s) in w
                    .rel
                    .iter_mut()
                    .zip(w.attn_dst.iter_mut())
                    .zip(w.attn_src.iter_mut())
                {
                    out.push(r);
                    out.push(d);
                    out.push(s);
                }
                out
            }
        }
    }
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-limit..limit))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

impl GatWeights<Tensor> {
    pub fn init(rng: &mut impl Rng, in_dim: usize, out_dim: usize) -> Self {
        let attn = glorot(rng, 2 * out_dim, 1);
        let (dst, src) = attn.data().split_at(out_dim);
        Self {
            weight: glorot(rng, in_dim, out_dim),
            attn_dst: Tensor::from_vec(out_dim, 1, dst.to_vec()),
            attn_src: Tensor::from_vec(out_dim, 1, src.to_vec()),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Tensor::zeros(in_dim, out_dim),
            attn_dst: Tensor::zeros(out_dim, 1),
            attn_src: Tensor::zeros(out_dim, 1),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl HgtWeights<Tensor> {
    /// Relation matrices start at the identity; the `self` relation is
    /// appended to `edge_types` automatically.
    pub fn init(
        rng: &mut impl Rng,
        node_types: &[String],
        edge_types: &[String],
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        let mut relations: Vec<String> = edge_types.to_vec();
        relations.push(SELF_RELATION.into());
        let proj = node_types
            .iter()
            .map(|_| glorot(rng, in_dim, out_dim))
            .collect();
        let mut attn_dst = Vec::new();
        let mut attn_src = Vec::new();
        for _ in &relations {
            let attn = glorot(rng, 2 * out_dim, 1);
            let (d, s) = attn.data().split_at(out_dim);
            attn_dst.push(Tensor::from_vec(out_dim, 1, d.to_vec()));
            attn_src.push(Tensor::from_vec(out_dim, 1, s.to_vec()));
        }
        Self {
            node_types: node_types.to_vec(),
            rel: relations.iter().map(|_| Tensor::identity(out_dim)).collect(),
            edge_types: relations,
            proj,
            attn_dst,
            attn_src,
        }
    }

    /// Every bank tied to one set of graph attention weights, relation
    /// matrices fixed at the identity.
    pub fn tied_to(gat: &GatWeights<Tensor>, node_types: &[String], edge_types: &[String]) -> Self {
        let mut relations: Vec<String> = edge_types.to_vec();
        relations.push(SELF_RELATION.into());
        let n_rel = relations.len();
        Self {
            node_types: node_types.to_vec(),
            edge_types: relations,
            proj: vec![gat.weight.clone(); node_types.len()],
            rel: vec![Tensor::identity(gat.out_dim()); n_rel],
            attn_dst: vec![gat.attn_dst.clone(); n_rel],
            attn_src: vec![gat.attn_src.clone(); n_rel],
        }
    }
}

fn expect_shape(
    what: &str,
    got: (usize, usize),
    expected: (usize, usize),
) -> Result<(), NeuralError> {
    if got != expected {
        return Err(NeuralError::ShapeMismatch {
            what: what.to_string(),
            expected,
            got,
        });
    }
    Ok(())
}

/// One single-head graph attention layer.
///
/// For every node `v`, attention logits `leaky_relu(a_dst . W h_v + a_src . W h_u)`
/// are softmax-normalized over `N(v)` plus `v` itself and used to weight the
/// projected neighbor states. ELU is applied when `activate` is set.
pub fn gat_layer(
    tape: &mut Tape,
    states: Var,
    graph: &AttentionGraph,
    w: &GatWeights<Var>,
    activate: bool,
) -> Result<Var, NeuralError> {
    let (n, in_dim) = tape.shape(states);
    expect_shape("node states", (n, in_dim), (graph.num_nodes, in_dim))?;
    let (w_in, out_dim) = tape.shape(w.weight);
    expect_shape("gat weight", (w_in, out_dim), (in_dim, out_dim))?;
    expect_shape("gat attn_dst", tape.shape(w.attn_dst), (out_dim, 1))?;
    expect_shape("gat attn_src", tape.shape(w.attn_src), (out_dim, 1))?;

    let (src, dst) = graph.with_self_loops();
    let src: Rc<[usize]> = Rc::from(src);
    let dst: Rc<[usize]> = Rc::from(dst);

    let z = tape.matmul(states, w.weight);
    let s_dst = tape.matmul(z, w.attn_dst);
    let s_src = tape.matmul(z, w.attn_src);
    let e_dst = tape.gather_rows(s_dst, dst.clone());
    let e_src = tape.gather_rows(s_src, src.clone());
    let logits = tape.add(e_dst, e_src);
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    let alpha = tape.segment_softmax(logits, dst.clone());
    let messages = tape.gather_rows(z, src);
    let weighted = tape.mul_col_vec(messages, alpha);
    let out = tape.scatter_add_rows(weighted, dst, n);
    Ok(if activate { tape.elu(out) } else { out })
}

fn resolve_types(names: &[String], bank: &[String], kind: &str) -> Result<Vec<usize>, NeuralError> {
    let lookup: BTreeMap<&str, usize> = bank
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    names
        .iter()
        .map(|n| {
            lookup
                .get(n.as_str())
                .copied()
                .ok_or_else(|| NeuralError::UnknownType(format!("{kind} type `{n}`")))
        })
        .collect()
}

/// Simplified single-head heterogeneous graph transformer layer.
///
/// Each node is projected by its node-type matrix. A message along an edge
/// of type `r` is the projected source state times the relation matrix
/// `R_r`; its logit is `leaky_relu(a_dst_r . z_v + a_src_r . z_u R_r)`.
/// Logits are normalized jointly over all incoming edges of `v` (self-loop
/// included), messages are aggregated per edge type and the per-type sums
/// are added.
pub fn hgt_layer(
    tape: &mut Tape,
    states: Var,
    graph: &AttentionGraph,
    w: &HgtWeights<Var>,
    activate: bool,
) -> Result<Var, NeuralError> {
    let (n, in_dim) = tape.shape(states);
    expect_shape("node states", (n, in_dim), (graph.num_nodes, in_dim))?;
    let node_map = resolve_types(&graph.node_type_names, &w.node_types, "node")?;
    let edge_map = resolve_types(&graph.edge_type_names, &w.edge_types, "edge")?;
    let self_rel = w
        .edge_types
        .iter()
        .position(|e| e == SELF_RELATION)
        .ok_or_else(|| NeuralError::UnknownType(format!("edge type `{SELF_RELATION}`")))?;
    if w.proj.is_empty() {
        return Err(NeuralError::UnknownType("empty node type bank".into()));
    }
    let out_dim = tape.shape(w.proj[0]).1;
    for &p in &w.proj {
        expect_shape("hgt projection", tape.shape(p), (in_dim, out_dim))?;
    }
    for i in 0..w.edge_types.len() {
        expect_shape("hgt relation", tape.shape(w.rel[i]), (out_dim, out_dim))?;
        expect_shape("hgt attn_dst", tape.shape(w.attn_dst[i]), (out_dim, 1))?;
        expect_shape("hgt attn_src", tape.shape(w.attn_src[i]), (out_dim, 1))?;
    }

    // Per-node-type projection into a shared space.
    let mut projected = None;
    for (local, &bank) in node_map.iter().enumerate() {
        let idx: Vec<usize> = (0..n).filter(|&v| graph.node_type[v] == local).collect();
        if idx.is_empty() {
            continue;
        }
        let idx: Rc<[usize]> = Rc::from(idx);
        let rows = tape.gather_rows(states, idx.clone());
        let z = tape.matmul(rows, w.proj[bank]);
        let z = tape.scatter_add_rows(z, idx, n);
        projected = Some(match projected {
            None => z,
            Some(acc) => tape.add(acc, z),
        });
    }
    let z = projected.expect("graph has at least one node");

    // Group edges by relation bank; self-loops last.
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for &(s, d, t) in &graph.edges {
        let g = groups.entry(edge_map[t]).or_default();
        g.0.push(s);
        g.1.push(d);
    }
    {
        let g = groups.entry(self_rel).or_default();
        g.0.extend(0..n);
        g.1.extend(0..n);
    }

    let mut keys = Vec::new();
    let mut logits = Vec::new();
    let mut all_dst = Vec::new();
    for (&bank, (src, dst)) in &groups {
        let src: Rc<[usize]> = Rc::from(src.clone());
        let dst_rc: Rc<[usize]> = Rc::from(dst.clone());
        let zs = tape.gather_rows(z, src);
        let k = tape.matmul(zs, w.rel[bank]);
        let s_dst = tape.matmul(z, w.attn_dst[bank]);
        let e_dst = tape.gather_rows(s_dst, dst_rc.clone());
        let e_src = tape.matmul(k, w.attn_src[bank]);
        let l = tape.add(e_dst, e_src);
        logits.push(tape.leaky_relu(l, LEAKY_SLOPE));
        keys.push((k, dst_rc));
        all_dst.extend_from_slice(dst);
    }
    let logits = tape.concat_rows(&logits);
    let alpha = tape.segment_softmax(logits, Rc::from(all_dst));

    let mut out = None;
    let mut offset = 0;
    for (k, dst) in keys {
        let len = dst.len();
        let alpha_r = tape.gather_rows(alpha, Rc::from((offset..offset + len).collect::<Vec<_>>()));
        offset += len;
        let msg = tape.mul_col_vec(k, alpha_r);
        let agg = tape.scatter_add_rows(msg, dst, n);
        out = Some(match out {
            None => agg,
            Some(acc) => tape.add(acc, agg),
        });
    }
    let out = out.expect("self-loops guarantee at least one relation");
    Ok(if activate { tape.elu(out) } else { out })
}

/// Applies one layer of either kind.
pub fn apply_layer(
    tape: &mut Tape,
    states: Var,
    graph: &AttentionGraph,
    w: &LayerWeights<Var>,
    activate: bool,
) -> Result<Var, NeuralError> {
    match w {
        LayerWeights::Gat(w) => gat_layer(tape, states, graph, w, activate),
        LayerWeights::Hgt(w) => hgt_layer(tape, states, graph, w, activate),
    }
}

/// Binds tensors to fresh trainable leaves.
pub fn bind_layer(tape: &mut Tape, w: &LayerWeights<Tensor>) -> LayerWeights<Var> {
    w.map(&mut |t| tape.param(t.clone()))
}

/// Evaluates one layer outside of training.
pub fn layer_forward(
    states: &Tensor,
    graph: &AttentionGraph,
    w: &LayerWeights<Tensor>,
    activate: bool,
) -> Result<Tensor, NeuralError> {
    let mut tape = Tape::new();
    let h = tape.constant(states.clone());
    let w = w.map(&mut |t| tape.constant(t.clone()));
    let out = apply_layer(&mut tape, h, graph, &w, activate)?;
    Ok(tape.value(out).clone())
}

/// Attention coefficients of a graph attention layer as
/// `(src, dst, weight)` triples, self-loops included.
pub fn gat_attention(
    states: &Tensor,
    graph: &AttentionGraph,
    w: &GatWeights<Tensor>,
) -> Result<Vec<(usize, usize, f64)>, NeuralError> {
    let mut tape = Tape::new();
    let h = tape.constant(states.clone());
    let wv = GatWeights {
        weight: tape.constant(w.weight.clone()),
        attn_dst: tape.constant(w.attn_dst.clone()),
        attn_src: tape.constant(w.attn_src.clone()),
    };
    expect_shape("node states", states.shape(), (graph.num_nodes, w.in_dim()))?;
    let (src, dst) = graph.with_self_loops();
    let z = tape.matmul(h, wv.weight);
    let s_dst = tape.matmul(z, wv.attn_dst);
    let s_src = tape.matmul(z, wv.attn_src);
    let e_dst = tape.gather_rows(s_dst, Rc::from(dst.clone()));
    let e_src = tape.gather_rows(s_src, Rc::from(src.clone()));
    let logits = tape.add(e_dst, e_src);
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    let alpha = tape.segment_softmax(logits, Rc::from(dst.clone()));
    let a = tape.value(alpha);
    Ok(src
        .into_iter()
        .zip(dst)
        .enumerate()
        .map(|(i, (s, d))| (s, d, a.get(i, 0)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_states(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        Tensor::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn isolated_node_output_is_activated_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = GatWeights::init(&mut rng, 4, 3);
        let g = AttentionGraph::untyped(1, &[]);
        let x = random_states(&mut rng, 1, 4);
        let out = layer_forward(&x, &g, &LayerWeights::Gat(w.clone()), true).unwrap();
        let expected = x.matmul(&w.weight).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        for (a, b) in out.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_linked_nodes_split_attention_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = GatWeights::init(&mut rng, 4, 3);
        let g = AttentionGraph::untyped(2, &[(0, 1), (1, 0)]);
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_rows(&[row.clone(), row]);
        for (_, _, a) in gat_attention(&x, &g, &w).unwrap() {
            assert!((a - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_sums_to_one_per_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = GatWeights::init(&mut rng, 5, 4);
        let edges = [(0, 1), (1, 0), (1, 2), (2, 1), (3, 1), (1, 3)];
        let g = AttentionGraph::untyped(5, &edges);
        let x = random_states(&mut rng, 5, 5);
        let mut sums = vec![0.0; 5];
        for (_, d, a) in gat_attention(&x, &g, &w).unwrap() {
            sums[d] += a;
        }
        for s in sums {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tied_hgt_matches_gat() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let gat = GatWeights::init(&mut rng, 6, 4);
        let edges = [(0, 1), (1, 0), (2, 3), (3, 2), (1, 2), (2, 1)];
        let g = AttentionGraph::untyped(5, &edges);
        let hgt = HgtWeights::tied_to(&gat, &g.node_type_names, &g.edge_type_names);
        let x = random_states(&mut rng, 5, 6);
        let a = layer_forward(&x, &g, &LayerWeights::Gat(gat), true).unwrap();
        let b = layer_forward(&x, &g, &LayerWeights::Hgt(hgt), true).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn hgt_rejects_unknown_type() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let hgt = HgtWeights::init(&mut rng, &["case".into()], &["case-case".into()], 3, 2);
        let g = AttentionGraph::untyped(2, &[(0, 1)]);
        let x = random_states(&mut rng, 2, 3);
        let err = layer_forward(&x, &g, &LayerWeights::Hgt(hgt), false).unwrap_err();
        assert!(matches!(err, NeuralError::UnknownType(_)));
    }

    #[test]
    fn gat_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let w = GatWeights::init(&mut rng, 3, 2);
        let g = AttentionGraph::untyped(2, &[]);
        let x = random_states(&mut rng, 2, 4);
        assert!(matches!(
            layer_forward(&x, &g, &LayerWeights::Gat(w), false),
            Err(NeuralError::ShapeMismatch { .. })
        ));
    }
}
