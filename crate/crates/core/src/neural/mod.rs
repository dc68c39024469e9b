//! Differentiable kernel: a small reverse-mode tape, graph attention and
//! typed attention layers, the two-layer residual model, checkpoints and a
//! finite-difference gradient checker.

pub mod gradcheck;
pub mod layers;
pub mod tape;
pub mod tensor;

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gradcheck::{check_gradients, GradCheckReport, GRADCHECK_OPS};
pub use layers::{
    apply_layer, bind_layer, gat_attention, gat_layer, hgt_layer, layer_forward, AttentionGraph, GatWeights,
    HgtWeights, LayerWeights, LEAKY_SLOPE, SELF_RELATION,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{cosine, dot, l2_norm, Tensor};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("no parameters for type `{0}`")]
    UnknownType(String),
    #[error("parameters were built for {params:?} graphs but the graph is {graph:?}")]
    ModeMismatch { params: GraphMode, graph: GraphMode },
    #[error("parameter {0} contains non-finite values")]
    NonFinite(String),
    #[error("unknown gradient-check op `{0}`")]
    UnknownOp(String),
    #[error("checkpoint i/o at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

/// Whether edge and node types are visible to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    Homogeneous,
    Heterogeneous,
}

impl std::str::FromStr for GraphMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "homogeneous" | "homo" => Ok(GraphMode::Homogeneous),
            "heterogeneous" | "hetero" => Ok(GraphMode::Heterogeneous),
            other => Err(format!("unknown graph mode `{other}`")),
        }
    }
}

/// Weights of the stacked attention model plus the metadata needed to
/// rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub mode: GraphMode,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub layers: Vec<LayerWeights<Tensor>>,
}

impl ModelParams {
    /// Graph attention layers `input -> hidden -> ... -> hidden`.
    pub fn homogeneous(input_dim: usize, hidden_dim: usize, num_layers: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..num_layers)
            .map(|i| {
                let d_in = if i == 0 { input_dim } else { hidden_dim };
                LayerWeights::Gat(GatWeights::init(&mut rng, d_in, hidden_dim))
            })
            .collect();
        Self {
            mode: GraphMode::Homogeneous,
            input_dim,
            hidden_dim,
            seed,
            layers,
        }
    }

    /// Typed attention layers with one bank per node and edge type.
    pub fn heterogeneous(
        node_types: &[String],
        edge_types: &[String],
        input_dim: usize,
        hidden_dim: usize,
        num_layers: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..num_layers)
            .map(|i| {
                let d_in = if i == 0 { input_dim } else { hidden_dim };
                LayerWeights::Hgt(HgtWeights::init(&mut rng, node_types, edge_types, d_in, hidden_dim))
            })
            .collect();
        Self {
            mode: GraphMode::Heterogeneous,
            input_dim,
            hidden_dim,
            seed,
            layers,
        }
    }

    /// Width of every output row: last layer plus the residual input.
    pub fn output_dim(&self) -> usize {
        self.hidden_dim + self.input_dim
    }

    /// `(layerN.name, tensor)` in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.named().into_iter().map(move |(n, t)| (format!("layer{i}.{n}"), t)))
            .collect()
    }

    /// Mutable tensors in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.values_mut()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn validate(&self) -> Result<(), NeuralError> {
        for (name, t) in self.named() {
            if !t.is_finite() {
                return Err(NeuralError::NonFinite(name));
            }
        }
        Ok(())
    }

    /// JSON dump; floats round-trip bit-exactly.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model params serialize")
    }

    pub fn from_json(raw: &str) -> Result<Self, NeuralError> {
        let p: Self = serde_json::from_str(raw).map_err(|e| NeuralError::Format(e.to_string()))?;
        for (name, t) in p.named() {
            if t.data().len() != t.rows() * t.cols() {
                return Err(NeuralError::Format(format!("{name}: data length disagrees with shape")));
            }
        }
        p.validate()?;
        Ok(p)
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        let io = |source| NeuralError::Io {
            path: path.to_path_buf(),
            source,
        };
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let raw = fs::read_to_string(path).map_err(|source| NeuralError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&raw)
    }
}

/// Stacks the layers on an existing tape and appends the residual input:
/// `[h_L | x]`. ELU follows every layer except the last.
pub fn forward_on_tape(
    tape: &mut Tape,
    features: Var,
    graph: &AttentionGraph,
    layers: &[LayerWeights<Var>],
) -> Result<Var, NeuralError> {
    let mut h = features;
    for (i, w) in layers.iter().enumerate() {
        h = apply_layer(tape, h, graph, w, i + 1 < layers.len())?;
    }
    Ok(tape.concat_cols(&[h, features]))
}

/// Inference forward pass of the CaseLink model.
pub fn caselink_forward(
    features: &Tensor,
    graph: &AttentionGraph,
    mode: GraphMode,
    params: &ModelParams,
) -> Result<Tensor, NeuralError> {
    if mode != params.mode {
        return Err(NeuralError::ModeMismatch {
            params: params.mode,
            graph: mode,
        });
    }
    if features.cols() != params.input_dim {
        return Err(NeuralError::ShapeMismatch {
            what: "node features".into(),
            expected: (graph.num_nodes, params.input_dim),
            got: features.shape(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let layers: Vec<_> = params.layers.iter().map(|l| l.map(&mut |t| tape.constant(t.clone()))).collect();
    let out = forward_on_tape(&mut tape, x, graph, &layers)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> AttentionGraph {
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen_bool(0.3) {
                    edges.push((a, b));
                    edges.push((b, a));
                }
            }
        }
        AttentionGraph::untyped(n, &edges)
    }

    fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn output_width_is_hidden_plus_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 7);
        let x = random_tensor(&mut rng, 7, 5);
        let p = ModelParams::homogeneous(5, 4, 2, 1);
        let out = caselink_forward(&x, &g, GraphMode::Homogeneous, &p).unwrap();
        assert_eq!(out.shape(), (7, 9));
        assert_eq!(p.output_dim(), 9);
    }

    #[test]
    fn zero_weights_keep_residual_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_graph(&mut rng, 6);
        let x = random_tensor(&mut rng, 6, 3);
        let mut p = ModelParams::homogeneous(3, 2, 2, 9);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let out = caselink_forward(&x, &g, GraphMode::Homogeneous, &p).unwrap();
        for r in 0..6 {
            assert_eq!(&out.row(r)[..2], &[0.0, 0.0]);
            assert_eq!(&out.row(r)[2..], x.row(r));
        }
    }

    #[test]
    fn forward_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 8;
        let g = random_graph(&mut rng, n);
        let x = random_tensor(&mut rng, n, 4);
        let p = ModelParams::homogeneous(4, 3, 2, 2);
        let out = caselink_forward(&x, &g, GraphMode::Homogeneous, &p).unwrap();

        let mut perm: Vec<usize> = (0..n).collect();
        perm.reverse();
        perm.swap(0, 3);
        let gp = g.permuted(&perm);
        let mut xp = Tensor::zeros(n, 4);
        for i in 0..n {
            xp.row_mut(perm[i]).copy_from_slice(x.row(i));
        }
        let outp = caselink_forward(&xp, &gp, GraphMode::Homogeneous, &p).unwrap();
        for i in 0..n {
            for (a, b) in out.row(i).iter().zip(outp.row(perm[i])) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn mode_mismatch_is_rejected() {
        let g = AttentionGraph::untyped(2, &[]);
        let p = ModelParams::homogeneous(2, 2, 2, 0);
        let err = caselink_forward(&Tensor::zeros(2, 2), &g, GraphMode::Heterogeneous, &p).unwrap_err();
        assert!(matches!(err, NeuralError::ModeMismatch { .. }));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let names = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let p = ModelParams::heterogeneous(&names(&["case", "charge"]), &names(&["case-case"]), 6, 4, 2, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(p, q);
        for ((_, a), (_, b)) in p.named().iter().zip(q.named()) {
            let bits = |t: &Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        assert_eq!(ModelParams::homogeneous(5, 3, 2, 8), ModelParams::homogeneous(5, 3, 2, 8));
        assert_ne!(ModelParams::homogeneous(5, 3, 2, 8), ModelParams::homogeneous(5, 3, 2, 9));
    }
}
