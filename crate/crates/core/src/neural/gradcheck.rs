//! Central-difference validation of the analytic gradients.
//!
//! Every registered op builds a random instance from the trial seed, reduces
//! its output to a scalar with a fixed random probe, and compares the tape
//! gradient of every input entry with `(f(x+h) - f(x-h)) / 2h`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{gat_layer, hgt_layer, AttentionGraph, GatWeights, HgtWeights, LayerWeights};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{forward_on_tape, ModelParams, NeuralError};
use crate::casegnn::{build_text_graph, casegnn_batch_on_tape, BoundCaseGnn, CaseGnnParams, CaseGraphs, GraphTag, Triplet};
use crate::encoders::Encoder;
use crate::training::{combined_loss_on_tape, deg_reg_on_tape, info_nce_on_tape, ContrastiveItem};

/// Registered op names.
pub const GRADCHECK_OPS: [&str; 8] = [
    "gat_layer",
    "hgt_layer",
    "caselink_forward",
    "info_nce",
    "deg_reg",
    "combined_loss",
    "casegnn_forward",
    "zero_probe",
];

const STEP: f64 = 1e-6;
/// Denominator floor, so gradients near zero are judged on absolute error.
const REL_FLOOR: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub seed: u64,
    pub entries_checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude seen.
    pub max_abs_gradient: f64,
    pub tolerance: f64,
    pub passed: bool,
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

struct Instance {
    inputs: Vec<Tensor>,
    build: Builder,
}

#[derive(Default)]
struct Stats {
    entries: usize,
    max_rel: f64,
    max_abs: f64,
    max_grad: f64,
}

fn evaluate(inst: &Instance, inputs: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars);
    tape.value(out).item()
}

fn check_instance(inst: &Instance, stats: &mut Stats) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars);
    let grads = tape.backward(out);
    let mut inputs = inst.inputs.clone();
    for (k, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v);
        for j in 0..inputs[k].data().len() {
            let orig = inputs[k].data()[j];
            inputs[k].data_mut()[j] = orig + STEP;
            let up = evaluate(inst, &inputs);
            inputs[k].data_mut()[j] = orig - STEP;
            let down = evaluate(inst, &inputs);
            inputs[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = g.data()[j];
            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            stats.entries += 1;
            stats.max_abs = stats.max_abs.max(abs);
            stats.max_rel = stats.max_rel.max(rel);
            stats.max_grad = stats.max_grad.max(analytic.abs());
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn random_pairs(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(0.35) {
                edges.push((a, b));
            }
        }
    }
    if edges.is_empty() && n > 1 {
        edges.push((0, 1));
    }
    edges
}

fn untyped_graph(rng: &mut ChaCha8Rng, n: usize) -> AttentionGraph {
    let both: Vec<(usize, usize)> = random_pairs(rng, n).into_iter().flat_map(|(a, b)| [(a, b), (b, a)]).collect();
    AttentionGraph::untyped(n, &both)
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

/// Two node kinds and three edge kinds determined by endpoint kinds.
fn typed_graph(rng: &mut ChaCha8Rng, n: usize) -> AttentionGraph {
    let node_type: Vec<usize> = (0..n).map(|i| usize::from(i % 3 == 2)).collect();
    let mut edges = Vec::new();
    for (a, b) in random_pairs(rng, n) {
        let t = match (node_type[a], node_type[b]) {
            (0, 0) => 0,
            (1, 1) => 1,
            _ => 2,
        };
        edges.push((a, b, t));
        edges.push((b, a, t));
    }
    AttentionGraph {
        num_nodes: n,
        node_type,
        node_type_names: names(&["case", "charge"]),
        edge_type_names: names(&["case-case", "charge-charge", "case-charge"]),
        edges,
    }
}

/// Scalar probe `sum(out * r)`.
fn probe(tape: &mut Tape, out: Var, r: &Tensor) -> Var {
    let rv = tape.constant(r.clone());
    let prod = tape.mul(out, rv);
    tape.sum(prod)
}

/// Flattens layer weights in `map` traversal order.
fn flatten(layers: &[LayerWeights<Tensor>]) -> Vec<Tensor> {
    let mut out = Vec::new();
    for l in layers {
        l.map(&mut |t| out.push(t.clone()));
    }
    out
}

/// Rebuilds layer structure from consecutive vars (inverse of [`flatten`]).
fn unflatten(layers: &[LayerWeights<Tensor>], vars: &[Var]) -> Vec<LayerWeights<Var>> {
    let mut i = 0;
    layers
        .iter()
        .map(|l| {
            l.map(&mut |_| {
                i += 1;
                vars[i - 1]
            })
        })
        .collect()
}

fn perturbed_hgt(rng: &mut ChaCha8Rng, g: &AttentionGraph, d_in: usize, d_out: usize) -> HgtWeights<Tensor> {
    let mut w = HgtWeights::init(rng, &g.node_type_names, &g.edge_type_names, d_in, d_out);
    for r in &mut w.rel {
        for x in r.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    w
}

fn instance(op: &str, rng: &mut ChaCha8Rng, trial: usize) -> Result<Instance, NeuralError> {
    Ok(match op {
        "gat_layer" => {
            let n = 6;
            let g = untyped_graph(rng, n);
            let w = GatWeights::init(rng, 4, 3);
            let r = random_tensor(rng, n, 3);
            Instance {
                inputs: vec![random_tensor(rng, n, 4), w.weight, w.attn_dst, w.attn_src],
                build: Box::new(move |t, v| {
                    let w = GatWeights {
                        weight: v[1],
                        attn_dst: v[2],
                        attn_src: v[3],
                    };
                    let out = gat_layer(t, v[0], &g, &w, true).expect("valid instance");
                    probe(t, out, &r)
                }),
            }
        }
        "hgt_layer" => {
            let n = 7;
            let g = typed_graph(rng, n);
            let w = LayerWeights::Hgt(perturbed_hgt(rng, &g, 4, 3));
            let r = random_tensor(rng, n, 3);
            let mut inputs = vec![random_tensor(rng, n, 4)];
            inputs.extend(flatten(std::slice::from_ref(&w)));
            Instance {
                inputs,
                build: Box::new(move |t, v| {
                    let bound = unflatten(std::slice::from_ref(&w), &v[1..]);
                    let LayerWeights::Hgt(hw) = &bound[0] else { unreachable!() };
                    let out = hgt_layer(t, v[0], &g, hw, true).expect("valid instance");
                    probe(t, out, &r)
                }),
            }
        }
        "caselink_forward" | "combined_loss" => {
            let n = if op == "combined_loss" { 10 } else { 6 };
            let (d_in, hidden) = (4, 3);
            let hetero = trial % 2 == 1;
            let (g, params) = if hetero {
                let g = typed_graph(rng, n);
                let mut p = ModelParams::heterogeneous(&g.node_type_names, &g.edge_type_names, d_in, hidden, 2, rng.gen());
                for l in &mut p.layers {
                    if let LayerWeights::Hgt(h) = l {
                        for r in &mut h.rel {
                            for x in r.data_mut() {
                                *x += rng.gen_range(-0.3..0.3);
                            }
                        }
                    }
                }
                (g, p)
            } else {
                (untyped_graph(rng, n), ModelParams::homogeneous(d_in, hidden, 2, rng.gen()))
            };
            let layers = params.layers.clone();
            let mut inputs = vec![random_tensor(rng, n, d_in)];
            inputs.extend(flatten(&layers));
            if op == "caselink_forward" {
                let r = random_tensor(rng, n, hidden + d_in);
                Instance {
                    inputs,
                    build: Box::new(move |t, v| {
                        let bound = unflatten(&layers, &v[1..]);
                        let out = forward_on_tape(t, v[0], &g, &bound).expect("valid instance");
                        probe(t, out, &r)
                    }),
                }
            } else {
                let items = vec![
                    ContrastiveItem {
                        query: 0,
                        positive: 1,
                        negatives: vec![2, 3, 4],
                    },
                    ContrastiveItem {
                        query: 5,
                        positive: 6,
                        negatives: vec![7, 8, 9, 1],
                    },
                ];
                let rows: Vec<usize> = (1..n).step_by(2).collect();
                let cols: Vec<usize> = (0..n).collect();
                Instance {
                    inputs,
                    build: Box::new(move |t, v| {
                        let bound = unflatten(&layers, &v[1..]);
                        let h = forward_on_tape(t, v[0], &g, &bound).expect("valid instance");
                        combined_loss_on_tape(t, h, &items, &rows, &cols, 0.1, 0.001).expect("valid instance")
                    }),
                }
            }
        }
        "info_nce" => {
            let item = ContrastiveItem {
                query: 0,
                positive: 1,
                negatives: (2..8).collect(),
            };
            Instance {
                inputs: vec![random_tensor(rng, 8, 8)],
                build: Box::new(move |t, v| info_nce_on_tape(t, v[0], std::slice::from_ref(&item), 0.1).expect("valid instance")),
            }
        }
        "deg_reg" => {
            let n = 5;
            let rows: Vec<usize> = (0..n).filter(|_| rng.gen_bool(0.6)).chain([0]).collect();
            let cols: Vec<usize> = (0..n).collect();
            Instance {
                inputs: vec![random_tensor(rng, n, 8)],
                build: Box::new(move |t, v| deg_reg_on_tape(t, v[0], &rows, &cols).expect("valid instance")),
            }
        }
        "casegnn_forward" => {
            let dim = 5;
            let enc = Encoder::ToyHash { dim };
            let views: Vec<f64> = (0..3 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = |s: &str, r: &str, o: &str| Triplet {
                subject: s.into(),
                relation: r.into(),
                object: o.into(),
            };
            let fact = build_text_graph(
                &views,
                &[t("court", "held", "appeal"), t("appeal", "found", "tenant"), t("court", "ordered", "costs")],
                &enc,
                GraphTag::Fact,
            )
            .expect("toy encoder");
            let issue = build_text_graph(&views, &[t("landlord", "sought", "rent")], &enc, GraphTag::Issue).expect("toy encoder");
            let cases = CaseGraphs { fact, issue };
            let mut params = CaseGnnParams::init(dim, 3, 2, rng.gen());
            let inputs: Vec<Tensor> = params.tensors_mut().into_iter().map(|t| t.clone()).collect();
            let n_layers = params.fact.len();
            let r = random_tensor(rng, 1, params.output_dim());
            Instance {
                inputs,
                build: Box::new(move |tape, v| {
                    let layer = |i: usize| GatWeights {
                        weight: v[3 * i],
                        attn_dst: v[3 * i + 1],
                        attn_src: v[3 * i + 2],
                    };
                    let bound = BoundCaseGnn {
                        fact: (0..n_layers).map(layer).collect(),
                        issue: (n_layers..2 * n_layers).map(layer).collect(),
                    };
                    let out = casegnn_batch_on_tape(tape, &[&cases], dim, &bound).expect("valid instance");
                    probe(tape, out, &r)
                }),
            }
        }
        "zero_probe" => {
            let c = random_tensor(rng, 3, 3);
            Instance {
                inputs: vec![random_tensor(rng, 4, 2)],
                build: Box::new(move |t, _| {
                    let k = t.constant(c.clone());
                    t.sum(k)
                }),
            }
        }
        other => return Err(NeuralError::UnknownOp(other.to_string())),
    })
}

/// Runs `trials` random instances of `op_id` derived from `seed`.
pub fn check_gradients(op_id: &str, trials: usize, seed: u64) -> Result<GradCheckReport, NeuralError> {
    let mut stats = Stats::default();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(trial as u64));
        let inst = instance(op_id, &mut rng, trial)?;
        check_instance(&inst, &mut stats);
    }
    if trials == 0 {
        // Still reject unknown ops.
        instance(op_id, &mut ChaCha8Rng::seed_from_u64(seed), 0)?;
    }
    Ok(GradCheckReport {
        op: op_id.to_string(),
        trials,
        seed,
        entries_checked: stats.entries,
        max_rel_error: stats.max_rel,
        max_abs_error: stats.max_abs,
        max_abs_gradient: stats.max_grad,
        tolerance: TOLERANCE,
        passed: stats.max_rel < TOLERANCE,
    })
}

/// Reports for every registered op.
pub fn check_all(trials: usize, seed: u64) -> BTreeMap<String, GradCheckReport> {
    GRADCHECK_OPS
        .iter()
        .map(|op| (op.to_string(), check_gradients(op, trials, seed).expect("registered op")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_gradients_match_finite_differences() {
        for op in ["gat_layer", "hgt_layer", "info_nce", "deg_reg"] {
            let r = check_gradients(op, 3, 1).unwrap();
            assert!(r.passed, "{r:?}");
            assert!(r.entries_checked > 0);
        }
    }

    #[test]
    fn zero_probe_has_exactly_zero_gradient() {
        let r = check_gradients("zero_probe", 2, 5).unwrap();
        assert_eq!(r.max_abs_gradient, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn reports_are_seed_deterministic() {
        assert_eq!(check_gradients("gat_layer", 2, 9).unwrap(), check_gradients("gat_layer", 2, 9).unwrap());
    }

    #[test]
    fn unknown_op_is_an_error() {
        assert!(matches!(check_gradients("conv2d", 1, 0), Err(NeuralError::UnknownOp(_))));
        assert!(check_gradients("conv2d", 0, 0).is_err());
    }
}
