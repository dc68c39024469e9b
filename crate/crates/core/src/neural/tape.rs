//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in creation order. Since inputs always
//! precede outputs, a single reverse sweep from the root computes all
//! gradients. Only the operations the model and the losses need are provided.

use std::rc::Rc;

use super::tensor::{dot, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Elu(Var),
    GatherRows(Var, Rc<[usize]>),
    ScatterAddRows(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    RowDot(Var, Var),
    MulColVec(Var, Var),
    SegmentSoftmax(Var, Rc<[usize]>),
    SegmentLogSumExp(Var, Rc<[usize]>),
    NormalizeRows(Var),
    SumRows(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, zero-filled when no path reaches the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.value(b).scale(-1.0);
        let mut out = self.value(a).clone();
        out.add_assign(&neg);
        self.push(Op::Sub(a, b), out, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data);
        self.push(Op::Mul(a, b), out, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(Op::LeakyRelu(a, slope), out, &[a])
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(Op::Elu(a), out, &[a])
    }

    /// Row `i` of the output is row `idx[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, idx: Rc<[usize]>) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut out = Tensor::zeros(idx.len(), cols);
        for (i, &src) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(va.row(src));
        }
        self.push(Op::GatherRows(a, idx), out, &[a])
    }

    /// Adds row `i` of `a` into row `idx[i]` of an `n`-row zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Rc<[usize]>, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.rows(), idx.len(), "scatter index length mismatch");
        let mut out = Tensor::zeros(n, va.cols());
        for (i, &dst) in idx.iter().enumerate() {
            for (o, x) in out.row_mut(dst).iter_mut().zip(va.row(i)) {
                *o += x;
            }
        }
        self.push(Op::ScatterAddRows(a, idx), out, &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out, parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data);
        self.push(Op::ConcatRows(parts.to_vec()), out, parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.value(a);
        assert!(start <= end && end <= va.cols(), "slice_cols out of range");
        let mut out = Tensor::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        self.push(Op::SliceCols(a, start, end), out, &[a])
    }

    /// Per-row dot product of two equally shaped matrices, as a column.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "row_dot shape mismatch");
        let data = (0..va.rows()).map(|r| dot(va.row(r), vb.row(r))).collect();
        let out = Tensor::from_vec(va.rows(), 1, data);
        self.push(Op::RowDot(a, b), out, &[a, b])
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col_vec(&mut self, a: Var, col: Var) -> Var {
        let (va, vc) = (self.value(a), self.value(col));
        assert_eq!(vc.shape(), (va.rows(), 1), "mul_col_vec shape mismatch");
        let mut out = va.clone();
        for r in 0..va.rows() {
            let c = vc.get(r, 0);
            for x in out.row_mut(r) {
                *x *= c;
            }
        }
        self.push(Op::MulColVec(a, col), out, &[a, col])
    }

    /// Softmax of a column vector within groups given by `segment[i]`.
    pub fn segment_softmax(&mut self, a: Var, segment: Rc<[usize]>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), (segment.len(), 1), "segment_softmax shape mismatch");
        let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (i, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(va.data()[i]);
        }
        let mut sum = vec![0.0; n_seg];
        let mut data: Vec<f64> = segment
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let e = (va.data()[i] - max[s]).exp();
                sum[s] += e;
                e
            })
            .collect();
        for (x, &s) in data.iter_mut().zip(segment.iter()) {
            *x /= sum[s];
        }
        let out = Tensor::from_vec(segment.len(), 1, data);
        self.push(Op::SegmentSoftmax(a, segment), out, &[a])
    }

    /// Log-sum-exp of a column vector per segment; every segment in
    /// `0..n` must be non-empty.
    pub fn segment_logsumexp(&mut self, a: Var, segment: Rc<[usize]>, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), (segment.len(), 1), "segment_logsumexp shape mismatch");
        let mut max = vec![f64::NEG_INFINITY; n];
        for (i, &s) in segment.iter().enumerate() {
            max[s] = max[s].max(va.data()[i]);
        }
        assert!(max.iter().all(|m| m.is_finite()), "empty logsumexp segment");
        let mut sum = vec![0.0; n];
        for (i, &s) in segment.iter().enumerate() {
            sum[s] += (va.data()[i] - max[s]).exp();
        }
        let data = sum.iter().zip(&max).map(|(s, m)| m + s.ln()).collect();
        let out = Tensor::from_vec(n, 1, data);
        self.push(Op::SegmentLogSumExp(a, segment), out, &[a])
    }

    /// L2-normalizes every row. Zero rows produce NaN; callers check norms.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = dot(row, row).sqrt();
            for x in row {
                *x /= n;
            }
        }
        self.push(Op::NormalizeRows(a), out, &[a])
    }

    /// Column sums as a single row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = Tensor::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, x) in out.row_mut(0).iter_mut().zip(va.row(r)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), out, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.data().len() as f64;
        let s = va.data().iter().sum::<f64>() / n;
        self.push(Op::Mean(a), Tensor::scalar(s), &[a])
    }

    /// Reverse sweep from a 1x1 `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }

        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), ga));
                self.accumulate(grads, *b, Tensor::from_vec(g.rows(), g.cols(), gb));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.scale(*c)),
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { gv * slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::Elu(a) => {
                let x = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .zip(out.data())
                    .map(|((gv, &xv), &yv)| if xv > 0.0 { *gv } else { gv * (yv + 1.0) })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let mut ga = Tensor::zeros(idx.len(), g.cols());
                for (i, &dst) in idx.iter().enumerate() {
                    ga.row_mut(i).copy_from_slice(g.row(dst));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let mut gp = Tensor::zeros(r, c);
                    for row in 0..r {
                        gp.row_mut(row).copy_from_slice(&g.row(row)[off..off + c]);
                    }
                    off += c;
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let (r, c) = self.shape(*p);
                    let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                    off += r;
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::SliceCols(a, start, end) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row)[*start..*end].copy_from_slice(g.row(row));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::RowDot(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut ga = vb.clone();
                let mut gb = va.clone();
                for r in 0..va.rows() {
                    let s = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    gb.row_mut(r).iter_mut().for_each(|x| *x *= s);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::MulColVec(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(va.rows(), 1);
                for r in 0..va.rows() {
                    let c = vc.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x *= c);
                    gc.set(r, 0, dot(g.row(r), va.row(r)));
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *col, gc);
            }
            Op::SegmentSoftmax(a, segment) => {
                let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; n_seg];
                for (i, &s) in segment.iter().enumerate() {
                    inner[s] += g.data()[i] * out.data()[i];
                }
                let data = segment
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| out.data()[i] * (g.data()[i] - inner[s]))
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(segment.len(), 1, data));
            }
            Op::SegmentLogSumExp(a, segment) => {
                let va = self.value(*a);
                let data = segment
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| g.data()[s] * (va.data()[i] - out.data()[s]).exp())
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(segment.len(), 1, data));
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let norm = dot(x.row(r), x.row(r)).sqrt();
                    let y = out.row(r);
                    let gr = g.row(r);
                    let yg = dot(y, gr);
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = (gv - yv * yg) / norm;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for row in 0..r {
                    ga.row_mut(row).copy_from_slice(g.row(0));
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.accumulate(grads, *a, Tensor::from_vec(r, c, vec![g.item(); r * c]));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let v = g.item() / (r * c) as f64;
                self.accumulate(grads, *a, Tensor::from_vec(r, c, vec![v; r * c]));
            }
        }
    }
}
