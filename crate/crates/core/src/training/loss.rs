use std::rc::Rc;

use super::TrainError;
use crate::neural::{dot, l2_norm, Tape, Tensor, Var};

/// One contrastive example: rows of the state matrix for the query, its
/// positive and the sampled negatives (easy and hard together).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveItem {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

fn unit(v: &[f64], index: usize) -> Result<Vec<f64>, TrainError> {
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(TrainError::ZeroNorm(index));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `-log(exp(s+/tau) / (exp(s+/tau) + sum_neg exp(s-/tau)))` with cosine `s`.
///
/// Easy and hard negatives enter the denominator identically; they are kept
/// apart only to mirror how they are sampled.
pub fn info_nce(query: &[f64], positive: &[f64], easy: &[&[f64]], hard: &[&[f64]], tau: f64) -> Result<f64, TrainError> {
    if tau <= 0.0 {
        return Err(TrainError::Config(vec![format!("tau must be positive, got {tau}")]));
    }
    let q = unit(query, 0)?;
    let mut logits = vec![dot(&q, &unit(positive, 1)?) / tau];
    for (i, n) in easy.iter().chain(hard).enumerate() {
        if n.len() != q.len() {
            return Err(TrainError::Config(vec![format!("negative {i} has dimension {}", n.len())]));
        }
        logits.push(dot(&q, &unit(n, i + 2)?) / tau);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    Ok(lse - logits[0])
}

fn check_rows(tape: &Tape, states: Var, rows: &[usize]) -> Result<(), TrainError> {
    let v = tape.value(states);
    for &r in rows {
        if r >= v.rows() {
            return Err(TrainError::Config(vec![format!("row {r} out of range")]));
        }
        let n = l2_norm(v.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(TrainError::ZeroNorm(r));
        }
    }
    Ok(())
}

/// Batch-mean InfoNCE over rows of `states`, recorded on `tape`.
pub fn info_nce_on_tape(tape: &mut Tape, states: Var, items: &[ContrastiveItem], tau: f64) -> Result<Var, TrainError> {
    if tau <= 0.0 {
        return Err(TrainError::Config(vec![format!("tau must be positive, got {tau}")]));
    }
    if items.is_empty() {
        return Err(TrainError::Config(vec!["empty contrastive batch".into()]));
    }
    let mut q_idx = Vec::new();
    let mut c_idx = Vec::new();
    let mut segment = Vec::new();
    let mut pos_slot = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        pos_slot.push(q_idx.len());
        for &c in std::iter::once(&it.positive).chain(&it.negatives) {
            q_idx.push(it.query);
            c_idx.push(c);
            segment.push(i);
        }
    }
    let mut used: Vec<usize> = q_idx.iter().chain(&c_idx).copied().collect();
    used.sort_unstable();
    used.dedup();
    check_rows(tape, states, &used)?;

    let q = tape.gather_rows(states, Rc::from(q_idx));
    let c = tape.gather_rows(states, Rc::from(c_idx));
    let q = tape.normalize_rows(q);
    let c = tape.normalize_rows(c);
    let sims = tape.row_dot(q, c);
    let logits = tape.scale(sims, 1.0 / tau);
    let lse = tape.segment_logsumexp(logits, Rc::from(segment), items.len());
    let pos = tape.gather_rows(logits, Rc::from(pos_slot));
    let per_item = tape.sub(lse, pos);
    Ok(tape.mean(per_item))
}

/// `sum_i sum_j cos(h_i, h_j)` for `i` in `rows`, `j` in `cols`, self-pairs
/// included. Computed as the dot product of the two sums of unit vectors.
pub fn deg_reg(states: &Tensor, rows: &[usize], cols: &[usize]) -> Result<f64, TrainError> {
    let sum_units = |idx: &[usize]| -> Result<Vec<f64>, TrainError> {
        let mut acc = vec![0.0; states.cols()];
        for &i in idx {
            if i >= states.rows() {
                return Err(TrainError::Config(vec![format!("row {i} out of range")]));
            }
            for (a, x) in acc.iter_mut().zip(unit(states.row(i), i)?) {
                *a += x;
            }
        }
        Ok(acc)
    };
    Ok(dot(&sum_units(rows)?, &sum_units(cols)?))
}

pub fn deg_reg_on_tape(tape: &mut Tape, states: Var, rows: &[usize], cols: &[usize]) -> Result<Var, TrainError> {
    let mut used: Vec<usize> = rows.iter().chain(cols).copied().collect();
    used.sort_unstable();
    used.dedup();
    check_rows(tape, states, &used)?;
    let r = tape.gather_rows(states, Rc::from(rows));
    let c = tape.gather_rows(states, Rc::from(cols));
    let r = tape.normalize_rows(r);
    let c = tape.normalize_rows(c);
    let rs = tape.sum_rows(r);
    let cs = tape.sum_rows(c);
    Ok(tape.row_dot(rs, cs))
}

/// Batch-mean InfoNCE plus `lambda` times the degree regularizer. With
/// `lambda == 0` the regularizer is not evaluated at all.
pub fn combined_loss_on_tape(
    tape: &mut Tape,
    states: Var,
    items: &[ContrastiveItem],
    reg_rows: &[usize],
    reg_cols: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<Var, TrainError> {
    let nce = info_nce_on_tape(tape, states, items, tau)?;
    if lambda == 0.0 {
        return Ok(nce);
    }
    let reg = deg_reg_on_tape(tape, states, reg_rows, reg_cols)?;
    let reg = tape.scale(reg, lambda);
    Ok(tape.add(nce, reg))
}

/// Value of [`combined_loss_on_tape`] for fixed states.
pub fn combined_loss_value(
    states: &Tensor,
    items: &[ContrastiveItem],
    reg_rows: &[usize],
    reg_cols: &[usize],
    tau: f64,
    lambda: f64,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let s = tape.constant(states.clone());
    let l = combined_loss_on_tape(&mut tape, s, items, reg_rows, reg_cols, tau, lambda)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_similarities_give_log_of_slot_count() {
        let v = [1.0, 0.0, 0.0];
        let negs: Vec<&[f64]> = vec![&v; 5];
        let l = info_nce(&v, &v, &[&v], &negs, 0.1).unwrap();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.945910).abs() < 1e-6);
    }

    #[test]
    fn saturated_softmax_drives_loss_to_zero() {
        let q = [1.0, 0.0];
        let n = [-1.0, 0.0];
        let l = info_nce(&q, &q, &[&n], &[&n, &n], 0.01).unwrap();
        assert!(l < 1e-50);
    }

    #[test]
    fn zero_norm_is_an_error() {
        assert!(matches!(info_nce(&[0.0, 0.0], &[1.0, 0.0], &[], &[], 0.1), Err(TrainError::ZeroNorm(_))));
        let t = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        assert!(deg_reg(&t, &[0, 1], &[0]).is_err());
    }

    #[test]
    fn tape_and_value_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = Tensor::from_vec(8, 6, (0..48).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let item = ContrastiveItem {
            query: 0,
            positive: 1,
            negatives: (2..8).collect(),
        };
        let rows: Vec<&[f64]> = (2..8).map(|r| s.row(r)).collect();
        let direct = info_nce(s.row(0), s.row(1), &rows[..1], &rows[1..], 0.1).unwrap();
        let taped = combined_loss_value(&s, &[item], &[], &[], 0.1, 0.0).unwrap();
        assert!((direct - taped).abs() < 1e-12);
    }

    #[test]
    fn deg_reg_fixtures() {
        let same = Tensor::from_rows(&[[0.5, 0.5]; 4]);
        assert!((deg_reg(&same, &[0, 1], &[0, 1, 2, 3]).unwrap() - 8.0).abs() < 1e-12);
        let eye = Tensor::identity(4);
        assert!((deg_reg(&eye, &[0, 2], &[0, 1, 2, 3]).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lambda_weights_the_regularizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = Tensor::from_vec(5, 3, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let items = [ContrastiveItem {
            query: 0,
            positive: 1,
            negatives: vec![2, 3],
        }];
        let rows = [1, 2, 3];
        let cols = [0, 1, 2, 3, 4];
        let nce = combined_loss_value(&s, &items, &rows, &cols, 0.1, 0.0).unwrap();
        let reg = deg_reg(&s, &rows, &cols).unwrap();
        let both = combined_loss_value(&s, &items, &rows, &cols, 0.1, 0.001).unwrap();
        assert!((both - (nce + 0.001 * reg)).abs() < 1e-12);
    }
}
