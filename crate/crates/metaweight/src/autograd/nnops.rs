//! Composite neural-net operations built from tape primitives.
//!
//! Everything here is differentiable to any order because it bottoms out in
//! recorded primitives. Row-wise maxima used for numerical stability are
//! detached constants; subtracting them changes neither values nor gradients.

use crate::error::{Error, Result};

use super::tape::Tape;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

fn row_max_const(x: &Tensor) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let mut m = Vec::with_capacity(r);
    for i in 0..r {
        let row = &x.data()[i * c..(i + 1) * c];
        m.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    Tensor::from_vec(vec![r], m)
}

fn as_matrix(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => tape.reshape(x, &[1, x.len()]),
        2 => Ok(x.clone()),
        _ => Err(Error::invalid(format!(
            "expected vector or matrix of logits, got shape {:?}",
            x.shape()
        ))),
    }
}

/// Row-wise softmax over the trailing axis.
pub fn softmax_rows(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let x2 = as_matrix(tape, x)?;
    let c = x2.cols();
    let m = row_max_const(&x2)?;
    let shifted = tape.sub(&x2, &tape.broadcast_cols(&m, c)?)?;
    let e = tape.exp(&shifted)?;
    let s = tape.sum_cols(&e)?;
    let out = tape.div(&e, &tape.broadcast_cols(&s, c)?)?;
    if x.rank() == 1 {
        tape.reshape(&out, x.shape())
    } else {
        Ok(out)
    }
}

/// Row-wise log-softmax over the trailing axis.
pub fn log_softmax_rows(tape: &Tape, x: &Tensor) -> Result<Tensor> {
    let x2 = as_matrix(tape, x)?;
    let c = x2.cols();
    let m = row_max_const(&x2)?;
    let shifted = tape.sub(&x2, &tape.broadcast_cols(&m, c)?)?;
    let e = tape.exp(&shifted)?;
    let lse = tape.ln(&tape.sum_cols(&e)?)?;
    let out = tape.sub(&shifted, &tape.broadcast_cols(&lse, c)?)?;
    if x.rank() == 1 {
        tape.reshape(&out, x.shape())
    } else {
        Ok(out)
    }
}

/// KL(softmax(p_logits) || softmax(q_logits)) summed over the category axis,
/// then summed or averaged over the remaining positions.
///
/// Differentiable in both logit arguments.
pub fn kl_divergence(tape: &Tape, p_logits: &Tensor, q_logits: &Tensor, reduce: Reduce) -> Result<Tensor> {
    if p_logits.shape() != q_logits.shape() {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: p_logits.shape().to_vec(),
            rhs: q_logits.shape().to_vec(),
        });
    }
    let p2 = as_matrix(tape, p_logits)?;
    let q2 = as_matrix(tape, q_logits)?;
    let p = softmax_rows(tape, &p2)?;
    let diff = tape.sub(&log_softmax_rows(tape, &p2)?, &log_softmax_rows(tape, &q2)?)?;
    let per_row = tape.sum_cols(&tape.mul(&p, &diff)?)?;
    match reduce {
        Reduce::Sum => tape.sum_all(&per_row),
        Reduce::Mean => tape.mean_all(&per_row),
    }
}
