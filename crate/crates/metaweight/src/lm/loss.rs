//! NLL losses, prefix distributions, and greedy decoding.
//!
//! Sequence conventions used throughout the crate:
//! - documents are rendered as `BOS t1 .. tn`, giving `n` predicted
//!   positions, one per document token — weighters emit one weight per
//!   predicted position;
//! - question-answer pairs are rendered as `BOS q.. SEP y.. EOS`; the answer
//!   positions are those predicting the answer tokens and the closing EOS.

use crate::autograd::optim::Params;
use crate::autograd::{nnops, Tape, Tensor};
use crate::error::{Error, Result};

use super::model::{forward_logits, LmConfig};
use super::vocab::{BOS, EOS, SEP};
use super::TokenSequence;

/// `BOS` followed by the document tokens.
pub fn doc_ids(x: &TokenSequence) -> Vec<u32> {
    let mut ids = Vec::with_capacity(x.ids.len() + 1);
    ids.push(BOS);
    ids.extend_from_slice(&x.ids);
    ids
}

/// `BOS q SEP y EOS`, plus the half-open range of predicted positions that
/// score the answer (the answer tokens and the closing EOS).
pub fn qa_ids(q: &[u32], y: &[u32]) -> (Vec<u32>, std::ops::Range<usize>) {
    let mut ids = Vec::with_capacity(q.len() + y.len() + 3);
    ids.push(BOS);
    ids.extend_from_slice(q);
    ids.push(SEP);
    ids.extend_from_slice(y);
    ids.push(EOS);
    let start = q.len() + 1;
    (ids, start..start + y.len() + 1)
}

/// Per-position negative log likelihood `[len-1]` of a raw id sequence.
pub fn per_token_nll(tape: &Tape, params: &Params, cfg: &LmConfig, ids: &[u32]) -> Result<Tensor> {
    if ids.len() < 2 {
        return Err(Error::invalid("need at least two tokens for a prediction"));
    }
    let logits = forward_logits(tape, params, cfg, ids)?;
    let preds = tape.slice_rows(&logits, 0, ids.len() - 1)?;
    let lsm = nnops::log_softmax_rows(tape, &preds)?;
    let targets: Vec<usize> = ids[1..].iter().map(|i| *i as usize).collect();
    tape.neg(&tape.pick_cols(&lsm, &targets)?)
}

/// Plain mean NLL of a document sequence.
pub fn mean_nll(tape: &Tape, params: &Params, cfg: &LmConfig, ids: &[u32]) -> Result<Tensor> {
    let nll = per_token_nll(tape, params, cfg, ids)?;
    tape.mean_all(&nll)
}

/// Weighted document NLL: `(1/T) Σ_t a_t · NLL_t` over the `T` predicted
/// positions of `BOS x`. Differentiable in the parameters and in `weights`.
pub fn weighted_nll(
    tape: &Tape,
    params: &Params,
    cfg: &LmConfig,
    x: &TokenSequence,
    weights: &Tensor,
) -> Result<Tensor> {
    let ids = doc_ids(x);
    let t = ids.len() - 1;
    if weights.shape() != [t] {
        return Err(Error::ShapeMismatch {
            op: "weighted_nll",
            lhs: vec![t],
            rhs: weights.shape().to_vec(),
        });
    }
    if let Some(w) = weights.data().iter().find(|w| **w < 0.0) {
        return Err(Error::invalid(format!("negative token weight {w}")));
    }
    let nll = per_token_nll(tape, params, cfg, &ids)?;
    tape.scale(&tape.sum_all(&tape.mul(weights, &nll)?)?, 1.0 / t as f64)
}

/// Mean NLL over the answer positions of `BOS q SEP y EOS`.
pub fn conditional_nll(
    tape: &Tape,
    params: &Params,
    cfg: &LmConfig,
    q: &[u32],
    y: &[u32],
) -> Result<Tensor> {
    if y.is_empty() {
        return Err(Error::invalid("conditional_nll: empty answer"));
    }
    let (ids, range) = qa_ids(q, y);
    let nll = per_token_nll(tape, params, cfg, &ids)?;
    let ans = tape.slice_rows(&nll, range.start, range.len())?;
    tape.mean_all(&ans)
}

/// Next-token distributions `[T, vocab]` conditioned on every prefix of
/// `BOS x_loc` (row `i` conditions on the first `i+1` tokens).
pub fn prefix_distributions(
    tape: &Tape,
    params: &Params,
    cfg: &LmConfig,
    x_loc: &TokenSequence,
) -> Result<Tensor> {
    let ids = doc_ids(x_loc);
    let logits = forward_logits(tape, params, cfg, &ids)?;
    nnops::softmax_rows(tape, &logits)
}

/// As [`prefix_distributions`] but returning logits, for KL terms that want
/// the numerically-stable log-softmax path.
pub fn prefix_logits(
    tape: &Tape,
    params: &Params,
    cfg: &LmConfig,
    x_loc: &TokenSequence,
) -> Result<Tensor> {
    let ids = doc_ids(x_loc);
    forward_logits(tape, params, cfg, &ids)
}

/// Iterated argmax continuation of `BOS q SEP` until EOS or `max_len`.
/// Ties break toward the lowest token id; fully deterministic.
pub fn greedy_decode(params: &Params, cfg: &LmConfig, q: &[u32], max_len: usize) -> Result<Vec<u32>> {
    let tape = Tape::inference();
    let mut ids = Vec::with_capacity(q.len() + 2 + max_len);
    ids.push(BOS);
    ids.extend_from_slice(q);
    ids.push(SEP);
    let mut out = Vec::new();
    for _ in 0..max_len {
        if ids.len() >= cfg.context {
            break;
        }
        let logits = forward_logits(&tape, params, cfg, &ids)?;
        let last = &logits.data()[(logits.rows() - 1) * logits.cols()..];
        let mut best = 0usize;
        for (j, v) in last.iter().enumerate() {
            if *v > last[best] {
                best = j;
            }
        }
        if best as u32 == EOS {
            break;
        }
        ids.push(best as u32);
        out.push(best as u32);
    }
    Ok(out)
}
