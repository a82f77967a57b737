//! A small pre-norm autoregressive transformer over the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::optim::Params;
use crate::autograd::{nnops, Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ff_width: usize,
    pub context: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub init_seed: u64,
}

impl LmConfig {
    /// Desk-scale default: minutes-scale CPU runs.
    pub fn desk_default(vocab_size: usize) -> LmConfig {
        LmConfig {
            layers: 2,
            heads: 4,
            width: 64,
            ff_width: 256,
            context: 256,
            vocab_size,
            dropout: 0.0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::invalid(format!(
                "width {} not divisible by head count {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} out of range", self.dropout)));
        }
        if self.layers == 0 || self.width == 0 || self.vocab_size == 0 || self.context == 0 {
            return Err(Error::invalid("zero-sized model dimension"));
        }
        Ok(())
    }
}

pub fn init_params(cfg: &LmConfig) -> Result<Params> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let (d, f, v) = (cfg.width, cfg.ff_width, cfg.vocab_size);
    let std = 0.02;
    let mut p = Params::new();
    p.insert("tok_emb".into(), Tensor::randn(&[v, d], std, &mut rng));
    p.insert("pos_emb".into(), Tensor::randn(&[cfg.context, d], std, &mut rng));
    for l in 0..cfg.layers {
        let k = |s: &str| format!("l{l}.{s}");
        p.insert(k("ln1.g"), Tensor::full(&[d], 1.0));
        p.insert(k("ln1.b"), Tensor::zeros(&[d]));
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(k(&format!("attn.{w}")), Tensor::randn(&[d, d], std, &mut rng));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            p.insert(k(&format!("attn.{b}")), Tensor::zeros(&[d]));
        }
        p.insert(k("ln2.g"), Tensor::full(&[d], 1.0));
        p.insert(k("ln2.b"), Tensor::zeros(&[d]));
        p.insert(k("ff.w1"), Tensor::randn(&[d, f], std, &mut rng));
        p.insert(k("ff.b1"), Tensor::zeros(&[f]));
        p.insert(k("ff.w2"), Tensor::randn(&[f, d], std, &mut rng));
        p.insert(k("ff.b2"), Tensor::zeros(&[d]));
    }
    p.insert("ln_f.g".into(), Tensor::full(&[d], 1.0));
    p.insert("ln_f.b".into(), Tensor::zeros(&[d]));
    p.insert("head.w".into(), Tensor::randn(&[d, v], std, &mut rng));
    p.insert("head.b".into(), Tensor::zeros(&[v]));
    Ok(p)
}

fn layer_norm(tape: &Tape, x: &Tensor, g: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (t, d) = (x.rows(), x.cols());
    let mu = tape.scale(&tape.sum_cols(x)?, 1.0 / d as f64)?;
    let xc = tape.sub(x, &tape.broadcast_cols(&mu, d)?)?;
    let var = tape.scale(&tape.sum_cols(&tape.mul(&xc, &xc)?)?, 1.0 / d as f64)?;
    let std = tape.sqrt(&tape.add_const(&var, 1e-5)?)?;
    let xhat = tape.div(&xc, &tape.broadcast_cols(&std, d)?)?;
    tape.add(
        &tape.mul(&xhat, &tape.broadcast_rows(g, t)?)?,
        &tape.broadcast_rows(b, t)?,
    )
}

fn linear(tape: &Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let t = x.rows();
    tape.add(&tape.matmul(x, w)?, &tape.broadcast_rows(b, t)?)
}

fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = -1e30;
        }
    }
    Tensor::from_vec(vec![t, t], m).expect("mask constant")
}

fn attention(tape: &Tape, cfg: &LmConfig, p: &Params, l: usize, x: &Tensor) -> Result<Tensor> {
    let t = x.rows();
    let d = cfg.width;
    let dh = d / cfg.heads;
    let k = |s: &str| format!("l{l}.attn.{s}");
    let q = linear(tape, x, &p[&k("wq")], &p[&k("bq")])?;
    let kk = linear(tape, x, &p[&k("wk")], &p[&k("bk")])?;
    let v = linear(tape, x, &p[&k("wv")], &p[&k("bv")])?;
    let mask = causal_mask(t);
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(&q, h * dh, dh)?;
        let kh = tape.slice_cols(&kk, h * dh, dh)?;
        let vh = tape.slice_cols(&v, h * dh, dh)?;
        let scores = tape.scale(&tape.matmul(&qh, &tape.transpose(&kh)?)?, 1.0 / (dh as f64).sqrt())?;
        let scores = tape.add(&scores, &mask)?;
        let attn = nnops::softmax_rows(tape, &scores)?;
        heads.push(tape.matmul(&attn, &vh)?);
    }
    let head_refs: Vec<&Tensor> = heads.iter().collect();
    let cat = tape.concat_cols(&head_refs)?;
    linear(tape, &cat, &p[&k("wo")], &p[&k("bo")])
}

fn dropout_mask(
    tape: &Tape,
    x: &Tensor,
    dropout: &mut Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Tensor> {
    let (rate, rng) = match dropout {
        Some((rate, rng)) if *rate > 0.0 => (*rate, rng),
        _ => return Ok(x.clone()),
    };
    use rand::Rng;
    let keep = 1.0 - rate;
    let mask: Vec<f64> = (0..x.len())
        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul(x, &Tensor::from_vec(x.shape().to_vec(), mask)?)
}

/// Final per-position hidden states `[T, width]` (after the last norm).
/// Causal: row `t` depends only on tokens at positions `<= t`.
pub fn forward_hidden(tape: &Tape, params: &Params, cfg: &LmConfig, ids: &[u32]) -> Result<Tensor> {
    forward_hidden_dropout(tape, params, cfg, ids, None)
}

/// As [`forward_hidden`], applying dropout to the residual branches when a
/// rate and generator are supplied (training only).
pub fn forward_hidden_dropout(
    tape: &Tape,
    params: &Params,
    cfg: &LmConfig,
    ids: &[u32],
    mut dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Tensor> {
    if ids.len() > cfg.context {
        return Err(Error::ContextOverflow {
            len: ids.len(),
            max: cfg.context,
        });
    }
    if ids.is_empty() {
        return Err(Error::invalid("forward on empty sequence"));
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(Error::invalid(format!(
                "token id {} out of range for vocab size {}",
                id, cfg.vocab_size
            )));
        }
    }
    let idx: Vec<usize> = ids.iter().map(|i| *i as usize).collect();
    let pos: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather_rows(&params["tok_emb"], &idx)?;
    let pe = tape.gather_rows(&params["pos_emb"], &pos)?;
    let mut x = tape.add(&tok, &pe)?;
    for l in 0..cfg.layers {
        let a = attention(
            tape,
            cfg,
            params,
            l,
            &layer_norm(tape, &x, &params[&format!("l{l}.ln1.g")], &params[&format!("l{l}.ln1.b")])?,
        )?;
        let a = dropout_mask(tape, &a, &mut dropout)?;
        x = tape.add(&x, &a)?;
        let h = layer_norm(
            tape,
            &x,
            &params[&format!("l{l}.ln2.g")],
            &params[&format!("l{l}.ln2.b")],
        )?;
        let h1 = tape.relu(&linear(tape, &h, &params[&format!("l{l}.ff.w1")], &params[&format!("l{l}.ff.b1")])?)?;
        let h2 = linear(tape, &h1, &params[&format!("l{l}.ff.w2")], &params[&format!("l{l}.ff.b2")])?;
        let h2 = dropout_mask(tape, &h2, &mut dropout)?;
        x = tape.add(&x, &h2)?;
    }
    layer_norm(tape, &x, &params["ln_f.g"], &params["ln_f.b"])
}

/// Next-token logits `[T, vocab]`, one row per input position.
pub fn forward_logits(tape: &Tape, params: &Params, cfg: &LmConfig, ids: &[u32]) -> Result<Tensor> {
    let h = forward_hidden(tape, params, cfg, ids)?;
    linear(tape, &h, &params["head.w"], &params["head.b"])
}
