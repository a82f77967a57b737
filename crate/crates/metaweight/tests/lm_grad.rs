//! Finite-difference check of the full transformer loss: every parameter
//! coordinate of a tiny model against central differences.

use metaweight::autograd::optim::{grad_map, Params};
use metaweight::autograd::Tape;
use metaweight::lm::{init_params, loss, LmConfig, TokenSequence};

fn tiny_cfg() -> LmConfig {
    LmConfig {
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 16,
        context: 12,
        vocab_size: 11,
        dropout: 0.0,
        init_seed: 42,
    }
}

fn loss_value(params: &Params, cfg: &LmConfig, x: &TokenSequence, w: &[f64]) -> f64 {
    let tape = Tape::inference();
    let weights = metaweight::autograd::Tensor::from_vec(vec![w.len()], w.to_vec()).unwrap();
    loss::weighted_nll(&tape, params, cfg, x, &weights).unwrap().item()
}

#[test]
fn transformer_weighted_nll_matches_fd_over_all_params() {
    let cfg = tiny_cfg();
    let base = init_params(&cfg).unwrap();
    let x = TokenSequence::from_ids(vec![5, 9, 6, 10, 7]);
    let w = vec![1.0, 0.3, 2.0, 0.0, 1.5];

    let tape = Tape::new();
    let params = metaweight::autograd::optim::watch(&tape, &base);
    let weights = tape.leaf(
        &metaweight::autograd::Tensor::from_vec(vec![w.len()], w.clone()).unwrap(),
    );
    let out = loss::weighted_nll(&tape, &params, &cfg, &x, &weights).unwrap();
    let grads = grad_map(&tape, &out, &params, false).unwrap();

    let h = 1e-5;
    for (name, g) in grads.iter() {
        let gd = g.data();
        let pd = base.get(name).unwrap().data().to_vec();
        let shape = base.get(name).unwrap().shape().to_vec();
        for i in 0..pd.len() {
            let mut plus = base.clone();
            let mut v = pd.clone();
            v[i] += h;
            plus.insert(
                name.clone(),
                metaweight::autograd::Tensor::from_vec(shape.clone(), v).unwrap(),
            );
            let mut minus = base.clone();
            let mut v = pd.clone();
            v[i] -= h;
            minus.insert(
                name.clone(),
                metaweight::autograd::Tensor::from_vec(shape.clone(), v).unwrap(),
            );
            let fd = (loss_value(&plus, &cfg, &x, &w) - loss_value(&minus, &cfg, &x, &w)) / (2.0 * h);
            let tol = 1e-6 + 1e-3 * fd.abs().max(gd[i].abs());
            assert!(
                (gd[i] - fd).abs() <= tol,
                "{name}[{i}]: ad={} fd={fd}",
                gd[i]
            );
        }
    }
}

#[test]
fn positions_past_sequence_get_zero_gradient() {
    // pos_emb rows beyond the sequence length never enter the forward pass.
    let cfg = tiny_cfg();
    let base = init_params(&cfg).unwrap();
    let x = TokenSequence::from_ids(vec![5, 9, 6]);
    let tape = Tape::new();
    let params = metaweight::autograd::optim::watch(&tape, &base);
    let ids = loss::doc_ids(&x);
    let out = loss::mean_nll(&tape, &params, &cfg, &ids).unwrap();
    let grads = grad_map(&tape, &out, &params, false).unwrap();
    let g = grads.get("pos_emb").unwrap();
    let w = cfg.width;
    for row in 4..cfg.context {
        for c in 0..w {
            assert_eq!(g.data()[row * w + c], 0.0, "pos_emb row {row}");
        }
    }
}
