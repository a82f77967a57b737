//! Definitional-equivalence oracles, pinned to 1e-12: independently written
//! references that must agree with the composed implementations essentially
//! to the bit. Shared by the equivalence tests and the acceptance suite.

use std::collections::BTreeMap;

use metaweight::autograd::nnops::{kl_divergence, Reduce};
use metaweight::autograd::optim::{detach_all, grad_map, watch, AdamConfig, AdamState, Params};
use metaweight::autograd::{Tape, Tensor};
use metaweight::data::{build_vocab, generate_world, render_triples, Style, WorldSpec};
use metaweight::lm::{self, init_params, LmConfig, TokenSequence};
use metaweight::meta::{inner_rollout, inner_step, locality_loss, TripleTokens};
use metaweight::stream::{adapt_stream, AdaptConfig, StreamDoc};
use metaweight::weighting::{init_weight_model, weight_model_forward, Weighter, WeightModelConfig};

const TOL: f64 = 1e-12;

fn tiny_lm(vocab_size: usize) -> LmConfig {
    LmConfig {
        layers: 1,
        heads: 2,
        width: 8,
        ff_width: 16,
        context: 160,
        vocab_size,
        dropout: 0.0,
        init_seed: 9,
    }
}

fn fixture() -> (Vec<TripleTokens>, LmConfig, Params, lm::Vocabulary) {
    let spec = WorldSpec { n_entities: 6, n_value_words: 12, ..WorldSpec::desk_default(3) };
    let world = generate_world(&spec).unwrap();
    let triples = render_triples(&world, Style::B, 12, 3).unwrap();
    let vocab = build_vocab(&triples, &[]);
    let cfg = tiny_lm(vocab.len());
    let theta = init_params(&cfg).unwrap();
    let tokens = triples
        .iter()
        .map(|t| {
            let (q, y) = metaweight::data::qa_pair(t, &vocab);
            TripleTokens { doc: metaweight::data::doc_sequence(t, &vocab).unwrap(), q, y }
        })
        .collect();
    (tokens, cfg, theta, vocab)
}

fn assert_params_close(a: &Params, b: &Params, tol: f64) {
    assert_eq!(a.len(), b.len());
    for (k, va) in a {
        let vb = &b[k];
        for (x, y) in va.data().iter().zip(vb.data()) {
            assert!((x - y).abs() <= tol, "{k}: {x} vs {y}");
        }
    }
}

/// Plain Adam fine-tuning written from scratch, no weighting machinery.
fn plain_finetune_oracle(
    theta: &Params,
    cfg: &LmConfig,
    docs: &[TokenSequence],
    lr: f64,
    steps_per_doc: usize,
) -> Params {
    let mut theta = theta.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(lr));
    for doc in docs {
        for _ in 0..steps_per_doc {
            let tape = Tape::new();
            let watched = watch(&tape, &theta);
            let ids = lm::doc_ids(doc);
            let l = lm::mean_nll(&tape, &watched, cfg, &ids).unwrap();
            let grads = grad_map(&tape, &l, &watched, false).unwrap();
            theta = detach_all(&adam.apply(&watched, &grads).unwrap());
        }
    }
    theta
}

pub fn uniform_adapt_stream_is_plain_finetuning() {
    let (tokens, cfg, theta, vocab) = fixture();
    let docs: Vec<StreamDoc> = tokens
        .iter()
        .enumerate()
        .map(|(i, t)| StreamDoc { id: format!("d{i}"), seq: t.doc.clone() })
        .collect();
    let acfg = AdaptConfig { lr: 1e-3, steps_per_doc: 2, ..AdaptConfig::default() };
    let run = adapt_stream(&theta, &cfg, &docs, &Weighter::Uniform, &vocab, &acfg).unwrap();
    assert!(run.halted.is_none());
    let seqs: Vec<TokenSequence> = tokens.iter().map(|t| t.doc.clone()).collect();
    let oracle = plain_finetune_oracle(&theta, &cfg, &seqs, acfg.lr, acfg.steps_per_doc);
    assert_params_close(&run.theta_final, &oracle, TOL);
}

pub fn k1_rollout_is_one_inner_step() {
    let (tokens, cfg, theta, _) = fixture();
    let wm_cfg = WeightModelConfig { trunk: cfg.clone(), head_hidden: 8 };
    let phi = init_weight_model(&wm_cfg).unwrap();
    let alpha = 5e-4;

    let tape = Tape::new();
    let theta_w = watch(&tape, &theta);
    let phi_w = watch(&tape, &phi);
    let rolled = inner_rollout(&tape, &theta_w, &cfg, &phi_w, &wm_cfg, &tokens[..1], alpha).unwrap();

    let tape2 = Tape::new();
    let theta_w2 = watch(&tape2, &theta);
    let phi_w2 = watch(&tape2, &phi);
    let w = weight_model_forward(&tape2, &phi_w2, &wm_cfg, &tokens[0].doc).unwrap();
    let stepped = inner_step(&tape2, &theta_w2, &cfg, &tokens[0].doc, &w, alpha, true).unwrap();

    assert_params_close(&detach_all(&rolled), &detach_all(&stepped), TOL);
}

pub fn conditional_nll_is_renormalized_indicator_weighted_nll() {
    let (tokens, cfg, theta, _) = fixture();
    for t in &tokens[..4] {
        let tape = Tape::inference();
        let direct = lm::conditional_nll(&tape, &theta, &cfg, &t.q, &t.y).unwrap().item();

        // indicator weights over `BOS q SEP y EOS`, 1 on answer positions;
        // weighted_nll divides by T, so renormalize by T / |answer|
        let (ids, range) = lm::qa_ids(&t.q, &t.y);
        let seq = TokenSequence::from_ids(ids[1..].to_vec());
        let t_len = lm::doc_ids(&seq).len() - 1;
        let mut w = vec![0.0; t_len];
        for i in range.clone() {
            w[i] = 1.0;
        }
        let wt = Tensor::from_vec(vec![t_len], w).unwrap();
        let weighted = lm::weighted_nll(&tape, &theta, &cfg, &seq, &wt).unwrap().item();
        let renorm = weighted * t_len as f64 / range.len() as f64;
        assert!((direct - renorm).abs() <= TOL, "{direct} vs {renorm}");
    }
}

pub fn locality_loss_on_single_position_is_one_kl_call() {
    let (tokens, cfg, theta, _) = fixture();
    let mut theta2: Params = BTreeMap::new();
    for (k, v) in &theta {
        let bumped: Vec<f64> = v.data().iter().map(|x| x * 1.01 + 1e-3).collect();
        theta2.insert(k.clone(), Tensor::from_vec(v.shape().to_vec(), bumped).unwrap());
    }
    let x_loc = TokenSequence::from_ids(vec![tokens[0].doc.ids[0]]);

    let tape = Tape::inference();
    let loc = locality_loss(&tape, &theta, &theta2, &cfg, &x_loc).unwrap().item();

    // single position ⇒ the prefixes are [BOS] and [BOS, t0]; one direct
    // kl_divergence call over those two next-token distributions must match
    let ids = [lm::vocab::BOS, x_loc.ids[0]];
    let base = lm::forward_logits(&tape, &theta, &cfg, &ids).unwrap();
    let adapted = lm::forward_logits(&tape, &theta2, &cfg, &ids).unwrap();
    let kl = kl_divergence(&tape, &base, &adapted, Reduce::Sum).unwrap().item();
    assert!((loc - kl).abs() <= TOL, "{loc} vs {kl}");
}
