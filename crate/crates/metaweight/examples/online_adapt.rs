//! Adapt a base model over a document stream with uniform weights and watch
//! the per-checkpoint F1 on stream queries vs unrelated queries.

use metaweight::config::RunConfig;
use metaweight::pipeline::{build_materials, eval_queries, make_stream, prepare_base};
use metaweight::stream::{adapt_stream, checkpoint_eval, curve_csv};
use metaweight::weighting::Weighter;
use metaweight::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data_entities = 8;
    cfg.data_value_words = 16;
    cfg.data_fillers = 15;
    cfg.data_numerals = 10;
    cfg.data_docs = 60;
    cfg.data_locality_docs = 4;
    cfg.lm_layers = 1;
    cfg.lm_heads = 2;
    cfg.lm_width = 16;
    cfg.lm_ff_width = 32;
    cfg.lm_context = 160;
    cfg.pretrain_epochs = 2;
    cfg.qa_epochs = 2;
    cfg.adapt_lr = 1e-3;
    cfg.adapt_checkpoint_every = 3;

    let m = build_materials(&cfg)?;
    let base = prepare_base(&cfg, &m)?;
    let (docs, queries) = make_stream(&m.splits.test, &m.vocab, cfg.seed)?;
    println!("stream of {} documents, {} queries", docs.len(), queries.len());

    let run = adapt_stream(&base, &m.lm_cfg, &docs, &Weighter::Uniform, &m.vocab, &cfg.adapt_config())?;
    for r in run.log.iter().take(3) {
        println!(
            "doc {} [{}]: loss {:.4}, |g| {:.4}",
            r.doc_index, r.doc_id, r.weighted_loss, r.grad_norm_weighted
        );
    }

    let unrelated = eval_queries(&m.splits.qa_valid, &m.vocab);
    let curve = checkpoint_eval(&run, &m.lm_cfg, &queries, &unrelated, &m.vocab, cfg.eval_max_answer_len)?;
    print!("{}", curve_csv(&curve));
    Ok(())
}
