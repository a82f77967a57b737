//! One outer update of the bi-level trainer: inner rollouts on a proxy
//! model, query-NLL + locality outer loss, Adam step on the weighting model.

use metaweight::config::RunConfig;
use metaweight::meta::{meta_train_step, sample_episodes, MetaTrainState};
use metaweight::pipeline::{build_materials, locality_sequences, prepare_base, triple_pool};
use metaweight::weighting::init_weight_model;
use metaweight::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data_entities = 6;
    cfg.data_value_words = 12;
    cfg.data_fillers = 15;
    cfg.data_numerals = 10;
    cfg.data_docs = 30;
    cfg.data_locality_docs = 4;
    cfg.lm_layers = 1;
    cfg.lm_heads = 2;
    cfg.lm_width = 16;
    cfg.lm_ff_width = 32;
    cfg.lm_context = 160;
    cfg.wm_head_hidden = 16;
    cfg.pretrain_epochs = 1;
    cfg.qa_epochs = 1;
    cfg.meta_k = 2;
    cfg.meta_micro = 2;
    cfg.meta_accum = 4;
    cfg.meta_episodes = 6;

    let m = build_materials(&cfg)?;
    let base = prepare_base(&cfg, &m)?;
    let mcfg = cfg.meta_config();
    let pool = triple_pool(&m.splits.train, &m.vocab)?;
    let locality = locality_sequences(&m.locality, &m.vocab)?;
    let phi = init_weight_model(&m.wm_cfg)?;
    let mut state = MetaTrainState::new(phi, m.wm_cfg.clone(), base, m.lm_cfg.clone(), &mcfg);

    for update in 0..3 {
        let episodes = sample_episodes(&pool, &locality, &mcfg, update)?;
        meta_train_step(&mut state, &episodes, &mcfg)?;
        let r = state.log.last().unwrap();
        println!(
            "update {update}: episode {} outer {:.4} (query {:.4}, locality {:.4}) reset={}",
            r.episode, r.outer_loss, r.query_nll, r.locality, r.proxy_reset
        );
        for (cat, mean) in &r.mean_weight_by_category {
            println!("    mean weight [{cat}] = {mean:.4}");
        }
    }
    Ok(())
}
