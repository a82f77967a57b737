//! Stage orchestration: everything between a resolved [`RunConfig`] and the
//! artifacts in a run directory. Each stage is deterministic in (config,
//! seed), so later stages rebuild earlier materials instead of deserializing
//! them; the run directory exists for inspection and cross-run reuse.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::checkpoint::{load_params, save_params};
use crate::autograd::optim::Params;
use crate::config::RunConfig;
use crate::data::{
    self, build_vocab, generate_world, make_locality_corpus, render_triples, split_dataset,
    DatasetSplits, DocumentTriple, LocalityDoc, Style, SyntheticWorld,
};
use crate::error::{Error, Result};
use crate::lm::{init_params, LmConfig, TokenSequence, Vocabulary};
use crate::meta::{
    meta_train_step, pretrain_lm, qa_tune, sample_episodes, MetaTrainState, TripleTokens,
};
use crate::metrics::EvalQuery;
use crate::stream::StreamDoc;
use crate::weighting::{init_weight_model, ReferenceWeights, TfIdf, Weighter, WeightModelConfig};

/// Everything downstream stages need about one synthetic run: the world,
/// its splits, the locality corpus, the vocabulary, and model shapes.
pub struct Materials {
    pub world: SyntheticWorld,
    pub splits: DatasetSplits,
    pub locality: Vec<LocalityDoc>,
    pub vocab: Vocabulary,
    pub lm_cfg: LmConfig,
    pub wm_cfg: WeightModelConfig,
}

pub fn build_materials(cfg: &RunConfig) -> Result<Materials> {
    cfg.validate()?;
    let world = generate_world(&cfg.world_spec())?;
    let triples = render_triples(&world, cfg.data_style, cfg.data_docs, cfg.seed ^ 0x7e11)?;
    let splits = split_dataset(triples, true)?;
    let locality = make_locality_corpus(&world, cfg.data_locality_docs, cfg.seed)?;
    let vocab = build_vocab(splits.all(), &locality);
    let lm_cfg = cfg.lm_config(vocab.len());
    let wm_cfg = cfg.wm_config(vocab.len());
    Ok(Materials { world, splits, locality, vocab, lm_cfg, wm_cfg })
}

pub fn triple_tokens(t: &DocumentTriple, vocab: &Vocabulary) -> Result<TripleTokens> {
    let (q, y) = data::qa_pair(t, vocab);
    Ok(TripleTokens { doc: data::doc_sequence(t, vocab)?, q, y })
}

pub fn triple_pool(triples: &[DocumentTriple], vocab: &Vocabulary) -> Result<Vec<TripleTokens>> {
    triples.iter().map(|t| triple_tokens(t, vocab)).collect()
}

pub fn locality_sequences(
    locality: &[LocalityDoc],
    vocab: &Vocabulary,
) -> Result<Vec<TokenSequence>> {
    locality.iter().map(|l| data::locality_sequence(l, vocab)).collect()
}

pub fn stream_docs(triples: &[DocumentTriple], vocab: &Vocabulary) -> Result<Vec<StreamDoc>> {
    triples
        .iter()
        .map(|t| Ok(StreamDoc { id: t.id.clone(), seq: data::doc_sequence(t, vocab)? }))
        .collect()
}

pub fn eval_queries(triples: &[DocumentTriple], vocab: &Vocabulary) -> Vec<EvalQuery> {
    triples
        .iter()
        .map(|t| EvalQuery {
            q: crate::lm::tokenize(&t.question, vocab).ids,
            gold: t.answer.clone(),
            source_doc: Some(t.id.clone()),
        })
        .collect()
}

pub fn qa_pairs(triples: &[DocumentTriple], vocab: &Vocabulary) -> Vec<(Vec<u32>, Vec<u32>)> {
    triples.iter().map(|t| data::qa_pair(t, vocab)).collect()
}

/// A stream = one seeded order over a split's documents, paired with the
/// queries those documents answer.
pub fn make_stream(
    triples: &[DocumentTriple],
    vocab: &Vocabulary,
    seed: u64,
) -> Result<(Vec<StreamDoc>, Vec<EvalQuery>)> {
    let mut order: Vec<&DocumentTriple> = triples.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x57a3));
    let docs = order
        .iter()
        .map(|t| Ok(StreamDoc { id: t.id.clone(), seq: data::doc_sequence(t, vocab)? }))
        .collect::<Result<Vec<_>>>()?;
    let queries = order
        .iter()
        .map(|t| EvalQuery {
            q: crate::lm::tokenize(&t.question, vocab).ids,
            gold: t.answer.clone(),
            source_doc: Some(t.id.clone()),
        })
        .collect();
    Ok((docs, queries))
}

/// Pretrain on text the evaluation never queries (QA-split documents plus
/// the locality corpus), then QA-tune on the QA-train pairs. Stream/test
/// documents stay unseen so uptake is attributable to adaptation.
pub fn prepare_base(cfg: &RunConfig, m: &Materials) -> Result<Params> {
    let mut docs: Vec<TokenSequence> = m
        .splits
        .qa_train
        .iter()
        .chain(&m.splits.qa_valid)
        .map(|t| data::doc_sequence(t, &m.vocab))
        .collect::<Result<_>>()?;
    docs.extend(locality_sequences(&m.locality, &m.vocab)?);
    let theta = init_params(&m.lm_cfg)?;
    let theta = pretrain_lm(&theta, &m.lm_cfg, &docs, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed ^ 0x9e1)?;
    let pairs = qa_pairs(&m.splits.qa_train, &m.vocab);
    qa_tune(&theta, &m.lm_cfg, &pairs, cfg.qa_epochs, cfg.qa_lr, cfg.seed ^ 0x4a2)
}

/// Full meta-training run: episodes come from the train split, the proxy
/// starts at the prepared base model, and φ starts fresh.
pub fn meta_train_phi(cfg: &RunConfig, m: &Materials, base: &Params) -> Result<MetaTrainState> {
    let mcfg = cfg.meta_config();
    let pool = triple_pool(&m.splits.train, &m.vocab)?;
    let locality = locality_sequences(&m.locality, &m.vocab)?;
    let phi = init_weight_model(&m.wm_cfg)?;
    let mut state = MetaTrainState::new(phi, m.wm_cfg.clone(), base.clone(), m.lm_cfg.clone(), &mcfg);
    let per_update = mcfg.episodes_per_update();
    let updates = mcfg.episodes.div_ceil(per_update);
    for u in 0..updates {
        let episodes = sample_episodes(&pool, &locality, &mcfg, u)?;
        meta_train_step(&mut state, &episodes, &mcfg)?;
    }
    Ok(state)
}

/// Build the named weighter. `phi` backs `learned` and `bimodal`; the
/// reference statistics behind the ablations are fitted on the valid split.
pub fn make_weighter(
    name: &str,
    m: &Materials,
    phi: Option<(&Params, &WeightModelConfig)>,
    seed: u64,
) -> Result<Weighter> {
    let need_phi = || {
        phi.map(|(p, c)| (p.clone(), c.clone())).ok_or_else(|| {
            Error::invalid(format!("weighter '{name}' needs a trained weighting model"))
        })
    };
    let reference = || -> Result<ReferenceWeights> {
        let (p, c) = need_phi()?;
        let docs: Vec<TokenSequence> = m
            .splits
            .valid
            .iter()
            .map(|t| data::doc_sequence(t, &m.vocab))
            .collect::<Result<_>>()?;
        ReferenceWeights::fit(&p, &c, &docs)
    };
    match name {
        "uniform" => Ok(Weighter::Uniform),
        "tfidf" => {
            let corpus: Vec<String> =
                m.splits.all().map(|t| t.text.clone()).collect();
            Ok(Weighter::TfIdf(TfIdf::fit(&corpus, 0.05)?))
        }
        "salient" => Ok(Weighter::SalientSpan),
        "learned" => {
            let (phi, cfg) = need_phi()?;
            Ok(Weighter::Learned { phi, cfg })
        }
        "pos_mean" => Ok(Weighter::PosMean { reference: reference()? }),
        "pos_resample" => Ok(Weighter::PosResample { reference: reference()?, seed }),
        "bimodal" => {
            let reference = reference()?;
            let (phi, cfg) = need_phi()?;
            Ok(Weighter::Bimodal { phi, cfg, reference })
        }
        other => Err(Error::invalid(format!(
            "unknown weighter '{other}' (expected uniform | tfidf | salient | learned | pos_mean | pos_resample | bimodal)"
        ))),
    }
}

/// Create the run directory and write the resolved config into it.
pub fn init_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_kv_string())?;
    Ok(cfg.out.clone())
}

/// Write the dataset splits, locality corpus, and vocabulary for inspection.
pub fn write_dataset(m: &Materials, dir: &Path) -> Result<()> {
    let s = &m.splits;
    for (name, triples) in [
        ("train", &s.train),
        ("valid", &s.valid),
        ("test", &s.test),
        ("qa_train", &s.qa_train),
        ("qa_valid", &s.qa_valid),
    ] {
        data::save_jsonl(triples, &dir.join(format!("{name}.jsonl")))?;
    }
    let mut loc = String::new();
    for l in &m.locality {
        loc.push_str(&serde_json::to_string(&serde_json::json!({
            "id": l.id,
            "text": l.text,
            "categories": l.categories,
        })).map_err(|e| Error::invalid(e.to_string()))?);
        loc.push('\n');
    }
    std::fs::write(dir.join("locality.jsonl"), loc)?;
    m.vocab.save(&dir.join("vocab.json"))
}

pub fn base_ckpt(dir: &Path) -> PathBuf {
    dir.join("base.ckpt")
}

pub fn phi_ckpt(dir: &Path) -> PathBuf {
    dir.join("phi.ckpt")
}

/// Load the base model from `dir`, or prepare and save it if absent.
pub fn base_or_prepare(cfg: &RunConfig, m: &Materials, dir: &Path) -> Result<Params> {
    let path = base_ckpt(dir);
    if path.exists() {
        return load_params(&path);
    }
    let theta = prepare_base(cfg, m)?;
    save_params(&path, &theta)?;
    Ok(theta)
}

/// Load φ from `dir`; unlike the base model this is never built implicitly,
/// since meta-training is the expensive stage.
pub fn load_phi(dir: &Path) -> Result<Params> {
    let path = phi_ckpt(dir);
    if !path.exists() {
        return Err(Error::invalid(format!(
            "no weighting model at {} (run meta-train first)",
            path.display()
        )));
    }
    load_params(&path)
}

/// Materials for the cross-distribution transfer study: one world rendered
/// in every style, under a single shared vocabulary so one base model and
/// every style's weighting model speak the same tokens.
pub struct TransferMaterials {
    pub world: SyntheticWorld,
    pub splits: BTreeMap<Style, DatasetSplits>,
    pub locality: Vec<LocalityDoc>,
    pub vocab: Vocabulary,
    pub lm_cfg: LmConfig,
    pub wm_cfg: WeightModelConfig,
}

pub fn build_transfer_materials(cfg: &RunConfig) -> Result<TransferMaterials> {
    cfg.validate()?;
    let world = generate_world(&cfg.world_spec())?;
    let mut splits = BTreeMap::new();
    for style in Style::all() {
        let seed = cfg.seed ^ 0x7e11 ^ (style.prefix() as u64);
        let triples = render_triples(&world, style, cfg.data_docs, seed)?;
        splits.insert(style, split_dataset(triples, true)?);
    }
    let locality = make_locality_corpus(&world, cfg.data_locality_docs, cfg.seed)?;
    let vocab = build_vocab(splits.values().flat_map(|s| s.all()), &locality);
    let lm_cfg = cfg.lm_config(vocab.len());
    let wm_cfg = cfg.wm_config(vocab.len());
    Ok(TransferMaterials { world, splits, locality, vocab, lm_cfg, wm_cfg })
}

impl TransferMaterials {
    /// Single-style view sharing the transfer vocabulary and model shapes.
    pub fn style_view(&self, style: Style) -> Materials {
        Materials {
            world: self.world.clone(),
            splits: self.splits[&style].clone(),
            locality: self.locality.clone(),
            vocab: self.vocab.clone(),
            lm_cfg: self.lm_cfg.clone(),
            wm_cfg: self.wm_cfg.clone(),
        }
    }
}

/// Base model for transfer runs: pretrained on every style's QA-split
/// documents plus the locality corpus, then QA-tuned on every style's
/// QA-train pairs, so no style is favored.
pub fn prepare_base_transfer(cfg: &RunConfig, tm: &TransferMaterials) -> Result<Params> {
    let mut docs: Vec<TokenSequence> = Vec::new();
    let mut pairs: Vec<(Vec<u32>, Vec<u32>)> = Vec::new();
    for splits in tm.splits.values() {
        for t in splits.qa_train.iter().chain(&splits.qa_valid) {
            docs.push(data::doc_sequence(t, &tm.vocab)?);
        }
        pairs.extend(qa_pairs(&splits.qa_train, &tm.vocab));
    }
    docs.extend(locality_sequences(&tm.locality, &tm.vocab)?);
    let theta = init_params(&tm.lm_cfg)?;
    let theta = pretrain_lm(&theta, &tm.lm_cfg, &docs, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.seed ^ 0x9e1)?;
    qa_tune(&theta, &tm.lm_cfg, &pairs, cfg.qa_epochs, cfg.qa_lr, cfg.seed ^ 0x4a2)
}

/// Distinct per-stream seeds for multi-seed evaluation.
pub fn stream_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.eval_seeds).map(|i| cfg.seed ^ ((i as u64 + 1) * 0x5bd1e995)).collect()
}
