//! Per-token importance weights: the learned weighting model, heuristic
//! baselines (uniform, tf-idf, salient spans), and the structural ablations
//! that redistribute learned weights by token category.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::optim::Params;
use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::lm::model::forward_hidden;
use crate::lm::{init_params, Category, LmConfig, TokenSequence, Vocabulary};

/// Nonnegative weight per predicted token position of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    values: Vec<f64>,
}

impl TokenWeights {
    pub fn new(values: Vec<f64>) -> Result<TokenWeights> {
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invalid(format!("weight {i} is not finite")));
            }
            if *v < 0.0 {
                return Err(Error::invalid(format!("weight {i} is negative: {v}")));
            }
        }
        Ok(TokenWeights { values })
    }

    pub fn uniform(len: usize) -> TokenWeights {
        TokenWeights { values: vec![1.0; len] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            0.0
        } else {
            self.values.iter().sum::<f64>() / self.values.len() as f64
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.values.len()], self.values.clone()).expect("validated weights")
    }
}

/// Learned weighting model: a small autoregressive trunk plus a two-layer
/// perceptron head producing one pre-weight per position.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightModelConfig {
    pub trunk: LmConfig,
    pub head_hidden: usize,
}

impl WeightModelConfig {
    pub fn desk_default(vocab_size: usize) -> WeightModelConfig {
        WeightModelConfig {
            trunk: LmConfig::desk_default(vocab_size),
            head_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trunk.validate()?;
        if self.head_hidden == 0 {
            return Err(Error::invalid("head_hidden must be nonzero"));
        }
        Ok(())
    }
}

/// Trunk parameters plus head keys `wh.w1`, `wh.b1`, `wh.w2`, `wh.b2`.
pub fn init_weight_model(cfg: &WeightModelConfig) -> Result<Params> {
    cfg.validate()?;
    let mut params = init_params(&cfg.trunk)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.trunk.init_seed ^ 0x77ea11);
    let d = cfg.trunk.width;
    let h = cfg.head_hidden;
    params.insert("wh.w1".into(), Tensor::randn(&[d, h], 0.02, &mut rng));
    params.insert("wh.b1".into(), Tensor::zeros(&[h]));
    params.insert("wh.w2".into(), Tensor::randn(&[h, 1], 0.02, &mut rng));
    params.insert("wh.b2".into(), Tensor::zeros(&[1]));
    Ok(params)
}

/// Importance weights for every token of `x`, differentiable in the model
/// parameters. The weight at position t reads the trunk hidden state at that
/// position, so it depends only on the prefix up to and including token t.
pub fn weight_model_forward(
    tape: &Tape,
    params: &Params,
    cfg: &WeightModelConfig,
    x: &TokenSequence,
) -> Result<Tensor> {
    if x.is_empty() {
        return Err(Error::invalid("cannot weight an empty sequence"));
    }
    let ids = crate::lm::loss::doc_ids(x);
    let hidden = forward_hidden(tape, params, &cfg.trunk, &ids)?;
    let t = x.len();
    let token_rows = tape.slice_rows(&hidden, 1, t)?;
    let w1 = params.get("wh.w1").ok_or_else(|| Error::invalid("missing wh.w1"))?;
    let b1 = params.get("wh.b1").ok_or_else(|| Error::invalid("missing wh.b1"))?;
    let w2 = params.get("wh.w2").ok_or_else(|| Error::invalid("missing wh.w2"))?;
    let b2 = params.get("wh.b2").ok_or_else(|| Error::invalid("missing wh.b2"))?;
    let h1 = tape.relu(&tape.add(&tape.matmul(&token_rows, w1)?, &tape.broadcast_rows(b1, t)?)?)?;
    let pre = tape.add(&tape.matmul(&h1, w2)?, &tape.broadcast_rows(b2, t)?)?;
    tape.softplus(&tape.reshape(&pre, &[t])?)
}

/// Convenience wrapper when gradients are not needed.
pub fn learned_weights(params: &Params, cfg: &WeightModelConfig, x: &TokenSequence) -> Result<TokenWeights> {
    let tape = Tape::inference();
    TokenWeights::new(weight_model_forward(&tape, params, cfg, x)?.data().to_vec())
}

pub fn uniform_weights(x: &TokenSequence) -> TokenWeights {
    TokenWeights::uniform(x.len())
}

/// TF-IDF statistics fitted on a document corpus. Words are whitespace
/// chunks of the raw text; a fitted cutoff zeroes the corpus-wide bottom
/// fraction of scores.
#[derive(Debug, Clone)]
pub struct TfIdf {
    n_docs: usize,
    df: BTreeMap<String, usize>,
    threshold: f64,
}

impl TfIdf {
    pub fn fit(corpus: &[String], cutoff_frac: f64) -> Result<TfIdf> {
        if corpus.is_empty() {
            return Err(Error::invalid("tf-idf corpus is empty"));
        }
        if !(0.0..1.0).contains(&cutoff_frac) {
            return Err(Error::invalid("cutoff_frac must lie in [0, 1)"));
        }
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        let per_doc: Vec<BTreeMap<&str, usize>> = corpus
            .iter()
            .map(|doc| {
                let mut tf = BTreeMap::new();
                for w in doc.split_whitespace() {
                    *tf.entry(w).or_insert(0) += 1;
                }
                tf
            })
            .collect();
        for tf in &per_doc {
            for w in tf.keys() {
                *df.entry((*w).to_string()).or_insert(0) += 1;
            }
        }
        let n = corpus.len();
        let mut scores: Vec<f64> = Vec::new();
        for tf in &per_doc {
            for (w, c) in tf {
                scores.push(Self::score_raw(*c, df[*w], n));
            }
        }
        scores.sort_by(|a, b| a.total_cmp(b));
        let idx = ((cutoff_frac * scores.len() as f64).floor() as usize).min(scores.len() - 1);
        let threshold = scores[idx];
        Ok(TfIdf { n_docs: n, df, threshold })
    }

    /// tf · (ln((1 + N) / (1 + df)) + 1); the +1 keeps corpus-wide words at
    /// a positive score instead of exactly zero.
    fn score_raw(tf: usize, df: usize, n_docs: usize) -> f64 {
        tf as f64 * (((1 + n_docs) as f64 / (1 + df) as f64).ln() + 1.0)
    }

    pub fn score(&self, word: &str, tf: usize) -> f64 {
        let df = self.df.get(word).copied().unwrap_or(0);
        Self::score_raw(tf, df, self.n_docs)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

/// Word-level tf-idf scores mapped onto subword tokens; scores strictly
/// below the fitted cutoff become 0, the rest are rescaled so the mean
/// nonzero weight is 1.
pub fn tfidf_weights(model: &TfIdf, x: &TokenSequence, vocab: &Vocabulary) -> Result<TokenWeights> {
    let word_index = x
        .word_index
        .as_ref()
        .ok_or_else(|| Error::invalid("tf-idf needs word indices on the sequence"))?;
    if word_index.len() != x.len() {
        return Err(Error::invalid("word index length mismatch"));
    }
    // Reassemble each word from its subword pieces.
    let n_words = word_index.iter().max().map_or(0, |m| m + 1);
    let mut words = vec![String::new(); n_words];
    for (tok, wi) in x.ids.iter().zip(word_index) {
        words[*wi].push_str(vocab.token(*tok));
    }
    let mut tf: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &words {
        *tf.entry(w.as_str()).or_insert(0) += 1;
    }
    let mut values: Vec<f64> = word_index
        .iter()
        .map(|wi| {
            let w = &words[*wi];
            let s = model.score(w, tf[w.as_str()]);
            if s < model.threshold { 0.0 } else { s }
        })
        .collect();
    let nonzero: Vec<f64> = values.iter().copied().filter(|v| *v > 0.0).collect();
    if !nonzero.is_empty() {
        let mean = nonzero.iter().sum::<f64>() / nonzero.len() as f64;
        for v in &mut values {
            *v /= mean;
        }
    }
    TokenWeights::new(values)
}

fn is_numeral(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_digit())
}

fn is_capitalized(token: &str) -> bool {
    token.chars().next().is_some_and(|c| c.is_uppercase())
}

/// Weight 1 inside salient spans, 0 elsewhere. Spans are capitalized words,
/// numerals, and (when category labels are present) any token carrying a
/// fact-category label — the labelled stand-in for an NER span extractor.
pub fn salient_span_weights(x: &TokenSequence, vocab: &Vocabulary) -> TokenWeights {
    let values: Vec<f64> = x
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let tok = vocab.token(*id);
            let by_surface = is_capitalized(tok) || is_numeral(tok);
            let by_category = x
                .categories
                .as_ref()
                .is_some_and(|c| c[i] != Category::Filler);
            if by_surface || by_category { 1.0 } else { 0.0 }
        })
        .collect();
    TokenWeights { values }
}

/// Learned-weight statistics per token category over a reference corpus,
/// fitted once and reused by the redistribution ablations.
#[derive(Debug, Clone)]
pub struct ReferenceWeights {
    per_category: BTreeMap<Category, Vec<f64>>,
    all: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl ReferenceWeights {
    pub fn fit(params: &Params, cfg: &WeightModelConfig, reference: &[TokenSequence]) -> Result<ReferenceWeights> {
        let mut per_category: BTreeMap<Category, Vec<f64>> = BTreeMap::new();
        let mut all = Vec::new();
        for x in reference {
            let w = learned_weights(params, cfg, x)?;
            let cats = x
                .categories
                .as_ref()
                .ok_or_else(|| Error::invalid("reference sequences need category labels"))?;
            for (v, c) in w.values().iter().zip(cats) {
                per_category.entry(*c).or_default().push(*v);
                all.push(*v);
            }
        }
        if all.is_empty() {
            return Err(Error::invalid("reference corpus produced no weights"));
        }
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(ReferenceWeights { per_category, all, lo, hi })
    }

    pub fn category_mean(&self, cat: Category) -> Option<f64> {
        self.per_category
            .get(&cat)
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn global_mean(&self) -> f64 {
        self.all.iter().sum::<f64>() / self.all.len() as f64
    }

    pub fn extremes(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }
}

fn categories_of(x: &TokenSequence) -> Result<&[Category]> {
    x.categories
        .as_deref()
        .ok_or_else(|| Error::invalid("sequence lacks category labels"))
}

/// Every token gets its category's mean learned weight on the reference
/// corpus; categories unseen there fall back to the global mean.
pub fn pos_mean_weights(refw: &ReferenceWeights, x: &TokenSequence) -> Result<TokenWeights> {
    let cats = categories_of(x)?;
    let values = cats
        .iter()
        .map(|c| refw.category_mean(*c).unwrap_or_else(|| refw.global_mean()))
        .collect();
    TokenWeights::new(values)
}

/// Every token's weight is drawn uniformly from the reference multiset of
/// its category's learned weights.
pub fn pos_resample_weights(refw: &ReferenceWeights, x: &TokenSequence, seed: u64) -> Result<TokenWeights> {
    let cats = categories_of(x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = cats
        .iter()
        .map(|c| {
            let pool = refw.per_category.get(c).map_or(&refw.all[..], |v| &v[..]);
            pool[rng.gen_range(0..pool.len())]
        })
        .collect();
    TokenWeights::new(values)
}

/// Learned weights rounded to whichever of the reference distribution's
/// minimum or maximum is nearer; exact midpoints round up.
pub fn bimodal_round_weights(
    params: &Params,
    cfg: &WeightModelConfig,
    refw: &ReferenceWeights,
    x: &TokenSequence,
) -> Result<TokenWeights> {
    let raw = learned_weights(params, cfg, x)?;
    let mid = 0.5 * (refw.lo + refw.hi);
    let values = raw
        .values()
        .iter()
        .map(|v| if *v >= mid { refw.hi } else { refw.lo })
        .collect();
    TokenWeights::new(values)
}

/// Summary statistics of a weight sample, optionally broken out by category.
#[derive(Debug, Clone, serde::Serialize)]
pub struct WeightStats {
    pub bin_edges: Vec<f64>,
    pub bin_counts: Vec<usize>,
    pub per_category: BTreeMap<String, CategoryStat>,
    pub min: f64,
    pub max: f64,
    pub top_mode_frac: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct CategoryStat {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

pub fn weight_stats(samples: &[(f64, Option<Category>)], n_bins: usize) -> Result<WeightStats> {
    if samples.is_empty() {
        return Err(Error::invalid("weight_stats needs a nonempty sample"));
    }
    if n_bins == 0 {
        return Err(Error::invalid("n_bins must be nonzero"));
    }
    let min = samples.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
    let max = samples.iter().map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let span = (max - min).max(f64::MIN_POSITIVE);
    let mut bin_counts = vec![0usize; n_bins];
    let mut by_cat: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (v, c) in samples {
        let b = (((v - min) / span) * n_bins as f64) as usize;
        bin_counts[b.min(n_bins - 1)] += 1;
        if let Some(c) = c {
            by_cat.entry(c.as_str().to_string()).or_default().push(*v);
        }
    }
    let bin_edges = (0..=n_bins)
        .map(|i| min + span * i as f64 / n_bins as f64)
        .collect();
    let per_category = by_cat
        .into_iter()
        .map(|(k, v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            (k, CategoryStat { count: v.len(), mean, variance })
        })
        .collect();
    let top = *bin_counts.iter().max().unwrap();
    Ok(WeightStats {
        bin_edges,
        bin_counts,
        per_category,
        min,
        max,
        top_mode_frac: top as f64 / samples.len() as f64,
    })
}

/// Every source of token weights behind one interface, so stream adaptation
/// and sweeps are generic over the method.
#[derive(Debug, Clone)]
pub enum Weighter {
    Uniform,
    TfIdf(TfIdf),
    SalientSpan,
    Learned { phi: Params, cfg: WeightModelConfig },
    PosMean { reference: ReferenceWeights },
    PosResample { reference: ReferenceWeights, seed: u64 },
    Bimodal { phi: Params, cfg: WeightModelConfig, reference: ReferenceWeights },
}

impl Weighter {
    pub fn name(&self) -> &'static str {
        match self {
            Weighter::Uniform => "uniform",
            Weighter::TfIdf(_) => "tfidf",
            Weighter::SalientSpan => "salient",
            Weighter::Learned { .. } => "learned",
            Weighter::PosMean { .. } => "pos_mean",
            Weighter::PosResample { .. } => "pos_resample",
            Weighter::Bimodal { .. } => "bimodal",
        }
    }

    pub fn weights(&self, x: &TokenSequence, vocab: &Vocabulary) -> Result<TokenWeights> {
        match self {
            Weighter::Uniform => Ok(uniform_weights(x)),
            Weighter::TfIdf(m) => tfidf_weights(m, x, vocab),
            Weighter::SalientSpan => Ok(salient_span_weights(x, vocab)),
            Weighter::Learned { phi, cfg } => learned_weights(phi, cfg, x),
            Weighter::PosMean { reference } => pos_mean_weights(reference, x),
            Weighter::PosResample { reference, seed } => {
                // per-document determinism independent of stream position
                let mut h = *seed;
                for id in &x.ids {
                    h = h.wrapping_mul(0x100000001b3).wrapping_add(*id as u64);
                }
                pos_resample_weights(reference, x, h)
            }
            Weighter::Bimodal { phi, cfg, reference } => bimodal_round_weights(phi, cfg, reference, x),
        }
    }
}

/// One analysis row per token: (document id, position, token, category, weight).
pub fn dump_weights_csv(
    path: &Path,
    rows: impl IntoIterator<Item = (String, usize, String, Option<Category>, f64)>,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "doc_id,position,token,category,weight")?;
    for (doc, pos, tok, cat, w) in rows {
        let cat = cat.map_or("", |c| c.as_str());
        writeln!(f, "{doc},{pos},{tok},{cat},{w}")?;
    }
    Ok(())
}
