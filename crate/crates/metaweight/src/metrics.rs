//! Answer scoring (token-overlap F1, exact match), aggregation across seeds,
//! learning-rate sweeps, and the cross-distribution transfer matrix.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::autograd::optim::Params;
use crate::data::Style;
use crate::error::{Error, Result};
use crate::lm::{loss, LmConfig, Vocabulary};
use crate::stream::{adapt_stream, AdaptConfig, StreamDoc};
use crate::weighting::{Weighter, WeightModelConfig};

/// Lowercase, strip punctuation, collapse whitespace, drop articles.
pub fn normalize_answer(s: &str) -> String {
    let lowered = s.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    stripped
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_counts(s: &str) -> BTreeMap<&str, usize> {
    let mut m = BTreeMap::new();
    for t in s.split_whitespace() {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Token-multiset F1 over normalized strings. Both empty → 1; one empty → 0.
pub fn f1_token_overlap(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let pc = token_counts(&p);
    let gc = token_counts(&g);
    let overlap: usize = pc
        .iter()
        .map(|(t, n)| n.min(gc.get(t).unwrap_or(&0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let np: usize = pc.values().sum();
    let ng: usize = gc.values().sum();
    let precision = overlap as f64 / np as f64;
    let recall = overlap as f64 / ng as f64;
    2.0 * precision * recall / (precision + recall)
}

/// 1 iff normalized strings are equal.
pub fn exact_match(prediction: &str, gold: &str) -> f64 {
    if normalize_answer(prediction) == normalize_answer(gold) {
        1.0
    } else {
        0.0
    }
}

/// One test query: tokenized question, gold answer text, and (when known)
/// the id of the stream document that teaches the answer.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub q: Vec<u32>,
    pub gold: String,
    pub source_doc: Option<String>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct QueryScore {
    pub f1: f64,
    pub em: f64,
}

/// Greedy-decode every query and score against gold.
pub fn evaluate(
    theta: &Params,
    cfg: &LmConfig,
    queries: &[EvalQuery],
    vocab: &Vocabulary,
    max_answer_len: usize,
) -> Result<Vec<QueryScore>> {
    queries
        .iter()
        .map(|query| {
            let ids = loss::greedy_decode(theta, cfg, &query.q, max_answer_len)?;
            let pred = ids
                .iter()
                .map(|i| vocab.token(*i))
                .collect::<Vec<_>>()
                .join(" ");
            Ok(QueryScore {
                f1: f1_token_overlap(&pred, &query.gold),
                em: exact_match(&pred, &query.gold),
            })
        })
        .collect()
}

pub fn mean_f1(scores: &[QueryScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.f1).sum::<f64>() / scores.len() as f64
}

/// Scores for one seeded stream: the same queries before and after adaptation.
#[derive(Debug, Clone)]
pub struct SeedEval {
    pub seed: u64,
    pub before: Vec<QueryScore>,
    pub after: Vec<QueryScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreReport {
    pub per_seed_f1_before: Vec<f64>,
    pub per_seed_f1_after: Vec<f64>,
    pub mean_f1_before: f64,
    pub mean_f1_after: f64,
    pub abs_change: f64,
    pub rel_change: f64,
    pub mean_em_after: f64,
    /// Standard error of the after-F1 across seeds; absent below 2 seeds.
    pub std_error: Option<f64>,
}

pub fn score_report(per_seed: &[SeedEval]) -> Result<ScoreReport> {
    if per_seed.is_empty() {
        return Err(Error::invalid("score_report needs at least one seed"));
    }
    let before: Vec<f64> = per_seed.iter().map(|s| mean_f1(&s.before)).collect();
    let after: Vec<f64> = per_seed.iter().map(|s| mean_f1(&s.after)).collect();
    let mean_before = before.iter().sum::<f64>() / before.len() as f64;
    let mean_after = after.iter().sum::<f64>() / after.len() as f64;
    let mean_em = per_seed
        .iter()
        .map(|s| {
            if s.after.is_empty() {
                0.0
            } else {
                s.after.iter().map(|q| q.em).sum::<f64>() / s.after.len() as f64
            }
        })
        .sum::<f64>()
        / per_seed.len() as f64;
    let n = after.len();
    let std_error = if n >= 2 {
        let var = after.iter().map(|x| (x - mean_after).powi(2)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    Ok(ScoreReport {
        per_seed_f1_before: before,
        per_seed_f1_after: after,
        mean_f1_before: mean_before,
        mean_f1_after: mean_after,
        abs_change: mean_after - mean_before,
        rel_change: if mean_before > 0.0 {
            (mean_after - mean_before) / mean_before
        } else {
            f64::INFINITY * (mean_after - mean_before).signum()
        },
        mean_em_after: mean_em,
        std_error,
    })
}

/// The paper's test-time sweep grid.
pub const SWEEP_GRID: [f64; 4] = [1e-4, 2.5e-5, 6.25e-6, 1.625e-6];

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub f1: Vec<f64>,
    pub diverged: Vec<bool>,
    pub selected: f64,
}

/// One adaptation run per learning rate on a validation stream; argmax by
/// mean F1, ties toward the smaller rate; a halted arm scores 0 and is
/// flagged. Arms run concurrently.
pub fn lr_sweep(
    theta: &Params,
    cfg: &LmConfig,
    weighter: &Weighter,
    docs: &[StreamDoc],
    queries: &[EvalQuery],
    vocab: &Vocabulary,
    grid: &[f64],
    adapt_template: &AdaptConfig,
    max_answer_len: usize,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut rates: Vec<f64> = grid.to_vec();
    rates.sort_by(|a, b| a.total_cmp(b));
    let arms: Vec<Result<(f64, bool)>> = rates
        .par_iter()
        .map(|lr| {
            let mut acfg = adapt_template.clone();
            acfg.lr = *lr;
            let run = adapt_stream(theta, cfg, docs, weighter, vocab, &acfg)?;
            if run.halted.is_some() {
                return Ok((0.0, true));
            }
            let scores = evaluate(&run.theta_final, cfg, queries, vocab, max_answer_len)?;
            Ok((mean_f1(&scores), false))
        })
        .collect();
    let mut f1 = Vec::with_capacity(rates.len());
    let mut diverged = Vec::with_capacity(rates.len());
    for arm in arms {
        let (score, halted) = arm?;
        f1.push(score);
        diverged.push(halted);
    }
    let mut best = 0usize;
    for i in 1..rates.len() {
        if f1[i] > f1[best] {
            best = i; // strict improvement only: ties keep the smaller rate
        }
    }
    Ok(SweepResult {
        grid: rates.clone(),
        f1,
        diverged,
        selected: rates[best],
    })
}

/// One seeded stream of one style: documents plus their queries.
#[derive(Debug, Clone)]
pub struct StreamArm {
    pub seed: u64,
    pub docs: Vec<StreamDoc>,
    pub queries: Vec<EvalQuery>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TransferMatrix {
    pub styles: Vec<String>,
    /// cells[i][j] = φ trained on styles[i], evaluated on styles[j].
    pub cells: Vec<Vec<ScoreReport>>,
}

/// Adapt with each train-style φ on each test-style stream; per-cell seeds
/// feed the standard error. Cells run concurrently.
#[allow(clippy::too_many_arguments)]
pub fn transfer_matrix(
    theta: &Params,
    cfg: &LmConfig,
    phis: &BTreeMap<Style, (Params, WeightModelConfig)>,
    streams: &BTreeMap<Style, Vec<StreamArm>>,
    vocab: &Vocabulary,
    adapt_template: &AdaptConfig,
    styles: &[Style],
    max_answer_len: usize,
) -> Result<TransferMatrix> {
    let pairs: Vec<(Style, Style)> = styles
        .iter()
        .flat_map(|tr| styles.iter().map(move |te| (*tr, *te)))
        .collect();
    for (tr, te) in &pairs {
        if !phis.contains_key(tr) {
            return Err(Error::invalid(format!(
                "transfer cell ({tr}, {te}): no weighting model for train style {tr}"
            )));
        }
        if !streams.contains_key(te) {
            return Err(Error::invalid(format!(
                "transfer cell ({tr}, {te}): no streams for test style {te}"
            )));
        }
    }
    let reports: Vec<Result<ScoreReport>> = pairs
        .par_iter()
        .map(|(tr, te)| {
            let (phi, wm_cfg) = &phis[tr];
            let weighter = Weighter::Learned { phi: phi.clone(), cfg: wm_cfg.clone() };
            let seeds: Vec<SeedEval> = streams[te]
                .iter()
                .map(|arm| {
                    let mut acfg = adapt_template.clone();
                    acfg.seed = arm.seed;
                    let before = evaluate(theta, cfg, &arm.queries, vocab, max_answer_len)?;
                    let run = adapt_stream(theta, cfg, &arm.docs, &weighter, vocab, &acfg)?;
                    let after =
                        evaluate(&run.theta_final, cfg, &arm.queries, vocab, max_answer_len)?;
                    Ok(SeedEval { seed: arm.seed, before, after })
                })
                .collect::<Result<_>>()?;
            score_report(&seeds)
        })
        .collect();
    let mut cells = Vec::with_capacity(styles.len());
    let mut it = reports.into_iter();
    for _ in styles {
        let mut row = Vec::with_capacity(styles.len());
        for _ in styles {
            row.push(it.next().unwrap()?);
        }
        cells.push(row);
    }
    Ok(TransferMatrix {
        styles: styles.iter().map(|s| s.to_string()).collect(),
        cells,
    })
}

pub fn transfer_matrix_csv(m: &TransferMatrix) -> String {
    let mut out = String::from("train\\test");
    for s in &m.styles {
        out.push_str(&format!(",{s}"));
    }
    out.push('\n');
    for (i, row) in m.cells.iter().enumerate() {
        out.push_str(&m.styles[i]);
        for cell in row {
            out.push_str(&format!(",{:.6}", cell.mean_f1_after));
        }
        out.push('\n');
    }
    out
}
