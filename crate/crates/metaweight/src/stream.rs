//! Test-time unsupervised online adaptation: iterate a document stream,
//! reweight each document's NLL, apply one optimizer step per document,
//! checkpoint periodically, and analyze the resulting model trajectory.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::autograd::optim::{grad_map, watch, AdamConfig, AdamState, GradientMap, Params};
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::lm::{loss, LmConfig, TokenSequence, Vocabulary};
use crate::metrics::{evaluate, mean_f1, EvalQuery};
use crate::weighting::Weighter;

#[derive(Debug, Clone, Serialize)]
pub struct AdaptConfig {
    /// Test-time Adam learning rate, usually the swept value.
    pub lr: f64,
    pub steps_per_doc: usize,
    /// Checkpoint period M, in documents.
    pub checkpoint_every: usize,
    /// Keep Adam moments across documents (one long optimization) rather
    /// than resetting them per document.
    pub persist_adam: bool,
    /// Fine-tune on QA pairs after the stream (applied by the pipeline).
    pub qa_tune_after: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> AdaptConfig {
        AdaptConfig {
            lr: 2.5e-5,
            steps_per_doc: 1,
            checkpoint_every: 200,
            persist_adam: true,
            qa_tune_after: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.steps_per_doc == 0 {
            return Err(Error::invalid("steps_per_doc must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::invalid("checkpoint period must be at least 1"));
        }
        Ok(())
    }
}

/// One stream element: document tokens plus a stable id for logs and the
/// time-since-doc analysis.
#[derive(Debug, Clone)]
pub struct StreamDoc {
    pub id: String,
    pub seq: TokenSequence,
}

#[derive(Debug, Clone, Serialize)]
pub struct DocRecord {
    pub doc_id: String,
    /// Documents processed when this record was written (1-based).
    pub doc_index: usize,
    pub weighted_loss: f64,
    pub grad_norm_raw: f64,
    pub grad_norm_weighted: f64,
}

/// Resumable optimizer state: feeding the second half of a stream to a
/// state saved mid-run reproduces the unsplit run bit-exactly.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub theta: Params,
    pub adam: AdamState,
    pub docs_done: usize,
    /// Optimizer steps taken (docs_done × steps_per_doc).
    pub steps: usize,
}

impl StreamState {
    pub fn fresh(theta: Params, cfg: &AdaptConfig) -> StreamState {
        StreamState {
            theta,
            adam: AdamState::new(AdamConfig::with_lr(cfg.lr)),
            docs_done: 0,
            steps: 0,
        }
    }
}

pub struct StreamRun {
    pub theta_final: Params,
    /// (documents processed, snapshot); includes 0 (for fresh runs), every
    /// exact multiple of the checkpoint period, and the final count.
    pub checkpoints: Vec<(usize, Params)>,
    pub log: Vec<DocRecord>,
    /// Offending document id if a non-finite loss or gradient halted the
    /// run; the partial run is preserved.
    pub halted: Option<String>,
    pub state: StreamState,
}

fn grad_l2(grads: &GradientMap) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Online adaptation over `docs` in order. Deterministic per config.
pub fn adapt_stream(
    theta_base: &Params,
    cfg: &LmConfig,
    docs: &[StreamDoc],
    weighter: &Weighter,
    vocab: &Vocabulary,
    acfg: &AdaptConfig,
) -> Result<StreamRun> {
    resume_stream(StreamState::fresh(theta_base.clone(), acfg), cfg, docs, weighter, vocab, acfg)
}

/// Continue a run from saved state over the remaining documents.
pub fn resume_stream(
    mut state: StreamState,
    cfg: &LmConfig,
    docs: &[StreamDoc],
    weighter: &Weighter,
    vocab: &Vocabulary,
    acfg: &AdaptConfig,
) -> Result<StreamRun> {
    acfg.validate()?;
    let mut checkpoints = Vec::new();
    if state.docs_done == 0 {
        checkpoints.push((0, state.theta.clone()));
    }
    let mut log = Vec::with_capacity(docs.len());
    let mut halted = None;

    'stream: for doc in docs {
        if !acfg.persist_adam {
            state.adam = AdamState::new(AdamConfig::with_lr(acfg.lr));
        }
        let w = weighter.weights(&doc.seq, vocab)?;
        let mut record = DocRecord {
            doc_id: doc.id.clone(),
            doc_index: state.docs_done + 1,
            weighted_loss: 0.0,
            grad_norm_raw: 0.0,
            grad_norm_weighted: 0.0,
        };
        for _ in 0..acfg.steps_per_doc {
            // One shared forward pass feeds both the weighted update loss
            // and the raw-gradient diagnostic.
            let step = (|| -> Result<(Params, f64, f64, f64)> {
                let tape = Tape::new();
                let watched = watch(&tape, &state.theta);
                let ids = loss::doc_ids(&doc.seq);
                let t = (ids.len() - 1) as f64;
                let nll = loss::per_token_nll(&tape, &watched, cfg, &ids)?;
                let weighted =
                    tape.scale(&tape.sum_all(&tape.mul(&w.to_tensor(), &nll)?)?, 1.0 / t)?;
                let raw = tape.mean_all(&nll)?;
                let gw = grad_map(&tape, &weighted, &watched, false)?;
                let gr = grad_map(&tape, &raw, &watched, false)?;
                let next = state.adam.apply(&watched, &gw)?;
                Ok((next, weighted.item(), grad_l2(&gr), grad_l2(&gw)))
            })();
            match step {
                Ok((next, l, nr, nw)) => {
                    state.theta = next;
                    state.steps += 1;
                    record.weighted_loss = l;
                    record.grad_norm_raw = nr;
                    record.grad_norm_weighted = nw;
                }
                Err(Error::NonFinite { .. }) | Err(Error::NonFiniteGrad(_)) => {
                    halted = Some(doc.id.clone());
                    break 'stream;
                }
                Err(e) => return Err(e),
            }
        }
        state.docs_done += 1;
        log.push(record);
        if state.docs_done % acfg.checkpoint_every == 0 {
            checkpoints.push((state.docs_done, state.theta.clone()));
        }
    }

    if checkpoints.last().map(|(s, _)| *s) != Some(state.docs_done) {
        checkpoints.push((state.docs_done, state.theta.clone()));
    }
    Ok(StreamRun {
        theta_final: state.theta.clone(),
        checkpoints,
        log,
        halted,
        state,
    })
}

/// Per-position gradient norms: raw_t = ‖∇_θ NLL_t‖ and the weighted norm
/// a_t/T · raw_t (exact, since the weighted loss is linear in the per-token
/// terms).
pub fn gradient_norm_profile(
    theta: &Params,
    cfg: &LmConfig,
    x: &TokenSequence,
    w: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if w.len() != x.len() {
        return Err(Error::invalid("weights must align with the document"));
    }
    let tape = Tape::new();
    let watched = watch(&tape, theta);
    let ids = loss::doc_ids(x);
    let t = x.len();
    let nll = loss::per_token_nll(&tape, &watched, cfg, &ids)?;
    let mut out = Vec::with_capacity(t);
    for i in 0..t {
        let term = tape.sum_all(&tape.slice_rows(&nll, i, 1)?)?;
        let g = grad_map(&tape, &term, &watched, false)?;
        let raw = grad_l2(&g);
        out.push((raw, w[i] / t as f64 * raw));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub docs_seen: usize,
    pub f1_test: f64,
    pub f1_unrelated: f64,
}

/// F1 on the full test set and on unrelated queries at every checkpoint.
pub fn checkpoint_eval(
    run: &StreamRun,
    cfg: &LmConfig,
    test: &[EvalQuery],
    unrelated: &[EvalQuery],
    vocab: &Vocabulary,
    max_answer_len: usize,
) -> Result<Vec<CurvePoint>> {
    run.checkpoints
        .iter()
        .map(|(step, theta)| {
            Ok(CurvePoint {
                docs_seen: *step,
                f1_test: mean_f1(&evaluate(theta, cfg, test, vocab, max_answer_len)?),
                f1_unrelated: mean_f1(&evaluate(theta, cfg, unrelated, vocab, max_answer_len)?),
            })
        })
        .collect()
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("docs_seen,f1_test,f1_unrelated\n");
    for p in points {
        s.push_str(&format!("{},{:.6},{:.6}\n", p.docs_seen, p.f1_test, p.f1_unrelated));
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct LagBin {
    /// Half-open lag range [lo, hi) in documents between observing a query's
    /// source document and the evaluating checkpoint.
    pub lag_lo: i64,
    pub lag_hi: i64,
    pub mean_improvement: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeSinceDoc {
    /// Bins with lag ≥ 0: the document had been seen by the checkpoint.
    pub post_observation: Vec<LagBin>,
    /// Bins with lag < 0: checkpoint taken before the document arrived.
    pub pre_observation: Vec<LagBin>,
    /// Queries skipped for lack of a source-document link.
    pub excluded: usize,
}

/// Per-query F1 improvement over the unadapted model, binned by
/// (checkpoint − source document position); bin width is the checkpoint
/// period.
pub fn time_since_doc_analysis(
    run: &StreamRun,
    cfg: &LmConfig,
    queries: &[EvalQuery],
    vocab: &Vocabulary,
    bin_width: usize,
    max_answer_len: usize,
) -> Result<TimeSinceDoc> {
    if run.checkpoints.is_empty() {
        return Err(Error::invalid("run has no checkpoints"));
    }
    if bin_width == 0 {
        return Err(Error::invalid("bin width must be at least 1"));
    }
    let position: std::collections::BTreeMap<&str, usize> = run
        .log
        .iter()
        .map(|r| (r.doc_id.as_str(), r.doc_index))
        .collect();
    let linked: Vec<(usize, usize)> = queries
        .iter()
        .enumerate()
        .filter_map(|(qi, q)| {
            q.source_doc
                .as_deref()
                .and_then(|d| position.get(d))
                .map(|p| (qi, *p))
        })
        .collect();
    let excluded = queries.len() - linked.len();

    let base = evaluate(&run.checkpoints[0].1, cfg, queries, vocab, max_answer_len)?;
    let mut samples: Vec<(i64, f64)> = Vec::new();
    for (step, theta) in &run.checkpoints {
        let scores = evaluate(theta, cfg, queries, vocab, max_answer_len)?;
        for (qi, pos) in &linked {
            let lag = *step as i64 - *pos as i64;
            samples.push((lag, scores[*qi].f1 - base[*qi].f1));
        }
    }
    let wb = bin_width as i64;
    let mut bins: std::collections::BTreeMap<i64, (f64, usize)> = Default::default();
    for (lag, imp) in samples {
        let b = lag.div_euclid(wb);
        let e = bins.entry(b).or_insert((0.0, 0));
        e.0 += imp;
        e.1 += 1;
    }
    let mut post = Vec::new();
    let mut pre = Vec::new();
    for (b, (sum, n)) in bins {
        let bin = LagBin {
            lag_lo: b * wb,
            lag_hi: (b + 1) * wb,
            mean_improvement: sum / n as f64,
            count: n,
        };
        if b >= 0 {
            post.push(bin);
        } else {
            pre.push(bin);
        }
    }
    Ok(TimeSinceDoc { post_observation: post, pre_observation: pre, excluded })
}

pub fn time_since_doc_csv(t: &TimeSinceDoc) -> String {
    let mut s = String::from("phase,lag_lo,lag_hi,mean_improvement,count\n");
    for (phase, bins) in [("pre", &t.pre_observation), ("post", &t.post_observation)] {
        for b in bins {
            s.push_str(&format!(
                "{phase},{},{},{:.6},{}\n",
                b.lag_lo, b.lag_hi, b.mean_improvement, b.count
            ));
        }
    }
    s
}

pub fn write_doc_log(log: &[DocRecord], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in log {
        let line = serde_json::to_string(r).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}
