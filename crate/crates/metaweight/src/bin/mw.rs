//! `mw`: one subcommand per pipeline stage. Configuration resolves as
//! defaults < `--config` file < `MW_*` environment variables < flags; the
//! resolved config is written into the run directory. Exit codes: 0 success,
//! 1 validation error, 2 numerical failure (with a diagnostics file).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use metaweight::autograd::checkpoint::{load_params, save_params};
use metaweight::autograd::optim::Params;
use metaweight::config::RunConfig;
use metaweight::data::Style;
use metaweight::lm::Category;
use metaweight::meta::{qa_loss, write_episode_log};
use metaweight::metrics::{
    evaluate, lr_sweep, mean_f1, score_report, transfer_matrix, transfer_matrix_csv, SeedEval,
    StreamArm,
};
use metaweight::pipeline::{
    base_ckpt, base_or_prepare, build_materials, build_transfer_materials, eval_queries,
    init_run_dir, load_phi, make_stream, make_weighter, meta_train_phi, phi_ckpt,
    prepare_base_transfer, qa_pairs, stream_seeds, write_dataset, Materials,
};
use metaweight::stream::{
    adapt_stream, checkpoint_eval, curve_csv, time_since_doc_analysis, time_since_doc_csv,
    write_doc_log,
};
use metaweight::weighting::{dump_weights_csv, weight_stats, Weighter};
use metaweight::{Error, Result};

#[derive(Parser)]
#[command(name = "mw", version, about = "Meta-learned token weighting for online LM adaptation")]
struct Cli {
    /// Flat key=value config file (see `RunConfig::keys`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for sweep/transfer fan-out (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Clone, Copy, Debug)]
enum Cmd {
    /// Generate the synthetic world, splits, locality corpus, and vocabulary.
    GenData,
    /// Pretrain the base model and fine-tune it on QA pairs.
    QaTune,
    /// Meta-train the weighting model on the train split.
    MetaTrain,
    /// Adapt over the seeded test stream with the configured weighter.
    Adapt,
    /// Learning-rate sweep on the validation stream.
    Sweep,
    /// Score a model (adapted if present, else base) on the test queries.
    Eval,
    /// Cross-style transfer matrix over styles A, B, C.
    Transfer,
    /// Weight dumps, histograms, forgetting curves, time-since-doc CSVs.
    Analyze,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::invalid(format!("config file not found: {}", path.display())));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if cfg.jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.cmd, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::NonFinite { .. } | Error::NonFiniteGrad(_)) {
                let path = cfg.out.join("diagnostics.txt");
                let body = format!("subcommand: {:?}\nerror: {e}\n\nconfig:\n{}", cli.cmd, cfg.to_kv_string());
                if std::fs::create_dir_all(&cfg.out).and_then(|_| std::fs::write(&path, body)).is_ok() {
                    eprintln!("diagnostics written to {}", path.display());
                }
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn dispatch(cmd: Cmd, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Cmd::GenData => gen_data(cfg),
        Cmd::QaTune => qa_tune_cmd(cfg),
        Cmd::MetaTrain => meta_train(cfg),
        Cmd::Adapt => adapt(cfg),
        Cmd::Sweep => sweep(cfg),
        Cmd::Eval => eval_cmd(cfg),
        Cmd::Transfer => transfer(cfg),
        Cmd::Analyze => analyze(cfg),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    write_dataset(&m, &dir)?;
    let s = &m.splits;
    println!(
        "gen-data: {} train / {} valid / {} test / {} qa_train / {} qa_valid documents, {} locality, vocab {} -> {}",
        s.train.len(),
        s.valid.len(),
        s.test.len(),
        s.qa_train.len(),
        s.qa_valid.len(),
        m.locality.len(),
        m.vocab.len(),
        dir.display()
    );
    Ok(())
}

fn qa_tune_cmd(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let path = base_ckpt(&dir);
    if path.exists() {
        // rebuild deliberately: this stage owns the checkpoint
        std::fs::remove_file(&path)?;
    }
    let theta = base_or_prepare(cfg, &m, &dir)?;
    let loss = qa_loss(&theta, &m.lm_cfg, &qa_pairs(&m.splits.qa_valid, &m.vocab))?;
    println!("qa-tune: qa_valid NLL {loss:.4}, wrote {}", path.display());
    Ok(())
}

fn meta_train(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let base = base_or_prepare(cfg, &m, &dir)?;
    let state = meta_train_phi(cfg, &m, &base)?;
    save_params(&phi_ckpt(&dir), &state.phi)?;
    write_episode_log(&state.log, &dir.join("episodes.jsonl"))?;
    let last = state.log.last().map_or(f64::NAN, |r| r.outer_loss);
    println!(
        "meta-train: {} episodes, final outer loss {last:.4}, wrote {}",
        state.log.len(),
        phi_ckpt(&dir).display()
    );
    Ok(())
}

/// The configured weighter, loading φ from the run directory when needed.
fn configured_weighter(cfg: &RunConfig, m: &Materials, dir: &std::path::Path) -> Result<Weighter> {
    let phi = match cfg.adapt_weighter.as_str() {
        "uniform" | "tfidf" | "salient" => None,
        _ => Some(load_phi(dir)?),
    };
    make_weighter(&cfg.adapt_weighter, m, phi.as_ref().map(|p| (p, &m.wm_cfg)), cfg.seed)
}

fn adapt(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let base = base_or_prepare(cfg, &m, &dir)?;
    let weighter = configured_weighter(cfg, &m, &dir)?;
    let (docs, queries) = make_stream(&m.splits.test, &m.vocab, cfg.seed)?;
    let run = adapt_stream(&base, &m.lm_cfg, &docs, &weighter, &m.vocab, &cfg.adapt_config())?;
    write_doc_log(&run.log, &dir.join("doc_log.jsonl"))?;
    if let Some(id) = &run.halted {
        return Err(Error::NonFiniteGrad(format!("adaptation halted at document {id}")));
    }
    let mut theta = run.theta_final;
    if cfg.adapt_qa_tune_after {
        theta = metaweight::meta::qa_tune(
            &theta,
            &m.lm_cfg,
            &qa_pairs(&m.splits.qa_train, &m.vocab),
            cfg.qa_epochs,
            cfg.qa_lr,
            cfg.seed ^ 0x4a2,
        )?;
    }
    save_params(&dir.join("adapted.ckpt"), &theta)?;
    let before = evaluate(&base, &m.lm_cfg, &queries, &m.vocab, cfg.eval_max_answer_len)?;
    let after = evaluate(&theta, &m.lm_cfg, &queries, &m.vocab, cfg.eval_max_answer_len)?;
    let report = score_report(&[SeedEval { seed: cfg.seed, before, after }])?;
    std::fs::write(
        dir.join("score.json"),
        serde_json::to_string_pretty(&report).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    println!(
        "adapt [{}]: {} documents, F1 {:.4} -> {:.4}",
        weighter.name(),
        docs.len(),
        report.mean_f1_before,
        report.mean_f1_after
    );
    Ok(())
}

fn sweep(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let base = base_or_prepare(cfg, &m, &dir)?;
    let weighter = configured_weighter(cfg, &m, &dir)?;
    let (docs, queries) = make_stream(&m.splits.valid, &m.vocab, cfg.seed)?;
    let result = lr_sweep(
        &base,
        &m.lm_cfg,
        &weighter,
        &docs,
        &queries,
        &m.vocab,
        &cfg.sweep_grid,
        &cfg.adapt_config(),
        cfg.eval_max_answer_len,
    )?;
    std::fs::write(
        dir.join("sweep.json"),
        serde_json::to_string_pretty(&result).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    println!("sweep [{}]: selected lr {:e}", weighter.name(), result.selected);
    for ((lr, f1), div) in result.grid.iter().zip(&result.f1).zip(&result.diverged) {
        println!("  lr {lr:e}: F1 {f1:.4}{}", if *div { " (diverged)" } else { "" });
    }
    Ok(())
}

fn eval_cmd(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let adapted = dir.join("adapted.ckpt");
    let (theta, which) = if adapted.exists() {
        (load_params(&adapted)?, "adapted")
    } else {
        (base_or_prepare(cfg, &m, &dir)?, "base")
    };
    let queries = eval_queries(&m.splits.test, &m.vocab);
    let scores = evaluate(&theta, &m.lm_cfg, &queries, &m.vocab, cfg.eval_max_answer_len)?;
    let f1 = mean_f1(&scores);
    let em = scores.iter().map(|s| s.em).sum::<f64>() / scores.len().max(1) as f64;
    std::fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "model": which,
            "queries": scores.len(),
            "mean_f1": f1,
            "mean_em": em,
        }))
        .map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    println!("eval [{which}]: {} queries, F1 {f1:.4}, EM {em:.4}", scores.len());
    Ok(())
}

fn transfer(cfg: &RunConfig) -> Result<()> {
    let tm = build_transfer_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let base_path = base_ckpt(&dir);
    let base: Params = if base_path.exists() {
        load_params(&base_path)?
    } else {
        let theta = prepare_base_transfer(cfg, &tm)?;
        save_params(&base_path, &theta)?;
        theta
    };
    let mut phis = BTreeMap::new();
    let mut streams = BTreeMap::new();
    for style in Style::all() {
        let path = dir.join(format!("phi_{style}.ckpt"));
        let phi = if path.exists() {
            load_params(&path)?
        } else {
            let m = tm.style_view(style);
            let state = meta_train_phi(cfg, &m, &base)?;
            save_params(&path, &state.phi)?;
            state.phi
        };
        phis.insert(style, (phi, tm.wm_cfg.clone()));
        let arms = stream_seeds(cfg)
            .into_iter()
            .map(|seed| {
                let (docs, queries) = make_stream(&tm.splits[&style].test, &tm.vocab, seed)?;
                Ok(StreamArm { seed, docs, queries })
            })
            .collect::<Result<Vec<_>>>()?;
        streams.insert(style, arms);
    }
    let matrix = transfer_matrix(
        &base,
        &tm.lm_cfg,
        &phis,
        &streams,
        &tm.vocab,
        &cfg.adapt_config(),
        &Style::all(),
        cfg.eval_max_answer_len,
    )?;
    std::fs::write(dir.join("transfer.csv"), transfer_matrix_csv(&matrix))?;
    std::fs::write(
        dir.join("transfer.json"),
        serde_json::to_string_pretty(&matrix).map_err(|e| Error::invalid(e.to_string()))?,
    )?;
    println!("transfer: wrote {} and transfer.json", dir.join("transfer.csv").display());
    Ok(())
}

fn analyze(cfg: &RunConfig) -> Result<()> {
    let m = build_materials(cfg)?;
    let dir = init_run_dir(cfg)?;
    let base = base_or_prepare(cfg, &m, &dir)?;
    let weighter = configured_weighter(cfg, &m, &dir)?;

    // per-token weights and their distribution on held-out validation docs
    let mut rows: Vec<(String, usize, String, Option<Category>, f64)> = Vec::new();
    let mut samples: Vec<(f64, Option<Category>)> = Vec::new();
    for t in &m.splits.valid {
        let seq = metaweight::data::doc_sequence(t, &m.vocab)?;
        let w = weighter.weights(&seq, &m.vocab)?;
        for (i, (&id, &wi)) in seq.ids.iter().zip(w.values()).enumerate() {
            let cat = seq.categories.as_ref().map(|c| c[i]);
            rows.push((t.id.clone(), i, m.vocab.token(id).to_string(), cat, wi));
            samples.push((wi, cat));
        }
    }
    dump_weights_csv(&dir.join("weights.csv"), rows)?;
    let stats = weight_stats(&samples, 20)?;
    std::fs::write(
        dir.join("weight_stats.json"),
        serde_json::to_string_pretty(&stats).map_err(|e| Error::invalid(e.to_string()))?,
    )?;

    // forgetting/plasticity: adapt the test stream, score every checkpoint
    let (docs, queries) = make_stream(&m.splits.test, &m.vocab, cfg.seed)?;
    let run = adapt_stream(&base, &m.lm_cfg, &docs, &weighter, &m.vocab, &cfg.adapt_config())?;
    if let Some(id) = &run.halted {
        return Err(Error::NonFiniteGrad(format!("adaptation halted at document {id}")));
    }
    let unrelated = eval_queries(&m.splits.qa_valid, &m.vocab);
    let curve =
        checkpoint_eval(&run, &m.lm_cfg, &queries, &unrelated, &m.vocab, cfg.eval_max_answer_len)?;
    std::fs::write(dir.join("curve.csv"), curve_csv(&curve))?;

    let tsd = time_since_doc_analysis(
        &run,
        &m.lm_cfg,
        &queries,
        &m.vocab,
        cfg.adapt_checkpoint_every,
        cfg.eval_max_answer_len,
    )?;
    std::fs::write(dir.join("time_since_doc.csv"), time_since_doc_csv(&tsd))?;
    println!(
        "analyze [{}]: wrote weights.csv, weight_stats.json, curve.csv, time_since_doc.csv in {}",
        weighter.name(),
        dir.display()
    );
    Ok(())
}
