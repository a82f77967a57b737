use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;
use metaweight::config::RunConfig;
use metaweight::data::doc_sequence;
use metaweight::metrics::lr_sweep;
use metaweight::pipeline::*;
use metaweight::weighting::Weighter;
use metaweight::Result;

fn main() -> Result<()> {
    let mut cfg = RunConfig::default();
    cfg.seed = 17;
    cfg.data_docs = 2800;
    cfg.data_entities = 90;
    cfg.data_value_words = 80;
    cfg.data_fillers = 80;
    cfg.data_numerals = 60;
    cfg.lm_layers = 1;
    cfg.lm_heads = 4;
    cfg.lm_width = 64;
    cfg.lm_ff_width = 128;
    cfg.lm_context = 192;
    cfg.wm_head_hidden = 32;
    cfg.sweep_grid = vec![1e-2, 3e-3, 1e-3, 3e-4];

    let dir = Path::new("/tmp/cal2800b");
    let m = build_materials(&cfg)?;
    let base = base_or_prepare(&cfg, &m, dir)?;
    let phi = load_phi(dir)?;

    // criterion 3 readout
    let w = Weighter::Learned { phi: phi.clone(), cfg: m.wm_cfg.clone() };
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for t in &m.splits.valid {
        let seq = doc_sequence(t, &m.vocab)?;
        let tw = w.weights(&seq, &m.vocab)?;
        for (c, v) in seq.categories.as_ref().unwrap().iter().zip(tw.values()) {
            let e = sums.entry(c.as_str()).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    for (c, (s, n)) in &sums {
        println!("mean weight [{c}] = {:.4}", s / *n as f64);
    }

    let (vdocs, vqueries) = make_stream(&m.splits.valid, &m.vocab, cfg.seed)?;
    for name in ["uniform", "tfidf", "salient", "learned", "bimodal", "pos_mean", "pos_resample"] {
        let weighter = make_weighter(name, &m, Some((&phi, &m.wm_cfg)), cfg.seed)?;
        let t0 = Instant::now();
        let sw = lr_sweep(&base, &m.lm_cfg, &weighter, &vdocs, &vqueries, &m.vocab,
            &cfg.sweep_grid, &cfg.adapt_config(), 8)?;
        println!("{name:>12}: selected {:e} valid f1s {:.4?} ({:.0?})", sw.selected, sw.f1, t0.elapsed());
    }
    Ok(())
}
