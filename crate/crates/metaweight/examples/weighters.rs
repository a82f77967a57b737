//! Every weighting scheme side by side on one synthetic document.

use metaweight::data::{build_vocab, generate_world, render_triples, doc_sequence, Style, WorldSpec};
use metaweight::weighting::{init_weight_model, TfIdf, Weighter, WeightModelConfig};
use metaweight::Result;

fn main() -> Result<()> {
    let spec = WorldSpec { n_entities: 8, n_value_words: 16, ..WorldSpec::desk_default(5) };
    let world = generate_world(&spec)?;
    let triples = render_triples(&world, Style::B, 30, 5)?;
    let vocab = build_vocab(&triples, &[]);

    let wm_cfg = WeightModelConfig {
        head_hidden: 16,
        ..WeightModelConfig::desk_default(vocab.len())
    };
    let phi = init_weight_model(&wm_cfg)?;
    let corpus: Vec<String> = triples.iter().map(|t| t.text.clone()).collect();

    let weighters = [
        Weighter::Uniform,
        Weighter::TfIdf(TfIdf::fit(&corpus, 0.05)?),
        Weighter::SalientSpan,
        Weighter::Learned { phi, cfg: wm_cfg },
    ];

    let doc = &triples[0];
    println!("doc [{}]: {}\n", doc.id, doc.text);
    let seq = doc_sequence(doc, &vocab)?;
    let cats = seq.categories.as_ref().unwrap();

    print!("{:>12} {:>8}", "token", "cat");
    for w in &weighters {
        print!(" {:>9}", w.name());
    }
    println!();
    let all: Vec<_> = weighters
        .iter()
        .map(|w| w.weights(&seq, &vocab))
        .collect::<Result<_>>()?;
    for (i, &id) in seq.ids.iter().enumerate() {
        print!("{:>12} {:>8}", vocab.token(id), cats[i].as_str());
        for w in &all {
            print!(" {:>9.4}", w.values()[i]);
        }
        println!();
    }
    Ok(())
}
