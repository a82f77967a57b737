//! Pretrain a tiny transformer on a handful of sentences, QA-tune it, and
//! decode answers greedily (the `BOS question SEP answer EOS` format).

use metaweight::lm::{greedy_decode, init_params, tokenize, LmConfig, Vocabulary};
use metaweight::meta::{pretrain_lm, qa_tune};
use metaweight::Result;

fn main() -> Result<()> {
    let corpus = [
        "the color of the sky is blue .",
        "the color of the grass is green .",
        "the color of the sun is yellow .",
        "the color of the snow is white .",
    ];
    let questions = [
        ("what is the color of the sky ?", "blue"),
        ("what is the color of the grass ?", "green"),
        ("what is the color of the sun ?", "yellow"),
        ("what is the color of the snow ?", "white"),
    ];
    let all: Vec<String> = corpus
        .iter()
        .map(|s| s.to_string())
        .chain(questions.iter().map(|(q, a)| format!("{q} {a}")))
        .collect();
    let vocab = Vocabulary::from_corpus(all.iter().map(|s| s.as_str()));
    let cfg = LmConfig {
        layers: 1,
        heads: 2,
        width: 24,
        ff_width: 48,
        context: 32,
        vocab_size: vocab.len(),
        dropout: 0.0,
        init_seed: 3,
    };

    let docs: Vec<_> = corpus.iter().map(|s| tokenize(s, &vocab)).collect();
    let theta = init_params(&cfg)?;
    let theta = pretrain_lm(&theta, &cfg, &docs, 40, 3e-3, 11)?;

    let pairs: Vec<(Vec<u32>, Vec<u32>)> = questions
        .iter()
        .map(|(q, a)| (tokenize(q, &vocab).ids, tokenize(a, &vocab).ids))
        .collect();
    let theta = qa_tune(&theta, &cfg, &pairs, 40, 1e-3, 13)?;

    for (q, gold) in questions {
        let out = greedy_decode(&theta, &cfg, &tokenize(q, &vocab).ids, 3)?;
        let text: Vec<&str> = out.iter().map(|&i| vocab.token(i)).collect();
        println!("{q} -> {} (gold: {gold})", text.join(" "));
    }
    Ok(())
}
