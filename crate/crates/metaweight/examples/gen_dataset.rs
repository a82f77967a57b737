//! Generate a planted-importance fact world, render document/question/answer
//! triples in each style, and print one sample per style.

use metaweight::data::{generate_world, render_triples, split_dataset, Style, WorldSpec};
use metaweight::Result;

fn main() -> Result<()> {
    let spec = WorldSpec { n_entities: 8, n_value_words: 16, ..WorldSpec::desk_default(7) };
    let world = generate_world(&spec)?;
    println!(
        "world: {} entities, {} relations, {} queried facts",
        world.entities.len(),
        world.relations.len(),
        world.queried.len()
    );

    for style in Style::all() {
        let triples = render_triples(&world, style, 40, 7)?;
        let t = &triples[0];
        println!("\n── style {style} ({} docs, first shown) ──", triples.len());
        println!("doc [{}] t={}: {}", t.id, t.time, t.text);
        println!("q: {}", t.question);
        println!("a: {} (span: {:?})", t.answer, t.answer_span);

        let splits = split_dataset(triples, true)?;
        let max_train = splits.train.iter().map(|d| d.time).max().unwrap();
        let min_test = splits.test.iter().map(|d| d.time).min().unwrap();
        println!(
            "splits: {}/{}/{}/{}/{} — max train time {} < min test time {}",
            splits.train.len(),
            splits.valid.len(),
            splits.test.len(),
            splits.qa_train.len(),
            splits.qa_valid.len(),
            max_train,
            min_test
        );
    }
    Ok(())
}
