//! Answer scoring: normalization, token-overlap F1, and exact match.

use metaweight::metrics::{exact_match, f1_token_overlap, normalize_answer};

fn main() {
    let cases = [
        ("a dangerous journey", "a dangerous journey into the unknown"),
        ("The Eiffel Tower", "eiffel tower"),
        ("1889", "1889"),
        ("paris france", "London"),
        ("", ""),
    ];
    println!("{:>40} {:>40} {:>8} {:>4}", "prediction", "gold", "F1", "EM");
    for (pred, gold) in cases {
        println!(
            "{:>40} {:>40} {:>8.4} {:>4}",
            format!("{pred:?}"),
            format!("{gold:?}"),
            f1_token_overlap(pred, gold),
            exact_match(pred, gold)
        );
    }
    println!(
        "\nnormalize_answer(\"The Eiffel Tower!\") = {:?}",
        normalize_answer("The Eiffel Tower!")
    );
}
