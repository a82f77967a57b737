//! Synthetic fact-stream generation with ground-truth token categories,
//! five-way fact-disjoint splits, a filler-only locality corpus, and JSONL
//! ingestion for external corpora.
//!
//! The generator plants importance: each document's answer is a value token
//! at a known position, so "which tokens matter" has ground truth. Queried
//! relations carry lowercase word values (invisible to surface heuristics);
//! distractor relations carry numerals; filler text is noisy with numbers.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::vocab::{tokenize, tokenize_with_categories};
use crate::lm::{Category, TokenSequence, Vocabulary};

/// Sizes and seed for a synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_entities: usize,
    /// Relations whose facts get queried; their values are lowercase words.
    pub n_word_relations: usize,
    /// Distractor relations; their values are numerals.
    pub n_num_relations: usize,
    pub n_value_words: usize,
    pub n_fillers: usize,
    pub n_numerals: usize,
    /// Fraction of queried facts whose value is reassigned mid-window.
    pub drift_frac: f64,
    /// Stream time horizon; each queried fact owns a disjoint time window.
    pub n_times: usize,
    pub seed: u64,
}

impl WorldSpec {
    pub fn desk_default(seed: u64) -> WorldSpec {
        WorldSpec {
            n_entities: 30,
            n_word_relations: 3,
            n_num_relations: 3,
            n_value_words: 40,
            n_fillers: 60,
            n_numerals: 40,
            drift_frac: 0.25,
            n_times: 1000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0
            || self.n_word_relations == 0
            || self.n_value_words == 0
            || self.n_fillers == 0
            || self.n_numerals == 0
        {
            return Err(Error::invalid("world sizes must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.drift_frac) {
            return Err(Error::invalid("drift_frac must lie in [0, 1]"));
        }
        if self.n_times < 2 {
            return Err(Error::invalid("n_times must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueKind {
    Word,
    Number,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Relation {
    pub phrase: String,
    pub kind: ValueKind,
}

/// One (entity, relation) fact; `values` is a time-indexed reassignment
/// schedule sorted by activation time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fact {
    pub entity: usize,
    pub relation: usize,
    pub values: Vec<(usize, String)>,
}

impl Fact {
    pub fn value_at(&self, time: usize) -> &str {
        let mut cur = &self.values[0].1;
        for (from, v) in &self.values {
            if *from <= time {
                cur = v;
            }
        }
        cur
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub spec: WorldSpec,
    /// Two capitalized tokens per entity, e.g. "Balor Vintra".
    pub entities: Vec<(String, String)>,
    pub relations: Vec<Relation>,
    pub facts: Vec<Fact>,
    pub fillers: Vec<String>,
    pub value_words: Vec<String>,
    pub numerals: Vec<String>,
    /// Indices into `facts` for queried (word-valued) facts, each of which
    /// owns a disjoint slice of the time horizon.
    pub queried: Vec<usize>,
}

const SYLLABLES: [&str; 16] = [
    "ba", "do", "ri", "ta", "lu", "men", "sol", "ke", "vi", "na", "po", "zu", "mar", "ten", "gal",
    "fo",
];

fn fresh_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let w: String = (0..n).map(|_| SYLLABLES[rng.gen_range(0..SYLLABLES.len())]).collect();
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

impl SyntheticWorld {
    pub fn time_window(&self, queried_pos: usize) -> (usize, usize) {
        let q = self.queried.len();
        let w = (self.spec.n_times / q).max(1);
        let start = (queried_pos * w).min(self.spec.n_times - 1);
        (start, (start + w).min(self.spec.n_times))
    }
}

pub fn generate_world(spec: &WorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut used = BTreeSet::new();

    let fillers: Vec<String> = (0..spec.n_fillers).map(|_| fresh_word(&mut rng, &mut used)).collect();
    let value_words: Vec<String> =
        (0..spec.n_value_words).map(|_| fresh_word(&mut rng, &mut used)).collect();
    let entities: Vec<(String, String)> = (0..spec.n_entities)
        .map(|_| {
            (
                capitalize(&fresh_word(&mut rng, &mut used)),
                capitalize(&fresh_word(&mut rng, &mut used)),
            )
        })
        .collect();
    let mut relations: Vec<Relation> = (0..spec.n_word_relations)
        .map(|_| Relation { phrase: fresh_word(&mut rng, &mut used), kind: ValueKind::Word })
        .collect();
    relations.extend((0..spec.n_num_relations).map(|_| Relation {
        phrase: fresh_word(&mut rng, &mut used),
        kind: ValueKind::Number,
    }));
    let mut numerals: BTreeSet<String> = BTreeSet::new();
    while numerals.len() < spec.n_numerals {
        numerals.insert(rng.gen_range(100u32..10_000).to_string());
    }
    let numerals: Vec<String> = numerals.into_iter().collect();

    let mut facts = Vec::new();
    let mut queried = Vec::new();
    for e in 0..spec.n_entities {
        for (r, rel) in relations.iter().enumerate() {
            let value = match rel.kind {
                ValueKind::Word => value_words[rng.gen_range(0..value_words.len())].clone(),
                ValueKind::Number => numerals[rng.gen_range(0..numerals.len())].clone(),
            };
            if rel.kind == ValueKind::Word {
                queried.push(facts.len());
            }
            facts.push(Fact { entity: e, relation: r, values: vec![(0, value)] });
        }
    }

    let world = SyntheticWorld {
        spec: spec.clone(),
        entities,
        relations,
        facts,
        fillers,
        value_words,
        numerals,
        queried,
    };
    let mut world = world;
    // Reassign values mid-window for exactly round(drift_frac · Q) queried facts.
    let n_drift = (spec.drift_frac * world.queried.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..world.queried.len()).collect();
    order.shuffle(&mut rng);
    for &qpos in order.iter().take(n_drift) {
        let (start, end) = world.time_window(qpos);
        let mid = start + (end - start) / 2;
        let fi = world.queried[qpos];
        let new_value = loop {
            let v = world.value_words[rng.gen_range(0..world.value_words.len())].clone();
            if v != world.facts[fi].values[0].1 {
                break v;
            }
        };
        world.facts[fi].values.push((mid.max(1), new_value));
    }
    Ok(world)
}

/// The three document distributions: A = long multi-fact articles with span
/// answers and a temporal split; B = short paragraphs with span answers;
/// C = very short paragraphs whose answer is not a span of the document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Style {
    A,
    B,
    C,
}

impl Style {
    pub fn all() -> [Style; 3] {
        [Style::A, Style::B, Style::C]
    }

    pub fn prefix(&self) -> char {
        match self {
            Style::A => 'a',
            Style::B => 'b',
            Style::C => 'c',
        }
    }

    pub fn target_len(&self) -> usize {
        match self {
            Style::A => 120,
            Style::B => 60,
            Style::C => 40,
        }
    }

    pub fn parse(s: &str) -> Result<Style> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Style::A),
            "b" => Ok(Style::B),
            "c" => Ok(Style::C),
            other => Err(Error::invalid(format!("unknown style `{other}` (expected a|b|c)"))),
        }
    }
}

impl std::fmt::Display for Style {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.prefix())
    }
}

/// One document/question/answer triple with word-aligned category labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentTriple {
    pub id: String,
    pub time: usize,
    pub text: String,
    pub question: String,
    pub answer: String,
    /// One category per whitespace token of `text`.
    pub categories: Vec<Category>,
    /// Answer location as a half-open whitespace-token range, when the
    /// answer is a span of the document.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<(usize, usize)>,
    /// Queried fact index, parsed back from `id` on load.
    #[serde(skip)]
    pub fact: Option<usize>,
}

fn parse_fact_from_id(id: &str) -> Option<usize> {
    id.rsplit_once("-f").and_then(|(_, tail)| tail.parse().ok())
}

struct DocBuilder {
    words: Vec<String>,
    categories: Vec<Category>,
}

impl DocBuilder {
    fn new() -> DocBuilder {
        DocBuilder { words: Vec::new(), categories: Vec::new() }
    }

    fn push(&mut self, word: &str, cat: Category) {
        self.words.push(word.to_string());
        self.categories.push(cat);
    }

    fn len(&self) -> usize {
        self.words.len()
    }
}

fn fact_sentence(
    b: &mut DocBuilder,
    world: &SyntheticWorld,
    fact: &Fact,
    time: usize,
    obscure_value: bool,
) -> usize {
    use Category::*;
    let (e1, e2) = &world.entities[fact.entity];
    let rel = &world.relations[fact.relation];
    b.push("the", Filler);
    b.push(&rel.phrase, Relation);
    b.push("of", Filler);
    b.push(e1, Entity);
    b.push(e2, Entity);
    b.push("is", Filler);
    let pos = b.len();
    let v = fact.value_at(time);
    if obscure_value {
        b.push(&format!("{v}ish"), Value);
    } else {
        b.push(v, Value);
    }
    b.push(".", Filler);
    pos
}

fn filler_sentence(b: &mut DocBuilder, world: &SyntheticWorld, rng: &mut ChaCha8Rng) {
    use Category::*;
    let n = rng.gen_range(5..=9);
    for _ in 0..n {
        b.push(&world.fillers[rng.gen_range(0..world.fillers.len())], Filler);
    }
    if rng.gen_bool(0.3) {
        b.push(&world.numerals[rng.gen_range(0..world.numerals.len())], Num);
    }
    b.push(".", Filler);
}

pub fn render_triples(world: &SyntheticWorld, style: Style, n: usize, seed: u64) -> Result<Vec<DocumentTriple>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ world.spec.seed.rotate_left(17));
    let mut order: Vec<usize> = (0..world.queried.len()).collect();
    order.shuffle(&mut rng);

    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let qpos = order[j % order.len()];
        let fi = world.queried[qpos];
        let fact = &world.facts[fi];
        let (start, end) = world.time_window(qpos);
        let time = rng.gen_range(start..end);

        let mut b = DocBuilder::new();
        let (e1, e2) = &world.entities[fact.entity];
        if style == Style::A {
            b.push("about", Category::Filler);
            b.push(e1, Category::Entity);
            b.push(e2, Category::Entity);
            b.push(".", Category::Filler);
        }
        let n_distractors = match style {
            Style::A => 2,
            Style::B => 1,
            Style::C => 0,
        };
        // Lead filler so the fact's position varies.
        for _ in 0..rng.gen_range(0..=1) {
            filler_sentence(&mut b, world, &mut rng);
        }
        let value_pos = fact_sentence(&mut b, world, fact, time, style == Style::C);
        let num_rels: Vec<usize> = world
            .relations
            .iter()
            .enumerate()
            .filter(|(_, r)| r.kind == ValueKind::Number)
            .map(|(i, _)| i)
            .collect();
        for d in 0..n_distractors {
            filler_sentence(&mut b, world, &mut rng);
            if !num_rels.is_empty() {
                let r = num_rels[d % num_rels.len()];
                let df = world
                    .facts
                    .iter()
                    .find(|f| f.entity == fact.entity && f.relation == r)
                    .expect("complete entity-relation grid");
                fact_sentence(&mut b, world, df, time, false);
            }
        }
        while b.len() + 6 < style.target_len() {
            filler_sentence(&mut b, world, &mut rng);
        }

        let rel = &world.relations[fact.relation];
        let question = format!("what is the {} of {} {} ?", rel.phrase, e1, e2);
        let answer = fact.value_at(time).to_string();
        let answer_span = if style == Style::C { None } else { Some((value_pos, value_pos + 1)) };
        out.push(DocumentTriple {
            id: format!("{}{:05}-f{}", style.prefix(), j, fi),
            time,
            text: b.words.join(" "),
            question,
            answer,
            categories: b.categories,
            answer_span,
            fact: Some(fi),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub train: Vec<DocumentTriple>,
    pub valid: Vec<DocumentTriple>,
    pub test: Vec<DocumentTriple>,
    pub qa_train: Vec<DocumentTriple>,
    pub qa_valid: Vec<DocumentTriple>,
}

impl DatasetSplits {
    pub fn all(&self) -> impl Iterator<Item = &DocumentTriple> {
        self.train
            .iter()
            .chain(&self.valid)
            .chain(&self.test)
            .chain(&self.qa_train)
            .chain(&self.qa_valid)
    }
}

/// Ratios for train/valid/test/qa_train/qa_valid.
pub const SPLIT_RATIOS: [f64; 5] = [0.5, 0.15, 0.15, 0.15, 0.05];

/// Five-way partition, disjoint by fact. With `temporal`, facts are ordered
/// by their earliest document time so split boundaries are time boundaries;
/// otherwise facts are split in id order.
pub fn split_dataset(triples: Vec<DocumentTriple>, temporal: bool) -> Result<DatasetSplits> {
    let mut by_fact: BTreeMap<usize, Vec<DocumentTriple>> = BTreeMap::new();
    for t in triples {
        let f = t
            .fact
            .or_else(|| parse_fact_from_id(&t.id))
            .ok_or_else(|| Error::invalid(format!("triple `{}` carries no fact id", t.id)))?;
        by_fact.entry(f).or_default().push(t);
    }
    if by_fact.len() < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 distinct facts to split, got {}",
            by_fact.len()
        )));
    }
    let mut fact_ids: Vec<usize> = by_fact.keys().copied().collect();
    if temporal {
        fact_ids.sort_by_key(|f| {
            (
                by_fact[f].iter().map(|t| t.time).min().unwrap_or(0),
                *f,
            )
        });
    }
    let n = fact_ids.len();
    let mut cuts = [0usize; 6];
    let mut acc = 0.0;
    for (i, r) in SPLIT_RATIOS.iter().enumerate() {
        acc += r;
        cuts[i + 1] = ((acc * n as f64).round() as usize).min(n);
    }
    cuts[5] = n;
    // Every split gets at least one fact: rounding can collapse a cut onto
    // its neighbor (or, after pushing forward, past n), so separate the cuts
    // forward and then clamp them back under n.
    for i in 1..6 {
        if cuts[i] <= cuts[i - 1] {
            cuts[i] = cuts[i - 1] + 1;
        }
    }
    cuts[5] = n;
    for i in (1..5).rev() {
        cuts[i] = cuts[i].min(cuts[i + 1] - 1);
    }
    let mut parts: Vec<Vec<DocumentTriple>> = Vec::with_capacity(5);
    for i in 0..5 {
        let mut part = Vec::new();
        for f in &fact_ids[cuts[i]..cuts[i + 1]] {
            part.extend(by_fact[f].iter().cloned());
        }
        part.sort_by(|a, b| a.time.cmp(&b.time).then(a.id.cmp(&b.id)));
        parts.push(part);
    }
    let mut it = parts.into_iter();
    Ok(DatasetSplits {
        train: it.next().unwrap(),
        valid: it.next().unwrap(),
        test: it.next().unwrap(),
        qa_train: it.next().unwrap(),
        qa_valid: it.next().unwrap(),
    })
}

/// Filler-only document for the locality term: behavior to preserve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalityDoc {
    pub id: String,
    pub text: String,
    /// One category (FILLER or NUM) per whitespace token.
    pub categories: Vec<Category>,
}

pub fn make_locality_corpus(world: &SyntheticWorld, n: usize, seed: u64) -> Result<Vec<LocalityDoc>> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x10c41);
    let mut out = Vec::with_capacity(n);
    for j in 0..n {
        let mut b = DocBuilder::new();
        for _ in 0..rng.gen_range(3..=5) {
            filler_sentence(&mut b, world, &mut rng);
        }
        out.push(LocalityDoc {
            id: format!("loc{j:05}"),
            text: b.words.join(" "),
            categories: b.categories,
        });
    }
    Ok(out)
}

/// Vocabulary over everything any run can see: documents, questions,
/// answers, and the locality corpus.
pub fn build_vocab<'a>(
    triples: impl IntoIterator<Item = &'a DocumentTriple>,
    locality: &[LocalityDoc],
) -> Vocabulary {
    let mut texts: Vec<&str> = Vec::new();
    let mut owned: Vec<String> = Vec::new();
    for t in triples {
        owned.push(format!("{} {} {}", t.text, t.question, t.answer));
    }
    for l in locality {
        texts.push(&l.text);
    }
    let all: Vec<&str> = owned.iter().map(|s| s.as_str()).chain(texts).collect();
    Vocabulary::from_corpus(all)
}

/// Tokenized document with aligned categories.
pub fn doc_sequence(t: &DocumentTriple, vocab: &Vocabulary) -> Result<TokenSequence> {
    tokenize_with_categories(&t.text, &t.categories, vocab)
}

pub fn locality_sequence(l: &LocalityDoc, vocab: &Vocabulary) -> Result<TokenSequence> {
    tokenize_with_categories(&l.text, &l.categories, vocab)
}

/// (question ids, answer ids) for the QA loss.
pub fn qa_pair(t: &DocumentTriple, vocab: &Vocabulary) -> (Vec<u32>, Vec<u32>) {
    (tokenize(&t.question, vocab).ids, tokenize(&t.answer, vocab).ids)
}

pub fn save_jsonl(triples: &[DocumentTriple], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in triples {
        let line = serde_json::to_string(t).map_err(|e| Error::invalid(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DocumentTriple>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut t: DocumentTriple =
            serde_json::from_str(&line).map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        let n_words = t.text.split_whitespace().count();
        if t.categories.len() != n_words {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!(
                    "categories has {} entries for {} whitespace tokens",
                    t.categories.len(),
                    n_words
                ),
            });
        }
        t.fact = parse_fact_from_id(&t.id);
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(seed: u64) -> WorldSpec {
        WorldSpec {
            n_entities: 8,
            n_word_relations: 2,
            n_num_relations: 2,
            n_value_words: 10,
            n_fillers: 15,
            n_numerals: 10,
            drift_frac: 0.25,
            n_times: 160,
            seed,
        }
    }

    #[test]
    fn world_is_deterministic_per_seed() {
        let a = generate_world(&small_spec(9)).unwrap();
        let b = generate_world(&small_spec(9)).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_world(&small_spec(10)).unwrap();
        assert_ne!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&c).unwrap());
    }

    #[test]
    fn world_counts_and_vocab_disjointness() {
        let w = generate_world(&small_spec(3)).unwrap();
        assert_eq!(w.entities.len(), 8);
        assert_eq!(w.queried.len(), 16); // 8 entities × 2 word relations
        let fillers: BTreeSet<&String> = w.fillers.iter().collect();
        assert!(w.value_words.iter().all(|v| !fillers.contains(v)));
        // drift covers round(0.25 · 16) = 4 queried facts
        let drifted = w.queried.iter().filter(|f| w.facts[**f].values.len() > 1).count();
        assert_eq!(drifted, 4);
    }

    #[test]
    fn value_at_follows_schedule() {
        let f = Fact {
            entity: 0,
            relation: 0,
            values: vec![(0, "old".into()), (50, "new".into())],
        };
        assert_eq!(f.value_at(0), "old");
        assert_eq!(f.value_at(49), "old");
        assert_eq!(f.value_at(50), "new");
        assert_eq!(f.value_at(999), "new");
    }

    #[test]
    fn rendered_answers_are_spans_for_a_and_b_but_not_c() {
        let w = generate_world(&small_spec(1)).unwrap();
        for style in [Style::A, Style::B] {
            for t in render_triples(&w, style, 20, 5).unwrap() {
                let (s, e) = t.answer_span.unwrap();
                let words: Vec<&str> = t.text.split_whitespace().collect();
                assert_eq!(words[s..e].join(" "), t.answer, "style {style}");
                assert_eq!(t.categories[s], Category::Value);
            }
        }
        for t in render_triples(&w, Style::C, 20, 5).unwrap() {
            assert!(t.answer_span.is_none());
            assert!(
                !t.text.split_whitespace().any(|w| w == t.answer),
                "style C answer should not be a document token"
            );
        }
    }

    #[test]
    fn categories_align_with_words() {
        let w = generate_world(&small_spec(2)).unwrap();
        for style in Style::all() {
            for t in render_triples(&w, style, 10, 3).unwrap() {
                assert_eq!(t.categories.len(), t.text.split_whitespace().count());
            }
        }
    }

    #[test]
    fn mean_lengths_near_targets() {
        let w = generate_world(&small_spec(4)).unwrap();
        for style in Style::all() {
            let docs = render_triples(&w, style, 300, 11).unwrap();
            let mean: f64 = docs
                .iter()
                .map(|t| t.text.split_whitespace().count() as f64)
                .sum::<f64>()
                / docs.len() as f64;
            let target = style.target_len() as f64;
            assert!(
                (mean - target).abs() <= 0.2 * target,
                "style {style}: mean {mean} vs target {target}"
            );
        }
    }

    #[test]
    fn splits_partition_and_stay_fact_disjoint() {
        let w = generate_world(&small_spec(6)).unwrap();
        let docs = render_triples(&w, Style::B, 64, 2).unwrap();
        let n = docs.len();
        let s = split_dataset(docs, false).unwrap();
        let parts = [&s.train, &s.valid, &s.test, &s.qa_train, &s.qa_valid];
        assert_eq!(parts.iter().map(|p| p.len()).sum::<usize>(), n);
        let mut seen_ids = BTreeSet::new();
        for p in &parts {
            for t in *p {
                assert!(seen_ids.insert(t.id.clone()), "duplicate doc id {}", t.id);
            }
        }
        for i in 0..parts.len() {
            for j in i + 1..parts.len() {
                let fi: BTreeSet<_> = parts[i].iter().map(|t| t.fact.unwrap()).collect();
                let fj: BTreeSet<_> = parts[j].iter().map(|t| t.fact.unwrap()).collect();
                assert!(fi.is_disjoint(&fj), "splits {i} and {j} share facts");
            }
        }
    }

    #[test]
    fn temporal_split_orders_time() {
        let w = generate_world(&small_spec(7)).unwrap();
        let docs = render_triples(&w, Style::A, 48, 9).unwrap();
        let s = split_dataset(docs, true).unwrap();
        let max_train = s.train.iter().map(|t| t.time).max().unwrap();
        let min_test = s.test.iter().map(|t| t.time).min().unwrap();
        assert!(max_train < min_test, "train max {max_train} vs test min {min_test}");
    }

    #[test]
    fn split_needs_enough_facts() {
        let w = generate_world(&small_spec(8)).unwrap();
        let mut docs = render_triples(&w, Style::B, 10, 1).unwrap();
        let f = docs[0].fact;
        for d in &mut docs {
            d.fact = f; // collapse everything onto one fact
        }
        let err = split_dataset(docs, false).unwrap_err().to_string();
        assert!(err.contains("at least 5"), "{err}");
    }

    #[test]
    fn locality_corpus_is_fact_free() {
        let w = generate_world(&small_spec(5)).unwrap();
        let locs = make_locality_corpus(&w, 12, 3).unwrap();
        assert_eq!(locs.len(), 12);
        for l in &locs {
            assert!(l
                .categories
                .iter()
                .all(|c| matches!(c, Category::Filler | Category::Num)));
            assert!(l.id.starts_with("loc"));
        }
        assert_eq!(locs, make_locality_corpus(&w, 12, 3).unwrap());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let w = generate_world(&small_spec(11)).unwrap();
        let docs = render_triples(&w, Style::C, 6, 2).unwrap();
        let path = dir.path().join("docs.jsonl");
        save_jsonl(&docs, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(docs, back);

        let bad = dir.path().join("bad.jsonl");
        std::fs::write(
            &bad,
            "{\"id\":\"x\",\"time\":0,\"text\":\"a b\",\"question\":\"q ?\",\"categories\":[\"FILLER\",\"FILLER\"]}\n",
        )
        .unwrap();
        let err = load_jsonl(&bad).unwrap_err().to_string();
        assert!(err.contains(":1:"), "{err}");
        assert!(err.contains("answer"), "{err}");

        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(load_jsonl(&empty).unwrap().is_empty());
    }

    #[test]
    fn vocab_covers_docs_questions_and_answers() {
        let w = generate_world(&small_spec(12)).unwrap();
        let docs = render_triples(&w, Style::C, 10, 4).unwrap();
        let locs = make_locality_corpus(&w, 4, 1).unwrap();
        let vocab = build_vocab(docs.iter(), &locs);
        for t in &docs {
            let seq = doc_sequence(t, &vocab).unwrap();
            assert!(!seq.ids.contains(&crate::lm::vocab::UNK));
            let (q, a) = qa_pair(t, &vocab);
            assert!(!q.contains(&crate::lm::vocab::UNK));
            assert!(!a.contains(&crate::lm::vocab::UNK) && !a.is_empty());
        }
    }
}
