#![allow(dead_code)]

pub mod stub;

use std::collections::{BTreeSet, HashMap};

use absa_cd::codec::{build_input, build_target, Record};
use absa_cd::constraint::{ConstraintMode, Grammar, Row};
use absa_cd::decode::{DecodeItem, DecodeOptions, Decoder, ScriptedScorer};
use absa_cd::metrics::score_records;
use absa_cd::schema::{Polarity, SchemaConfig, SentimentTuple, Task};
use absa_cd::vocab::{TokenId, Vocabulary, WhitespaceVocab};

pub const TOY_SENTENCE: &str = "tasty soup";
pub const TOY_CATEGORIES: [&str; 3] = ["FOOD#QUALITY", "FOOD#PRICES", "SERVICE#GENERAL"];
pub const POLARITIES: [Polarity; 3] = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];

pub const CATEGORY_WORDS: [&str; 5] = ["food", "quality", "prices", "service", "general"];
pub const POLARITY_WORDS: [&str; 3] = ["great", "bad", "ok"];

pub fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

/// (prefix, expected row, expected tokens, eos allowed), TASD in bag mode.
pub fn table_cases() -> Vec<(&'static str, Row, Vec<String>, bool)> {
    let aspect = ["tasty", "soup", "it"];
    vec![
        ("", Row::Start, with(&["["], &[]), false),
        ("[A", Row::PendingClose, with(&["]"], &[]), false),
        ("[A]", Row::AspectStart, with(&aspect, &[]), false),
        ("[A] tasty [C]", Row::CategoryStart, with(&CATEGORY_WORDS, &[]), false),
        ("[A] tasty [C] food quality [P]", Row::PolarityStart, with(&POLARITY_WORDS, &[]), false),
        ("[A] tasty", Row::AspectContinue, with(&aspect, &["["]), false),
        ("[A] tasty [C] food", Row::CategoryContinue, with(&CATEGORY_WORDS, &["["]), false),
        ("[A] tasty [C] food quality [P] great", Row::PolarityContinue, with(&POLARITY_WORDS, &["["]), true),
        ("[A] tasty [", Row::AfterAspectOpen, with(&["C"], &[]), false),
        ("[A] tasty [C] food quality [", Row::AfterCategoryOpen, with(&["P"], &[]), false),
        ("[A] tasty [C] food quality [P] great [", Row::AfterPolarityOpen, with(&[";"], &[]), false),
        ("[A] tasty [C] food quality [P] great [;]", Row::AfterSeparator, with(&["["], &[]), false),
        ("[A] tasty [C] food quality [P] great [;] [", Row::AfterSeparatorOpen, with(&["A"], &[]), false),
    ]
}

pub fn toy_cfg() -> SchemaConfig {
    SchemaConfig::new(&TOY_CATEGORIES).unwrap()
}

pub fn toy_vocab(cfg: &SchemaConfig, sentences: &[&str]) -> WhitespaceVocab {
    WhitespaceVocab::for_schema(cfg, sentences.iter().copied())
}

pub fn id(vocab: &dyn Vocabulary, piece: &str) -> TokenId {
    vocab.token_id(piece).unwrap_or_else(|| panic!("`{piece}` not in vocabulary"))
}

pub fn ids(vocab: &dyn Vocabulary, pieces: &[&str]) -> BTreeSet<TokenId> {
    pieces.iter().map(|p| id(vocab, p)).collect()
}

/// Contiguous word spans of `sentence`, by brute force.
pub fn spans(sentence: &str) -> Vec<String> {
    let words: Vec<&str> = sentence.split_whitespace().collect();
    let mut out = Vec::new();
    for i in 0..words.len() {
        for j in i + 1..=words.len() {
            out.push(words[i..j].join(" "));
        }
    }
    out
}

pub fn item(id: &str, sentence: &str, task: Task, cfg: &SchemaConfig) -> DecodeItem {
    DecodeItem {
        id: id.to_string(),
        input: build_input(sentence, task, cfg).unwrap(),
    }
}

pub fn tasd(aspect: &str, category: &str, polarity: Polarity) -> SentimentTuple {
    SentimentTuple::triplet(aspect, category, polarity).unwrap()
}

/// 20 restaurant sentences with hand-assigned gold tuples.
pub fn fixture_records() -> Vec<Record> {
    type Row = (&'static str, &'static [(&'static str, &'static str, Polarity)]);
    let rows: [Row; 20] = [
        ("The soup was tasty", &[("soup", "FOOD#QUALITY", Polarity::Positive)]),
        ("Our waiter was rude", &[("waiter", "SERVICE#GENERAL", Polarity::Negative)]),
        ("Prices are fair", &[("NULL", "RESTAURANT#PRICES", Polarity::Positive)]),
        ("The pasta was cold and the staff slow", &[
            ("pasta", "FOOD#QUALITY", Polarity::Negative),
            ("staff", "SERVICE#GENERAL", Polarity::Negative),
        ]),
        ("Nice decor", &[("decor", "AMBIENCE#GENERAL", Polarity::Positive)]),
        ("The wine list is average", &[("wine list", "DRINKS#STYLE_OPTIONS", Polarity::Neutral)]),
        ("We will come back", &[("NULL", "RESTAURANT#GENERAL", Polarity::Positive)]),
        ("Great location near the park", &[("location", "LOCATION#GENERAL", Polarity::Positive)]),
        ("The dessert menu is tiny", &[("dessert menu", "FOOD#STYLE_OPTIONS", Polarity::Negative)]),
        ("Cocktails were overpriced", &[("Cocktails", "DRINKS#PRICES", Polarity::Negative)]),
        ("The sushi is fresh and cheap", &[
            ("sushi", "FOOD#QUALITY", Polarity::Positive),
            ("sushi", "FOOD#PRICES", Polarity::Positive),
        ]),
        ("Service was fine", &[("Service", "SERVICE#GENERAL", Polarity::Neutral)]),
        ("The room was noisy", &[("room", "AMBIENCE#GENERAL", Polarity::Negative)]),
        ("Best burger in town", &[("burger", "FOOD#QUALITY", Polarity::Positive)]),
        ("Too expensive for what you get", &[("NULL", "RESTAURANT#PRICES", Polarity::Negative)]),
        ("The coffee was ok", &[("coffee", "DRINKS#QUALITY", Polarity::Neutral)]),
        ("Friendly bartender and good beer", &[
            ("bartender", "SERVICE#GENERAL", Polarity::Positive),
            ("beer", "DRINKS#QUALITY", Polarity::Positive),
        ]),
        ("The place is a bit dark", &[("place", "AMBIENCE#GENERAL", Polarity::Negative)]),
        ("Portions are huge", &[("Portions", "FOOD#STYLE_OPTIONS", Polarity::Positive)]),
        ("Lovely terrace", &[("terrace", "AMBIENCE#GENERAL", Polarity::Positive)]),
    ];
    rows.iter()
        .enumerate()
        .map(|(i, (text, tuples))| Record {
            id: format!("f{i:02}"),
            text: text.to_string(),
            language: "en".into(),
            tuples: tuples.iter().map(|&(a, c, p)| tasd(a, c, p)).collect(),
        })
        .collect()
}

/// Gold targets through scripted decoding, parsing and scoring.
pub fn end_to_end_f1(mode: ConstraintMode) -> f64 {
    let cfg = SchemaConfig::restaurants();
    let gold = fixture_records();
    let vocab = toy_vocab(&cfg, &gold.iter().map(|r| r.text.as_str()).collect::<Vec<_>>());
    let grammar = Grammar::new(&cfg, &vocab, Task::Tasd).unwrap();
    let programs: HashMap<String, Vec<TokenId>> = gold
        .iter()
        .map(|r| (r.id.clone(), vocab.encode(&build_target(&r.tuples, Task::Tasd, &cfg).unwrap().rendered)))
        .collect();
    let scorer = ScriptedScorer::new(programs, &vocab);
    let items: Vec<DecodeItem> = gold.iter().map(|r| item(&r.id, &r.text, Task::Tasd, &cfg)).collect();
    let cs: Vec<_> = gold.iter().map(|r| grammar.for_sentence(&r.text, &vocab, mode)).collect();
    let results = Decoder::new(&cfg, &vocab, DecodeOptions::default()).batch_decode(&scorer, &cs, &items);
    let pred: Vec<Record> = results
        .into_iter()
        .zip(&gold)
        .map(|(r, g)| {
            let r = r.unwrap();
            assert!(r.diagnostics.is_empty(), "{}: {:?}", r.text, r.diagnostics);
            Record {
                id: r.id,
                text: g.text.clone(),
                language: g.language.clone(),
                tuples: r.tuples.into_iter().collect(),
            }
        })
        .collect();
    score_records(&pred, &gold, Task::Tasd).unwrap().overall.f1
}
