//! SemEval-2016 ABSA XML ingestion, train/dev splitting and corpus statistics.
//!
//! Expected shape (element and attribute names are matched exactly):
//!
//! ```xml
//! <Reviews>
//!   <Review rid="1004293">
//!     <sentences>
//!       <sentence id="1004293:0">
//!         <text>Judging from previous posts this used to be a good place, but not any longer.</text>
//!         <Opinions>
//!           <Opinion target="place" category="RESTAURANT#GENERAL" polarity="negative" from="51" to="56"/>
//!         </Opinions>
//!       </sentence>
//!     </sentences>
//!   </Review>
//! </Reviews>
//! ```
//!
//! `from`/`to` are character offsets into `text`.

use std::collections::BTreeSet;
use std::path::Path;

use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::Record;
use crate::schema::{AspectTerm, Category, Polarity, SentimentTuple};

pub type LabeledSentence = Record;

pub const DEFAULT_SPLIT_SEED: u64 = 42;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CorpusError {
    #[error("malformed XML at line {line}: {message}")]
    Xml { line: usize, message: String },
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot split an empty corpus")]
    EmptyCorpus,
    #[error("invalid split ratio {train}:{dev}")]
    InvalidRatio { train: u32, dev: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IngestDiagnostic {
    pub sentence_id: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub sentences: Vec<LabeledSentence>,
    /// Sentences without any usable opinion.
    pub dropped_empty: usize,
    pub diagnostics: Vec<IngestDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IngestOptions {
    pub language: String,
    /// Keep zero-opinion sentences (for statistics only).
    pub keep_empty: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            language: "en".into(),
            keep_empty: false,
        }
    }
}

pub fn ingest_xml(path: &Path, options: &IngestOptions) -> Result<IngestReport, CorpusError> {
    let xml = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    ingest_xml_str(&xml, options)
}

/// Ingests several files in parallel; reports come back in input order.
pub fn ingest_many(paths: &[&Path], options: &IngestOptions) -> Result<Vec<IngestReport>, CorpusError> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| ingest_xml(p, options)).collect()
}

#[derive(Default)]
struct Pending {
    id: String,
    text: Option<String>,
    opinions: Vec<RawOpinion>,
}

struct RawOpinion {
    target: String,
    category: String,
    polarity: String,
    from: Option<String>,
    to: Option<String>,
}

pub fn ingest_xml_str(xml: &str, options: &IngestOptions) -> Result<IngestReport, CorpusError> {
    let mut reader = Reader::from_str(xml);
    let line_at = |pos: u64| xml.as_bytes()[..(pos as usize).min(xml.len())].iter().filter(|&&b| b == b'\n').count() + 1;
    let xml_err = |reader: &Reader<&[u8]>, message: String| CorpusError::Xml {
        line: line_at(reader.buffer_position()),
        message,
    };

    let mut report = IngestReport::default();
    let mut current: Option<Pending> = None;
    let mut in_text = false;
    loop {
        let event = reader
            .read_event()
            .map_err(|e| CorpusError::Xml {
                line: line_at(reader.error_position()),
                message: e.to_string(),
            })?;
        match event {
            Event::Start(e) | Event::Empty(e) if e.name().as_ref() == b"sentence" => {
                let id = attr(&e, b"id").map_err(|m| xml_err(&reader, m))?.unwrap_or_default();
                current = Some(Pending {
                    id,
                    ..Pending::default()
                });
            }
            Event::Start(e) if e.name().as_ref() == b"text" => {
                in_text = true;
                if let Some(p) = current.as_mut() {
                    p.text.get_or_insert_with(String::new);
                }
            }
            Event::Text(t) if in_text => {
                let s = t.unescape().map_err(|e| xml_err(&reader, e.to_string()))?;
                if let Some(p) = current.as_mut() {
                    p.text.get_or_insert_with(String::new).push_str(&s);
                }
            }
            Event::CData(t) if in_text => {
                let s = String::from_utf8_lossy(&t).into_owned();
                if let Some(p) = current.as_mut() {
                    p.text.get_or_insert_with(String::new).push_str(&s);
                }
            }
            Event::End(e) if e.name().as_ref() == b"text" => in_text = false,
            Event::Start(e) | Event::Empty(e) if e.name().as_ref() == b"Opinion" => {
                let get = |k: &[u8]| attr(&e, k).map_err(|m| xml_err(&reader, m));
                let op = RawOpinion {
                    target: get(b"target")?.unwrap_or_else(|| "NULL".into()),
                    category: get(b"category")?.unwrap_or_default(),
                    polarity: get(b"polarity")?.unwrap_or_default(),
                    from: get(b"from")?,
                    to: get(b"to")?,
                };
                if let Some(p) = current.as_mut() {
                    p.opinions.push(op);
                }
            }
            Event::End(e) if e.name().as_ref() == b"sentence" => {
                if let Some(p) = current.take() {
                    finish_sentence(p, options, &mut report);
                }
            }
            Event::Eof => break,
            _ => {}
        }
    }
    if report.dropped_empty > 0 {
        log::info!("dropped {} sentences without opinions", report.dropped_empty);
    }
    Ok(report)
}

fn attr(e: &BytesStart<'_>, key: &[u8]) -> Result<Option<String>, String> {
    for a in e.attributes() {
        let a = a.map_err(|err| err.to_string())?;
        if a.key.as_ref() == key {
            return a
                .unescape_value()
                .map(|v| Some(v.into_owned()))
                .map_err(|err| err.to_string());
        }
    }
    Ok(None)
}

fn finish_sentence(p: Pending, options: &IngestOptions, report: &mut IngestReport) {
    let text = p.text.unwrap_or_default();
    let mut tuples = Vec::with_capacity(p.opinions.len());
    let mut diag = |message: String| {
        report.diagnostics.push(IngestDiagnostic {
            sentence_id: p.id.clone(),
            message,
        })
    };
    for op in p.opinions {
        let category = match Category::new(&op.category) {
            Ok(c) => c,
            Err(e) => {
                diag(format!("opinion skipped: {e}"));
                continue;
            }
        };
        let polarity: Polarity = match op.polarity.parse() {
            Ok(pol) => pol,
            Err(e) => {
                diag(format!("opinion skipped: {e}"));
                continue;
            }
        };
        let aspect = if op.target == "NULL" {
            AspectTerm::null()
        } else {
            if !offsets_match(&text, &op.target, op.from.as_deref(), op.to.as_deref()) {
                diag(format!(
                    "target `{}` does not match text at offsets {}..{}",
                    op.target,
                    op.from.as_deref().unwrap_or("?"),
                    op.to.as_deref().unwrap_or("?")
                ));
            }
            AspectTerm::new(&op.target)
        };
        tuples.push(SentimentTuple::new(aspect, Some(category), Some(polarity)));
    }
    if tuples.is_empty() {
        report.dropped_empty += 1;
        if !options.keep_empty {
            return;
        }
    }
    report.sentences.push(Record {
        id: p.id,
        text,
        language: options.language.clone(),
        tuples,
    });
}

fn offsets_match(text: &str, target: &str, from: Option<&str>, to: Option<&str>) -> bool {
    let (Some(from), Some(to)) = (from.and_then(|f| f.parse::<usize>().ok()), to.and_then(|t| t.parse::<usize>().ok())) else {
        return false;
    };
    if from > to {
        return false;
    }
    let span: String = text.chars().skip(from).take(to - from).collect();
    span == target
}

/// Train-to-dev proportion, 9:1 by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitRatio {
    pub train: u32,
    pub dev: u32,
}

impl Default for SplitRatio {
    fn default() -> Self {
        SplitRatio { train: 9, dev: 1 }
    }
}

impl SplitRatio {
    /// `ceil(n * train / (train + dev))`.
    pub fn train_size(self, n: usize) -> usize {
        let total = (self.train + self.dev) as usize;
        (n * self.train as usize).div_ceil(total)
    }
}

/// Seeded shuffle; the first `ratio.train_size(n)` shuffled sentences form the
/// train part. Both parts keep the input order.
pub fn split_train_dev(
    sentences: &[LabeledSentence],
    ratio: SplitRatio,
    seed: u64,
) -> Result<(Vec<LabeledSentence>, Vec<LabeledSentence>), CorpusError> {
    if ratio.train == 0 || ratio.train.checked_add(ratio.dev).is_none() {
        return Err(CorpusError::InvalidRatio {
            train: ratio.train,
            dev: ratio.dev,
        });
    }
    if sentences.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ratio.train_size(sentences.len());
    let train_idx: BTreeSet<usize> = order[..cut].iter().copied().collect();
    let (mut train, mut dev) = (Vec::with_capacity(cut), Vec::with_capacity(sentences.len() - cut));
    for (i, s) in sentences.iter().enumerate() {
        if train_idx.contains(&i) {
            train.push(s.clone());
        } else {
            dev.push(s.clone());
        }
    }
    Ok((train, dev))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub sentences: usize,
    pub triplets: usize,
    pub categories: usize,
    pub positive: usize,
    pub negative: usize,
    pub neutral: usize,
    pub null_aspects: usize,
}

pub fn compute_stats(sentences: &[LabeledSentence]) -> CorpusStats {
    let mut stats = CorpusStats {
        sentences: sentences.len(),
        ..CorpusStats::default()
    };
    let mut cats = BTreeSet::new();
    for t in sentences.iter().flat_map(|s| &s.tuples) {
        stats.triplets += 1;
        if let Some(c) = &t.category {
            cats.insert(c.raw());
        }
        match t.polarity {
            Some(Polarity::Positive) => stats.positive += 1,
            Some(Polarity::Negative) => stats.negative += 1,
            Some(Polarity::Neutral) => stats.neutral += 1,
            None => {}
        }
        if t.aspect.is_null() {
            stats.null_aspects += 1;
        }
    }
    stats.categories = cats.len();
    stats
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"<?xml version="1.0" encoding="UTF-8" standalone="yes"?>
<Reviews>
  <Review rid="1">
    <sentences>
      <sentence id="1:0">
        <text>They offer a tasty soup &amp; tea.</text>
        <Opinions>
          <Opinion target="soup" category="FOOD#QUALITY" polarity="positive" from="19" to="23"/>
          <Opinion target="NULL" category="RESTAURANT#GENERAL" polarity="positive" from="0" to="0"/>
        </Opinions>
      </sentence>
      <sentence id="1:1">
        <text>Overpriced tea.</text>
        <Opinions>
          <Opinion target="tea" category="DRINKS#PRICES" polarity="negative" from="11" to="14"/>
        </Opinions>
      </sentence>
      <sentence id="1:2">
        <text>We went on a Tuesday.</text>
      </sentence>
    </sentences>
  </Review>
</Reviews>
"#;

    #[test]
    fn fixture_ingest() {
        let r = ingest_xml_str(FIXTURE, &IngestOptions::default()).unwrap();
        assert_eq!(r.sentences.len(), 2);
        assert_eq!(r.dropped_empty, 1);
        assert!(r.diagnostics.is_empty(), "{:?}", r.diagnostics);
        assert_eq!(r.sentences[0].text, "They offer a tasty soup & tea.");
        assert_eq!(r.sentences.iter().map(|s| s.tuples.len()).sum::<usize>(), 3);
        assert!(r.sentences[0].tuples[1].aspect.is_null());

        let kept = ingest_xml_str(FIXTURE, &IngestOptions { keep_empty: true, ..Default::default() }).unwrap();
        assert_eq!(kept.sentences.len(), 3);
        assert_eq!(kept.dropped_empty, 1);
    }

    #[test]
    fn fixture_stats() {
        let r = ingest_xml_str(FIXTURE, &IngestOptions::default()).unwrap();
        let s = compute_stats(&r.sentences);
        assert_eq!(
            s,
            CorpusStats {
                sentences: 2,
                triplets: 3,
                categories: 3,
                positive: 2,
                negative: 1,
                neutral: 0,
                null_aspects: 1,
            }
        );
        assert_eq!(compute_stats(&[]), CorpusStats::default());
    }

    #[test]
    fn offset_mismatch_keeps_sentence() {
        let xml = r#"<sentences><sentence id="x"><text>Great pizza</text><Opinions>
            <Opinion target="pasta" category="FOOD#QUALITY" polarity="positive" from="6" to="11"/>
            </Opinions></sentence></sentences>"#;
        let r = ingest_xml_str(xml, &IngestOptions::default()).unwrap();
        assert_eq!(r.sentences.len(), 1);
        assert_eq!(r.sentences[0].tuples[0].aspect.surface(), "pasta");
        assert_eq!(r.diagnostics.len(), 1);
    }

    #[test]
    fn unicode_offsets_are_characters() {
        let xml = r#"<sentences><sentence id="ru"><text>Очень вкусный суп</text><Opinions>
            <Opinion target="суп" category="FOOD#QUALITY" polarity="positive" from="14" to="17"/>
            </Opinions></sentence></sentences>"#;
        let r = ingest_xml_str(xml, &IngestOptions { language: "ru".into(), keep_empty: false }).unwrap();
        assert!(r.diagnostics.is_empty(), "{:?}", r.diagnostics);
        assert_eq!(r.sentences[0].language, "ru");
    }

    #[test]
    fn malformed_xml_reports_line() {
        let xml = "<sentences>\n<sentence id=\"a\">\n<text>x</txt>\n</sentence></sentences>";
        match ingest_xml_str(xml, &IngestOptions::default()) {
            Err(CorpusError::Xml { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected xml error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let r = ingest_xml_str(FIXTURE, &IngestOptions::default()).unwrap();
        let mut buf = Vec::new();
        crate::codec::write_jsonl(&mut buf, &r.sentences).unwrap();
        let back: Vec<Record> = crate::codec::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, r.sentences);
    }

    #[test]
    fn bad_opinions_are_skipped() {
        let xml = r#"<sentences><sentence id="c"><text>ok food</text><Opinions>
            <Opinion target="food" category="FOOD#QUALITY" polarity="conflict" from="3" to="7"/>
            <Opinion target="food" category="food quality" polarity="positive" from="3" to="7"/>
            </Opinions></sentence></sentences>"#;
        let r = ingest_xml_str(xml, &IngestOptions::default()).unwrap();
        assert_eq!(r.sentences.len(), 0);
        assert_eq!(r.dropped_empty, 1);
        assert_eq!(r.diagnostics.len(), 2);
    }

    fn synthetic(n: usize) -> Vec<LabeledSentence> {
        (0..n)
            .map(|i| Record {
                id: format!("s{i}"),
                text: format!("sentence {i}"),
                language: "en".into(),
                tuples: vec![],
            })
            .collect()
    }

    #[test]
    fn split_sizes() {
        let (tr, dv) = split_train_dev(&synthetic(2000), SplitRatio::default(), DEFAULT_SPLIT_SEED).unwrap();
        assert_eq!((tr.len(), dv.len()), (1800, 200));
        let (tr, dv) = split_train_dev(&synthetic(10), SplitRatio::default(), 1).unwrap();
        assert_eq!((tr.len(), dv.len()), (9, 1));
        let (tr, dv) = split_train_dev(&synthetic(11), SplitRatio::default(), 1).unwrap();
        assert_eq!((tr.len(), dv.len()), (10, 1));
        assert_eq!(
            split_train_dev(&[], SplitRatio::default(), 1),
            Err(CorpusError::EmptyCorpus)
        );
    }

    #[test]
    fn split_is_deterministic_partition() {
        let data = synthetic(57);
        let a = split_train_dev(&data, SplitRatio::default(), 5).unwrap();
        let b = split_train_dev(&data, SplitRatio::default(), 5).unwrap();
        assert_eq!(a, b);
        let c = split_train_dev(&data, SplitRatio::default(), 6).unwrap();
        assert_ne!(a.1, c.1);
        let mut ids: Vec<_> = a.0.iter().chain(&a.1).map(|s| s.id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = data.iter().map(|s| s.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    proptest::proptest! {
        #[test]
        fn split_partitions(n in 1usize..300, seed: u64) {
            let data = synthetic(n);
            let (tr, dv) = split_train_dev(&data, SplitRatio::default(), seed).unwrap();
            proptest::prop_assert_eq!(tr.len(), (n * 9).div_ceil(10));
            let mut ids: Vec<_> = tr.iter().chain(&dv).map(|s| s.id.clone()).collect();
            ids.sort();
            let mut expected: Vec<_> = data.iter().map(|s| s.id.clone()).collect();
            expected.sort();
            proptest::prop_assert_eq!(ids, expected);
        }

        #[test]
        fn stats_invariants(spec in proptest::collection::vec(proptest::collection::vec((0u8..3, proptest::bool::ANY, 0usize..4), 0..5), 0..20)) {
            let cats = ["FOOD#QUALITY", "FOOD#PRICES", "SERVICE#GENERAL", "AMBIENCE#GENERAL"];
            let pols = [Polarity::Positive, Polarity::Negative, Polarity::Neutral];
            let data: Vec<Record> = spec.iter().enumerate().map(|(i, ts)| Record {
                id: i.to_string(),
                text: "x".into(),
                language: "en".into(),
                tuples: ts.iter().map(|&(p, null, c)| {
                    SentimentTuple::triplet(if null { "NULL" } else { "x" }, cats[c], pols[p as usize]).unwrap()
                }).collect(),
            }).collect();
            let s = compute_stats(&data);
            proptest::prop_assert_eq!(s.triplets, s.positive + s.negative + s.neutral);
            proptest::prop_assert!(s.null_aspects <= s.triplets);
            proptest::prop_assert!(s.categories <= 4);
            proptest::prop_assert_eq!(s.sentences, data.len());
        }
    }
}
