//! Input/target sequence construction and lenient parsing of generated text.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{normalize_ws, Element, PhraseTuple, SchemaConfig, SchemaError, SentimentTuple, Task};

/// Delimiter between the sentence and the marker hint.
pub const INPUT_DELIMITER: &str = " | ";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("input sentence is empty")]
    EmptySentence,
    #[error("target needs at least one tuple")]
    NoTuples,
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("tuple {index} lacks the {element} element required by {task}")]
    MissingElement {
        index: usize,
        task: Task,
        element: Element,
    },
}

/// Sentence plus the task's marker hint, e.g. `They offer a tasty soup | [A] [C] [P]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputSequence {
    pub sentence: String,
    pub hint: Vec<String>,
}

impl InputSequence {
    pub fn render(&self) -> String {
        format!("{}{}{}", self.sentence, INPUT_DELIMITER, self.hint.join(" "))
    }
}

impl fmt::Display for InputSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TargetSequence {
    pub tuples: Vec<PhraseTuple>,
    pub rendered: String,
}

pub fn build_input(sentence: &str, task: Task, cfg: &SchemaConfig) -> Result<InputSequence, CodecError> {
    if sentence.trim().is_empty() {
        return Err(CodecError::EmptySentence);
    }
    Ok(InputSequence {
        sentence: sentence.to_string(),
        hint: task
            .elements()
            .iter()
            .map(|&e| cfg.marker(e).to_string())
            .collect(),
    })
}

/// Render one generation-space tuple as `[A] a [C] c [P] p` restricted to the task.
pub fn render_block(phrases: &PhraseTuple, task: Task, cfg: &SchemaConfig) -> Option<String> {
    let mut parts = Vec::with_capacity(task.elements().len() * 2);
    for &e in task.elements() {
        parts.push(cfg.marker(e));
        parts.push(phrases.get(e)?);
    }
    Some(parts.join(" "))
}

pub fn build_target(
    tuples: &[SentimentTuple],
    task: Task,
    cfg: &SchemaConfig,
) -> Result<TargetSequence, CodecError> {
    if tuples.is_empty() {
        return Err(CodecError::NoTuples);
    }
    let mut phrases = Vec::with_capacity(tuples.len());
    let mut blocks = Vec::with_capacity(tuples.len());
    for (index, t) in tuples.iter().enumerate() {
        let p = cfg.to_generation_space(&t.project(task))?;
        let block = render_block(&p, task, cfg).ok_or_else(|| {
            let element = task
                .elements()
                .iter()
                .copied()
                .find(|&e| p.get(e).is_none())
                .unwrap_or(Element::Aspect);
            CodecError::MissingElement { index, task, element }
        })?;
        blocks.push(block);
        phrases.push(p);
    }
    let sep = format!(" {} ", cfg.separator());
    Ok(TargetSequence {
        tuples: phrases,
        rendered: blocks.join(&sep),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiagnosticKind {
    EmptyOutput,
    /// Markers absent or out of task order.
    MissingMarker { expected: String, found: Vec<String> },
    EmptyElement { marker: String },
    UnknownCategory { phrase: String },
    UnknownPolarity { phrase: String },
    /// Text left over after a complete block, or before its first marker.
    TrailingGarbage { text: String },
    /// Decoding hit its length limit before end of sequence.
    Truncated { max_len: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    /// Zero-based index of the separator-delimited block.
    pub block: usize,
    #[serde(flatten)]
    pub kind: DiagnosticKind,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}: ", self.block)?;
        match &self.kind {
            DiagnosticKind::EmptyOutput => write!(f, "empty output"),
            DiagnosticKind::MissingMarker { expected, found } => {
                write!(f, "missing or misordered marker {expected} (found [{}])", found.join(", "))
            }
            DiagnosticKind::EmptyElement { marker } => write!(f, "empty element after {marker}"),
            DiagnosticKind::UnknownCategory { phrase } => write!(f, "unknown category phrase `{phrase}`"),
            DiagnosticKind::UnknownPolarity { phrase } => write!(f, "unknown polarity phrase `{phrase}`"),
            DiagnosticKind::TrailingGarbage { text } => write!(f, "unexpected text `{text}`"),
            DiagnosticKind::Truncated { max_len } => write!(f, "truncated at {max_len} tokens"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub tuples: BTreeSet<SentimentTuple>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Extract tuples from generated text. Never fails: malformed blocks are
/// skipped and described in `diagnostics`.
pub fn parse_output(text: &str, task: Task, cfg: &SchemaConfig) -> ParsedOutput {
    let mut out = ParsedOutput::default();
    if text.trim().is_empty() {
        out.diagnostics.push(Diagnostic {
            block: 0,
            kind: DiagnosticKind::EmptyOutput,
        });
        return out;
    }
    for (block, chunk) in text.split(cfg.separator()).enumerate() {
        match parse_block(chunk, task, cfg) {
            Ok(t) => {
                out.tuples.insert(t);
            }
            Err(kind) => out.diagnostics.push(Diagnostic { block, kind }),
        }
    }
    out
}

const ELEMENTS: [Element; 3] = [Element::Aspect, Element::Category, Element::Polarity];

fn parse_block(chunk: &str, task: Task, cfg: &SchemaConfig) -> Result<SentimentTuple, DiagnosticKind> {
    // (element, content) in order of appearance
    let mut segments: Vec<(Element, &str)> = Vec::new();
    let mut rest = chunk;
    let mut leading = None;
    loop {
        let next = ELEMENTS
            .iter()
            .filter_map(|&e| rest.find(cfg.marker(e)).map(|pos| (pos, e)))
            .min_by_key(|&(pos, _)| pos);
        match next {
            Some((pos, e)) => {
                let before = &rest[..pos];
                match segments.last_mut() {
                    Some(last) => last.1 = before,
                    None => leading = Some(before),
                }
                segments.push((e, ""));
                rest = &rest[pos + cfg.marker(e).len()..];
            }
            None => {
                match segments.last_mut() {
                    Some(last) => last.1 = rest,
                    None => leading = Some(rest),
                }
                break;
            }
        }
    }

    let found: Vec<String> = segments.iter().map(|(e, _)| cfg.marker(*e).to_string()).collect();
    let expected = task.elements();
    if let Some(i) = (0..expected.len()).find(|&i| segments.get(i).map(|s| s.0) != Some(expected[i])) {
        return Err(DiagnosticKind::MissingMarker {
            expected: cfg.marker(expected[i]).to_string(),
            found,
        });
    }
    if segments.len() > expected.len() {
        return Err(DiagnosticKind::MissingMarker {
            expected: cfg.separator().to_string(),
            found,
        });
    }
    if let Some(text) = leading.map(str::trim).filter(|t| !t.is_empty()) {
        return Err(DiagnosticKind::TrailingGarbage { text: text.to_string() });
    }

    let mut phrases = PhraseTuple {
        aspect: String::new(),
        category: None,
        polarity: None,
    };
    for &(e, content) in &segments {
        let content = normalize_ws(content);
        if content.is_empty() {
            return Err(DiagnosticKind::EmptyElement {
                marker: cfg.marker(e).to_string(),
            });
        }
        match e {
            Element::Aspect => phrases.aspect = content,
            Element::Category => phrases.category = Some(content),
            Element::Polarity => phrases.polarity = Some(content),
        }
    }

    cfg.from_generation_space(&phrases, task).map_err(|err| {
        let (element, phrase) = match err {
            SchemaError::UnknownCategoryPhrase(p) => (Element::Category, p),
            SchemaError::UnknownPolarityPhrase(p) => (Element::Polarity, p),
            other => unreachable!("aspect mapping never fails: {other}"),
        };
        let garbage = cfg.phrases(element).into_iter().find_map(|valid| {
            phrase
                .strip_prefix(valid)
                .filter(|tail| tail.starts_with(' '))
                .map(|tail| tail.trim().to_string())
        });
        match (garbage, element) {
            (Some(text), _) => DiagnosticKind::TrailingGarbage { text },
            (None, Element::Category) => DiagnosticKind::UnknownCategory { phrase },
            (None, _) => DiagnosticKind::UnknownPolarity { phrase },
        }
    })
}

/// One line of the JSONL exchange format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub text: String,
    pub language: String,
    pub tuples: Vec<SentimentTuple>,
}

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn read_jsonl<T: serde::de::DeserializeOwned, R: BufRead>(reader: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| JsonlError::Parse { line: idx + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut writer: W, items: &[T]) -> Result<(), JsonlError> {
    for item in items {
        serde_json::to_writer(&mut writer, item).map_err(|source| JsonlError::Parse { line: 0, source })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
