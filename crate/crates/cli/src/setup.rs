//! Configuration loading and validation shared by the subcommands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use absa_cd::schema::SchemaConfig;
use absa_cd::vocab::{PieceVocab, Vocabulary, WhitespaceVocab};
use serde::Serialize;

/// Collects every configuration problem before anything runs.
#[derive(Default)]
pub struct Problems(pub Vec<String>);

impl Problems {
    pub fn push(&mut self, p: impl Into<String>) {
        self.0.push(p.into());
    }

    pub fn file(&mut self, path: &Path, what: &str) {
        if !path.is_file() {
            self.push(format!("{what} `{}` does not exist", path.display()));
        }
    }

    pub fn out_dir(&mut self, path: &Path, what: &str) {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if !dir.is_dir() {
            self.push(format!("{what} directory `{}` does not exist", dir.display()));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn load_schema(path: Option<&Path>, problems: &mut Problems) -> Option<SchemaConfig> {
    match path {
        None => Some(SchemaConfig::restaurants()),
        Some(p) => SchemaConfig::load(p)
            .map_err(|e| problems.push(format!("schema `{}`: {e}", p.display())))
            .ok(),
    }
}

pub enum VocabSource {
    Whitespace,
    File(PathBuf),
}

pub fn vocab_source(spec: &str, problems: &mut Problems) -> VocabSource {
    if spec == "whitespace" {
        return VocabSource::Whitespace;
    }
    let p = PathBuf::from(spec);
    problems.file(&p, "vocabulary");
    VocabSource::File(p)
}

/// Whitespace vocabularies are built from the schema plus `texts`.
pub fn load_vocab<'a>(
    source: &VocabSource,
    cfg: &SchemaConfig,
    texts: impl IntoIterator<Item = &'a str>,
) -> Result<Arc<dyn Vocabulary>, String> {
    match source {
        VocabSource::Whitespace => {
            let owned: Vec<String> = texts.into_iter().map(str::to_string).collect();
            Ok(Arc::new(WhitespaceVocab::for_schema(cfg, owned.iter().map(String::as_str))))
        }
        VocabSource::File(p) => PieceVocab::load(p)
            .map(|v| Arc::new(v) as Arc<dyn Vocabulary>)
            .map_err(|e| format!("vocabulary `{}`: {e}", p.display())),
    }
}

/// Settings recorded next to each output file.
#[derive(Debug, Default, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub tool_version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub masking: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shots: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub language: Option<String>,
}

impl RunConfig {
    pub fn new(command: &str) -> Self {
        RunConfig {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            ..RunConfig::default()
        }
    }
}
