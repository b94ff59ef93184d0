//! Greedy decoding over a pluggable scorer, and exhaustive enumeration of
//! the constrained output language for small vocabularies.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{parse_output, Diagnostic, DiagnosticKind, InputSequence};
use crate::constraint::{mask_scores, ConstraintError, DecoderState, Phase, SentenceConstraints};
use crate::schema::{SchemaConfig, SentimentTuple, Task};
use crate::vocab::{Letter, TokenId, VocabError, Vocabulary};

pub const DEFAULT_MAX_LEN: usize = 256;
/// Enumeration refuses vocabularies larger than this.
pub const ENUM_MAX_VOCAB: usize = 64;
/// Enumeration refuses length bounds larger than this.
pub const ENUM_MAX_LEN: usize = 30;
/// DFS node budget for enumeration.
pub const ENUM_MAX_NODES: usize = 2_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecodeError {
    #[error("scorer returned {got} scores for a vocabulary of {expected}")]
    Shape { expected: usize, got: usize },
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("no admissible token at step {step}; generated so far {generated:?}")]
    DeadEnd { step: usize, generated: Vec<TokenId> },
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("enumeration bound exceeded: {0}")]
    Size(String),
}

/// One sentence to decode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeItem {
    pub id: String,
    pub input: InputSequence,
}

/// Next-token scores for a prefix; the vector is indexed by token id.
pub trait Scorer: Send + Sync {
    fn score(&self, item: &DecodeItem, prefix: &[TokenId]) -> Result<Vec<f32>, DecodeError>;

    /// False if calls must not overlap; batches then run serially.
    fn is_concurrent(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub max_len: usize,
    /// Disable to score raw argmax output, for comparison runs.
    pub masking: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_len: DEFAULT_MAX_LEN,
            masking: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DecodeResult {
    pub id: String,
    /// Generated ids without the final end-of-sequence token.
    pub token_ids: Vec<TokenId>,
    pub text: String,
    pub tuples: BTreeSet<SentimentTuple>,
    pub diagnostics: Vec<Diagnostic>,
    pub steps: usize,
    pub finished: bool,
}

/// Index of the highest finite score; ties go to the lowest id.
pub fn argmax(scores: &[f32]) -> Option<usize> {
    let mut best: Option<(usize, f32)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if !s.is_finite() && s != f32::INFINITY {
            continue;
        }
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

pub struct Decoder<'a> {
    cfg: &'a SchemaConfig,
    vocab: &'a dyn Vocabulary,
    options: DecodeOptions,
}

impl<'a> Decoder<'a> {
    pub fn new(cfg: &'a SchemaConfig, vocab: &'a dyn Vocabulary, options: DecodeOptions) -> Self {
        Decoder { cfg, vocab, options }
    }

    pub fn options(&self) -> DecodeOptions {
        self.options
    }

    pub fn greedy_decode(
        &self,
        scorer: &dyn Scorer,
        constraints: &SentenceConstraints<'_>,
        item: &DecodeItem,
    ) -> Result<DecodeResult, DecodeError> {
        let grammar = constraints.grammar();
        let eos = grammar.eos();
        let size = self.vocab.size();
        let mut state = DecoderState::new();
        let mut finished = false;
        let mut steps = 0;
        while steps < self.options.max_len {
            let scores = scorer.score(item, state.generated())?;
            if scores.len() != size {
                return Err(DecodeError::Shape {
                    expected: size,
                    got: scores.len(),
                });
            }
            let masked = if self.options.masking {
                let candidates = constraints.allowed_next(&state)?;
                mask_scores(&scores, size, &candidates, eos)?
            } else {
                scores
            };
            let token = argmax(&masked).ok_or_else(|| DecodeError::DeadEnd {
                step: steps,
                generated: state.generated().to_vec(),
            })? as TokenId;
            steps += 1;
            if token == eos {
                finished = true;
                break;
            }
            state.push(token, grammar.markers());
        }

        let token_ids = state.generated().to_vec();
        let text = self.vocab.decode(&token_ids)?;
        let parsed = parse_output(&text, grammar.task(), self.cfg);
        let mut diagnostics = parsed.diagnostics;
        if !finished {
            diagnostics.push(Diagnostic {
                block: text.matches(self.cfg.separator()).count(),
                kind: DiagnosticKind::Truncated {
                    max_len: self.options.max_len,
                },
            });
        }
        Ok(DecodeResult {
            id: item.id.clone(),
            token_ids,
            text,
            tuples: parsed.tuples,
            diagnostics,
            steps,
            finished,
        })
    }

    /// Element-wise [`greedy_decode`](Self::greedy_decode), in parallel when
    /// the scorer allows it. Output order follows `items`.
    pub fn batch_decode(
        &self,
        scorer: &dyn Scorer,
        constraints: &[SentenceConstraints<'_>],
        items: &[DecodeItem],
    ) -> Vec<Result<DecodeResult, DecodeError>> {
        assert_eq!(constraints.len(), items.len(), "one constraint set per item");
        let run = |(c, item): (&SentenceConstraints<'_>, &DecodeItem)| self.greedy_decode(scorer, c, item);
        if scorer.is_concurrent() {
            constraints.par_iter().zip(items.par_iter()).map(run).collect()
        } else {
            constraints.iter().zip(items.iter()).map(run).collect()
        }
    }
}

/// Every complete sequence (end-of-sequence excluded) reachable within
/// `max_len` steps, the end-of-sequence step included.
pub fn enumerate_language(
    constraints: &SentenceConstraints<'_>,
    max_len: usize,
) -> Result<BTreeSet<Vec<TokenId>>, DecodeError> {
    let grammar = constraints.grammar();
    if grammar.vocab_size() > ENUM_MAX_VOCAB {
        return Err(DecodeError::Size(format!(
            "vocabulary has {} tokens (limit {ENUM_MAX_VOCAB})",
            grammar.vocab_size()
        )));
    }
    if max_len > ENUM_MAX_LEN {
        return Err(DecodeError::Size(format!("max_len {max_len} (limit {ENUM_MAX_LEN})")));
    }
    let mut out = BTreeSet::new();
    let mut nodes = 0usize;
    let mut stack = vec![DecoderState::new()];
    while let Some(state) = stack.pop() {
        nodes += 1;
        if nodes > ENUM_MAX_NODES {
            return Err(DecodeError::Size(format!("more than {ENUM_MAX_NODES} prefixes")));
        }
        let candidates = constraints.allowed_next(&state)?;
        let len = state.generated().len();
        if candidates.allow_eos && len < max_len {
            out.insert(state.generated().to_vec());
        }
        if len + 1 < max_len {
            for &tok in &candidates.allowed {
                let mut next = state.clone();
                next.push(tok, grammar.markers());
                if len + 1 + min_to_finish(&next, grammar.task()) <= max_len {
                    stack.push(next);
                }
            }
        }
    }
    Ok(out)
}

/// Lower bound on the tokens (end-of-sequence included) still needed to
/// finish from `state`, counting every element as marker plus one token.
fn min_to_finish(state: &DecoderState, task: Task) -> usize {
    let elements = task.elements();
    let n = elements.len();
    let index = |l: Letter| l.element().and_then(|e| elements.iter().position(|&x| x == e));
    // tokens after completing element `i` of the current tuple
    let after = |i: usize| (n - 1 - i) * 4 + 1;
    let fresh_tuple = 4 * n + 1;
    match state.phase() {
        Phase::Empty => fresh_tuple,
        Phase::Finished => 0,
        Phase::Malformed { .. } => usize::MAX / 2,
        Phase::Content { letter, start } => match index(letter) {
            Some(i) => usize::from(state.generated().len() == start) + after(i),
            None => fresh_tuple,
        },
        Phase::Letter(letter) => match index(letter) {
            Some(i) => 2 + after(i),
            None => 1 + fresh_tuple,
        },
        Phase::Open => match state.last_special().and_then(index) {
            Some(i) if i + 1 < n => 3 + after(i + 1),
            Some(_) => 2 + fresh_tuple,
            None => 3 + after(0),
        },
    }
}

/// Plays back a fixed token program per item id; after the program ends it
/// prefers end-of-sequence. Unlisted ids are an error.
#[derive(Debug, Clone)]
pub struct ScriptedScorer {
    programs: HashMap<String, Vec<TokenId>>,
    vocab_size: usize,
    eos: TokenId,
}

impl ScriptedScorer {
    pub fn new(programs: HashMap<String, Vec<TokenId>>, vocab: &dyn Vocabulary) -> Self {
        ScriptedScorer {
            programs,
            vocab_size: vocab.size(),
            eos: vocab.eos_id(),
        }
    }

    /// Programs given as text, encoded with `vocab`.
    pub fn from_texts<'t>(texts: impl IntoIterator<Item = (&'t str, &'t str)>, vocab: &dyn Vocabulary) -> Self {
        let programs = texts
            .into_iter()
            .map(|(id, text)| (id.to_string(), vocab.encode(text)))
            .collect();
        ScriptedScorer::new(programs, vocab)
    }

    /// Script file: one `<id>\t<program>` per line. A program is either text
    /// (encoded with `vocab`) or `ids:` followed by space-separated token
    /// ids. Blank lines and lines starting with `#` are ignored.
    pub fn parse(text: &str, vocab: &dyn Vocabulary) -> Result<Self, String> {
        let mut programs = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (id, program) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected `<id>\\t<program>`", idx + 1))?;
            let ids = match program.strip_prefix("ids:") {
                Some(raw) => raw
                    .split_whitespace()
                    .map(|t| t.parse::<TokenId>().map_err(|e| format!("line {}: {e}", idx + 1)))
                    .collect::<Result<Vec<_>, _>>()?,
                None => vocab.encode(program),
            };
            if let Some(&bad) = ids.iter().find(|&&t| t as usize >= vocab.size()) {
                return Err(format!("line {}: token id {bad} out of range", idx + 1));
            }
            programs.insert(id.to_string(), ids);
        }
        Ok(ScriptedScorer::new(programs, vocab))
    }
}

impl Scorer for ScriptedScorer {
    fn score(&self, item: &DecodeItem, prefix: &[TokenId]) -> Result<Vec<f32>, DecodeError> {
        let program = self
            .programs
            .get(&item.id)
            .ok_or_else(|| DecodeError::Scorer(format!("no script for item `{}`", item.id)))?;
        let mut scores = vec![0.0; self.vocab_size];
        let next = program.get(prefix.len()).copied().unwrap_or(self.eos);
        scores[next as usize] = 1.0;
        Ok(scores)
    }
}

/// Pseudo-random scores that depend only on the seed, the item id and the
/// prefix, so results do not depend on scheduling.
#[derive(Debug, Clone)]
pub struct SeededRandomScorer {
    seed: u64,
    vocab_size: usize,
}

impl SeededRandomScorer {
    pub fn new(seed: u64, vocab_size: usize) -> Self {
        SeededRandomScorer { seed, vocab_size }
    }
}

fn fnv1a(seed: u64, id: &str, prefix: &[TokenId]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in id.bytes().chain([0xff]).chain(prefix.iter().flat_map(|t| t.to_le_bytes())) {
        h ^= b as u64;
        h = h.wrapping_mul(PRIME);
    }
    h
}

impl Scorer for SeededRandomScorer {
    fn score(&self, item: &DecodeItem, prefix: &[TokenId]) -> Result<Vec<f32>, DecodeError> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, &item.id, prefix));
        Ok((0..self.vocab_size).map(|_| rng.gen::<f32>()).collect())
    }
}

type FetchFn = dyn Fn(&DecodeItem) -> Result<String, String> + Send + Sync;

/// Fetches one completion per item from a remote model (for example a chat
/// endpoint), encodes it, and then plays it back like [`ScriptedScorer`].
pub struct RemoteScorer {
    fetch: Box<FetchFn>,
    vocab: std::sync::Arc<dyn Vocabulary>,
    cache: Mutex<HashMap<String, Vec<TokenId>>>,
}

impl RemoteScorer {
    pub fn new(
        vocab: std::sync::Arc<dyn Vocabulary>,
        fetch: impl Fn(&DecodeItem) -> Result<String, String> + Send + Sync + 'static,
    ) -> Self {
        RemoteScorer {
            fetch: Box::new(fetch),
            vocab,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn program(&self, item: &DecodeItem) -> Result<Vec<TokenId>, DecodeError> {
        if let Some(p) = self.cache.lock().expect("cache lock").get(&item.id) {
            return Ok(p.clone());
        }
        let reply = (self.fetch)(item).map_err(DecodeError::Scorer)?;
        let program = self.vocab.encode(&reply);
        self.cache
            .lock()
            .expect("cache lock")
            .insert(item.id.clone(), program.clone());
        Ok(program)
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, item: &DecodeItem, prefix: &[TokenId]) -> Result<Vec<f32>, DecodeError> {
        let program = self.program(item)?;
        let mut scores = vec![0.0; self.vocab.size()];
        let next = program.get(prefix.len()).copied().unwrap_or(self.vocab.eos_id());
        scores[next as usize] = 1.0;
        Ok(scores)
    }
}
