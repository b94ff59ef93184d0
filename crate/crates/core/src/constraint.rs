//! Per-step candidate token sets for marker-structured outputs.
//!
//! Generation follows the marker grammar `[A] aspect [C] category [P] polarity`
//! (restricted to the task's elements) with `[;]` between tuples. After each
//! prefix the machine returns the tokens that may come next:
//!
//! | generated          | candidates                      |
//! |--------------------|---------------------------------|
//! | (empty)            | `[`                             |
//! | `… [A` / `[C` / …  | `]`                             |
//! | `… [A]`            | sentence tokens, null phrase    |
//! | `… [C]`            | category tokens                 |
//! | `… [P]`            | polarity tokens                 |
//! | `… [A] …`          | sentence, null phrase, `[`      |
//! | `… [C] …`          | categories, `[`                 |
//! | `… [P] …`          | polarities, `<eos>`, `[`        |
//! | `… [A] … [`        | `C`                             |
//! | `… [C] … [`        | `P`                             |
//! | `… [P] … [`        | `;`                             |
//! | `… [;]`            | `[`                             |
//! | `… [;] [`          | `A`                             |
//!
//! For tasks without every element the successor of a missing element is
//! spliced out, and `<eos>` is offered inside the task's last element.
//!
//! [`ConstraintMode::Bag`] offers every token of the relevant pool at every
//! content step. [`ConstraintMode::Trie`] walks tries so each finished span is
//! a whole category phrase, a whole polarity phrase, the null phrase, or a
//! contiguous span of the sentence.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::schema::{Element, SchemaConfig, Task};
use crate::vocab::{build_trie, Letter, MarkerTokenMap, TokenId, TokenTrie, VocabError, Vocabulary};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConstraintError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("phrase `{0}` contains a bracket or end-of-sequence token")]
    StructuralToken(String),
    #[error("generation already finished")]
    Finished,
    #[error("prefix is not reachable (token {position}): {reason}")]
    Unreachable { position: usize, reason: String },
    #[error("token {token} not allowed after {row}")]
    Violation { token: TokenId, row: Row },
    #[error("score vector has {got} entries, vocabulary has {expected}")]
    Shape { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ConstraintMode {
    /// Token bags per element.
    #[default]
    Bag,
    /// Exact phrase continuations through tries.
    Trie,
}

impl std::str::FromStr for ConstraintMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "bag" => Ok(ConstraintMode::Bag),
            "trie" => Ok(ConstraintMode::Trie),
            other => Err(format!("unknown constraint mode `{other}` (expected bag or trie)")),
        }
    }
}

impl fmt::Display for ConstraintMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConstraintMode::Bag => "bag",
            ConstraintMode::Trie => "trie",
        })
    }
}

/// The candidate-table row a state falls into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Row {
    Start,
    PendingClose,
    AspectStart,
    CategoryStart,
    PolarityStart,
    AspectContinue,
    CategoryContinue,
    PolarityContinue,
    AfterAspectOpen,
    AfterCategoryOpen,
    AfterPolarityOpen,
    AfterSeparator,
    AfterSeparatorOpen,
}

impl Row {
    pub const ALL: [Row; 13] = [
        Row::Start,
        Row::PendingClose,
        Row::AspectStart,
        Row::CategoryStart,
        Row::PolarityStart,
        Row::AspectContinue,
        Row::CategoryContinue,
        Row::PolarityContinue,
        Row::AfterAspectOpen,
        Row::AfterCategoryOpen,
        Row::AfterPolarityOpen,
        Row::AfterSeparator,
        Row::AfterSeparatorOpen,
    ];

    /// Generated-output pattern in table notation.
    pub fn pattern(self) -> &'static str {
        match self {
            Row::Start => "(empty)",
            Row::PendingClose => "… [A / [C / [P / [;",
            Row::AspectStart => "… [A]",
            Row::CategoryStart => "… [C]",
            Row::PolarityStart => "… [P]",
            Row::AspectContinue => "… [A] …",
            Row::CategoryContinue => "… [C] …",
            Row::PolarityContinue => "… [P] …",
            Row::AfterAspectOpen => "… [A] … [",
            Row::AfterCategoryOpen => "… [C] … [",
            Row::AfterPolarityOpen => "… [P] … [",
            Row::AfterSeparator => "… [;]",
            Row::AfterSeparatorOpen => "… [;] [",
        }
    }

    fn start(element: Element) -> Row {
        match element {
            Element::Aspect => Row::AspectStart,
            Element::Category => Row::CategoryStart,
            Element::Polarity => Row::PolarityStart,
        }
    }

    fn cont(element: Element) -> Row {
        match element {
            Element::Aspect => Row::AspectContinue,
            Element::Category => Row::CategoryContinue,
            Element::Polarity => Row::PolarityContinue,
        }
    }

    fn after_open(prev: Option<Letter>) -> Row {
        match prev {
            None | Some(Letter::Separator) => Row::AfterSeparatorOpen,
            Some(Letter::Aspect) => Row::AfterAspectOpen,
            Some(Letter::Category) => Row::AfterCategoryOpen,
            Some(Letter::Polarity) => Row::AfterPolarityOpen,
        }
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "`{}`", self.pattern())
    }
}

/// Structural position within the marker grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Empty,
    /// Last token was `[`.
    Open,
    /// `[` followed by a letter, awaiting `]`.
    Letter(Letter),
    /// Inside the span following a complete marker; the span starts at `start`.
    Content { letter: Letter, start: usize },
    /// End of sequence emitted.
    Finished,
    /// Token at `at` broke the marker structure.
    Malformed { at: usize },
}

/// Generated prefix plus bookkeeping derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecoderState {
    generated: Vec<TokenId>,
    count_open: usize,
    count_close: usize,
    last_open_position: Option<usize>,
    last_special: Option<Letter>,
    prev_special: Option<Letter>,
    phase: Phase,
}

impl Default for DecoderState {
    fn default() -> Self {
        DecoderState::new()
    }
}

impl DecoderState {
    pub fn new() -> Self {
        DecoderState {
            generated: Vec::new(),
            count_open: 0,
            count_close: 0,
            last_open_position: None,
            last_special: None,
            prev_special: None,
            phase: Phase::Empty,
        }
    }

    /// Append a token without checking it against the candidate set.
    pub fn push(&mut self, token: TokenId, markers: &MarkerTokenMap) {
        let pos = self.generated.len();
        self.generated.push(token);
        if token == markers.open {
            self.count_open += 1;
            self.last_open_position = Some(pos);
        } else if token == markers.close {
            self.count_close += 1;
        }
        self.phase = match self.phase {
            Phase::Malformed { at } => Phase::Malformed { at },
            Phase::Finished => Phase::Malformed { at: pos },
            Phase::Empty if token == markers.open => Phase::Open,
            Phase::Content { letter, start } if token == markers.open => {
                if letter != Letter::Separator && start == pos {
                    Phase::Malformed { at: pos }
                } else {
                    Phase::Open
                }
            }
            Phase::Content { letter, start } if token == markers.eos => {
                if letter == Letter::Separator || start == pos {
                    Phase::Malformed { at: pos }
                } else {
                    Phase::Finished
                }
            }
            Phase::Content { letter: Letter::Separator, .. } => Phase::Malformed { at: pos },
            Phase::Content { letter, start } if token != markers.close => Phase::Content { letter, start },
            Phase::Open => match markers.letter_of(token) {
                Some(l) => Phase::Letter(l),
                None => Phase::Malformed { at: pos },
            },
            Phase::Letter(l) if token == markers.close => {
                self.prev_special = self.last_special;
                self.last_special = Some(l);
                Phase::Content { letter: l, start: pos + 1 }
            }
            _ => Phase::Malformed { at: pos },
        };
    }

    /// Rebuild every derived field from scratch.
    pub fn from_tokens(tokens: &[TokenId], markers: &MarkerTokenMap) -> Self {
        let count_open = tokens.iter().filter(|&&t| t == markers.open).count();
        let count_close = tokens.iter().filter(|&&t| t == markers.close).count();
        let last_open_position = tokens.iter().rposition(|&t| t == markers.open);

        // Segment into markers and spans left to right.
        let mut completed: Vec<Letter> = Vec::new();
        let mut phase = Phase::Empty;
        let mut i = 0;
        let n = tokens.len();
        while i < n {
            let rest = &tokens[i..];
            if let Phase::Malformed { .. } = phase {
                break;
            }
            if phase == Phase::Finished {
                phase = Phase::Malformed { at: i };
                break;
            }
            let span_len = match phase {
                Phase::Content { start, .. } => i - start,
                _ => 0,
            };
            if rest[0] == markers.open {
                let in_empty_span = matches!(phase, Phase::Content { letter, .. } if letter != Letter::Separator)
                    && span_len == 0;
                if !(phase == Phase::Empty || matches!(phase, Phase::Content { .. })) || in_empty_span {
                    phase = Phase::Malformed { at: i };
                    break;
                }
                let letter = rest.get(1).and_then(|&t| markers.letter_of(t));
                match (rest.len(), letter, rest.get(2)) {
                    (1, _, _) => {
                        phase = Phase::Open;
                        i += 1;
                    }
                    (_, None, _) => {
                        phase = Phase::Malformed { at: i + 1 };
                        break;
                    }
                    (2, Some(l), _) => {
                        phase = Phase::Letter(l);
                        i += 2;
                    }
                    (_, Some(l), Some(&c)) if c == markers.close => {
                        completed.push(l);
                        phase = Phase::Content { letter: l, start: i + 3 };
                        i += 3;
                    }
                    _ => {
                        phase = Phase::Malformed { at: i + 2 };
                        break;
                    }
                }
                continue;
            }
            phase = match phase {
                Phase::Content { letter, .. } if letter != Letter::Separator && rest[0] == markers.eos => {
                    if span_len == 0 {
                        Phase::Malformed { at: i }
                    } else {
                        Phase::Finished
                    }
                }
                Phase::Content { letter, start } if letter != Letter::Separator && rest[0] != markers.close => {
                    Phase::Content { letter, start }
                }
                _ => Phase::Malformed { at: i },
            };
            i += 1;
        }
        DecoderState {
            generated: tokens.to_vec(),
            count_open,
            count_close,
            last_open_position,
            last_special: completed.last().copied(),
            prev_special: completed.len().checked_sub(2).map(|k| completed[k]),
            phase,
        }
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.generated
    }

    pub fn count_open(&self) -> usize {
        self.count_open
    }

    pub fn count_close(&self) -> usize {
        self.count_close
    }

    pub fn last_open_position(&self) -> Option<usize> {
        self.last_open_position
    }

    pub fn last_special(&self) -> Option<Letter> {
        self.last_special
    }

    pub fn last_token(&self) -> Option<TokenId> {
        self.generated.last().copied()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_finished(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// Tokens of the span currently being generated, if inside one.
    pub fn current_span(&self) -> Option<&[TokenId]> {
        match self.phase {
            Phase::Content { start, .. } => Some(&self.generated[start..]),
            _ => None,
        }
    }
}

/// Allowed next tokens. `<eos>` is tracked by the flag, never in `allowed`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub allowed: BTreeSet<TokenId>,
    pub allow_eos: bool,
}

impl CandidateSet {
    fn only(token: TokenId) -> Self {
        CandidateSet {
            allowed: BTreeSet::from([token]),
            allow_eos: false,
        }
    }

    pub fn contains(&self, token: TokenId, eos: TokenId) -> bool {
        if token == eos {
            self.allow_eos
        } else {
            self.allowed.contains(&token)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty() && !self.allow_eos
    }

    /// Allowed ids plus `eos` when permitted, ascending.
    pub fn to_vec(&self, eos: TokenId) -> Vec<TokenId> {
        let mut v: Vec<TokenId> = self.allowed.iter().copied().collect();
        if self.allow_eos {
            if let Err(pos) = v.binary_search(&eos) {
                v.insert(pos, eos);
            }
        }
        v
    }
}

/// Score given to masked positions.
pub const MASKED: f32 = f32::NEG_INFINITY;

/// Copy `scores` with every disallowed position set to [`MASKED`].
pub fn mask_scores(
    scores: &[f32],
    vocab_size: usize,
    candidates: &CandidateSet,
    eos: TokenId,
) -> Result<Vec<f32>, ConstraintError> {
    if scores.len() != vocab_size {
        return Err(ConstraintError::Shape {
            expected: vocab_size,
            got: scores.len(),
        });
    }
    Ok(scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if candidates.contains(i as TokenId, eos) {
                s
            } else {
                MASKED
            }
        })
        .collect())
}

/// Sentence-independent part of the constraints: markers and phrase pools
/// for one schema, vocabulary and task.
#[derive(Debug, Clone)]
pub struct Grammar {
    task: Task,
    markers: MarkerTokenMap,
    vocab_size: usize,
    unk: TokenId,
    null_tokens: Vec<TokenId>,
    category_trie: TokenTrie,
    polarity_trie: TokenTrie,
    null_bag: BTreeSet<TokenId>,
    category_bag: BTreeSet<TokenId>,
    polarity_bag: BTreeSet<TokenId>,
}

impl Grammar {
    pub fn new(cfg: &SchemaConfig, vocab: &dyn Vocabulary, task: Task) -> Result<Self, ConstraintError> {
        let markers = MarkerTokenMap::new(cfg, vocab)?;
        let structural = |ids: &[TokenId]| {
            ids.iter()
                .any(|&t| t == markers.open || t == markers.close || t == markers.eos)
        };
        for e in [Element::Aspect, Element::Category, Element::Polarity] {
            for phrase in cfg.phrases(e) {
                if structural(&vocab.encode(phrase)) {
                    return Err(ConstraintError::StructuralToken(phrase.to_string()));
                }
            }
        }
        let null_trie = build_trie(&cfg.phrases(Element::Aspect), vocab)?;
        let category_trie = build_trie(&cfg.phrases(Element::Category), vocab)?;
        let polarity_trie = build_trie(&cfg.phrases(Element::Polarity), vocab)?;
        let bag = |t: &TokenTrie| -> BTreeSet<TokenId> { t.sequences().into_iter().flatten().collect() };
        Ok(Grammar {
            task,
            vocab_size: vocab.size(),
            unk: vocab.unk_id(),
            null_tokens: vocab.encode(cfg.null_phrase()),
            null_bag: bag(&null_trie),
            category_bag: bag(&category_trie),
            polarity_bag: bag(&polarity_trie),
            category_trie,
            polarity_trie,
            markers,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn markers(&self) -> &MarkerTokenMap {
        &self.markers
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn eos(&self) -> TokenId {
        self.markers.eos
    }

    /// Bind the grammar to one input sentence.
    pub fn for_sentence(&self, sentence: &str, vocab: &dyn Vocabulary, mode: ConstraintMode) -> SentenceConstraints<'_> {
        let tokens = vocab.encode(sentence);
        let usable = |t: &TokenId| {
            *t != self.markers.open && *t != self.markers.close && !vocab.is_control(*t) && *t != self.unk
        };
        let mut sentence_bag: BTreeSet<TokenId> = self.null_bag.clone();
        let mut aspect_trie = TokenTrie::new();
        for run in tokens.split(|t| !usable(t)) {
            sentence_bag.extend(run.iter().copied());
            aspect_trie.insert_spans(run);
        }
        aspect_trie.insert(&self.null_tokens);
        SentenceConstraints {
            grammar: self,
            mode,
            aspect_bag: sentence_bag,
            aspect_trie,
        }
    }

    /// Next element letter after `prev` under this task.
    fn successor(&self, prev: Option<Letter>) -> Letter {
        let elements = self.task.elements();
        match prev.and_then(Letter::element) {
            None => Letter::from(elements[0]),
            Some(e) => elements
                .iter()
                .find(|&&next| next > e)
                .map(|&next| Letter::from(next))
                .unwrap_or(Letter::Separator),
        }
    }

    fn is_last(&self, element: Element) -> bool {
        self.task.elements().last() == Some(&element)
    }
}

/// Constraints for decoding one sentence.
#[derive(Debug, Clone)]
pub struct SentenceConstraints<'g> {
    grammar: &'g Grammar,
    mode: ConstraintMode,
    aspect_bag: BTreeSet<TokenId>,
    aspect_trie: TokenTrie,
}

impl<'g> SentenceConstraints<'g> {
    pub fn grammar(&self) -> &'g Grammar {
        self.grammar
    }

    pub fn mode(&self) -> ConstraintMode {
        self.mode
    }

    /// Tokens an aspect span may draw from (sentence tokens plus the null phrase).
    pub fn aspect_bag(&self) -> &BTreeSet<TokenId> {
        &self.aspect_bag
    }

    pub fn allowed_next(&self, state: &DecoderState) -> Result<CandidateSet, ConstraintError> {
        self.explain(state).map(|(_, c)| c)
    }

    /// Matched row and candidates for `state`.
    pub fn explain(&self, state: &DecoderState) -> Result<(Row, CandidateSet), ConstraintError> {
        if let Some(position) = self.misordered_marker(state) {
            return Err(ConstraintError::Unreachable {
                position,
                reason: "marker out of task order".into(),
            });
        }
        if self.mode == ConstraintMode::Trie && cfg!(debug_assertions) {
            if let Some(position) = self.replay(state.generated()) {
                return Err(ConstraintError::Unreachable {
                    position,
                    reason: "prefix leaves the trie-mode language".into(),
                });
            }
        }
        self.candidates(state)
    }

    fn candidates(&self, state: &DecoderState) -> Result<(Row, CandidateSet), ConstraintError> {
        let g = self.grammar;
        let m = &g.markers;
        match state.phase {
            Phase::Empty => Ok((Row::Start, CandidateSet::only(m.open))),
            Phase::Finished => Err(ConstraintError::Finished),
            Phase::Malformed { at } => Err(ConstraintError::Unreachable {
                position: at,
                reason: "marker structure broken".into(),
            }),
            Phase::Open => {
                let next = g.successor(state.last_special);
                Ok((Row::after_open(state.last_special), CandidateSet::only(m.letter_id(next))))
            }
            Phase::Letter(_) => Ok((Row::PendingClose, CandidateSet::only(m.close))),
            Phase::Content { letter: Letter::Separator, .. } => Ok((Row::AfterSeparator, CandidateSet::only(m.open))),
            Phase::Content { letter, start } => {
                let element = letter.element().expect("separator handled above");
                let span = &state.generated[start..];
                let (first, last) = (span.is_empty(), g.is_last(element));
                let row = if first { Row::start(element) } else { Row::cont(element) };
                let set = match self.mode {
                    ConstraintMode::Bag => {
                        let mut allowed = match element {
                            Element::Aspect => self.aspect_bag.clone(),
                            Element::Category => g.category_bag.clone(),
                            Element::Polarity => g.polarity_bag.clone(),
                        };
                        if !first {
                            allowed.insert(m.open);
                        }
                        CandidateSet {
                            allowed,
                            allow_eos: !first && last,
                        }
                    }
                    ConstraintMode::Trie => {
                        let trie = self.trie(element);
                        if !trie.has_prefix(span) {
                            return Err(ConstraintError::Unreachable {
                                position: state.generated.len().saturating_sub(1),
                                reason: format!("span is not a prefix of any {element} phrase"),
                            });
                        }
                        let mut allowed = trie.continuations(span);
                        let terminal = !first && trie.is_terminal(span);
                        if terminal {
                            allowed.insert(m.open);
                        }
                        CandidateSet {
                            allowed,
                            allow_eos: terminal && last,
                        }
                    }
                };
                Ok((row, set))
            }
        }
    }

    fn trie(&self, element: Element) -> &TokenTrie {
        match element {
            Element::Aspect => &self.aspect_trie,
            Element::Category => &self.grammar.category_trie,
            Element::Polarity => &self.grammar.polarity_trie,
        }
    }

    /// Position of the latest marker letter if it does not follow the
    /// previous one in task order.
    fn misordered_marker(&self, state: &DecoderState) -> Option<usize> {
        let (letter, prior) = match state.phase {
            Phase::Content { letter, .. } => (letter, state.prev_special),
            Phase::Letter(letter) => (letter, state.last_special),
            _ => return None,
        };
        (self.grammar.successor(prior) != letter).then(|| state.last_open_position.map_or(0, |p| p + 1))
    }

    /// Position of the first token outside the candidate set, if any.
    pub fn replay(&self, tokens: &[TokenId]) -> Option<usize> {
        let eos = self.grammar.eos();
        let mut state = DecoderState::new();
        for (i, &tok) in tokens.iter().enumerate() {
            match self.candidates(&state) {
                Ok((_, c)) if c.contains(tok, eos) => state.push(tok, &self.grammar.markers),
                _ => return Some(i),
            }
        }
        None
    }

    /// Checked step: the token must be a current candidate.
    pub fn advance(&self, state: &DecoderState, token: TokenId) -> Result<DecoderState, ConstraintError> {
        let (row, candidates) = self.explain(state)?;
        if !candidates.contains(token, self.grammar.eos()) {
            return Err(ConstraintError::Violation { token, row });
        }
        let mut next = state.clone();
        next.push(token, &self.grammar.markers);
        Ok(next)
    }

    /// Candidates after a raw id prefix, with range checking. This is the
    /// primitive-only surface used by language bindings.
    pub fn candidates_for_prefix(&self, prefix: &[TokenId]) -> Result<CandidateSet, ConstraintError> {
        if let Some(&id) = prefix.iter().find(|&&id| id as usize >= self.grammar.vocab_size) {
            return Err(VocabError::OutOfRange {
                id,
                size: self.grammar.vocab_size,
            }
            .into());
        }
        let state = DecoderState::from_tokens(prefix, &self.grammar.markers);
        self.allowed_next(&state)
    }
}
