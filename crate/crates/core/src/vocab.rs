//! Tokenizer surface, marker token contract, and token tries.
//!
//! Two vocabularies ship with the crate. [`WhitespaceVocab`] splits on
//! whitespace and peels `[`/`]` off as their own tokens; it exists for tests
//! and closed lexicons. [`PieceVocab`] mirrors a subword vocabulary file (one
//! piece per line, id = zero-based line number) and encodes with greedy
//! longest-match over sentencepiece-style pieces, where `▁` marks a word start.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::schema::{Element, SchemaConfig};

pub type TokenId = u32;

pub const EOS_PIECE: &str = "</s>";
pub const UNK_PIECE: &str = "<unk>";
pub const BOS_PIECE: &str = "<s>";
pub const PAD_PIECE: &str = "<pad>";
/// Word-start marker used by sentencepiece vocabularies.
pub const WORD_START: char = '\u{2581}';

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("token id {id} out of range for vocabulary of size {size}")]
    OutOfRange { id: TokenId, size: usize },
    #[error("phrase `{0}` contains pieces outside the vocabulary")]
    UnknownPiece(String),
    #[error("phrase `{0}` encodes to no tokens")]
    EmptyPhrase(String),
    #[error("vocabulary lacks the special piece `{0}`")]
    MissingSpecial(&'static str),
    #[error("piece `{piece}` appears twice (ids {first} and {second})")]
    DuplicatePiece { piece: String, first: TokenId, second: TokenId },
    #[error("vocabulary line {0} is empty")]
    EmptyLine(usize),
    #[error("marker `{marker}` tokenizes as {pieces:?}; expected exactly [open, letter, close]")]
    MarkerTokenization { marker: String, pieces: Vec<String> },
    #[error("markers disagree on the {which} bracket token")]
    InconsistentBracket { which: &'static str },
    #[error("marker letters are not distinct token ids")]
    LetterCollision,
    #[error("cannot read vocabulary: {0}")]
    Io(String),
}

/// Pluggable tokenizer surface. Ids are dense in `[0, size)`.
pub trait Vocabulary: Send + Sync + fmt::Debug {
    fn size(&self) -> usize;
    fn piece(&self, id: TokenId) -> Result<&str, VocabError>;
    fn token_id(&self, piece: &str) -> Option<TokenId>;
    fn encode(&self, text: &str) -> Vec<TokenId>;
    fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError>;
    fn eos_id(&self) -> TokenId;
    fn unk_id(&self) -> TokenId;
    fn bos_id(&self) -> Option<TokenId> {
        None
    }
    /// Control tokens that never render as text.
    fn is_control(&self, id: TokenId) -> bool;
}

#[derive(Debug, Clone)]
struct PieceTable {
    pieces: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    unk: TokenId,
    bos: Option<TokenId>,
    pad: Option<TokenId>,
}

impl PieceTable {
    fn new(pieces: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(VocabError::EmptyLine(i));
            }
            if let Some(&first) = index.get(p) {
                return Err(VocabError::DuplicatePiece {
                    piece: p.clone(),
                    first,
                    second: i as TokenId,
                });
            }
            index.insert(p.clone(), i as TokenId);
        }
        let eos = *index.get(EOS_PIECE).ok_or(VocabError::MissingSpecial(EOS_PIECE))?;
        let unk = *index.get(UNK_PIECE).ok_or(VocabError::MissingSpecial(UNK_PIECE))?;
        let bos = index.get(BOS_PIECE).copied();
        let pad = index.get(PAD_PIECE).copied();
        Ok(PieceTable {
            pieces,
            index,
            eos,
            unk,
            bos,
            pad,
        })
    }

    fn piece(&self, id: TokenId) -> Result<&str, VocabError> {
        self.pieces
            .get(id as usize)
            .map(String::as_str)
            .ok_or(VocabError::OutOfRange {
                id,
                size: self.pieces.len(),
            })
    }

    fn is_control(&self, id: TokenId) -> bool {
        id == self.eos || Some(id) == self.bos || Some(id) == self.pad
    }
}

/// Whole-word vocabulary with `[` and `]` split off as separate tokens.
#[derive(Debug, Clone)]
pub struct WhitespaceVocab {
    table: PieceTable,
}

impl WhitespaceVocab {
    /// Pieces in id order; must include `</s>` and `<unk>`.
    pub fn new<S: Into<String>>(pieces: impl IntoIterator<Item = S>) -> Result<Self, VocabError> {
        Ok(WhitespaceVocab {
            table: PieceTable::new(pieces.into_iter().map(Into::into).collect())?,
        })
    }

    /// Layout `<pad> </s> <unk> [ ]` followed by the sorted, deduplicated words
    /// of `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in pre_tokenize(text) {
                words.insert(w);
            }
        }
        let mut pieces: Vec<String> = [PAD_PIECE, EOS_PIECE, UNK_PIECE, "[", "]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for w in words {
            if !pieces.iter().any(|p| p == w) {
                pieces.push(w.to_string());
            }
        }
        WhitespaceVocab::new(pieces).expect("generated layout has specials and no duplicates")
    }

    /// Lexicon covering every schema string plus the given sentences.
    pub fn for_schema<'a>(cfg: &'a SchemaConfig, sentences: impl IntoIterator<Item = &'a str>) -> Self {
        let mut texts: Vec<&str> = vec![
            cfg.marker(Element::Aspect),
            cfg.marker(Element::Category),
            cfg.marker(Element::Polarity),
            cfg.separator(),
        ];
        for e in [Element::Aspect, Element::Category, Element::Polarity] {
            texts.extend(cfg.phrases(e));
        }
        texts.extend(sentences);
        WhitespaceVocab::from_texts(texts)
    }

    pub fn pieces(&self) -> &[String] {
        &self.table.pieces
    }
}

fn pre_tokenize(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().flat_map(|word| {
        let mut parts = Vec::new();
        let mut start = 0;
        for (i, ch) in word.char_indices() {
            if ch == '[' || ch == ']' {
                if start < i {
                    parts.push(&word[start..i]);
                }
                parts.push(&word[i..i + 1]);
                start = i + 1;
            }
        }
        if start < word.len() {
            parts.push(&word[start..]);
        }
        parts
    })
}

impl Vocabulary for WhitespaceVocab {
    fn size(&self) -> usize {
        self.table.pieces.len()
    }

    fn piece(&self, id: TokenId) -> Result<&str, VocabError> {
        self.table.piece(id)
    }

    fn token_id(&self, piece: &str) -> Option<TokenId> {
        self.table.index.get(piece).copied()
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        pre_tokenize(text)
            .map(|w| self.token_id(w).unwrap_or(self.table.unk))
            .collect()
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        let mut prev: Option<&str> = None;
        for &id in ids {
            let piece = self.table.piece(id)?;
            if self.table.is_control(id) {
                continue;
            }
            if let Some(p) = prev {
                if p != "[" && piece != "]" {
                    out.push(' ');
                }
            }
            out.push_str(piece);
            prev = Some(piece);
        }
        Ok(out)
    }

    fn eos_id(&self) -> TokenId {
        self.table.eos
    }

    fn unk_id(&self) -> TokenId {
        self.table.unk
    }

    fn bos_id(&self) -> Option<TokenId> {
        self.table.bos
    }

    fn is_control(&self, id: TokenId) -> bool {
        self.table.is_control(id)
    }
}

/// Subword vocabulary loaded from a piece-per-line file.
#[derive(Debug, Clone)]
pub struct PieceVocab {
    table: PieceTable,
    max_piece_chars: usize,
}

impl PieceVocab {
    pub fn new<S: Into<String>>(pieces: impl IntoIterator<Item = S>) -> Result<Self, VocabError> {
        let table = PieceTable::new(pieces.into_iter().map(Into::into).collect())?;
        let max_piece_chars = table.pieces.iter().map(|p| p.chars().count()).max().unwrap_or(1);
        Ok(PieceVocab {
            table,
            max_piece_chars,
        })
    }

    /// UTF-8 text, one piece per line, id = zero-based line number. A
    /// trailing newline at end of file does not start a new piece.
    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let body = text.strip_suffix('\n').unwrap_or(text);
        let pieces: Vec<&str> = body
            .split('\n')
            .map(|l| l.strip_suffix('\r').unwrap_or(l))
            .collect();
        PieceVocab::new(pieces)
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| VocabError::Io(format!("{}: {e}", path.display())))?;
        PieceVocab::parse(&text)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let start = chars[i].0;
            let longest = (1..=self.max_piece_chars.min(chars.len() - i)).rev().find_map(|n| {
                let end = chars.get(i + n).map_or(word.len(), |c| c.0);
                self.table.index.get(&word[start..end]).map(|&id| (n, id))
            });
            match longest {
                Some((n, id)) => {
                    out.push(id);
                    i += n;
                }
                None => {
                    out.push(self.table.unk);
                    i += 1;
                }
            }
        }
    }
}

impl Vocabulary for PieceVocab {
    fn size(&self) -> usize {
        self.table.pieces.len()
    }

    fn piece(&self, id: TokenId) -> Result<&str, VocabError> {
        self.table.piece(id)
    }

    fn token_id(&self, piece: &str) -> Option<TokenId> {
        self.table.index.get(piece).copied()
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let word = format!("{WORD_START}{word}");
            self.encode_word(&word, &mut out);
        }
        out
    }

    fn decode(&self, ids: &[TokenId]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            let piece = self.table.piece(id)?;
            if !self.table.is_control(id) {
                out.push_str(piece);
            }
        }
        let text = out.replace(WORD_START, " ");
        Ok(text.strip_prefix(' ').unwrap_or(&text).to_string())
    }

    fn eos_id(&self) -> TokenId {
        self.table.eos
    }

    fn unk_id(&self) -> TokenId {
        self.table.unk
    }

    fn bos_id(&self) -> Option<TokenId> {
        self.table.bos
    }

    fn is_control(&self, id: TokenId) -> bool {
        self.table.is_control(id)
    }
}

/// Letter slot of a marker: the middle token of `[A]`, `[C]`, `[P]`, `[;]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Letter {
    Aspect,
    Category,
    Polarity,
    Separator,
}

impl Letter {
    pub const ALL: [Letter; 4] = [Letter::Aspect, Letter::Category, Letter::Polarity, Letter::Separator];

    pub fn element(self) -> Option<Element> {
        match self {
            Letter::Aspect => Some(Element::Aspect),
            Letter::Category => Some(Element::Category),
            Letter::Polarity => Some(Element::Polarity),
            Letter::Separator => None,
        }
    }
}

impl From<Element> for Letter {
    fn from(e: Element) -> Self {
        match e {
            Element::Aspect => Letter::Aspect,
            Element::Category => Letter::Category,
            Element::Polarity => Letter::Polarity,
        }
    }
}

/// Token ids of the marker pieces under one vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerTokenMap {
    pub open: TokenId,
    pub close: TokenId,
    letters: [TokenId; 4],
    pub eos: TokenId,
}

impl MarkerTokenMap {
    /// Fails unless every marker and the separator encode to exactly
    /// `[open, letter, close]` with shared brackets and distinct letters.
    pub fn new(cfg: &SchemaConfig, vocab: &dyn Vocabulary) -> Result<Self, VocabError> {
        let mut open = None;
        let mut close = None;
        let mut letters = [0; 4];
        for letter in Letter::ALL {
            let marker = match letter.element() {
                Some(e) => cfg.marker(e),
                None => cfg.separator(),
            };
            let ids = vocab.encode(marker);
            let bad = || VocabError::MarkerTokenization {
                marker: marker.to_string(),
                pieces: ids
                    .iter()
                    .map(|&id| vocab.piece(id).unwrap_or("?").to_string())
                    .collect(),
            };
            if ids.len() != 3 || ids.iter().any(|&id| id == vocab.unk_id() || vocab.is_control(id)) {
                return Err(bad());
            }
            if *open.get_or_insert(ids[0]) != ids[0] {
                return Err(VocabError::InconsistentBracket { which: "open" });
            }
            if *close.get_or_insert(ids[2]) != ids[2] {
                return Err(VocabError::InconsistentBracket { which: "close" });
            }
            letters[letter as usize] = ids[1];
        }
        let (open, close) = (open.unwrap(), close.unwrap());
        let mut all: Vec<TokenId> = letters.to_vec();
        all.extend([open, close, vocab.eos_id()]);
        all.sort_unstable();
        all.dedup();
        if all.len() != 7 {
            return Err(VocabError::LetterCollision);
        }
        Ok(MarkerTokenMap {
            open,
            close,
            letters,
            eos: vocab.eos_id(),
        })
    }

    pub fn letter_id(&self, letter: Letter) -> TokenId {
        self.letters[letter as usize]
    }

    pub fn letter_of(&self, id: TokenId) -> Option<Letter> {
        Letter::ALL.into_iter().find(|&l| self.letter_id(l) == id)
    }

    /// Token sequence of a full marker, e.g. `[A]`.
    pub fn marker_tokens(&self, letter: Letter) -> [TokenId; 3] {
        [self.open, self.letter_id(letter), self.close]
    }
}

type NodeId = usize;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct TrieNode {
    children: BTreeMap<TokenId, NodeId>,
    terminal: bool,
}

/// Prefix tree over token-id sequences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTrie {
    nodes: Vec<TrieNode>,
}

impl Default for TokenTrie {
    fn default() -> Self {
        TokenTrie {
            nodes: vec![TrieNode::default()],
        }
    }
}

impl TokenTrie {
    const ROOT: NodeId = 0;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, seq: &[TokenId]) {
        let node = self.insert_path(seq, false);
        self.nodes[node].terminal = true;
    }

    fn insert_path(&mut self, seq: &[TokenId], mark_all: bool) -> NodeId {
        let mut node = Self::ROOT;
        for &tok in seq {
            node = match self.nodes[node].children.get(&tok) {
                Some(&next) => next,
                None => {
                    let next = self.nodes.len();
                    self.nodes.push(TrieNode::default());
                    self.nodes[node].children.insert(tok, next);
                    next
                }
            };
            if mark_all {
                self.nodes[node].terminal = true;
            }
        }
        node
    }

    /// Every non-empty contiguous subsequence of `tokens` as a terminal entry.
    pub fn insert_spans(&mut self, tokens: &[TokenId]) {
        for start in 0..tokens.len() {
            self.insert_path(&tokens[start..], true);
        }
    }

    fn node(&self, prefix: &[TokenId]) -> Option<NodeId> {
        prefix
            .iter()
            .try_fold(Self::ROOT, |node, tok| self.nodes[node].children.get(tok).copied())
    }

    /// True if `prefix` is a prefix of some inserted sequence (or empty).
    pub fn has_prefix(&self, prefix: &[TokenId]) -> bool {
        self.node(prefix).is_some()
    }

    /// Child token ids after `prefix`; empty when `prefix` leaves the trie.
    pub fn continuations(&self, prefix: &[TokenId]) -> BTreeSet<TokenId> {
        self.node(prefix)
            .map(|n| self.nodes[n].children.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn is_terminal(&self, prefix: &[TokenId]) -> bool {
        self.node(prefix).is_some_and(|n| self.nodes[n].terminal)
    }

    pub fn contains(&self, seq: &[TokenId]) -> bool {
        self.is_terminal(seq)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes[Self::ROOT].children.is_empty() && !self.nodes[Self::ROOT].terminal
    }

    /// All accepted sequences in lexicographic order.
    pub fn sequences(&self) -> Vec<Vec<TokenId>> {
        let mut out = Vec::new();
        let mut path = Vec::new();
        self.collect(Self::ROOT, &mut path, &mut out);
        out
    }

    fn collect(&self, node: NodeId, path: &mut Vec<TokenId>, out: &mut Vec<Vec<TokenId>>) {
        if self.nodes[node].terminal {
            out.push(path.clone());
        }
        for (&tok, &child) in &self.nodes[node].children {
            path.push(tok);
            self.collect(child, path, out);
            path.pop();
        }
    }
}

/// Trie accepting exactly the encodings of `phrases`.
pub fn build_trie<S: AsRef<str>>(phrases: &[S], vocab: &dyn Vocabulary) -> Result<TokenTrie, VocabError> {
    let mut trie = TokenTrie::new();
    for phrase in phrases {
        let phrase = phrase.as_ref();
        let ids = vocab.encode(phrase);
        if ids.is_empty() {
            return Err(VocabError::EmptyPhrase(phrase.to_string()));
        }
        if ids.contains(&vocab.unk_id()) {
            return Err(VocabError::UnknownPiece(phrase.to_string()));
        }
        trie.insert(&ids);
    }
    Ok(trie)
}

/// Distinct token ids of the encoded sentence.
pub fn sentence_token_bag(sentence: &str, vocab: &dyn Vocabulary) -> BTreeSet<TokenId> {
    vocab.encode(sentence).into_iter().collect()
}
