//! Schema-guided constrained decoding for generative aspect-based sentiment
//! analysis.
//!
//! Sentences are paired with marker-linearized targets such as
//! `[A] soup [C] food quality [P] great`; a per-step state machine restricts
//! generation so that outputs always parse back into tuples; predictions are
//! scored with exact-match micro-F1.

pub mod codec;
pub mod constraint;
pub mod corpus;
pub mod decode;
pub mod llm;
pub mod metrics;
pub mod schema;
pub mod vocab;

pub use codec::{build_input, build_target, parse_output, Diagnostic, DiagnosticKind, InputSequence, ParsedOutput, Record};
pub use constraint::{CandidateSet, ConstraintMode, DecoderState, Grammar, Row, SentenceConstraints};
pub use schema::{AspectTerm, Category, Element, Polarity, SchemaConfig, SentimentTuple, Task};
pub use vocab::{PieceVocab, TokenId, TokenTrie, Vocabulary, WhitespaceVocab};
