//! i2b2/VA 2010 style standoff annotations and a synthetic corpus in the
//! same format.
//!
//! A document is a triple of files: `<id>.txt` with one sentence per line,
//! `<id>.con` with concept lines and `<id>.rel` with relation lines. Token
//! coordinates are `line:token`, lines 1-based, tokens 0-based, where tokens
//! are the whitespace-separated words of the line. See `docs/formats.md`.

mod schema;
mod standoff;
mod synthetic;

pub use schema::{PairFamily, RelationLabel, RelationSchema};
pub use standoff::{
    parse_concepts, parse_document, parse_relations, read_corpus_dir, serialize, write_document,
    Concept, DocumentFiles, Relation, StandoffDocument,
};
pub use synthetic::{generate_synthetic_corpus, GrammarConfig, Template, TEMPLATES};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("{file} line {line}: malformed annotation: {text}")]
    Parse {
        file: &'static str,
        line: usize,
        text: String,
    },
    #[error("{file} line {line}: {message}")]
    Validation {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error(
        "{file} line {line}: relation crosses sentence boundary ({first_line} vs {second_line})"
    )]
    CrossSentence {
        file: &'static str,
        line: usize,
        first_line: usize,
        second_line: usize,
    },
    #[error("document {doc_id}: {message}")]
    Invariant { doc_id: String, message: String },
    #[error("document {doc_id}: {source}")]
    InDocument {
        doc_id: String,
        #[source]
        source: Box<CodecError>,
    },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CodecError {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CodecError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}
