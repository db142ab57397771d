//! Corpus loading and segmentation.

mod load;
mod segment;
pub mod tokenizer;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use load::{load_corpus, Corpus, CorpusFormat, Diagnostic, LoadOptions, OnError};
pub use segment::{
    normalize_text, segment_by_budget, segment_structural, BudgetSegmenter, DelimiterSpec, Segmenter,
    StructuralSegmenter, DEFAULT_MAX_TOKENS, MIN_SEGMENT_TOKENS,
};
pub use tokenizer::{count_tokens, tokenize, TOKENIZER_NAME};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    MalformedLine { path: PathBuf, line: usize, reason: String },
    #[error("document {doc_id} is empty after whitespace normalization")]
    EmptyDocument { doc_id: String },
    #[error("invalid delimiter regex: {0}")]
    InvalidRegex(String),
    #[error("max_tokens {max_tokens} is below the floor of {floor}")]
    BudgetTooSmall { max_tokens: usize, floor: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_uri: String,
    pub text: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

/// A token-budgeted slice of a document; one unit of QA generation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub segment_id: String,
    pub doc_id: String,
    pub index: usize,
    pub text: String,
    pub token_count: usize,
}

impl Segment {
    /// Segment ids are `<doc_id>#<index>`.
    pub fn make_id(doc_id: &str, index: usize) -> String {
        format!("{doc_id}#{index}")
    }

    /// Recover the document id from a segment id.
    pub fn doc_id_of(segment_id: &str) -> &str {
        segment_id.rsplit_once('#').map_or(segment_id, |(d, _)| d)
    }
}
