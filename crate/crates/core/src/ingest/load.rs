use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use tracing::warn;

use super::segment::normalize_text;
use super::{Document, IngestError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    PlainText,
    JsonlWithTextField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OnError {
    #[default]
    Abort,
    Skip,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub format: CorpusFormat,
    pub text_field: String,
    /// Optional record field used as the document id (jsonl only).
    pub id_field: Option<String>,
    pub on_error: OnError,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            format: CorpusFormat::PlainText,
            text_field: "text".into(),
            id_field: None,
            on_error: OnError::Abort,
        }
    }
}

/// A skipped input, reported instead of aborting under [`OnError::Skip`].
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub path: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

#[derive(Debug, Default)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub diagnostics: Vec<Diagnostic>,
}

pub fn load_corpus(paths: &[PathBuf], opts: &LoadOptions) -> Result<Corpus, IngestError> {
    let mut corpus = Corpus::default();
    let mut seen: HashMap<String, usize> = HashMap::new();

    for path in paths {
        let raw = fs::read_to_string(path).map_err(|source| IngestError::Unreadable {
            path: path.clone(),
            source,
        })?;
        let file_name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "doc".into());

        let mut push = |corpus: &mut Corpus, mut doc: Document| {
            let n = seen.entry(doc.doc_id.clone()).or_insert(0);
            *n += 1;
            if *n > 1 {
                doc.doc_id = format!("{}~{}", doc.doc_id, n);
            }
            corpus.documents.push(doc);
        };

        match opts.format {
            CorpusFormat::PlainText => {
                if normalize_text(&raw).is_empty() {
                    fail(&mut corpus, opts, path, None, "document is empty".into())?;
                    continue;
                }
                let mut metadata = BTreeMap::new();
                metadata.insert("source".to_string(), file_name.clone());
                metadata.insert("record_index".to_string(), "0".to_string());
                push(
                    &mut corpus,
                    Document {
                        doc_id: stem.clone(),
                        source_uri: path.display().to_string(),
                        text: raw,
                        metadata,
                    },
                );
            }
            CorpusFormat::JsonlWithTextField => {
                let mut record_index = 0usize;
                for (lineno, line) in raw.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let index = record_index;
                    record_index += 1;
                    match parse_record(line, opts) {
                        Ok((id, text, mut metadata)) => {
                            metadata.insert("source".to_string(), file_name.clone());
                            metadata.insert("record_index".to_string(), index.to_string());
                            push(
                                &mut corpus,
                                Document {
                                    doc_id: id.unwrap_or_else(|| format!("{stem}-{index}")),
                                    source_uri: format!("{}#{}", path.display(), lineno + 1),
                                    text,
                                    metadata,
                                },
                            );
                        }
                        Err(reason) => fail(&mut corpus, opts, path, Some(lineno + 1), reason)?,
                    }
                }
            }
        }
    }
    Ok(corpus)
}

fn fail(
    corpus: &mut Corpus,
    opts: &LoadOptions,
    path: &Path,
    line: Option<usize>,
    message: String,
) -> Result<(), IngestError> {
    match opts.on_error {
        OnError::Abort => Err(IngestError::MalformedLine {
            path: path.to_path_buf(),
            line: line.unwrap_or(0),
            reason: message,
        }),
        OnError::Skip => {
            warn!(path = %path.display(), line = ?line, "skipping input: {message}");
            corpus.diagnostics.push(Diagnostic {
                path: path.to_path_buf(),
                line,
                message,
            });
            Ok(())
        }
    }
}

type Record = (Option<String>, String, BTreeMap<String, String>);

fn parse_record(line: &str, opts: &LoadOptions) -> Result<Record, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("malformed json: {e}"))?;
    let Value::Object(map) = value else {
        return Err("record is not a JSON object".into());
    };
    let text = match map.get(&opts.text_field) {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(format!("field `{}` is not a string", opts.text_field)),
        None => return Err(format!("missing text field `{}`", opts.text_field)),
    };
    if normalize_text(&text).is_empty() {
        return Err(format!("field `{}` is empty", opts.text_field));
    }
    let id = match &opts.id_field {
        Some(f) => match map.get(f) {
            Some(Value::String(s)) => Some(s.clone()),
            Some(Value::Number(n)) => Some(n.to_string()),
            _ => return Err(format!("missing id field `{f}`")),
        },
        None => None,
    };
    let metadata = map
        .iter()
        .filter(|(k, _)| **k != opts.text_field)
        .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
        .collect();
    Ok((id, text, metadata))
}
