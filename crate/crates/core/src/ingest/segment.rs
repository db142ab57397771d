//! Budgeted segmentation.
//!
//! The default strategy is a deterministic greedy sentence packer: text is cut
//! after sentence-final punctuation followed by whitespace, and sentences are
//! appended to the open segment while the token budget allows. A sentence that
//! alone exceeds the budget is hard-split at token boundaries. Structural
//! segmentation cuts at delimiters first and falls back to the packer for
//! oversized pieces.

use std::ops::Range;

use regex::Regex;
use tracing::warn;

use super::tokenizer::{count_tokens, token_spans};
use super::{Document, IngestError, Segment};

/// Smallest accepted token budget; documents below it pass through whole.
pub const MIN_SEGMENT_TOKENS: usize = 16;
pub const DEFAULT_MAX_TOKENS: usize = 256;

/// Anything that can partition a document into segments.
///
/// Implementations must be deterministic and must keep every segment within
/// their configured budget.
pub trait Segmenter: Send + Sync {
    fn segment(&self, doc: &Document) -> Result<Vec<Segment>, IngestError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DelimiterSpec {
    BlankLine,
    /// Markdown `#` headings or lines starting with `Chapter`/`Section`.
    HeadingRegex,
    Custom(String),
}

impl DelimiterSpec {
    fn regex(&self) -> Result<Regex, IngestError> {
        let pattern = match self {
            DelimiterSpec::BlankLine => r"\n[ \t]*\n\s*",
            DelimiterSpec::HeadingRegex => r"(?m)^(?:#{1,6}[ \t]|(?:Chapter|CHAPTER|Section|SECTION)[ \t]+\S)",
            DelimiterSpec::Custom(p) => p.as_str(),
        };
        Regex::new(pattern).map_err(|e| IngestError::InvalidRegex(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct BudgetSegmenter {
    pub max_tokens: usize,
}

impl Segmenter for BudgetSegmenter {
    fn segment(&self, doc: &Document) -> Result<Vec<Segment>, IngestError> {
        segment_by_budget(doc, self.max_tokens)
    }
}

#[derive(Debug, Clone)]
pub struct StructuralSegmenter {
    pub delimiter: DelimiterSpec,
    pub max_tokens: usize,
}

impl Segmenter for StructuralSegmenter {
    fn segment(&self, doc: &Document) -> Result<Vec<Segment>, IngestError> {
        segment_structural(doc, &self.delimiter, self.max_tokens)
    }
}

/// Line-ending and outer-whitespace normalization applied before segmentation.
pub fn normalize_text(text: &str) -> String {
    text.replace("\r\n", "\n").replace('\r', "\n").trim().to_string()
}

pub fn segment_by_budget(doc: &Document, max_tokens: usize) -> Result<Vec<Segment>, IngestError> {
    check_budget(max_tokens)?;
    let text = normalized(doc)?;
    if let Some(whole) = short_passthrough(doc, &text) {
        return Ok(whole);
    }
    let ranges = pack_range(&text, 0..text.len(), max_tokens);
    Ok(build_segments(doc, &text, ranges))
}

pub fn segment_structural(
    doc: &Document,
    delimiter: &DelimiterSpec,
    max_tokens: usize,
) -> Result<Vec<Segment>, IngestError> {
    check_budget(max_tokens)?;
    let re = delimiter.regex()?;
    let text = normalized(doc)?;
    if let Some(whole) = short_passthrough(doc, &text) {
        return Ok(whole);
    }

    // Cut at the start of each delimiter match; the matched text opens the
    // following piece so nothing but whitespace is lost.
    let mut cuts = vec![0];
    for m in re.find_iter(&text) {
        if m.start() > 0 && m.start() > *cuts.last().unwrap() {
            cuts.push(m.start());
        }
    }
    cuts.push(text.len());

    let mut ranges = Vec::new();
    for w in cuts.windows(2) {
        let Some(piece) = trim_range(&text, w[0]..w[1]) else {
            continue;
        };
        if count_tokens(&text[piece.clone()]) <= max_tokens {
            ranges.push(piece);
        } else {
            ranges.extend(pack_range(&text, piece, max_tokens));
        }
    }
    Ok(build_segments(doc, &text, ranges))
}

fn check_budget(max_tokens: usize) -> Result<(), IngestError> {
    if max_tokens < MIN_SEGMENT_TOKENS {
        return Err(IngestError::BudgetTooSmall { max_tokens, floor: MIN_SEGMENT_TOKENS });
    }
    Ok(())
}

fn normalized(doc: &Document) -> Result<String, IngestError> {
    let text = normalize_text(&doc.text);
    if text.is_empty() {
        return Err(IngestError::EmptyDocument { doc_id: doc.doc_id.clone() });
    }
    Ok(text)
}

fn short_passthrough(doc: &Document, text: &str) -> Option<Vec<Segment>> {
    let n = count_tokens(text);
    if n >= MIN_SEGMENT_TOKENS {
        return None;
    }
    warn!(doc_id = %doc.doc_id, tokens = n, "document shorter than {MIN_SEGMENT_TOKENS} tokens, kept as a single segment");
    Some(build_segments(doc, text, vec![0..text.len()]))
}

fn build_segments(doc: &Document, text: &str, ranges: Vec<Range<usize>>) -> Vec<Segment> {
    ranges
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            let seg_text = text[r].to_string();
            Segment {
                segment_id: Segment::make_id(&doc.doc_id, index),
                doc_id: doc.doc_id.clone(),
                index,
                token_count: count_tokens(&seg_text),
                text: seg_text,
            }
        })
        .collect()
}

fn trim_range(text: &str, r: Range<usize>) -> Option<Range<usize>> {
    let slice = &text[r.clone()];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if trimmed.is_empty() {
        return None;
    }
    let start = r.start + lead;
    Some(start..start + trimmed.len())
}

/// Sentence ranges within `r`: a sentence ends after a run of `.`, `!`, `?`
/// or `…` (plus closing quotes/brackets) that is followed by whitespace.
pub(crate) fn sentence_ranges(text: &str, r: Range<usize>) -> Vec<Range<usize>> {
    let slice = &text[r.clone()];
    let chars: Vec<(usize, char)> = slice.char_indices().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i].1;
        if matches!(c, '.' | '!' | '?' | '…') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '…' | '"' | '\'' | '”' | '’' | ')' | ']') {
                j += 1;
            }
            if j < chars.len() && chars[j].1.is_whitespace() {
                let end = chars[j].0;
                if let Some(s) = trim_range(text, r.start + start..r.start + end) {
                    out.push(s);
                }
                start = end;
            }
            i = j;
        } else {
            i += 1;
        }
    }
    if let Some(s) = trim_range(text, r.start + start..r.end) {
        out.push(s);
    }
    out
}

fn is_clitic(token: &str) -> bool {
    let mut cs = token.chars();
    matches!(cs.next(), Some('\'' | '\u{2019}')) && cs.next().is_some()
}

/// Split `r` into pieces of at most `max_tokens` tokens, cutting only at
/// token boundaries and never directly before a clitic (re-tokenizing a
/// piece that starts with `'t` would count two tokens).
fn hard_split(text: &str, r: Range<usize>, max_tokens: usize) -> Vec<Range<usize>> {
    let spans: Vec<Range<usize>> = token_spans(&text[r.clone()])
        .into_iter()
        .map(|s| s.start + r.start..s.end + r.start)
        .collect();
    let mut out = Vec::new();
    let mut k = 0;
    while k < spans.len() {
        let mut e = (k + max_tokens).min(spans.len());
        while e < spans.len()
            && e > k + 1
            && spans[e - 1].end == spans[e].start
            && is_clitic(&text[spans[e].clone()])
        {
            e -= 1;
        }
        out.push(spans[k].start..spans[e - 1].end);
        k = e;
    }
    out
}

fn pack_range(text: &str, r: Range<usize>, max_tokens: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = Vec::new();
    let mut open: Option<(Range<usize>, usize)> = None;

    for sentence in sentence_ranges(text, r) {
        let n = count_tokens(&text[sentence.clone()]);
        if n > max_tokens {
            if let Some((cur, _)) = open.take() {
                out.push(cur);
            }
            let mut pieces = hard_split(text, sentence, max_tokens);
            let last = pieces.pop().expect("oversized sentence yields pieces");
            out.extend(pieces);
            let last_n = count_tokens(&text[last.clone()]);
            open = Some((last, last_n));
            continue;
        }
        open = match open.take() {
            Some((cur, used)) if used + n <= max_tokens => Some((cur.start..sentence.end, used + n)),
            Some((cur, _)) => {
                out.push(cur);
                Some((sentence, n))
            }
            None => Some((sentence, n)),
        };
    }
    if let Some((cur, _)) = open {
        out.push(cur);
    }
    out
}
