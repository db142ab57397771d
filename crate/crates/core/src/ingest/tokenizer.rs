//! Default token counter.
//!
//! Text is split on Unicode whitespace. Inside each whitespace-delimited chunk
//! a token is either a maximal run of alphanumeric characters, a single
//! punctuation or symbol character, or a clitic: an apostrophe that directly
//! follows a letter and is followed by letters (`'t`, `'s`, `'ll`). So
//! `"don't stop"` is `don`, `'t`, `stop`.

use std::ops::Range;

/// Name recorded in run manifests for this tokenizer.
pub const TOKENIZER_NAME: &str = "unicode-ws-punct/v1";

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || is_mark(c)
}

// Combining marks stay attached to the preceding word.
fn is_mark(c: char) -> bool {
    matches!(c as u32, 0x0300..=0x036F | 0x1AB0..=0x1AFF | 0x1DC0..=0x1DFF | 0x20D0..=0x20FF | 0xFE20..=0xFE2F)
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Byte ranges of every token in `text`, in order.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let end_of = |i: usize| chars.get(i).map(|&(b, _)| b).unwrap_or(text.len());
    let mut i = 0;
    while i < chars.len() {
        let (start, c) = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if is_word_char(c) {
            let mut j = i + 1;
            while j < chars.len() && is_word_char(chars[j].1) {
                j += 1;
            }
            spans.push(start..end_of(j));
            i = j;
            continue;
        }
        let after_letter = i > 0 && chars[i - 1].1.is_alphabetic();
        let before_letter = chars.get(i + 1).is_some_and(|&(_, n)| n.is_alphabetic());
        if is_apostrophe(c) && after_letter && before_letter {
            let mut j = i + 1;
            while j < chars.len() && is_word_char(chars[j].1) {
                j += 1;
            }
            spans.push(start..end_of(j));
            i = j;
            continue;
        }
        spans.push(start..end_of(i + 1));
        i += 1;
    }
    spans
}

pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text).into_iter().map(|r| &text[r]).collect()
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_is_zero() {
        assert_eq!(count_tokens(""), 0);
        assert_eq!(count_tokens("   \n\t"), 0);
    }

    #[test]
    fn hello_world_is_two() {
        assert_eq!(count_tokens("hello world"), 2);
    }

    #[test]
    fn contraction_splits_clitic() {
        assert_eq!(tokenize("don't stop"), vec!["don", "'t", "stop"]);
        assert_eq!(count_tokens("don't stop"), 3);
    }

    #[test]
    fn punctuation_detaches() {
        assert_eq!(tokenize("Hello, world!"), vec!["Hello", ",", "world", "!"]);
        assert_eq!(tokenize("'quoted'"), vec!["'", "quoted", "'"]);
        assert_eq!(tokenize("3.14"), vec!["3", ".", "14"]);
    }

    #[test]
    fn unicode_words() {
        assert_eq!(tokenize("naïve café — über"), vec!["naïve", "café", "—", "über"]);
        assert_eq!(tokenize("東京 タワー"), vec!["東京", "タワー"]);
    }

    proptest! {
        #[test]
        fn monotone_under_concatenation(a in "\\PC{0,40}", b in "\\PC{0,40}") {
            let joined = format!("{a}{b}");
            let n = count_tokens(&joined);
            prop_assert!(n >= count_tokens(&a).max(count_tokens(&b)));
        }

        #[test]
        fn spans_are_ordered_and_nonempty(s in "\\PC{0,60}") {
            let spans = token_spans(&s);
            let mut last = 0;
            for r in spans {
                prop_assert!(r.start >= last && r.end > r.start);
                prop_assert!(s.is_char_boundary(r.start) && s.is_char_boundary(r.end));
                last = r.end;
            }
        }
    }
}
