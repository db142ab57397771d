//! Text normalization used for grounding checks, distractor distinctness and
//! dedup keys: lowercase, collapse whitespace, strip terminal punctuation.

pub fn normalize_span(s: &str) -> String {
    let collapsed = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed
        .trim_matches(|c: char| c.is_whitespace() || is_terminal_punct(c))
        .to_string()
}

fn is_terminal_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '…' | '"' | '\'' | '“' | '”' | '‘' | '’' | '(' | ')' | '[' | ']')
}

/// Lowercased, whitespace-collapsed copy of `s`, plus for each output byte the
/// byte offset in `s` it came from.
pub(crate) fn folded_with_offsets(s: &str) -> (String, Vec<usize>) {
    let mut out = String::with_capacity(s.len());
    let mut map = Vec::with_capacity(s.len());
    let mut pending_space: Option<usize> = None;
    for (i, c) in s.char_indices() {
        if c.is_whitespace() {
            if !out.is_empty() && pending_space.is_none() {
                pending_space = Some(i);
            }
            continue;
        }
        if let Some(at) = pending_space.take() {
            out.push(' ');
            map.push(at);
        }
        for lc in c.to_lowercase() {
            let before = out.len();
            out.push(lc);
            map.extend(std::iter::repeat(i).take(out.len() - before));
        }
    }
    (out, map)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_normalization() {
        assert_eq!(normalize_span("  Paris. "), "paris");
        assert_eq!(normalize_span("The  Eiffel\nTower!"), "the eiffel tower");
        assert_eq!(normalize_span("\"quoted\""), "quoted");
        assert_eq!(normalize_span("U.S."), "u.s");
    }

    #[test]
    fn offsets_track_source() {
        let (f, map) = folded_with_offsets("A  Bc");
        assert_eq!(f, "a bc");
        assert_eq!(map, vec![0, 1, 3, 4]);
    }
}
