//! Lexical overlap metrics. All scores are percentages in [0, 100].

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

use crate::ingest::tokenize;

/// Answer normalization used by F1 and EM: lowercase, drop ASCII
/// punctuation, drop the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    static ARTICLES: OnceLock<Regex> = OnceLock::new();
    let articles = ARTICLES.get_or_init(|| Regex::new(r"\b(a|an|the)\b").unwrap());
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    let no_articles = articles.replace_all(&no_punct, " ");
    no_articles.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn counts<'a, T: std::hash::Hash + Eq + 'a>(items: impl IntoIterator<Item = T>) -> HashMap<T, usize> {
    let mut m = HashMap::new();
    for it in items {
        *m.entry(it).or_insert(0) += 1;
    }
    m
}

fn overlap<T: std::hash::Hash + Eq>(a: &HashMap<T, usize>, b: &HashMap<T, usize>) -> usize {
    a.iter().map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0))).sum()
}

fn f_measure(hits: usize, n_pred: usize, n_gold: usize) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    let p = hits as f64 / n_pred as f64;
    let r = hits as f64 / n_gold as f64;
    100.0 * 2.0 * p * r / (p + r)
}

pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => return 100.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    f_measure(overlap(&counts(pt.iter()), &counts(gt.iter())), pt.len(), gt.len())
}

pub fn exact_match(pred: &str, gold: &str) -> f64 {
    if normalize_answer(pred) == normalize_answer(gold) {
        100.0
    } else {
        0.0
    }
}

/// ROUGE tokens: lowercase, every non-alphanumeric char is a separator.
pub fn rouge_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Longest common subsequence length, O(|a|·|b|) time, O(|b|) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l(pred: &str, gold: &str) -> f64 {
    let p = rouge_tokens(pred);
    let g = rouge_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return 100.0;
    }
    if p.is_empty() || g.is_empty() {
        return 0.0;
    }
    f_measure(lcs_len(&p, &g), p.len(), g.len())
}

fn ngrams<T>(toks: &[T], n: usize) -> impl Iterator<Item = &[T]> {
    toks.windows(n.max(1)).filter(move |_| toks.len() >= n)
}

/// N-gram overlap F-measure. Inputs shorter than `n` score 0 unless the two
/// token sequences are identical.
pub fn rouge_n(pred: &str, gold: &str, n: usize) -> f64 {
    assert!(n >= 1, "rouge_n needs n >= 1");
    let p = rouge_tokens(pred);
    let g = rouge_tokens(gold);
    if p.len() < n || g.len() < n {
        return if p == g { 100.0 } else { 0.0 };
    }
    let pc = counts(ngrams(&p, n));
    let gc = counts(ngrams(&g, n));
    f_measure(overlap(&pc, &gc), p.len() + 1 - n, g.len() + 1 - n)
}

pub fn bleu_tokens(s: &str) -> Vec<String> {
    tokenize(&s.to_lowercase()).into_iter().map(String::from).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BleuBreakdown {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub pred_len: usize,
    pub ref_len: usize,
}

/// Corpus BLEU with uniform weights over orders 1..=max_n.
///
/// An order with zero clipped matches uses `1 / (total + 1)` as its
/// precision (add-one on the empty count); orders with matches are
/// unsmoothed. Brevity penalty is `exp(1 - r/c)` when `c <= r`.
pub fn bleu_detail(preds: &[&str], golds: &[&str], max_n: usize) -> Option<BleuBreakdown> {
    if preds.len() != golds.len() || max_n == 0 {
        return None;
    }
    let pt: Vec<Vec<String>> = preds.iter().map(|s| bleu_tokens(s)).collect();
    let gt: Vec<Vec<String>> = golds.iter().map(|s| bleu_tokens(s)).collect();
    let c: usize = pt.iter().map(Vec::len).sum();
    let r: usize = gt.iter().map(Vec::len).sum();
    if c == 0 {
        let score = if r == 0 { 100.0 } else { 0.0 };
        return Some(BleuBreakdown {
            score,
            precisions: vec![score / 100.0; max_n],
            brevity_penalty: 1.0,
            pred_len: 0,
            ref_len: r,
        });
    }
    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (mut hits, mut total) = (0usize, 0usize);
        for (p, g) in pt.iter().zip(&gt) {
            let pc = counts(ngrams(p, n));
            hits += overlap(&pc, &counts(ngrams(g, n)));
            total += pc.values().sum::<usize>();
        }
        precisions.push(if hits == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            hits as f64 / total as f64
        });
    }
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Some(BleuBreakdown {
        score: (100.0 * bp * log_mean.exp()).clamp(0.0, 100.0),
        precisions,
        brevity_penalty: bp,
        pred_len: c,
        ref_len: r,
    })
}

pub fn bleu(preds: &[&str], golds: &[&str], max_n: usize) -> Option<f64> {
    bleu_detail(preds, golds, max_n).map(|b| b.score)
}
