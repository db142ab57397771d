//! Ratio-controlled dataset composition.
//!
//! `mix` keeps `floor(f * |I|)` implicit and `floor(g * |E|)` explicit pairs,
//! each drawn uniformly without replacement. Fractions are quantized to
//! millionths before the floor so that, for example, `0.29 * 100` counts 29
//! rather than 28.

use std::collections::{BTreeMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generation::{QAPair, QType};
use crate::ingest::Segment;

const MICRO: u128 = 1_000_000;

const STREAM_IMPLICIT: u64 = 1;
const STREAM_EXPLICIT: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionConfig {
    pub implicit_fraction: f64,
    pub explicit_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub shuffle: bool,
    /// Allocate each type's quota across segments in proportion to their size.
    #[serde(default)]
    pub stratify: bool,
}

impl CompositionConfig {
    pub fn new(implicit_fraction: f64, explicit_fraction: f64, seed: u64) -> Self {
        Self {
            implicit_fraction,
            explicit_fraction,
            seed,
            shuffle: false,
            stratify: false,
        }
    }

    pub fn validate(&self) -> Result<(), ComposeError> {
        for f in [self.implicit_fraction, self.explicit_fraction] {
            if !(0.0..=1.0).contains(&f) {
                return Err(ComposeError::InvalidFraction(f));
            }
        }
        if self.implicit_fraction == 0.0 && self.explicit_fraction == 0.0 {
            return Err(ComposeError::BothZero);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionReport {
    pub n_implicit_pool: usize,
    pub n_explicit_pool: usize,
    pub n_implicit_sampled: usize,
    pub n_explicit_sampled: usize,
    pub n_total: usize,
    pub per_document_histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ComposeError {
    #[error("fraction {0} outside [0, 1]")]
    InvalidFraction(f64),
    #[error("both fractions are zero")]
    BothZero,
    #[error("composition is empty")]
    EmptyResult,
    #[error("duplicate qa_id {0} in pool")]
    DuplicateId(String),
}

/// `floor(fraction * n)` with the fraction rounded to millionths first.
pub fn quota(fraction: f64, n: usize) -> usize {
    let micros = (fraction.clamp(0.0, 1.0) * MICRO as f64).round() as u128;
    (micros * n as u128 / MICRO) as usize
}

fn sample_sorted(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut picked = index::sample(rng, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Split `k` across strata of the given sizes: proportional floors, then the
/// remainder goes to the largest fractional parts (earlier stratum on ties).
fn allocate(k: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| k * s / n).collect();
    let mut left = k - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse((k * sizes[i]) % n));
    for i in order {
        if left == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    alloc
}

/// Pool positions of the sampled pairs of one type, ascending.
fn pick(pool: &[QAPair], members: &[usize], k: usize, stratify: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if !stratify {
        return sample_sorted(members.len(), k, rng).into_iter().map(|i| members[i]).collect();
    }
    let mut strata: Vec<(&str, Vec<usize>)> = Vec::new();
    for &m in members {
        let sid = pool[m].segment_id.as_str();
        match strata.iter_mut().find(|(s, _)| *s == sid) {
            Some((_, v)) => v.push(m),
            None => strata.push((sid, vec![m])),
        }
    }
    let sizes: Vec<usize> = strata.iter().map(|(_, v)| v.len()).collect();
    let mut out = Vec::with_capacity(k);
    for ((_, v), take) in strata.iter().zip(allocate(k, &sizes)) {
        out.extend(sample_sorted(v.len(), take, rng).into_iter().map(|i| v[i]));
    }
    out.sort_unstable();
    out
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn mix(pool: &[QAPair], cfg: &CompositionConfig) -> Result<(Vec<QAPair>, CompositionReport), ComposeError> {
    cfg.validate()?;
    let mut ids = HashSet::new();
    for p in pool {
        if !ids.insert(p.qa_id.as_str()) {
            return Err(ComposeError::DuplicateId(p.qa_id.clone()));
        }
    }
    let (implicit, explicit): (Vec<usize>, Vec<usize>) =
        (0..pool.len()).partition(|&i| pool[i].qtype == QType::Implicit);

    let k_i = quota(cfg.implicit_fraction, implicit.len());
    let k_e = quota(cfg.explicit_fraction, explicit.len());
    let mut chosen = pick(pool, &implicit, k_i, cfg.stratify, &mut rng(cfg.seed, STREAM_IMPLICIT));
    chosen.extend(pick(pool, &explicit, k_e, cfg.stratify, &mut rng(cfg.seed, STREAM_EXPLICIT)));
    if chosen.is_empty() {
        return Err(ComposeError::EmptyResult);
    }
    chosen.sort_unstable();
    if cfg.shuffle {
        chosen.shuffle(&mut rng(cfg.seed, STREAM_SHUFFLE));
    }
    let dataset: Vec<QAPair> = chosen.into_iter().map(|i| pool[i].clone()).collect();

    let mut rep = report(&dataset);
    rep.n_implicit_pool = implicit.len();
    rep.n_explicit_pool = explicit.len();
    Ok((dataset, rep))
}

/// Counts by type and document. Pool counts describe the dataset itself.
pub fn report(dataset: &[QAPair]) -> CompositionReport {
    let mut rep = CompositionReport::default();
    for p in dataset {
        match p.qtype {
            QType::Implicit => rep.n_implicit_sampled += 1,
            QType::Explicit => rep.n_explicit_sampled += 1,
        }
        *rep.per_document_histogram
            .entry(Segment::doc_id_of(&p.segment_id).to_string())
            .or_default() += 1;
    }
    rep.n_implicit_pool = rep.n_implicit_sampled;
    rep.n_explicit_pool = rep.n_explicit_sampled;
    rep.n_total = dataset.len();
    rep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::Provenance;

    fn pool(n_implicit: usize, n_explicit: usize, docs: usize) -> Vec<QAPair> {
        (0..n_implicit + n_explicit)
            .map(|i| {
                let seg = format!("doc{}#{}", i % docs.max(1), (i / docs.max(1)) % 3);
                QAPair {
                    qa_id: format!("{seg}:q{i}"),
                    segment_id: seg,
                    question: format!("q{i}"),
                    answer: format!("a{i}"),
                    qtype: if i < n_implicit { QType::Implicit } else { QType::Explicit },
                    reasoning: (i < n_implicit).then(|| "r".to_string()),
                    provenance: Provenance::Generated,
                }
            })
            .collect()
    }

    #[test]
    fn quota_floor_rule() {
        assert_eq!(quota(0.33, 100), 33);
        assert_eq!(quota(0.66, 100), 66);
        assert_eq!(quota(0.29, 100), 29);
        assert_eq!(quota(1.0, 12_376), 12_376);
        assert_eq!(quota(0.0, 50), 0);
        assert_eq!(quota(0.33, 7), 2);
        assert_eq!(quota(0.5, 1), 0);
    }

    #[test]
    fn full_inclusion() {
        let p = pool(100, 200, 5);
        let (d, r) = mix(&p, &CompositionConfig::new(1.0, 1.0, 7)).unwrap();
        assert_eq!(d, p);
        assert_eq!((r.n_implicit_sampled, r.n_explicit_sampled, r.n_total), (100, 200, 300));
    }

    #[test]
    fn partial_implicit() {
        let p = pool(100, 200, 5);
        let (d, r) = mix(&p, &CompositionConfig::new(0.33, 1.0, 7)).unwrap();
        assert_eq!(d.len(), 233);
        assert_eq!(r.n_implicit_sampled, 33);
        assert_eq!(r.per_document_histogram.values().sum::<usize>(), 233);
        // pool order preserved without shuffle
        let pos: Vec<usize> = d.iter().map(|x| p.iter().position(|y| y == x).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn shuffle_reorders_deterministically() {
        let p = pool(30, 30, 2);
        let cfg = CompositionConfig {
            shuffle: true,
            ..CompositionConfig::new(1.0, 1.0, 3)
        };
        let (a, _) = mix(&p, &cfg).unwrap();
        let (b, _) = mix(&p, &cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, p);
    }

    #[test]
    fn different_seeds_pick_different_subsets() {
        let p = pool(200, 0, 1);
        let (a, _) = mix(&p, &CompositionConfig::new(0.5, 0.0, 1)).unwrap();
        let (b, _) = mix(&p, &CompositionConfig::new(0.5, 0.0, 2)).unwrap();
        assert_eq!(a.len(), b.len());
        assert_ne!(a, b);
    }

    #[test]
    fn stratified_keeps_counts_and_spreads() {
        let p = pool(90, 0, 3);
        let cfg = CompositionConfig {
            stratify: true,
            ..CompositionConfig::new(0.33, 0.0, 5)
        };
        let (d, r) = mix(&p, &cfg).unwrap();
        assert_eq!(r.n_implicit_sampled, quota(0.33, 90));
        assert_eq!(d.len(), 29);
        // 9 segments of 10 pairs each get 3 or 4
        let mut per_seg: BTreeMap<&str, usize> = BTreeMap::new();
        for x in &d {
            *per_seg.entry(x.segment_id.as_str()).or_default() += 1;
        }
        assert!(per_seg.values().all(|&c| c == 3 || c == 4), "{per_seg:?}");
    }

    #[test]
    fn allocation_sums_to_quota() {
        assert_eq!(allocate(5, &[3, 3, 3]), vec![2, 2, 1]);
        assert_eq!(allocate(0, &[3, 3]), vec![0, 0]);
        assert_eq!(allocate(6, &[1, 5]), vec![1, 5]);
        assert_eq!(allocate(3, &[]), Vec::<usize>::new());
    }

    #[test]
    fn errors() {
        let p = pool(3, 3, 1);
        assert_eq!(mix(&p, &CompositionConfig::new(0.0, 0.0, 1)).unwrap_err(), ComposeError::BothZero);
        assert_eq!(
            mix(&p, &CompositionConfig::new(1.5, 0.0, 1)).unwrap_err(),
            ComposeError::InvalidFraction(1.5)
        );
        assert_eq!(mix(&[], &CompositionConfig::new(1.0, 1.0, 1)).unwrap_err(), ComposeError::EmptyResult);
        let mut dup = pool(2, 0, 1);
        dup[1].qa_id = dup[0].qa_id.clone();
        assert!(matches!(mix(&dup, &CompositionConfig::new(1.0, 1.0, 1)), Err(ComposeError::DuplicateId(_))));
    }

    #[test]
    fn report_counts() {
        assert_eq!(report(&[]), CompositionReport::default());
        let p = pool(1, 3, 2);
        let r = report(&p);
        assert_eq!((r.n_implicit_sampled, r.n_explicit_sampled, r.n_total), (1, 3, 4));
        assert_eq!(r.per_document_histogram["doc0"], 2);
        assert_eq!(r.per_document_histogram["doc1"], 2);
    }

    #[test]
    fn report_json_shape() {
        let v = serde_json::to_value(report(&pool(1, 1, 1))).unwrap();
        for k in ["n_implicit_pool", "n_explicit_pool", "n_implicit_sampled", "n_explicit_sampled", "n_total"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["per_document_histogram"]["doc0"], 2);
    }
}
