//! Okapi BM25 scoring and top-K retrieval.
//!
//! ```text
//! rel(d, q) = Σ_{t ∈ q} IDF(t) · tf(t,d)·(k1 + 1) / (tf(t,d) + k1·(1 − b + b·len(d)/avgdl))
//! ```
//!
//! The sum runs over the query-term multiset, so a term repeated in the
//! query contributes once per occurrence.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::TokenSequence;
use crate::index::InvertedIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdfVariant {
    /// `ln((N − n + 0.5) / (n + 0.5))`; negative for terms in more than half
    /// the collection.
    #[default]
    Paper,
    /// `ln(1 + (N − n + 0.5) / (n + 0.5))`, as used by Lucene/Anserini.
    Lucene,
}

impl FromStr for IdfVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Self::Paper),
            "lucene" => Ok(Self::Lucene),
            other => Err(format!(
                "unknown idf variant {other:?} (expected paper or lucene)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
    pub idf: IdfVariant,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self {
            k1: 0.9,
            b: 0.4,
            idf: IdfVariant::Paper,
        }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k1.is_finite() && self.k1 >= 0.0) {
            return Err(format!("k1 must be a finite value >= 0, got {}", self.k1));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(format!("b must lie in [0, 1], got {}", self.b));
        }
        Ok(())
    }

    /// Saturated term-frequency factor for one (term, doc) pair.
    #[inline]
    pub fn tf_weight(&self, tf: f64, doc_len: f64, avgdl: f64) -> f64 {
        let norm = if avgdl > 0.0 { doc_len / avgdl } else { 0.0 };
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * norm))
    }
}

pub fn idf_value(collection_size: usize, doc_freq: usize, variant: IdfVariant) -> f64 {
    let n = collection_size as f64;
    let df = doc_freq as f64;
    let ratio = (n - df + 0.5) / (df + 0.5);
    match variant {
        IdfVariant::Paper => ratio.ln(),
        IdfVariant::Lucene => ratio.ln_1p(),
    }
}

/// IDF of an indexed term; `None` for terms outside the dictionary, which
/// contribute nothing to any score.
pub fn idf(idx: &InvertedIndex, term: &str, variant: IdfVariant) -> Option<f64> {
    match idx.doc_freq(term) {
        0 => None,
        df => Some(idf_value(idx.collection_size(), df, variant)),
    }
}

/// Score a single document against an analyzed query.
pub fn score(idx: &InvertedIndex, params: &Bm25Params, q: &TokenSequence, doc_ordinal: u32) -> f64 {
    let doc_len = f64::from(idx.doc(doc_ordinal).length);
    let avgdl = idx.avg_doc_length();
    q.iter()
        .filter_map(|term| {
            let tf = idx.term_frequency(term, doc_ordinal);
            (tf > 0).then(|| {
                let idf = idf(idx, term, params.idf).unwrap_or(0.0);
                idf * params.tf_weight(f64::from(tf), doc_len, avgdl)
            })
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

/// Top-K list, best first; ties are broken by ascending doc id.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<ScoredDoc>,
    pub k_requested: usize,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ScoredDoc> {
        self.entries.iter()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }
}

/// Ranking order: higher score first, then smaller doc id.
pub fn rank_cmp(a_score: f64, a_id: &str, b_score: f64, b_id: &str) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_id.cmp(b_id))
}

// Heap entry whose `Ord` puts the *worst* candidate on top of the max-heap.
struct Candidate<'a> {
    score: f64,
    doc_id: &'a str,
}

impl Ord for Candidate<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_cmp(self.score, self.doc_id, other.score, other.doc_id)
    }
}

impl PartialOrd for Candidate<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Candidate<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate<'_> {}

enum Accumulator {
    Dense { scores: Vec<f64>, touched: Vec<u32> },
    Sparse(HashMap<u32, f64>),
}

impl Accumulator {
    fn new(collection_size: usize, expected: usize) -> Self {
        if expected.saturating_mul(8) >= collection_size {
            Self::Dense {
                scores: vec![f64::NAN; collection_size],
                touched: Vec::with_capacity(expected.min(collection_size)),
            }
        } else {
            Self::Sparse(HashMap::with_capacity(expected))
        }
    }

    #[inline]
    fn add(&mut self, ordinal: u32, value: f64) {
        match self {
            Self::Dense { scores, touched } => {
                let slot = &mut scores[ordinal as usize];
                if slot.is_nan() {
                    *slot = 0.0;
                    touched.push(ordinal);
                }
                *slot += value;
            }
            Self::Sparse(map) => *map.entry(ordinal).or_insert(0.0) += value,
        }
    }

    fn drain(self) -> Vec<(u32, f64)> {
        match self {
            Self::Dense { scores, touched } => touched
                .into_iter()
                .map(|o| (o, scores[o as usize]))
                .collect(),
            Self::Sparse(map) => map.into_iter().collect(),
        }
    }
}

/// Retrieve the top `k` documents for an already-analyzed query.
pub fn retrieve_tokens(
    idx: &InvertedIndex,
    params: &Bm25Params,
    q: &TokenSequence,
    k: usize,
) -> RankedList {
    // query-term multiplicities, in first-occurrence order
    let mut qtf: Vec<(&str, f64)> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for term in q.iter() {
        let i = *slot.entry(term.as_str()).or_insert_with(|| {
            qtf.push((term.as_str(), 0.0));
            qtf.len() - 1
        });
        qtf[i].1 += 1.0;
    }
    let lists: Vec<_> = qtf
        .iter()
        .filter_map(|&(term, count)| idx.postings(term).map(|list| (list, count)))
        .collect();
    if k == 0 || lists.is_empty() {
        return RankedList {
            entries: Vec::new(),
            k_requested: k,
        };
    }

    let n = idx.collection_size();
    let avgdl = idx.avg_doc_length();
    let expected: usize = lists.iter().map(|(l, _)| l.len()).sum();
    let mut acc = Accumulator::new(n, expected);
    for (list, count) in &lists {
        let weight = idf_value(n, list.len(), params.idf) * count;
        for p in list.iter() {
            let len = f64::from(idx.doc(p.doc_ordinal).length);
            acc.add(
                p.doc_ordinal,
                weight * params.tf_weight(f64::from(p.term_frequency), len, avgdl),
            );
        }
    }

    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (ordinal, score) in acc.drain() {
        let cand = Candidate {
            score,
            doc_id: &idx.doc(ordinal).doc_id,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand < *worst {
                heap.pop();
                heap.push(cand);
            }
        }
    }

    let entries = heap
        .into_sorted_vec()
        .into_iter()
        .map(|c| ScoredDoc {
            doc_id: c.doc_id.to_string(),
            score: c.score,
        })
        .collect();
    RankedList {
        entries,
        k_requested: k,
    }
}

/// `Retriever(q, D, K)`: analyze `q_text` with the index's settings and
/// return the top `k` documents. Documents sharing no term with the query
/// are never returned.
pub fn retrieve(idx: &InvertedIndex, params: &Bm25Params, q_text: &str, k: usize) -> RankedList {
    retrieve_tokens(idx, params, &idx.analyze(q_text), k)
}
