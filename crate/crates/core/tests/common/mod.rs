#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use lamer::{Collection, Document, IdfVariant};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toy3() -> Collection {
    Collection::from_docs([
        Document::new("d1", "cat sat mat"),
        Document::new("d2", "dog sat log"),
        Document::new("d3", "cat cat dog"),
    ])
    .unwrap()
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy")
}

/// Copy the toy fixture into `dest` so runs never write into the source tree.
pub fn copy_fixture(dest: &Path) -> PathBuf {
    for name in ["corpus.jsonl", "queries.tsv", "qrels.txt", "manifest.toml"] {
        std::fs::copy(fixture_dir().join(name), dest.join(name)).unwrap();
    }
    dest.join("manifest.toml")
}

/// Corpus of whitespace-separated `w<n>` words, queries drawn from the same
/// vocabulary plus a few unseen words.
pub struct RandomCase {
    pub docs: Vec<(String, Vec<String>)>,
    pub queries: Vec<Vec<String>>,
}

pub fn random_case(seed: u64, max_docs: usize, max_vocab: usize, num_queries: usize) -> RandomCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_docs = rng.random_range(1..=max_docs);
    let vocab = rng.random_range(1..=max_vocab);
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.random_range(0..vocab));
    let docs = (0..n_docs)
        .map(|i| {
            // a few long documents exercise truncation
            let len = if rng.random_bool(0.05) {
                rng.random_range(120..180)
            } else {
                rng.random_range(0..25)
            };
            (
                format!("doc{i:03}"),
                (0..len).map(|_| word(&mut rng)).collect(),
            )
        })
        .collect();
    let queries = (0..num_queries)
        .map(|_| {
            let len = rng.random_range(1..6);
            (0..len)
                .map(|_| {
                    if rng.random_bool(0.1) {
                        format!("unseen{}", rng.random_range(0..3))
                    } else {
                        word(&mut rng)
                    }
                })
                .collect()
        })
        .collect();
    RandomCase { docs, queries }
}

/// Direct per-document BM25: score every document against the query and
/// keep those sharing at least one term, best first, ties by doc id.
pub fn oracle_bm25(
    docs: &[(String, Vec<String>)],
    query: &[String],
    k1: f64,
    b: f64,
    idf: IdfVariant,
    cap: usize,
) -> Vec<(String, f64)> {
    let docs: Vec<(&String, &[String])> = docs
        .iter()
        .map(|(id, toks)| (id, &toks[..toks.len().min(cap)]))
        .collect();
    let n = docs.len() as f64;
    let avgdl = docs.iter().map(|(_, t)| t.len()).sum::<usize>() as f64 / n;
    let idf_by_term: HashMap<&String, f64> = query
        .iter()
        .map(|term| {
            let df = docs.iter().filter(|(_, t)| t.contains(term)).count() as f64;
            let ratio = (n - df + 0.5) / (df + 0.5);
            let w = match idf {
                IdfVariant::Paper => ratio.ln(),
                IdfVariant::Lucene => (1.0 + ratio).ln(),
            };
            (term, w)
        })
        .collect();
    let idf_of = |term: &String| idf_by_term[term];
    let mut out: Vec<(String, f64)> = Vec::new();
    for (id, toks) in &docs {
        let mut matched = false;
        let mut score = 0.0;
        for term in query {
            let tf = toks.iter().filter(|t| *t == term).count() as f64;
            if tf > 0.0 {
                matched = true;
                let dl = toks.len() as f64;
                score += idf_of(term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
        }
        if matched {
            out.push(((*id).clone(), score));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    out
}

pub type RefQrels = BTreeMap<String, HashMap<String, u32>>;
pub type RefRun = BTreeMap<String, Vec<String>>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefScores {
    pub ap: f64,
    pub ndcg10: f64,
    pub r1000: f64,
}

/// Straight-line reimplementation of the evaluation conventions: graded
/// nDCG@10 with 2^g-1 gains; AP and R@1000 over grades >= `threshold`.
pub fn reference_scores(
    ranking: &[String],
    judged: &HashMap<String, u32>,
    threshold: u32,
) -> RefScores {
    let grade = |d: &String| judged.get(d).copied().unwrap_or(0);

    let mut dcg = 0.0;
    for (pos, d) in ranking.iter().enumerate().take(10) {
        let rank = pos + 1;
        dcg += (2f64.powf(grade(d) as f64) - 1.0) / ((rank + 1) as f64).log2();
    }
    let mut grades: Vec<u32> = judged.values().copied().collect();
    grades.sort();
    grades.reverse();
    let mut idcg = 0.0;
    for (pos, g) in grades.iter().enumerate().take(10) {
        idcg += (2f64.powf(*g as f64) - 1.0) / ((pos + 2) as f64).log2();
    }
    let ndcg10 = if idcg == 0.0 { 0.0 } else { dcg / idcg };

    let rel: Vec<&String> = judged
        .iter()
        .filter(|(_, g)| **g >= threshold)
        .map(|(d, _)| d)
        .collect();
    let (mut ap, mut r1000) = (0.0, 0.0);
    if !rel.is_empty() {
        let mut precisions = Vec::new();
        for (pos, d) in ranking.iter().enumerate() {
            if rel.contains(&d) {
                let seen = ranking[..=pos].iter().filter(|x| rel.contains(x)).count();
                precisions.push(seen as f64 / (pos + 1) as f64);
            }
        }
        ap = precisions.iter().sum::<f64>() / rel.len() as f64;
        let found = ranking
            .iter()
            .take(1000)
            .filter(|d| rel.contains(d))
            .count();
        r1000 = found as f64 / rel.len() as f64;
    }
    RefScores { ap, ndcg10, r1000 }
}

/// Per-query scores plus means (MAP, nDCG@10, R@1k). Queries without any
/// positive grade are left out of all means; queries without a relevant
/// document at `threshold` are left out of MAP and recall.
pub fn reference_eval(run: &RefRun, qrels: &RefQrels) -> (BTreeMap<String, RefScores>, [f64; 3]) {
    let graded = qrels.values().any(|j| j.values().any(|&g| g > 1));
    let threshold = if graded { 2 } else { 1 };
    let empty = Vec::new();
    let mut per = BTreeMap::new();
    let (mut map, mut nd, mut rc) = (Vec::new(), Vec::new(), Vec::new());
    for (qid, judged) in qrels {
        let ranking = run.get(qid).unwrap_or(&empty);
        let s = reference_scores(ranking, judged, threshold);
        if judged.values().any(|&g| g > 0) {
            nd.push(s.ndcg10);
        }
        if judged.values().any(|&g| g >= threshold) {
            map.push(s.ap);
            rc.push(s.r1000);
        }
        per.insert(qid.clone(), s);
    }
    let avg = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (per, [avg(&map), avg(&nd), avg(&rc)])
}

/// Random qrels and run over a shared doc pool. Some judged queries are
/// left out of the run; some have only zero grades.
pub fn random_eval_case(seed: u64) -> (RefRun, RefQrels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..rng.random_range(5..60))
        .map(|i| format!("D{i}"))
        .collect();
    let max_grade = if rng.random_bool(0.5) { 1 } else { 3 };
    let mut qrels = RefQrels::new();
    let mut run = RefRun::new();
    for q in 0..rng.random_range(1..12) {
        let qid = format!("Q{q}");
        let mut judged = HashMap::new();
        for d in &pool {
            if rng.random_bool(0.3) {
                judged.insert(d.clone(), rng.random_range(0..=max_grade));
            }
        }
        if judged.is_empty() {
            judged.insert(pool[0].clone(), 0);
        }
        qrels.insert(qid.clone(), judged);
        if rng.random_bool(0.9) {
            let mut ranking = pool.clone();
            ranking.shuffle(&mut rng);
            ranking.truncate(rng.random_range(0..=pool.len()));
            run.insert(qid, ranking);
        }
    }
    (run, qrels)
}
