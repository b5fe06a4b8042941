//! TREC qrels/run I/O and the MAP, nDCG@10 and Recall@1000 measures.
//!
//! Conventions (matching trec_eval defaults as closely as the measures allow):
//! graded gain `2^g − 1` with a `log2(rank + 1)` discount for nDCG; MAP and
//! recall binarize grades at a threshold that defaults to 2 when any grade
//! exceeds 1 and to 1 otherwise. Rankings are taken in file rank order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{RankedList, ScoredDoc};

pub const NDCG_DEPTH: usize = 10;
pub const RECALL_DEPTH: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Judgments for one query: doc id → grade.
pub type Judgments = BTreeMap<String, u32>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: BTreeMap<String, Judgments>,
    threshold: Option<u32>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a judgment; returns false if the pair was already judged.
    pub fn insert(&mut self, query_id: &str, doc_id: &str, grade: u32) -> bool {
        let per_query = self.judgments.entry(query_id.to_string()).or_default();
        if per_query.contains_key(doc_id) {
            return false;
        }
        per_query.insert(doc_id.to_string(), grade);
        true
    }

    pub fn with_threshold(mut self, threshold: u32) -> Self {
        self.threshold = Some(threshold);
        self
    }

    pub fn set_threshold(&mut self, threshold: Option<u32>) {
        self.threshold = threshold;
    }

    pub fn is_graded(&self) -> bool {
        self.judgments
            .values()
            .flat_map(|j| j.values())
            .any(|&g| g > 1)
    }

    /// Minimum grade counted as relevant by MAP and recall.
    pub fn binarization_threshold(&self) -> u32 {
        self.threshold
            .unwrap_or(if self.is_graded() { 2 } else { 1 })
    }

    pub fn query(&self, query_id: &str) -> Option<&Judgments> {
        self.judgments.get(query_id)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }

    /// Relevant doc ids for a query, highest grade first, ties by doc id.
    pub fn gold_docs(&self, query_id: &str) -> Vec<(&str, u32)> {
        let threshold = self.binarization_threshold();
        let mut gold: Vec<(&str, u32)> = self
            .query(query_id)
            .into_iter()
            .flatten()
            .filter(|(_, &g)| g >= threshold)
            .map(|(d, &g)| (d.as_str(), g))
            .collect();
        gold.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        gold
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn parse_qrels<R: BufRead>(reader: R, path: &Path) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        let parse_err = |message: String| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(parse_err(format!(
                "expected `query_id iter doc_id grade`, found {} columns",
                cols.len()
            )));
        }
        let grade: i64 = cols[3]
            .parse()
            .map_err(|_| parse_err(format!("grade {:?} is not an integer", cols[3])))?;
        let grade = u32::try_from(grade)
            .map_err(|_| parse_err(format!("grade {grade} is out of range (must be >= 0)")))?;
        if !qrels.insert(cols[0], cols[2], grade) {
            return Err(parse_err(format!(
                "duplicate judgment for ({}, {})",
                cols[0], cols[2]
            )));
        }
    }
    Ok(qrels)
}

pub fn load_qrels(path: impl AsRef<Path>) -> Result<Qrels> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_error(path))?;
    parse_qrels(BufReader::new(file), path)
}

/// System output: per query, an ordered ranking.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    pub run_tag: String,
    queries: Vec<(String, Vec<ScoredDoc>)>,
    lookup: HashMap<String, usize>,
}

impl RunFile {
    pub fn new(run_tag: impl Into<String>) -> Self {
        Self {
            run_tag: run_tag.into(),
            ..Default::default()
        }
    }

    /// Appends (or replaces) the ranking for `query_id`.
    pub fn push(&mut self, query_id: impl Into<String>, ranked: RankedList) {
        self.push_entries(query_id, ranked.entries);
    }

    pub fn push_entries(&mut self, query_id: impl Into<String>, entries: Vec<ScoredDoc>) {
        let query_id = query_id.into();
        match self.lookup.get(&query_id) {
            Some(&i) => self.queries[i].1 = entries,
            None => {
                self.lookup.insert(query_id.clone(), self.queries.len());
                self.queries.push((query_id, entries));
            }
        }
    }

    pub fn get(&self, query_id: &str) -> Option<&[ScoredDoc]> {
        self.lookup
            .get(query_id)
            .map(|&i| self.queries[i].1.as_slice())
    }

    pub fn queries(&self) -> impl Iterator<Item = (&str, &[ScoredDoc])> {
        self.queries.iter().map(|(q, e)| (q.as_str(), e.as_slice()))
    }

    pub fn num_queries(&self) -> usize {
        self.queries.len()
    }

    /// `query_id Q0 doc_id rank score run_tag`, ranks from 1, scores with six
    /// decimals.
    pub fn write_trec<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (qid, entries) in &self.queries {
            for (i, e) in entries.iter().enumerate() {
                // avoid printing "-0.000000"
                let score = if e.score == 0.0 { 0.0 } else { e.score };
                writeln!(
                    out,
                    "{} Q0 {} {} {:.6} {}",
                    qid,
                    e.doc_id,
                    i + 1,
                    score,
                    self.run_tag
                )?;
            }
        }
        Ok(())
    }

    pub fn to_trec_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_trec(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("run file is UTF-8")
    }
}

pub fn parse_run<R: BufRead>(reader: R, path: &Path) -> Result<RunFile> {
    let mut rows: Vec<(String, Vec<(usize, ScoredDoc)>)> = Vec::new();
    let mut lookup: HashMap<String, usize> = HashMap::new();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut run_tag = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_error(path))?;
        let parse_err = |message: String| EvalError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(format!(
                "expected 6 columns `qid Q0 docid rank score tag`, found {}",
                cols.len()
            )));
        }
        let rank: usize = cols[3]
            .parse()
            .map_err(|_| parse_err(format!("rank {:?} is not a non-negative integer", cols[3])))?;
        let score: f64 = cols[4]
            .parse()
            .map_err(|_| parse_err(format!("score {:?} is not a number", cols[4])))?;
        if !seen.insert((cols[0].to_string(), cols[2].to_string())) {
            return Err(parse_err(format!(
                "document {} listed twice for query {}",
                cols[2], cols[0]
            )));
        }
        run_tag.get_or_insert_with(|| cols[5].to_string());
        let slot = *lookup.entry(cols[0].to_string()).or_insert_with(|| {
            rows.push((cols[0].to_string(), Vec::new()));
            rows.len() - 1
        });
        rows[slot].1.push((
            rank,
            ScoredDoc {
                doc_id: cols[2].to_string(),
                score,
            },
        ));
    }
    let mut run = RunFile::new(run_tag.unwrap_or_default());
    for (qid, mut entries) in rows {
        entries.sort_by_key(|(rank, _)| *rank);
        run.push_entries(qid, entries.into_iter().map(|(_, e)| e).collect());
    }
    Ok(run)
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunFile> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_error(path))?;
    parse_run(BufReader::new(file), path)
}

fn grade_of(judgments: &Judgments, doc_id: &str) -> u32 {
    judgments.get(doc_id).copied().unwrap_or(0)
}

fn num_relevant(judgments: &Judgments, threshold: u32) -> usize {
    judgments.values().filter(|&&g| g >= threshold).count()
}

/// Graded nDCG@k; 0 when the query has no positively graded document.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], judgments: &Judgments, k: usize) -> f64 {
    let gain = |g: u32| 2f64.powi(g as i32) - 1.0;
    let discount = |i: usize| (i as f64 + 2.0).log2();
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| gain(grade_of(judgments, d.as_ref())) / discount(i))
        .sum();
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| gain(g) / discount(i))
        .sum();
    if idcg > 0.0 {
        dcg / idcg
    } else {
        0.0
    }
}

/// Non-interpolated average precision over the whole ranking.
pub fn average_precision<S: AsRef<str>>(
    ranking: &[S],
    judgments: &Judgments,
    threshold: u32,
) -> f64 {
    let total = num_relevant(judgments, threshold);
    if total == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().enumerate() {
        if grade_of(judgments, d.as_ref()) >= threshold {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / total as f64
}

pub fn recall_at_k<S: AsRef<str>>(
    ranking: &[S],
    judgments: &Judgments,
    threshold: u32,
    k: usize,
) -> f64 {
    let total = num_relevant(judgments, threshold);
    if total == 0 {
        return 0.0;
    }
    let found = ranking
        .iter()
        .take(k)
        .filter(|d| grade_of(judgments, d.as_ref()) >= threshold)
        .count();
    found as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryMetrics {
    pub query_id: String,
    pub ap: f64,
    pub ndcg_cut_10: f64,
    pub recall_1000: f64,
    pub num_relevant: usize,
    pub num_retrieved: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub map: f64,
    pub ndcg_cut_10: f64,
    pub recall_1000: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_tag: String,
    pub binarization_threshold: u32,
    pub mean: MeanMetrics,
    /// Queries averaged into nDCG (those with some positive grade).
    pub queries_ndcg: usize,
    /// Queries averaged into MAP and recall (those with a relevant doc).
    pub queries_binary: usize,
    /// Judged queries without any positively graded document. Their
    /// per-query nDCG is 0 and they are left out of every mean.
    pub queries_without_relevant: Vec<String>,
    /// Judged queries the run has no ranking for (scored as empty rankings).
    pub queries_missing_from_run: Vec<String>,
    pub per_query: Vec<QueryMetrics>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Evaluate every judged query. Queries in the run but not in the qrels are
/// ignored.
pub fn evaluate_run(run: &RunFile, qrels: &Qrels) -> EvalReport {
    let threshold = qrels.binarization_threshold();
    let mut per_query = Vec::with_capacity(qrels.len());
    let mut without_relevant = Vec::new();
    let mut missing = Vec::new();
    for qid in qrels.query_ids() {
        let judgments = qrels.query(qid).expect("query id came from qrels");
        let ranking: Vec<&str> = match run.get(qid) {
            Some(entries) => entries.iter().map(|e| e.doc_id.as_str()).collect(),
            None => {
                missing.push(qid.to_string());
                Vec::new()
            }
        };
        if judgments.values().all(|&g| g == 0) {
            without_relevant.push(qid.to_string());
        }
        per_query.push(QueryMetrics {
            query_id: qid.to_string(),
            ap: average_precision(&ranking, judgments, threshold),
            ndcg_cut_10: ndcg_at_k(&ranking, judgments, NDCG_DEPTH),
            recall_1000: recall_at_k(&ranking, judgments, threshold, RECALL_DEPTH),
            num_relevant: num_relevant(judgments, threshold),
            num_retrieved: ranking.len(),
        });
    }

    let graded = || {
        per_query
            .iter()
            .filter(|m| !without_relevant.contains(&m.query_id))
    };
    let binary = || per_query.iter().filter(|m| m.num_relevant > 0);
    let mean = MeanMetrics {
        map: mean(binary().map(|m| m.ap)),
        ndcg_cut_10: mean(graded().map(|m| m.ndcg_cut_10)),
        recall_1000: mean(binary().map(|m| m.recall_1000)),
    };
    EvalReport {
        run_tag: run.run_tag.clone(),
        binarization_threshold: threshold,
        mean,
        queries_ndcg: graded().count(),
        queries_binary: binary().count(),
        queries_without_relevant: without_relevant,
        queries_missing_from_run: missing,
        per_query,
    }
}

impl EvalReport {
    /// Aligned plain-text summary; with `per_query`, one row per query follows.
    pub fn to_table(&self, per_query: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "run        {}", self.run_tag);
        let _ = writeln!(out, "queries    {}", self.per_query.len());
        let _ = writeln!(out, "MAP        {:.4}", self.mean.map);
        let _ = writeln!(out, "nDCG@10    {:.4}", self.mean.ndcg_cut_10);
        let _ = writeln!(out, "R@1k       {:.4}", self.mean.recall_1000);
        if !self.queries_without_relevant.is_empty() {
            let _ = writeln!(
                out,
                "note: {} queries without relevant documents excluded from means",
                self.queries_without_relevant.len()
            );
        }
        if !self.queries_missing_from_run.is_empty() {
            let _ = writeln!(
                out,
                "note: {} judged queries missing from run (scored 0)",
                self.queries_missing_from_run.len()
            );
        }
        if per_query {
            let width = self
                .per_query
                .iter()
                .map(|m| m.query_id.len())
                .max()
                .unwrap_or(0)
                .max(5);
            let _ = writeln!(out, "\n{:<width$}  AP      nDCG@10  R@1k", "query");
            for m in &self.per_query {
                let _ = writeln!(
                    out,
                    "{:<width$}  {:.4}  {:.4}   {:.4}",
                    m.query_id, m.ap, m.ndcg_cut_10, m.recall_1000
                );
            }
        }
        out
    }
}
