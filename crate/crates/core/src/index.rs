//! Inverted index over truncated documents, with on-disk persistence.
//!
//! Directory layout written by [`save_index`]:
//!
//! | file       | contents                                                        |
//! | ---------- | --------------------------------------------------------------- |
//! | `meta`     | JSON header: format tag, version, counts, analysis settings      |
//! | `terms`    | one line per term, sorted: `term\tdf\toffset\tbyte_len`          |
//! | `postings` | per term: LEB128 varint pairs `(doc_gap, tf)`, gaps delta-coded  |
//! | `docs`     | one line per ordinal: `doc_id\tlength`                           |
//!
//! Every file is a pure function of the index contents, so saving the same
//! index twice produces identical bytes.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bm25::{self, Bm25Params};
use crate::corpus::{analyze, Document, Query};

pub const FORMAT_TAG: &str = "lamer-inverted-index";
pub const FORMAT_VERSION: u32 = 1;

pub const META_FILE: &str = "meta";
const TERMS_FILE: &str = "terms";
const POSTINGS_FILE: &str = "postings";
const DOCS_FILE: &str = "docs";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("index format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, IndexError>;

fn format_err(msg: impl Into<String>) -> IndexError {
    IndexError::Format(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Posting {
    pub doc_ordinal: u32,
    pub term_frequency: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DocEntry {
    pub doc_id: String,
    pub length: u32,
}

/// How documents are analyzed before indexing. Queries must be analyzed the
/// same way, so these settings travel with the index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    /// Token cap per document (and per query segment). `None` disables it.
    pub truncation_cap: Option<usize>,
    pub include_title: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            truncation_cap: Some(crate::corpus::DEFAULT_TRUNCATION_CAP),
            include_title: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    // sorted lexicographically; term id == position
    terms: Vec<String>,
    term_ids: HashMap<String, u32>,
    postings: Vec<Vec<Posting>>,
    docs: Vec<DocEntry>,
    total_tokens: u64,
    options: AnalysisOptions,
}

impl InvertedIndex {
    /// |D|.
    pub fn collection_size(&self) -> usize {
        self.docs.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        if self.docs.is_empty() {
            0.0
        } else {
            self.total_tokens as f64 / self.docs.len() as f64
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.total_tokens
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn options(&self) -> AnalysisOptions {
        self.options
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn postings(&self, term: &str) -> Option<&[Posting]> {
        self.term_ids
            .get(term)
            .map(|&id| self.postings[id as usize].as_slice())
    }

    /// n(t): number of documents containing `term`.
    pub fn doc_freq(&self, term: &str) -> usize {
        self.postings(term).map_or(0, <[Posting]>::len)
    }

    pub fn term_frequency(&self, term: &str, doc_ordinal: u32) -> u32 {
        self.postings(term)
            .and_then(|list| {
                list.binary_search_by_key(&doc_ordinal, |p| p.doc_ordinal)
                    .ok()
                    .map(|i| list[i].term_frequency)
            })
            .unwrap_or(0)
    }

    pub fn doc(&self, doc_ordinal: u32) -> &DocEntry {
        &self.docs[doc_ordinal as usize]
    }

    pub fn docs(&self) -> &[DocEntry] {
        &self.docs
    }

    /// Analyze free text the same way documents were analyzed.
    pub fn analyze(&self, text: &str) -> crate::corpus::TokenSequence {
        analyze(text, self.options.truncation_cap)
    }
}

/// Build an index from documents in input order. Ordinals are assigned
/// densely in that order.
pub fn build_index<'a, I>(docs: I, options: AnalysisOptions) -> InvertedIndex
where
    I: IntoIterator<Item = &'a Document>,
{
    let docs: Vec<&Document> = docs.into_iter().collect();

    // tokenization is the expensive part and runs per document in parallel;
    // the merge below is sequential in ordinal order, so output is deterministic
    let analyzed: Vec<(u32, Vec<(String, u32)>)> = docs
        .par_iter()
        .map(|doc| {
            let tokens = analyze(&doc.content(options.include_title), options.truncation_cap);
            let len = tokens.len() as u32;
            let mut counts: HashMap<String, u32> = HashMap::new();
            for tok in tokens.into_inner() {
                *counts.entry(tok).or_insert(0) += 1;
            }
            (len, counts.into_iter().collect())
        })
        .collect();

    let mut lists: HashMap<String, Vec<Posting>> = HashMap::new();
    let mut doc_table = Vec::with_capacity(docs.len());
    let mut total_tokens = 0u64;
    for (ordinal, (doc, (len, counts))) in docs.iter().zip(analyzed).enumerate() {
        total_tokens += u64::from(len);
        doc_table.push(DocEntry {
            doc_id: doc.doc_id.clone(),
            length: len,
        });
        for (term, tf) in counts {
            lists.entry(term).or_default().push(Posting {
                doc_ordinal: ordinal as u32,
                term_frequency: tf,
            });
        }
    }

    let mut entries: Vec<(String, Vec<Posting>)> = lists.into_iter().collect();
    entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
    let (terms, postings): (Vec<String>, Vec<Vec<Posting>>) = entries.into_iter().unzip();
    let term_ids = terms
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();

    InvertedIndex {
        terms,
        term_ids,
        postings,
        docs: doc_table,
        total_tokens,
        options,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    collection_size: u64,
    num_terms: u64,
    total_tokens: u64,
    postings_bytes: u64,
    options: AnalysisOptions,
}

/// The four serialized index files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedIndex {
    pub meta: Vec<u8>,
    pub terms: Vec<u8>,
    pub postings: Vec<u8>,
    pub docs: Vec<u8>,
}

impl EncodedIndex {
    pub fn total_bytes(&self) -> u64 {
        (self.meta.len() + self.terms.len() + self.postings.len() + self.docs.len()) as u64
    }
}

fn write_varint(out: &mut Vec<u8>, mut v: u32) {
    while v >= 0x80 {
        out.push((v as u8) | 0x80);
        v >>= 7;
    }
    out.push(v as u8);
}

fn read_varint(buf: &[u8], pos: &mut usize) -> Result<u32> {
    let mut value = 0u64;
    for shift in (0..35).step_by(7) {
        let byte = *buf
            .get(*pos)
            .ok_or_else(|| format_err("truncated posting list"))?;
        *pos += 1;
        value |= u64::from(byte & 0x7f) << shift;
        if byte & 0x80 == 0 {
            return u32::try_from(value).map_err(|_| format_err("varint overflow"));
        }
    }
    Err(format_err("varint overflow"))
}

pub fn encode_index(idx: &InvertedIndex) -> Result<EncodedIndex> {
    let mut postings = Vec::new();
    let mut terms = String::new();
    for (term, list) in idx.terms.iter().zip(&idx.postings) {
        let offset = postings.len();
        let mut prev = 0u32;
        for (i, p) in list.iter().enumerate() {
            let gap = if i == 0 {
                p.doc_ordinal
            } else {
                p.doc_ordinal - prev
            };
            write_varint(&mut postings, gap);
            write_varint(&mut postings, p.term_frequency);
            prev = p.doc_ordinal;
        }
        terms.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            term,
            list.len(),
            offset,
            postings.len() - offset
        ));
    }

    let mut docs = String::new();
    for d in &idx.docs {
        if d.doc_id.chars().any(char::is_whitespace) {
            return Err(format_err(format!(
                "document id {:?} contains whitespace",
                d.doc_id
            )));
        }
        docs.push_str(&format!("{}\t{}\n", d.doc_id, d.length));
    }

    let meta = Meta {
        format: FORMAT_TAG.to_string(),
        version: FORMAT_VERSION,
        collection_size: idx.docs.len() as u64,
        num_terms: idx.terms.len() as u64,
        total_tokens: idx.total_tokens,
        postings_bytes: postings.len() as u64,
        options: idx.options,
    };
    let mut meta = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    meta.push(b'\n');

    Ok(EncodedIndex {
        meta,
        terms: terms.into_bytes(),
        postings,
        docs: docs.into_bytes(),
    })
}

pub fn decode_index(enc: &EncodedIndex) -> Result<InvertedIndex> {
    let meta: Meta = serde_json::from_slice(&enc.meta)
        .map_err(|e| format_err(format!("unreadable meta: {e}")))?;
    if meta.format != FORMAT_TAG {
        return Err(format_err(format!("unknown format tag {:?}", meta.format)));
    }
    if meta.version != FORMAT_VERSION {
        return Err(format_err(format!(
            "version mismatch: index is v{}, this build reads v{}",
            meta.version, FORMAT_VERSION
        )));
    }
    if meta.postings_bytes != enc.postings.len() as u64 {
        return Err(format_err("postings file size does not match meta"));
    }

    let docs_text = std::str::from_utf8(&enc.docs).map_err(|_| format_err("docs is not UTF-8"))?;
    let mut docs = Vec::with_capacity(meta.collection_size as usize);
    for (i, line) in docs_text.lines().enumerate() {
        let (id, len) = line
            .split_once('\t')
            .ok_or_else(|| format_err(format!("docs line {}: expected 2 columns", i + 1)))?;
        let length = len
            .parse()
            .map_err(|_| format_err(format!("docs line {}: bad length", i + 1)))?;
        docs.push(DocEntry {
            doc_id: id.to_string(),
            length,
        });
    }
    if docs.len() as u64 != meta.collection_size {
        return Err(format_err("doc table size does not match meta"));
    }

    let terms_text =
        std::str::from_utf8(&enc.terms).map_err(|_| format_err("terms is not UTF-8"))?;
    let mut terms = Vec::with_capacity(meta.num_terms as usize);
    let mut postings = Vec::with_capacity(meta.num_terms as usize);
    let mut tf_sum = 0u64;
    for (i, line) in terms_text.lines().enumerate() {
        let bad = || format_err(format!("terms line {}: malformed", i + 1));
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad());
        }
        let df: usize = cols[1].parse().map_err(|_| bad())?;
        let offset: usize = cols[2].parse().map_err(|_| bad())?;
        let byte_len: usize = cols[3].parse().map_err(|_| bad())?;
        let end = offset.checked_add(byte_len).ok_or_else(bad)?;
        let bytes = enc
            .postings
            .get(offset..end)
            .ok_or_else(|| format_err(format!("term {:?}: postings out of range", cols[0])))?;
        if let Some(prev) = terms.last() {
            if prev as &str >= cols[0] {
                return Err(format_err("terms are not strictly sorted"));
            }
        }
        let mut list = Vec::with_capacity(df);
        let mut pos = 0;
        let mut ordinal = 0u32;
        while pos < bytes.len() {
            let gap = read_varint(bytes, &mut pos)?;
            let tf = read_varint(bytes, &mut pos)?;
            ordinal = if list.is_empty() {
                gap
            } else if gap == 0 {
                return Err(format_err("non-increasing posting list"));
            } else {
                ordinal
                    .checked_add(gap)
                    .ok_or_else(|| format_err("ordinal overflow"))?
            };
            if ordinal as usize >= docs.len() || tf == 0 {
                return Err(format_err(format!("term {:?}: invalid posting", cols[0])));
            }
            tf_sum += u64::from(tf);
            list.push(Posting {
                doc_ordinal: ordinal,
                term_frequency: tf,
            });
        }
        if list.len() != df {
            return Err(format_err(format!("term {:?}: df mismatch", cols[0])));
        }
        terms.push(cols[0].to_string());
        postings.push(list);
    }
    if terms.len() as u64 != meta.num_terms {
        return Err(format_err("term count does not match meta"));
    }
    if tf_sum != meta.total_tokens {
        return Err(format_err(
            "sum of term frequencies does not match total_tokens",
        ));
    }
    let doc_len_sum: u64 = docs.iter().map(|d| u64::from(d.length)).sum();
    if doc_len_sum != meta.total_tokens {
        return Err(format_err("doc lengths do not match total_tokens"));
    }

    let term_ids = terms
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as u32))
        .collect();
    Ok(InvertedIndex {
        terms,
        term_ids,
        postings,
        docs,
        total_tokens: meta.total_tokens,
        options: meta.options,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let target = dir.join(name);
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(&target))?;
    tmp.persist(&target)
        .map_err(|e| e.error)
        .map_err(io_err(&target))?;
    Ok(())
}

pub fn save_index(idx: &InvertedIndex, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let enc = encode_index(idx)?;
    // meta last: a directory without it is never mistaken for a complete index
    write_file(dir, TERMS_FILE, &enc.terms)?;
    write_file(dir, POSTINGS_FILE, &enc.postings)?;
    write_file(dir, DOCS_FILE, &enc.docs)?;
    write_file(dir, META_FILE, &enc.meta)?;
    Ok(())
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<InvertedIndex> {
    let dir = dir.as_ref();
    let read = |name: &str| -> Result<Vec<u8>> {
        let path = dir.join(name);
        fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                format_err(format!("missing {:?} in {}", name, dir.display()))
            }
            _ => IndexError::Io {
                path: path.display().to_string(),
                source: e,
            },
        })
    };
    let enc = EncodedIndex {
        meta: read(META_FILE)?,
        terms: read(TERMS_FILE)?,
        postings: read(POSTINGS_FILE)?,
        docs: read(DOCS_FILE)?,
    };
    decode_index(&enc)
}

/// Sum of the sizes of the index files in `dir`.
pub fn on_disk_size(dir: impl AsRef<Path>) -> Result<u64> {
    let dir = dir.as_ref();
    let mut total = 0;
    for name in [META_FILE, TERMS_FILE, POSTINGS_FILE, DOCS_FILE] {
        let path = dir.join(name);
        total += fs::metadata(&path).map_err(io_err(&path))?.len();
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize)]
pub struct IndexStats {
    pub index_bytes: u64,
    pub num_terms: usize,
    pub collection_size: usize,
    pub avg_doc_length: f64,
    pub total_tokens: u64,
    pub throughput: Option<Throughput>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Throughput {
    pub queries: usize,
    pub depth: usize,
    pub elapsed_secs: f64,
    pub queries_per_second: f64,
}

/// Size and shape of `idx`; with a query set, also times top-`depth`
/// retrieval over it on the current thread.
pub fn stats(
    idx: &InvertedIndex,
    timing: Option<(&[Query], &Bm25Params, usize)>,
) -> Result<IndexStats> {
    let index_bytes = encode_index(idx)?.total_bytes();
    let throughput =
        timing
            .filter(|(queries, _, _)| !queries.is_empty())
            .map(|(queries, params, depth)| {
                let start = Instant::now();
                for q in queries {
                    std::hint::black_box(bm25::retrieve(idx, params, &q.text, depth));
                }
                // clamp so a too-fast clock never reports infinite throughput
                let elapsed = start.elapsed().as_secs_f64().max(1e-9);
                Throughput {
                    queries: queries.len(),
                    depth,
                    elapsed_secs: elapsed,
                    queries_per_second: queries.len() as f64 / elapsed,
                }
            });
    Ok(IndexStats {
        index_bytes,
        num_terms: idx.num_terms(),
        collection_size: idx.collection_size(),
        avg_doc_length: idx.avg_doc_length(),
        total_tokens: idx.total_tokens(),
        throughput,
    })
}
