//! Corpus, query and tokenization primitives.
//!
//! Corpora are JSONL (`{"id", "title"?, "text"}` per line), query sets are
//! `query_id<TAB>text` TSV. Tokenization is a fixed rule: lowercase, split on
//! anything that is not alphanumeric, drop empty pieces. No stemming and no
//! stopword list.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::ops::Deref;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default truncation cap applied to queries, documents and demo passages.
pub const DEFAULT_TRUNCATION_CAP: usize = 128;

#[derive(Debug, Error)]
pub enum CorpusError {
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
    #[error("{path}:{line}: duplicate document id {id:?}")]
    DuplicateDocId {
        path: PathBuf,
        line: usize,
        id: String,
    },
    #[error("{path}:{line}: duplicate query id {id:?}")]
    DuplicateQueryId {
        path: PathBuf,
        line: usize,
        id: String,
    },
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    #[serde(rename = "id")]
    pub doc_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default)]
    pub text: String,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            doc_id: doc_id.into(),
            title: None,
            text: text.into(),
        }
    }

    pub fn with_title(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    /// Text seen by the tokenizer: `title + " " + text` when a title is
    /// present and `include_title` is set, otherwise just the body.
    pub fn content(&self, include_title: bool) -> String {
        match &self.title {
            Some(title) if include_title && !title.is_empty() => {
                format!("{} {}", title, self.text)
            }
            _ => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub text: String,
}

impl Query {
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            query_id: query_id.into(),
            text: text.into(),
        }
    }
}

/// Ordered list of lexicon terms produced by [`tokenize`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    pub fn new(tokens: Vec<String>) -> Self {
        debug_assert!(tokens.iter().all(|t| !t.is_empty()));
        Self(tokens)
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn extend(&mut self, other: TokenSequence) {
        self.0.extend(other.0);
    }

    pub fn join(&self, sep: &str) -> String {
        self.0.join(sep)
    }
}

impl Deref for TokenSequence {
    type Target = [String];

    fn deref(&self) -> &[String] {
        &self.0
    }
}

impl<S: Into<String>> FromIterator<S> for TokenSequence {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(iter.into_iter().map(Into::into).collect())
    }
}

/// Byte spans of every token in `text`, in order.
fn token_spans(text: &str) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut chars = text.char_indices().peekable();
    std::iter::from_fn(move || {
        while let Some(&(_, c)) = chars.peek() {
            if c.is_alphanumeric() {
                break;
            }
            chars.next();
        }
        let (start, _) = *chars.peek()?;
        let mut end = start;
        while let Some(&(i, c)) = chars.peek() {
            if !c.is_alphanumeric() {
                break;
            }
            end = i + c.len_utf8();
            chars.next();
        }
        Some((start, end))
    })
}

/// Tokens with the byte offset where each ends in `text`.
///
/// Lowercasing can emit combining marks (e.g. for `İ`); those are dropped so
/// every token is purely alphanumeric.
fn normalized_tokens(text: &str) -> impl Iterator<Item = (usize, String)> + '_ {
    token_spans(text).filter_map(move |(s, e)| {
        let token: String = text[s..e]
            .chars()
            .flat_map(char::to_lowercase)
            .filter(|c| c.is_alphanumeric())
            .collect();
        (!token.is_empty()).then_some((e, token))
    })
}

pub fn tokenize(text: &str) -> TokenSequence {
    TokenSequence(normalized_tokens(text).map(|(_, t)| t).collect())
}

pub fn truncate(seq: TokenSequence, cap: usize) -> TokenSequence {
    let mut tokens = seq.0;
    tokens.truncate(cap);
    TokenSequence(tokens)
}

/// Tokenize and keep at most `cap` tokens.
pub fn analyze(text: &str, cap: Option<usize>) -> TokenSequence {
    match cap {
        Some(cap) => TokenSequence(normalized_tokens(text).take(cap).map(|(_, t)| t).collect()),
        None => tokenize(text),
    }
}

/// Prefix of the raw `text` that ends with its `cap`-th token.
///
/// Keeps the original casing and punctuation, so tokenizing the result gives
/// exactly `truncate(tokenize(text), cap)`.
pub fn truncate_text(text: &str, cap: usize) -> &str {
    if cap == 0 {
        return "";
    }
    match normalized_tokens(text).nth(cap - 1) {
        Some((end, _)) => &text[..end],
        None => text,
    }
}

/// A loaded corpus: documents in file order plus an id lookup.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collection {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
}

impl Collection {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a document, returning its ordinal. Fails on an empty or
    /// already-present id (the id is handed back in the error).
    pub fn push(&mut self, doc: Document) -> std::result::Result<usize, String> {
        if doc.doc_id.is_empty() || self.by_id.contains_key(&doc.doc_id) {
            return Err(doc.doc_id);
        }
        let ordinal = self.docs.len();
        self.by_id.insert(doc.doc_id.clone(), ordinal);
        self.docs.push(doc);
        Ok(ordinal)
    }

    pub fn from_docs(
        docs: impl IntoIterator<Item = Document>,
    ) -> std::result::Result<Self, String> {
        let mut out = Self::new();
        for doc in docs {
            out.push(doc)?;
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Document> {
        self.docs.iter()
    }
}

impl<'a> IntoIterator for &'a Collection {
    type Item = &'a Document;
    type IntoIter = std::slice::Iter<'a, Document>;

    fn into_iter(self) -> Self::IntoIter {
        self.docs.iter()
    }
}

// ids end up in whitespace-delimited TREC files
fn id_problem(id: &str) -> Option<&'static str> {
    if id.is_empty() {
        Some("id is empty")
    } else if id.chars().any(char::is_whitespace) {
        Some("id contains whitespace")
    } else {
        None
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Collection> {
    let path = path.as_ref();
    let reader = open(path)?;
    let mut collection = Collection::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: Document = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            path: path.to_path_buf(),
            line: lineno,
            message: e.to_string(),
        })?;
        if let Some(problem) = id_problem(&doc.doc_id) {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("document {problem}"),
            });
        }
        collection
            .push(doc)
            .map_err(|id| CorpusError::DuplicateDocId {
                path: path.to_path_buf(),
                line: lineno,
                id,
            })?;
    }
    Ok(collection)
}

pub fn write_corpus<W: Write>(docs: &Collection, mut out: W) -> std::io::Result<()> {
    for doc in docs {
        serde_json::to_writer(&mut out, doc)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<Query>> {
    let path = path.as_ref();
    let reader = open(path)?;
    let mut queries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("expected 2 tab-separated columns, found {}", fields.len()),
            });
        }
        let id = fields[0].trim();
        if let Some(problem) = id_problem(id) {
            return Err(CorpusError::Parse {
                path: path.to_path_buf(),
                line: lineno,
                message: format!("query {problem}"),
            });
        }
        if !seen.insert(id.to_string()) {
            return Err(CorpusError::DuplicateQueryId {
                path: path.to_path_buf(),
                line: lineno,
                id: id.to_string(),
            });
        }
        queries.push(Query::new(id, fields[1]));
    }
    Ok(queries)
}
