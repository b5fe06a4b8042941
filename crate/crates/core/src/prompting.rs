//! Prompt templates and demo-passage selection.
//!
//! Templates are data: the built-in set ships in `templates/prompts.toml` and
//! a user file with the same shape can add or replace entries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bm25::RankedList;
use crate::corpus::{truncate_text, Collection, Document, Query};
use crate::eval::Qrels;
use crate::index::InvertedIndex;

const BUILTIN_TEMPLATES: &str = include_str!("../templates/prompts.toml");

/// Number of demo passages shown to the model by default.
pub const DEFAULT_NUM_DEMOS: usize = 10;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("unknown template key {0:?}")]
    UnknownTemplate(String),
    #[error("template {key:?}: {reason}")]
    InvalidTemplate { key: String, reason: String },
    #[error("template file: {0}")]
    Parse(String),
    #[error("reading template file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("oracle demo selection needs relevance judgments")]
    MissingQrels,
    #[error("query {0:?} has no gold documents for oracle demos")]
    NoGoldDocs(String),
    #[error("document {0:?} is in the index but not in the corpus")]
    UnknownDocument(String),
}

pub type Result<T> = std::result::Result<T, PromptError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptTemplate {
    pub task_key: String,
    /// First line, with a `{q}` placeholder.
    pub head: String,
    /// Per-candidate line with `{i}` and `{c}` placeholders.
    pub item: String,
    pub tail: String,
}

fn default_item() -> String {
    "{i}.{c}".to_string()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateEntry {
    head: String,
    tail: String,
    #[serde(default = "default_item")]
    item: String,
    #[serde(default)]
    aliases: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: BTreeMap<String, PromptTemplate>,
    aliases: HashMap<String, String>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_TEMPLATES).expect("bundled templates are valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let entries: BTreeMap<String, TemplateEntry> =
            toml::from_str(text).map_err(|e| PromptError::Parse(e.to_string()))?;
        let mut set = Self::default();
        for (key, entry) in entries {
            let tmpl = PromptTemplate {
                task_key: key.clone(),
                head: entry.head,
                item: entry.item,
                tail: entry.tail,
            };
            validate(&tmpl)?;
            for alias in entry.aliases {
                set.aliases.insert(alias, key.clone());
            }
            set.templates.insert(key, tmpl);
        }
        Ok(set)
    }

    /// Built-in templates overridden by the entries in `path`.
    pub fn builtin_with_overrides(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut set = Self::builtin();
        set.merge(Self::from_toml_str(&text)?);
        Ok(set)
    }

    pub fn merge(&mut self, other: TemplateSet) {
        for key in other.templates.keys() {
            self.aliases.remove(key);
        }
        self.templates.extend(other.templates);
        self.aliases.extend(other.aliases);
    }

    pub fn get(&self, key: &str) -> Result<&PromptTemplate> {
        let key = self.aliases.get(key).map_or(key, String::as_str);
        self.templates
            .get(key)
            .ok_or_else(|| PromptError::UnknownTemplate(key.to_string()))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.templates.keys().map(String::as_str)
    }
}

fn validate(tmpl: &PromptTemplate) -> Result<()> {
    let invalid = |reason: &str| PromptError::InvalidTemplate {
        key: tmpl.task_key.clone(),
        reason: reason.to_string(),
    };
    if !tmpl.head.contains("{q}") {
        return Err(invalid("head must contain {q}"));
    }
    if !tmpl.item.contains("{c}") {
        return Err(invalid("item must contain {c}"));
    }
    if [&tmpl.head, &tmpl.item, &tmpl.tail]
        .iter()
        .any(|s| s.contains('\n'))
    {
        return Err(invalid("head, item and tail must be single lines"));
    }
    Ok(())
}

/// Compose the answer-generation prompt.
///
/// Layout, joined by `\n`: the head with `{q}` substituted, one item line per
/// demo numbered from 1, then the tail. Demo text is flattened onto a single
/// line. With no demos the output is just head and tail.
pub fn render_prompt(tmpl: &PromptTemplate, q: &Query, demos: &[Document]) -> String {
    let mut lines = Vec::with_capacity(demos.len() + 2);
    lines.push(tmpl.head.replace("{q}", &q.text));
    for (i, doc) in demos.iter().enumerate() {
        let flat = doc.text.split_whitespace().collect::<Vec<_>>().join(" ");
        lines.push(
            tmpl.item
                .replace("{i}", &(i + 1).to_string())
                .replace("{c}", &flat),
        );
    }
    lines.push(tmpl.tail.clone());
    lines.join("\n")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum DemoScheme {
    /// `window` consecutive first-pass results starting at `start` (0-based).
    TopConsecutive {
        #[serde(default)]
        start: usize,
    },
    /// `window` results sampled without replacement from the first-pass top `n`.
    SampleTopN { n: usize },
    /// `window` documents sampled uniformly from the whole collection.
    SampleCollection,
    /// Gold documents from the relevance judgments.
    Oracle,
}

impl Default for DemoScheme {
    fn default() -> Self {
        Self::TopConsecutive { start: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoSelection {
    pub scheme: DemoScheme,
    pub window: usize,
    pub seed: u64,
}

impl Default for DemoSelection {
    fn default() -> Self {
        Self {
            scheme: DemoScheme::default(),
            window: DEFAULT_NUM_DEMOS,
            seed: 0,
        }
    }
}

impl DemoSelection {
    /// First-pass depth this scheme reads from, or `None` if it needs no
    /// first-pass ranking.
    pub fn candidate_depth(&self) -> Option<usize> {
        if self.window == 0 {
            return None;
        }
        match self.scheme {
            DemoScheme::TopConsecutive { start } => Some(start + self.window),
            DemoScheme::SampleTopN { n } => Some(n.max(1)),
            DemoScheme::SampleCollection | DemoScheme::Oracle => None,
        }
    }

    fn rng_for(&self, query_id: &str) -> ChaCha8Rng {
        let digest = Sha256::new()
            .chain_update(self.seed.to_le_bytes())
            .chain_update(query_id.as_bytes())
            .finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        ChaCha8Rng::seed_from_u64(u64::from_le_bytes(bytes))
    }
}

/// `count` distinct positions in `0..population`, ascending.
fn sample_positions(rng: &mut ChaCha8Rng, population: usize, count: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, population, count.min(population)).into_vec();
    picked.sort_unstable();
    picked
}

/// Pick the demo passages for one query.
///
/// Returns at most `sel.window` distinct documents, each cut to the index's
/// truncation cap (with the title merged in when the index includes titles).
pub fn select_demos(
    ranked: &RankedList,
    sel: &DemoSelection,
    idx: &InvertedIndex,
    corpus: &Collection,
    qrels: Option<&Qrels>,
    query_id: &str,
) -> Result<Vec<Document>> {
    if sel.window == 0 {
        return Ok(Vec::new());
    }
    let ids: Vec<&str> = match sel.scheme {
        DemoScheme::TopConsecutive { start } => {
            ranked.doc_ids().skip(start).take(sel.window).collect()
        }
        DemoScheme::SampleTopN { n } => {
            let pool: Vec<&str> = ranked.doc_ids().take(n).collect();
            let mut rng = sel.rng_for(query_id);
            sample_positions(&mut rng, pool.len(), sel.window)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        }
        DemoScheme::SampleCollection => {
            let mut rng = sel.rng_for(query_id);
            sample_positions(&mut rng, idx.collection_size(), sel.window)
                .into_iter()
                .map(|i| idx.doc(i as u32).doc_id.as_str())
                .collect()
        }
        DemoScheme::Oracle => {
            let qrels = qrels.ok_or(PromptError::MissingQrels)?;
            let gold: Vec<&str> = qrels
                .gold_docs(query_id)
                .into_iter()
                .map(|(d, _)| d)
                .take(sel.window)
                .collect();
            if gold.is_empty() {
                return Err(PromptError::NoGoldDocs(query_id.to_string()));
            }
            gold
        }
    };

    let options = idx.options();
    ids.into_iter()
        .map(|id| {
            let doc = corpus
                .get(id)
                .ok_or_else(|| PromptError::UnknownDocument(id.to_string()))?;
            let content = doc.content(options.include_title);
            let text = match options.truncation_cap {
                Some(cap) => truncate_text(&content, cap).to_string(),
                None => content,
            };
            Ok(Document::new(doc.doc_id.clone(), text))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm25::ScoredDoc;
    use crate::index::{build_index, AnalysisOptions};
    use std::collections::HashSet;

    fn ranked(n: usize) -> RankedList {
        RankedList {
            entries: (0..n)
                .map(|i| ScoredDoc {
                    doc_id: format!("d{i:04}"),
                    score: (n - i) as f64,
                })
                .collect(),
            k_requested: n,
        }
    }

    fn corpus(n: usize) -> (Collection, InvertedIndex) {
        let docs = Collection::from_docs(
            (0..n).map(|i| Document::new(format!("d{i:04}"), format!("passage number {i}"))),
        )
        .unwrap();
        let idx = build_index(&docs, AnalysisOptions::default());
        (docs, idx)
    }

    fn ids(docs: &[Document]) -> Vec<String> {
        docs.iter().map(|d| d.doc_id.clone()).collect()
    }

    #[test]
    fn builtin_keys() {
        let set = TemplateSet::builtin();
        let keys: Vec<_> = set.keys().collect();
        assert_eq!(
            keys,
            ["arguana", "covid", "dbpedia", "dl", "fiqa", "news", "scifact"]
        );
        assert_eq!(set.get("dl19").unwrap().task_key, "dl");
        assert_eq!(set.get("trec-covid").unwrap().task_key, "covid");
        assert!(matches!(
            set.get("nope"),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn scifact_tail() {
        let set = TemplateSet::builtin();
        assert_eq!(
            set.get("scifact").unwrap().tail,
            "please write a correct scientific paper passage."
        );
    }

    #[test]
    fn render_dl_prompt() {
        let set = TemplateSet::builtin();
        let p = render_prompt(
            set.get("dl").unwrap(),
            &Query::new("q", "what is bm25"),
            &[Document::new("x", "cat sat")],
        );
        assert!(p.contains("Give a question \"what is bm25\""));
        assert!(p.lines().any(|l| l == "1.cat sat"));
        assert!(p.ends_with("please write a correct answering passage."));
    }

    #[test]
    fn render_without_demos() {
        let set = TemplateSet::builtin();
        let tmpl = set.get("dl").unwrap();
        let p = render_prompt(tmpl, &Query::new("q", "x"), &[]);
        assert_eq!(p.lines().count(), 2);
        assert!(!p.lines().any(|l| l.starts_with("1.")));
        assert_eq!(
            p,
            format!("{}\n{}", tmpl.head.replace("{q}", "x"), tmpl.tail)
        );
    }

    #[test]
    fn render_flattens_multiline_demos() {
        let set = TemplateSet::builtin();
        let p = render_prompt(
            set.get("dl").unwrap(),
            &Query::new("q", "x"),
            &[
                Document::new("a", "line one\n\nline  two"),
                Document::new("b", "b"),
            ],
        );
        let lines: Vec<_> = p.lines().collect();
        assert_eq!(lines[1], "1.line one line two");
        assert_eq!(lines[2], "2.b");
    }

    #[test]
    fn demo_order_changes_numbering() {
        let set = TemplateSet::builtin();
        let t = set.get("dl").unwrap();
        let q = Query::new("q", "x");
        let a = Document::new("a", "alpha");
        let b = Document::new("b", "beta");
        let ab = render_prompt(t, &q, &[a.clone(), b.clone()]);
        let ba = render_prompt(t, &q, &[b, a]);
        assert_ne!(ab, ba);
        assert!(ab.contains("1.alpha\n2.beta"));
        assert!(ba.contains("1.beta\n2.alpha"));
    }

    #[test]
    fn overrides_replace_and_validate() {
        let mut set = TemplateSet::builtin();
        set.merge(
            TemplateSet::from_toml_str(
                "[dl]\nhead = \"Q: {q}\"\ntail = \"A:\"\nitem = \"- {c}\"\n",
            )
            .unwrap(),
        );
        let p = render_prompt(
            set.get("dl").unwrap(),
            &Query::new("q", "x"),
            &[Document::new("a", "t")],
        );
        assert_eq!(p, "Q: x\n- t\nA:");
        assert!(matches!(
            TemplateSet::from_toml_str("[bad]\nhead = \"no placeholder\"\ntail = \"t\"\n"),
            Err(PromptError::InvalidTemplate { .. })
        ));
        assert!(
            TemplateSet::from_toml_str("[bad]\nhead = \"{q}\"\ntail = \"t\"\nextra = 1\n").is_err()
        );
    }

    #[test]
    fn top_consecutive_slices() {
        let (docs, idx) = corpus(1000);
        let list = ranked(1000);
        let sel = DemoSelection::default();
        let got = select_demos(&list, &sel, &idx, &docs, None, "q").unwrap();
        let want: Vec<String> = (0..10).map(|i| format!("d{i:04}")).collect();
        assert_eq!(ids(&got), want);

        let sel = DemoSelection {
            scheme: DemoScheme::TopConsecutive { start: 5 },
            ..Default::default()
        };
        let got = select_demos(&list, &sel, &idx, &docs, None, "q").unwrap();
        let want: Vec<String> = (5..15).map(|i| format!("d{i:04}")).collect();
        assert_eq!(ids(&got), want);
        assert_eq!(sel.candidate_depth(), Some(15));

        let short = select_demos(&ranked(3), &sel, &idx, &docs, None, "q").unwrap();
        assert!(short.is_empty());
    }

    #[test]
    fn sampled_schemes_are_deterministic_and_distinct() {
        let (docs, idx) = corpus(500);
        let list = ranked(500);
        for scheme in [
            DemoScheme::SampleTopN { n: 100 },
            DemoScheme::SampleCollection,
        ] {
            let sel = DemoSelection {
                scheme,
                window: 10,
                seed: 42,
            };
            let a = ids(&select_demos(&list, &sel, &idx, &docs, None, "q1").unwrap());
            let b = ids(&select_demos(&list, &sel, &idx, &docs, None, "q1").unwrap());
            assert_eq!(a, b);
            assert_eq!(a.len(), 10);
            assert_eq!(a.iter().collect::<HashSet<_>>().len(), 10);
            let other = ids(&select_demos(
                &list,
                &DemoSelection { seed: 43, ..sel },
                &idx,
                &docs,
                None,
                "q1",
            )
            .unwrap());
            assert_ne!(a, other);
            if let DemoScheme::SampleTopN { .. } = scheme {
                assert!(a.iter().all(|d| d.as_str() < "d0100"));
            }
        }
    }

    #[test]
    fn sample_top_n_smaller_than_window() {
        let (docs, idx) = corpus(20);
        let sel = DemoSelection {
            scheme: DemoScheme::SampleTopN { n: 4 },
            window: 10,
            seed: 1,
        };
        let got = select_demos(&ranked(20), &sel, &idx, &docs, None, "q").unwrap();
        assert_eq!(ids(&got), ["d0000", "d0001", "d0002", "d0003"]);
    }

    #[test]
    fn oracle_takes_gold_by_grade() {
        let (docs, idx) = corpus(20);
        let qrels = crate::eval::parse_qrels(
            "q 0 d0003 2\nq 0 d0007 3\nq 0 d0001 1\nq 0 d0002 2\n".as_bytes(),
            Path::new("q"),
        )
        .unwrap();
        let sel = DemoSelection {
            scheme: DemoScheme::Oracle,
            ..Default::default()
        };
        let got =
            select_demos(&RankedList::default(), &sel, &idx, &docs, Some(&qrels), "q").unwrap();
        // threshold 2 on graded qrels: fewer than 10 gold docs, no padding
        assert_eq!(ids(&got), ["d0007", "d0002", "d0003"]);
        assert!(matches!(
            select_demos(
                &RankedList::default(),
                &sel,
                &idx,
                &docs,
                Some(&qrels),
                "other"
            ),
            Err(PromptError::NoGoldDocs(_))
        ));
        assert!(matches!(
            select_demos(&RankedList::default(), &sel, &idx, &docs, None, "q"),
            Err(PromptError::MissingQrels)
        ));
    }

    #[test]
    fn demos_are_truncated() {
        let long = (0..300)
            .map(|i| format!("Word{i},"))
            .collect::<Vec<_>>()
            .join(" ");
        let docs = Collection::from_docs([Document::new("a", long).with_title("Title")]).unwrap();
        let idx = build_index(&docs, AnalysisOptions::default());
        let list = RankedList {
            entries: vec![ScoredDoc {
                doc_id: "a".into(),
                score: 1.0,
            }],
            k_requested: 1,
        };
        let got = select_demos(&list, &DemoSelection::default(), &idx, &docs, None, "q").unwrap();
        assert_eq!(crate::corpus::tokenize(&got[0].text).len(), 128);
        assert!(got[0].text.starts_with("Title Word0, Word1"));
        assert!(got[0].text.ends_with("Word126"));
    }

    #[test]
    fn zero_window_selects_nothing() {
        let (docs, idx) = corpus(5);
        let sel = DemoSelection {
            window: 0,
            ..Default::default()
        };
        assert!(select_demos(&ranked(5), &sel, &idx, &docs, None, "q")
            .unwrap()
            .is_empty());
        assert_eq!(sel.candidate_depth(), None);
    }
}
