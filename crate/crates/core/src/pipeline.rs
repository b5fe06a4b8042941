//! End-to-end query processing.
//!
//! For each query: first-pass BM25 → demo selection → prompt → N sampled
//! answers → interleaved augmentation `q a1 q a2 … q aN` → final BM25 at
//! depth K. Modes cover the plain baseline, gold-demo (oracle) prompting and
//! a second round that takes its demos from the first round's final list.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bm25::{retrieve, retrieve_tokens, Bm25Params, RankedList};
use crate::corpus::{analyze, Collection, Query, TokenSequence};
use crate::eval::{Qrels, RunFile};
use crate::index::InvertedIndex;
use crate::llm::{generate, AnswerSet, GenerationBackend, GenerationConfig};
use crate::prompting::{
    render_prompt, select_demos, DemoScheme, DemoSelection, PromptError, PromptTemplate,
    DEFAULT_NUM_DEMOS,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("encoder produced a {found}-dimensional vector, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot fuse an empty answer set")]
    NoAnswers,
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Lamer,
    Oracle,
    SecondRound,
    BaselineBm25,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lamer => "lamer",
            Self::Oracle => "oracle",
            Self::SecondRound => "second_round",
            Self::BaselineBm25 => "baseline_bm25",
        }
    }

    fn uses_llm(self) -> bool {
        self != Self::BaselineBm25
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lamer" => Ok(Self::Lamer),
            "oracle" => Ok(Self::Oracle),
            "second_round" => Ok(Self::SecondRound),
            "baseline_bm25" | "bm25" => Ok(Self::BaselineBm25),
            other => Err(format!(
                "unknown mode {other:?} (expected lamer, oracle, second_round or baseline_bm25)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LamerConfig {
    pub mode: Mode,
    /// M: demo passages per prompt.
    pub num_demos: usize,
    /// K: depth of the final ranking.
    pub depth: usize,
    pub demo_selection: DemoScheme,
    /// Seed for the sampled demo schemes.
    pub seed: u64,
    pub template: String,
    /// Joins query and answers in the augmented query text.
    pub separator: String,
    /// Whether the query text inside prompts is also cut to the truncation cap.
    pub truncate_query_in_prompt: bool,
    /// Upper bound on queries processed (and LLM requests in flight) at once.
    pub concurrency: usize,
    pub bm25: Bm25Params,
    /// Sampling settings; `num_answers` is N.
    pub generation: GenerationConfig,
}

impl Default for LamerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Lamer,
            num_demos: DEFAULT_NUM_DEMOS,
            depth: 1000,
            demo_selection: DemoScheme::default(),
            seed: 0,
            template: "dl".to_string(),
            separator: " ".to_string(),
            truncate_query_in_prompt: false,
            concurrency: 4,
            bm25: Bm25Params::default(),
            generation: GenerationConfig::default(),
        }
    }
}

impl LamerConfig {
    pub fn num_answers(&self) -> usize {
        self.generation.num_answers
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let invalid = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.depth == 0 {
            return invalid("depth (K) must be at least 1".into());
        }
        if self.concurrency == 0 {
            return invalid("concurrency must be at least 1".into());
        }
        if let DemoScheme::SampleTopN { n: 0 } = self.demo_selection {
            return invalid("demo_selection.n must be at least 1".into());
        }
        self.bm25
            .validate()
            .or_else(|m| invalid(format!("bm25: {m}")))?;
        self.generation
            .validate()
            .or_else(|m| invalid(format!("generation: {m}")))?;
        Ok(())
    }

    /// True when this configuration reads relevance judgments.
    pub fn needs_qrels(&self) -> bool {
        self.mode == Mode::Oracle
            || (self.mode.uses_llm() && self.demo_selection == DemoScheme::Oracle)
    }

    fn selection(&self, scheme: DemoScheme) -> DemoSelection {
        DemoSelection {
            scheme,
            window: self.num_demos,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedQuery {
    pub query: Query,
    pub answers: AnswerSet,
    pub augmented_text: String,
}

/// `q̄ = q ⊕ a1 ⊕ q ⊕ a2 ⊕ … ⊕ q ⊕ aN`, joined by `separator`.
pub fn augment(q: &Query, answers: &AnswerSet, separator: &str) -> AugmentedQuery {
    let parts: Vec<&str> = answers
        .iter()
        .flat_map(|a| [q.text.as_str(), a.as_str()])
        .collect();
    AugmentedQuery {
        query: q.clone(),
        answers: answers.clone(),
        augmented_text: parts.join(separator),
    }
}

/// Analyzed form of an augmented query. Each query copy and each answer is
/// analyzed (and truncated) on its own, then concatenated.
pub fn augmented_tokens(aug: &AugmentedQuery, cap: Option<usize>) -> TokenSequence {
    let q = analyze(&aug.query.text, cap);
    let mut out = TokenSequence::default();
    for answer in aug.answers.iter() {
        out.extend(q.clone());
        out.extend(analyze(answer, cap));
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub first_pass_ms: f64,
    pub prompt_ms: f64,
    pub generation_ms: f64,
    pub final_retrieval_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub mode: Mode,
    /// Set when the query fell back to plain BM25.
    pub fallback: Option<String>,
    pub warnings: Vec<String>,
    pub rounds: u32,
    pub demos_used: usize,
    pub llm_calls: usize,
    pub answers_generated: usize,
    pub answers_failed: usize,
    pub prompt_chars: usize,
    pub augmented_query_tokens: usize,
    pub results: usize,
    pub timings: StageTimings,
}

impl QueryRecord {
    fn new(q: &Query, mode: Mode) -> Self {
        Self {
            query_id: q.query_id.clone(),
            mode,
            fallback: None,
            warnings: Vec::new(),
            rounds: 0,
            demos_used: 0,
            llm_calls: 0,
            answers_generated: 0,
            answers_failed: 0,
            prompt_chars: 0,
            augmented_query_tokens: 0,
            results: 0,
            timings: StageTimings::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub ranked: RankedList,
    pub augmented: Option<AugmentedQuery>,
    pub record: QueryRecord,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub run_tag: String,
    pub mode: Mode,
    pub num_queries: usize,
    pub fallbacks: usize,
    pub llm_calls: usize,
    pub answers_failed: usize,
    pub elapsed_ms: f64,
    pub queries: Vec<QueryRecord>,
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub run: RunFile,
    pub report: RunReport,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Everything a query needs, borrowed for the duration of a run.
pub struct Pipeline<'a> {
    pub index: &'a InvertedIndex,
    pub corpus: &'a Collection,
    pub template: &'a PromptTemplate,
    pub qrels: Option<&'a Qrels>,
    pub backend: &'a dyn GenerationBackend,
    pub config: &'a LamerConfig,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        index: &'a InvertedIndex,
        corpus: &'a Collection,
        template: &'a PromptTemplate,
        qrels: Option<&'a Qrels>,
        backend: &'a dyn GenerationBackend,
        config: &'a LamerConfig,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        if config.needs_qrels() && qrels.is_none() {
            return Err(PipelineError::InvalidConfig(
                "oracle demo selection needs qrels".into(),
            ));
        }
        Ok(Self {
            index,
            corpus,
            template,
            qrels,
            backend,
            config,
        })
    }

    fn first_pass(&self, q: &Query, depth: usize, rec: &mut QueryRecord) -> RankedList {
        let t = Instant::now();
        let ranked = retrieve(self.index, &self.config.bm25, &q.text, depth);
        rec.timings.first_pass_ms += ms_since(t);
        ranked
    }

    fn baseline(&self, q: &Query, rec: &mut QueryRecord) -> RankedList {
        let t = Instant::now();
        let ranked = retrieve(self.index, &self.config.bm25, &q.text, self.config.depth);
        rec.timings.final_retrieval_ms += ms_since(t);
        ranked
    }

    fn fall_back(
        &self,
        q: &Query,
        reason: String,
        rec: &mut QueryRecord,
    ) -> (RankedList, Option<AugmentedQuery>) {
        log::warn!("query {}: {reason}; falling back to BM25", q.query_id);
        rec.fallback = Some(reason);
        (self.baseline(q, rec), None)
    }

    /// One generate-and-augment round. `source` replaces the first-pass
    /// ranking as the pool the demos are drawn from.
    fn lamer_round(
        &self,
        q: &Query,
        scheme: DemoScheme,
        source: Option<&RankedList>,
        round: u32,
        rec: &mut QueryRecord,
    ) -> (RankedList, Option<AugmentedQuery>) {
        rec.rounds += 1;
        let cfg = self.config;
        let t_prompt = Instant::now();
        let mut sel = cfg.selection(scheme);
        let mut first_pass = None;
        let candidates = |sel: &DemoSelection,
                          this: &Self,
                          rec: &mut QueryRecord,
                          cache: &mut Option<RankedList>|
         -> RankedList {
            if let Some(src) = source {
                return src.clone();
            }
            match sel.candidate_depth() {
                Some(depth) => {
                    if cache.as_ref().is_none_or(|c| c.k_requested < depth) {
                        *cache = Some(this.first_pass(q, depth, rec));
                    }
                    cache.clone().unwrap_or_default()
                }
                None => RankedList::default(),
            }
        };
        let pool = candidates(&sel, self, rec, &mut first_pass);
        let demos = match select_demos(
            &pool,
            &sel,
            self.index,
            self.corpus,
            self.qrels,
            &q.query_id,
        ) {
            Ok(d) => d,
            Err(e @ (PromptError::NoGoldDocs(_) | PromptError::MissingQrels)) => {
                rec.warnings
                    .push(format!("{e}; using top_consecutive(0) demos instead"));
                sel.scheme = DemoScheme::TopConsecutive { start: 0 };
                let pool = candidates(&sel, self, rec, &mut first_pass);
                match select_demos(
                    &pool,
                    &sel,
                    self.index,
                    self.corpus,
                    self.qrels,
                    &q.query_id,
                ) {
                    Ok(d) => d,
                    Err(e) => return self.fall_back(q, format!("demo selection failed: {e}"), rec),
                }
            }
            Err(e) => return self.fall_back(q, format!("demo selection failed: {e}"), rec),
        };
        rec.demos_used = demos.len();

        let shown = if cfg.truncate_query_in_prompt {
            let cap = self.index.options().truncation_cap.unwrap_or(usize::MAX);
            Query::new(
                q.query_id.clone(),
                crate::corpus::truncate_text(&q.text, cap),
            )
        } else {
            q.clone()
        };
        let prompt = render_prompt(self.template, &shown, &demos);
        rec.prompt_chars = prompt.chars().count();
        rec.timings.prompt_ms += ms_since(t_prompt);

        let t_gen = Instant::now();
        let generation = generate(self.backend, &prompt, &q.text, &cfg.generation, round);
        rec.timings.generation_ms += ms_since(t_gen);
        let generation = match generation {
            Ok(g) => g,
            Err(e) => return self.fall_back(q, format!("generation failed: {e}"), rec),
        };
        rec.llm_calls += generation.calls;
        let (answers, failures) = generation.partial();
        rec.answers_failed += failures.len();
        if let Some(first) = failures.first() {
            rec.warnings.push(format!(
                "{} of {} answers failed (first error: {first})",
                failures.len(),
                generation.results.len()
            ));
        }
        let Some(answers) = answers else {
            return self.fall_back(q, "no answer could be generated".to_string(), rec);
        };
        rec.answers_generated += answers.len();

        let aug = augment(q, &answers, &cfg.separator);
        let tokens = augmented_tokens(&aug, self.index.options().truncation_cap);
        rec.augmented_query_tokens = tokens.len();
        let t_final = Instant::now();
        let ranked = retrieve_tokens(self.index, &cfg.bm25, &tokens, cfg.depth);
        rec.timings.final_retrieval_ms += ms_since(t_final);
        (ranked, Some(aug))
    }

    pub fn run_query(&self, q: &Query) -> QueryOutcome {
        let start = Instant::now();
        let cfg = self.config;
        let mut rec = QueryRecord::new(q, cfg.mode);
        let (ranked, augmented) = match cfg.mode {
            Mode::BaselineBm25 => (self.baseline(q, &mut rec), None),
            Mode::Lamer => self.lamer_round(q, cfg.demo_selection, None, 0, &mut rec),
            Mode::Oracle => self.lamer_round(q, DemoScheme::Oracle, None, 0, &mut rec),
            Mode::SecondRound => {
                let (first, aug) = self.lamer_round(q, cfg.demo_selection, None, 0, &mut rec);
                if rec.fallback.is_some() {
                    (first, aug)
                } else {
                    self.lamer_round(q, cfg.demo_selection, Some(&first), 1, &mut rec)
                }
            }
        };
        rec.results = ranked.len();
        rec.timings.total_ms = ms_since(start);
        QueryOutcome {
            ranked,
            augmented,
            record: rec,
        }
    }

    /// Run every query, at most `concurrency` at a time. Output order follows
    /// input order.
    pub fn run_batch(
        &self,
        queries: &[Query],
        run_tag: &str,
    ) -> Result<BatchOutput, PipelineError> {
        let start = Instant::now();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.concurrency)
            .build()
            .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
        let outcomes: Vec<QueryOutcome> =
            pool.install(|| queries.par_iter().map(|q| self.run_query(q)).collect());

        let mut run = RunFile::new(run_tag);
        let mut records = Vec::with_capacity(outcomes.len());
        for (q, outcome) in queries.iter().zip(outcomes) {
            run.push(q.query_id.clone(), outcome.ranked);
            records.push(outcome.record);
        }
        let report = RunReport {
            run_tag: run_tag.to_string(),
            mode: self.config.mode,
            num_queries: queries.len(),
            fallbacks: records.iter().filter(|r| r.fallback.is_some()).count(),
            llm_calls: records.iter().map(|r| r.llm_calls).sum(),
            answers_failed: records.iter().map(|r| r.answers_failed).sum(),
            elapsed_ms: ms_since(start),
            queries: records,
        };
        Ok(BatchOutput { run, report })
    }
}

/// Text → fixed-dimension embedding.
pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Feature-hashing bag of words: each token adds ±1 to one of `dim`
/// buckets; the result is L2-normalized (zero stays zero).
#[derive(Debug, Clone, Copy)]
pub struct HashingEncoder {
    pub dim: usize,
}

impl Encoder for HashingEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        if self.dim == 0 {
            return v;
        }
        for token in crate::corpus::tokenize(text).iter() {
            let digest = Sha256::digest(token.as_bytes());
            let mut word = [0u8; 8];
            word.copy_from_slice(&digest[..8]);
            let bucket = (u64::from_le_bytes(word) % self.dim as u64) as usize;
            v[bucket] += if digest[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Dense counterpart of the augmentation:
/// `(1/N) · Σ_l (enc(q) + enc(a_l)) / 2`.
///
/// The mean is accumulated incrementally, so N identical terms average to
/// exactly that term.
pub fn fuse_dense(
    q: &Query,
    answers: &AnswerSet,
    encoder: &dyn Encoder,
) -> Result<Vec<f64>, PipelineError> {
    let dim = encoder.dim();
    let check = |v: Vec<f64>| {
        if v.len() == dim {
            Ok(v)
        } else {
            Err(PipelineError::DimensionMismatch {
                expected: dim,
                found: v.len(),
            })
        }
    };
    if answers.is_empty() {
        return Err(PipelineError::NoAnswers);
    }
    let eq = check(encoder.encode(&q.text))?;
    let mut mean = vec![0.0; dim];
    for (l, answer) in answers.iter().enumerate() {
        let ea = check(encoder.encode(answer))?;
        let count = (l + 1) as f64;
        for ((m, &x), &y) in mean.iter_mut().zip(&eq).zip(&ea) {
            let term = (x + y) / 2.0;
            *m += (term - *m) / count;
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bm25::score;
    use crate::corpus::{tokenize, Document};
    use crate::index::{build_index, AnalysisOptions};
    use crate::llm::{stub_backend, StubMode};
    use crate::prompting::TemplateSet;
    use proptest::prelude::*;

    fn answers(v: &[&str]) -> AnswerSet {
        AnswerSet::new(v.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn toy() -> (Collection, InvertedIndex) {
        let docs = Collection::from_docs([
            Document::new("d1", "cat sat mat"),
            Document::new("d2", "dog sat log"),
            Document::new("d3", "cat cat dog"),
            Document::new("d4", "bird flew over the hill"),
            Document::new("d5", "fish swim in the sea"),
        ])
        .unwrap();
        let idx = build_index(&docs, AnalysisOptions::default());
        (docs, idx)
    }

    fn stub_cfg(mode: Mode) -> LamerConfig {
        LamerConfig {
            mode,
            depth: 10,
            concurrency: 2,
            generation: GenerationConfig {
                num_answers: 3,
                backoff_ms: 0,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn augment_layout() {
        let q = Query::new("q", "q0");
        assert_eq!(
            augment(&q, &answers(&["a1", "a2"]), " ").augmented_text,
            "q0 a1 q0 a2"
        );
        assert_eq!(augment(&q, &answers(&["x"]), " ").augmented_text, "q0 x");
        assert_eq!(
            augment(&q, &answers(&["x", "y"]), " | ").augmented_text,
            "q0 | x | q0 | y"
        );
    }

    #[test]
    fn echoing_the_query_keeps_the_ranking() {
        let (_, idx) = toy();
        let p = Bm25Params::default();
        let q = Query::new("q", "cat dog");
        let aug = augment(&q, &answers(&["cat dog"]), " ");
        let tokens = augmented_tokens(&aug, Some(128));
        assert_eq!(tokens.len(), 2 * tokenize("cat dog").len());
        let plain = retrieve(&idx, &p, "cat dog", 10);
        let boosted = retrieve_tokens(&idx, &p, &tokens, 10);
        assert_eq!(
            plain.doc_ids().collect::<Vec<_>>(),
            boosted.doc_ids().collect::<Vec<_>>()
        );
        for (a, b) in plain.iter().zip(boosted.iter()) {
            assert!((2.0 * a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_mode_equals_retrieve() {
        let (docs, idx) = toy();
        let set = TemplateSet::builtin();
        let backend = stub_backend(StubMode::Unavailable);
        let cfg = stub_cfg(Mode::BaselineBm25);
        let p = Pipeline::new(&idx, &docs, set.get("dl").unwrap(), None, &backend, &cfg).unwrap();
        let out = p.run_query(&Query::new("q", "cat sat"));
        assert_eq!(out.ranked, retrieve(&idx, &cfg.bm25, "cat sat", 10));
        assert_eq!(out.record.llm_calls, 0);
        assert!(out.record.fallback.is_none());
    }

    #[test]
    fn zero_demos_still_produce_a_ranking() {
        let (docs, idx) = toy();
        let set = TemplateSet::builtin();
        let backend = stub_backend(StubMode::EchoTopCandidate);
        let cfg = LamerConfig {
            num_demos: 0,
            ..stub_cfg(Mode::Lamer)
        };
        let p = Pipeline::new(&idx, &docs, set.get("dl").unwrap(), None, &backend, &cfg).unwrap();
        let out = p.run_query(&Query::new("q", "cat"));
        assert_eq!(out.record.demos_used, 0);
        assert!(out.record.fallback.is_none());
        // echo of the query line: the head contains the query verbatim
        let aug = out.augmented.unwrap();
        assert!(aug.answers.as_slice()[0].starts_with("Give a question \"cat\""));
        assert!(!out.ranked.is_empty());
    }

    #[test]
    fn generation_failure_falls_back() {
        let (docs, idx) = toy();
        let set = TemplateSet::builtin();
        let backend = stub_backend(StubMode::Unavailable);
        let cfg = stub_cfg(Mode::Lamer);
        let p = Pipeline::new(&idx, &docs, set.get("dl").unwrap(), None, &backend, &cfg).unwrap();
        let out = p.run_query(&Query::new("q", "cat sat"));
        assert!(out.record.fallback.is_some());
        assert_eq!(out.ranked, retrieve(&idx, &cfg.bm25, "cat sat", 10));
        assert_eq!(out.record.answers_failed, 3);
    }

    #[test]
    fn oracle_needs_qrels_and_falls_back_per_query() {
        let (docs, idx) = toy();
        let set = TemplateSet::builtin();
        let backend = stub_backend(StubMode::EchoTopCandidate);
        let cfg = stub_cfg(Mode::Oracle);
        assert!(Pipeline::new(&idx, &docs, set.get("dl").unwrap(), None, &backend, &cfg).is_err());

        let qrels =
            crate::eval::parse_qrels("q1 0 d4 1\n".as_bytes(), std::path::Path::new("q")).unwrap();
        let p = Pipeline::new(
            &idx,
            &docs,
            set.get("dl").unwrap(),
            Some(&qrels),
            &backend,
            &cfg,
        )
        .unwrap();
        let gold = p.run_query(&Query::new("q1", "hill"));
        assert_eq!(gold.record.demos_used, 1);
        assert!(gold.record.warnings.is_empty());
        assert_eq!(
            gold.augmented.unwrap().answers.as_slice()[0],
            "bird flew over the hill"
        );

        let no_gold = p.run_query(&Query::new("q2", "cat"));
        assert!(no_gold.record.fallback.is_none());
        assert_eq!(no_gold.record.warnings.len(), 1);
        assert_eq!(
            no_gold.augmented.unwrap().answers.as_slice()[0],
            "cat cat dog"
        );
    }

    #[test]
    fn second_round_uses_first_round_results() {
        let (docs, idx) = toy();
        let set = TemplateSet::builtin();
        let backend = stub_backend(StubMode::EchoTopCandidate);
        let cfg = stub_cfg(Mode::SecondRound);
        let p = Pipeline::new(&idx, &docs, set.get("dl").unwrap(), None, &backend, &cfg).unwrap();
        let out = p.run_query(&Query::new("q", "sat"));
        assert_eq!(out.record.rounds, 2);
        assert_eq!(out.record.llm_calls, 6);

        let lamer_cfg = stub_cfg(Mode::Lamer);
        let lamer = Pipeline::new(
            &idx,
            &docs,
            set.get("dl").unwrap(),
            None,
            &backend,
            &lamer_cfg,
        )
        .unwrap();
        let first = lamer.run_query(&Query::new("q", "sat"));
        let top = first.ranked.entries[0].doc_id.clone();
        let echoed = out.augmented.unwrap().answers.as_slice()[0].clone();
        assert_eq!(echoed, docs.get(&top).unwrap().text);
    }

    #[test]
    fn batch_preserves_order() {
        let (docs, idx) = toy();
        let set = TemplateSet::builtin();
        let backend = stub_backend(StubMode::EchoTopCandidate);
        let cfg = stub_cfg(Mode::Lamer);
        let p = Pipeline::new(&idx, &docs, set.get("dl").unwrap(), None, &backend, &cfg).unwrap();
        let queries: Vec<Query> = ["fish", "cat", "zzz", "dog"]
            .iter()
            .enumerate()
            .map(|(i, t)| Query::new(format!("q{i}"), *t))
            .collect();
        let out = p.run_batch(&queries, "t").unwrap();
        let order: Vec<_> = out.run.queries().map(|(q, _)| q.to_string()).collect();
        assert_eq!(order, ["q0", "q1", "q2", "q3"]);
        assert_eq!(out.report.queries.len(), 4);
        assert_eq!(out.report.llm_calls, 12);
    }

    #[test]
    fn config_validation() {
        assert!(LamerConfig::default().validate().is_ok());
        assert!(LamerConfig {
            depth: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        let mut c = LamerConfig::default();
        c.generation.num_answers = 0;
        assert!(c.validate().is_err());
        assert_eq!(c.num_demos, 10);
        assert_eq!(LamerConfig::default().num_answers(), 5);
        assert_eq!(LamerConfig::default().depth, 1000);
    }

    #[test]
    fn fuse_dense_identities() {
        let enc = HashingEncoder { dim: 32 };
        let q = Query::new("q", "what is bm25 ranking");
        let same = answers(&["what is bm25 ranking"; 5]);
        assert_eq!(fuse_dense(&q, &same, &enc).unwrap(), enc.encode(&q.text));

        let one = answers(&["okapi scoring function"]);
        let eq = enc.encode(&q.text);
        let ea = enc.encode("okapi scoring function");
        let want: Vec<f64> = eq.iter().zip(&ea).map(|(x, y)| (x + y) / 2.0).collect();
        let got = fuse_dense(&q, &one, &enc).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    struct Ragged;

    impl Encoder for Ragged {
        fn dim(&self) -> usize {
            4
        }

        fn encode(&self, text: &str) -> Vec<f64> {
            vec![1.0; text.len().min(6)]
        }
    }

    #[test]
    fn fuse_dense_rejects_dimension_mismatch() {
        let q = Query::new("q", "abcd");
        assert!(fuse_dense(&q, &answers(&["abcd"]), &Ragged).is_ok());
        assert!(matches!(
            fuse_dense(&q, &answers(&["abcd", "abcdef"]), &Ragged),
            Err(PipelineError::DimensionMismatch {
                expected: 4,
                found: 6
            })
        ));
    }

    proptest! {
        #[test]
        fn interleave_is_recoverable(
            q in "[a-z]{1,8}",
            ans in prop::collection::vec("[a-z]{1,8}( [a-z]{1,8}){0,3}", 1..6),
        ) {
            let sep = " || ";
            let aug = augment(&Query::new("q", q.clone()), &AnswerSet::new(ans.clone()).unwrap(), sep);
            let parts: Vec<&str> = aug.augmented_text.split(sep).collect();
            prop_assert_eq!(parts.len(), 2 * ans.len());
            for (i, chunk) in parts.chunks(2).enumerate() {
                prop_assert_eq!(chunk[0], q.as_str());
                prop_assert_eq!(chunk[1], ans[i].as_str());
            }
            prop_assert_eq!(aug.augmented_text.matches(&format!("{q}{sep}")).count() >= ans.len(), true);
        }

        #[test]
        fn augmented_score_is_additive(
            q in "(cat|dog|sat|mat|log|bird|sea)( (cat|dog|sat|mat|log|bird|sea)){0,2}",
            ans in prop::collection::vec("(cat|dog|sat|fish|hill|the|zzz)( (cat|dog|sat|fish|hill|the|zzz)){0,4}", 1..5),
        ) {
            let (_, idx) = toy();
            let p = Bm25Params::default();
            let query = Query::new("q", q.clone());
            let aug = augment(&query, &AnswerSet::new(ans.clone()).unwrap(), " ");
            let tokens = augmented_tokens(&aug, Some(128));
            for d in 0..idx.collection_size() as u32 {
                let whole = score(&idx, &p, &tokens, d);
                let parts = ans.len() as f64 * score(&idx, &p, &tokenize(&q), d)
                    + ans.iter().map(|a| score(&idx, &p, &tokenize(a), d)).sum::<f64>();
                prop_assert!((whole - parts).abs() < 1e-9);
            }
        }
    }
}
