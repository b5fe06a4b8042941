//! Command-line front end: `index`, `search`, `run`, `eval`, `stats`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bm25::{retrieve, Bm25Params, IdfVariant};
use crate::corpus::{load_corpus, load_queries, DEFAULT_TRUNCATION_CAP};
use crate::eval::{evaluate_run, load_qrels, load_run, RunFile};
use crate::index::{build_index, load_index, save_index, stats, AnalysisOptions, InvertedIndex};
use crate::llm::{stub_backend, CachedBackend, GenerationBackend, OpenAiBackend, StubMode};
use crate::pipeline::{LamerConfig, Mode, Pipeline};
use crate::prompting::TemplateSet;

pub const ENV_API_BASE: &str = "LAMER_API_BASE";
pub const ENV_MODEL: &str = "LAMER_MODEL";
pub const ENV_CONCURRENCY: &str = "LAMER_CONCURRENCY";
pub const ENV_API_KEYS: [&str; 2] = ["LAMER_API_KEY", "OPENAI_API_KEY"];
pub const DEFAULT_RUN_TAG: &str = "lamer";

#[derive(Debug, Parser)]
#[command(
    name = "lamer",
    version,
    about = "Zero-shot retrieval with LLM answer-augmented BM25"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an inverted index from a JSONL corpus.
    Index(IndexArgs),
    /// Plain BM25 retrieval for a query file, written as a TREC run.
    Search(SearchArgs),
    /// Run the full pipeline described by a manifest.
    Run(RunArgs),
    /// Score a TREC run against qrels.
    Eval(EvalArgs),
    /// Index size and shape, optionally with retrieval throughput.
    Stats(StatsArgs),
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    /// JSONL corpus, one {"id", "text", "title"?} object per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Tokens kept per document; 0 keeps everything.
    #[arg(long, default_value_t = DEFAULT_TRUNCATION_CAP)]
    pub cap: usize,
    /// Index document text only, ignoring titles.
    #[arg(long)]
    pub no_title: bool,
}

#[derive(Debug, Clone, Args)]
pub struct Bm25Args {
    #[arg(long, default_value_t = 0.9)]
    pub k1: f64,
    #[arg(long, default_value_t = 0.4)]
    pub b: f64,
    /// IDF form: `paper` (may be negative) or `lucene` (always positive).
    #[arg(long, default_value = "paper")]
    pub idf: IdfVariant,
}

impl Bm25Args {
    fn params(&self) -> Result<Bm25Params> {
        let p = Bm25Params {
            k1: self.k1,
            b: self.b,
            idf: self.idf,
        };
        p.validate().map_err(|m| anyhow!("bm25: {m}"))?;
        Ok(p)
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Queries as `id<TAB>text` lines.
    #[arg(long)]
    pub queries: PathBuf,
    /// Where to write the run file.
    #[arg(long)]
    pub output: PathBuf,
    /// Results per query.
    #[arg(short = 'k', long, default_value_t = 1000)]
    pub depth: usize,
    #[command(flatten)]
    pub bm25: Bm25Args,
    #[arg(long, default_value = DEFAULT_RUN_TAG)]
    pub run_tag: String,
}

#[derive(Debug, Default, Clone, Args)]
pub struct RunArgs {
    /// Manifest TOML describing inputs, outputs and pipeline settings.
    pub manifest: PathBuf,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// M: demo passages per prompt.
    #[arg(long)]
    pub num_demos: Option<usize>,
    /// N: answers sampled per query.
    #[arg(long)]
    pub num_answers: Option<usize>,
    /// K: depth of the final ranking.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub model: Option<String>,
    /// Base URL of an OpenAI-compatible API.
    #[arg(long)]
    pub api_base: Option<String>,
    #[arg(long)]
    pub run_tag: Option<String>,
    /// Ignore the manifest's LLM cache settings.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub qrels: PathBuf,
    /// Minimum grade counted relevant for MAP and recall.
    #[arg(long)]
    pub threshold: Option<u32>,
    /// Also print one row per query.
    #[arg(long)]
    pub per_query: bool,
    /// Write the full report as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Time top-K retrieval over these queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(short = 'k', long, default_value_t = 1000)]
    pub depth: usize,
    #[command(flatten)]
    pub bm25: Bm25Args,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Input and output locations. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub queries: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qrels: Option<PathBuf>,
    pub index_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Extra prompt templates merged over the built-in set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    /// Tokens kept per document and per query segment; 0 keeps everything.
    pub truncation_cap: usize,
    pub include_title: bool,
}

impl Default for IndexSection {
    fn default() -> Self {
        Self {
            truncation_cap: DEFAULT_TRUNCATION_CAP,
            include_title: true,
        }
    }
}

impl IndexSection {
    pub fn options(self) -> AnalysisOptions {
        AnalysisOptions {
            truncation_cap: (self.truncation_cap > 0).then_some(self.truncation_cap),
            include_title: self.include_title,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Stub,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stub: Option<StubMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheSection {
    pub enabled: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    #[serde(default = "default_run_tag")]
    pub run_tag: String,
    pub paths: PathsSection,
    #[serde(default)]
    pub index: IndexSection,
    #[serde(default)]
    pub lamer: LamerConfig,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub cache: CacheSection,
}

fn default_run_tag() -> String {
    DEFAULT_RUN_TAG.to_string()
}

/// Environment lookup, injectable for tests.
pub trait Env {
    fn var(&self, key: &str) -> Option<String>;
}

pub struct ProcessEnv;

impl Env for ProcessEnv {
    fn var(&self, key: &str) -> Option<String> {
        std::env::var(key).ok().filter(|v| !v.is_empty())
    }
}

impl Env for std::collections::HashMap<String, String> {
    fn var(&self, key: &str) -> Option<String> {
        self.get(key).cloned()
    }
}

fn table_mut<'a>(root: &'a mut toml::Table, key: &str) -> Result<&'a mut toml::Table> {
    root.entry(key)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        .as_table_mut()
        .ok_or_else(|| anyhow!("{key}: expected a table"))
}

fn set_if_absent(table: &mut toml::Table, key: &str, value: toml::Value) {
    table.entry(key).or_insert(value);
}

/// Reject secrets anywhere in the manifest.
fn check_no_secrets(table: &toml::Table, prefix: &str) -> Result<()> {
    for (key, value) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        if key.contains("api_key") || key == "token" || key == "secret" {
            bail!(
                "{path}: secrets are not accepted in manifests; set {} instead",
                ENV_API_KEYS.join(" or ")
            );
        }
        if let Some(t) = value.as_table() {
            check_no_secrets(t, &path)?;
        }
    }
    Ok(())
}

impl RunManifest {
    /// Parse a manifest, filling settings it leaves out from the environment.
    pub fn from_toml_str(text: &str, env: &dyn Env) -> Result<Self> {
        let mut root: toml::Table = text.parse().context("manifest is not valid TOML")?;
        check_no_secrets(&root, "")?;
        if let Some(base) = env.var(ENV_API_BASE) {
            set_if_absent(table_mut(&mut root, "backend")?, "base_url", base.into());
        }
        if let Some(model) = env.var(ENV_MODEL) {
            let lamer = table_mut(&mut root, "lamer")?;
            set_if_absent(table_mut(lamer, "generation")?, "model_name", model.into());
        }
        if let Some(c) = env.var(ENV_CONCURRENCY) {
            let n: i64 = c
                .parse()
                .map_err(|_| anyhow!("{ENV_CONCURRENCY}: expected an integer, got {c:?}"))?;
            set_if_absent(table_mut(&mut root, "lamer")?, "concurrency", n.into());
        }
        let manifest: RunManifest = toml::Value::Table(root)
            .try_into()
            .map_err(|e: toml::de::Error| anyhow!("manifest: {}", e.message()))?;
        Ok(manifest)
    }

    pub fn load(path: &Path, env: &dyn Env) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read manifest {}", path.display()))?;
        let mut m = Self::from_toml_str(&text, env)
            .with_context(|| format!("in manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() {
            Path::new(".")
        } else {
            base
        };
        m.resolve_paths(base);
        Ok(m)
    }

    /// Make every relative path absolute with respect to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let base = std::path::absolute(base).unwrap_or_else(|_| base.to_path_buf());
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.corpus);
        fix(&mut paths.queries);
        fix(&mut paths.index_dir);
        fix(&mut paths.output_dir);
        paths.qrels.as_mut().map(fix);
        paths.templates.as_mut().map(fix);
        self.cache.dir.as_mut().map(fix);
    }

    pub fn apply_overrides(&mut self, args: &RunArgs) {
        let l = &mut self.lamer;
        if let Some(v) = &args.output_dir {
            self.paths.output_dir = std::path::absolute(v).unwrap_or_else(|_| v.clone());
        }
        if let Some(v) = args.mode {
            l.mode = v;
        }
        if let Some(v) = args.num_demos {
            l.num_demos = v;
        }
        if let Some(v) = args.num_answers {
            l.generation.num_answers = v;
        }
        if let Some(v) = args.depth {
            l.depth = v;
        }
        if let Some(v) = args.seed {
            l.seed = v;
        }
        if let Some(v) = &args.template {
            l.template = v.clone();
        }
        if let Some(v) = args.concurrency {
            l.concurrency = v;
        }
        if let Some(v) = &args.model {
            l.generation.model_name = v.clone();
        }
        if let Some(v) = &args.api_base {
            self.backend.base_url = Some(v.clone());
        }
        if let Some(v) = &args.run_tag {
            self.run_tag = v.clone();
        }
        if args.no_cache {
            self.cache.enabled = false;
        }
    }

    /// Check everything that can be checked before any work starts.
    pub fn validate(&self) -> Result<()> {
        let must_exist = |field: &str, p: &Path| -> Result<()> {
            if p.exists() {
                Ok(())
            } else {
                Err(anyhow!("paths.{field}: {} does not exist", p.display()))
            }
        };
        must_exist("corpus", &self.paths.corpus)?;
        must_exist("queries", &self.paths.queries)?;
        if let Some(q) = &self.paths.qrels {
            must_exist("qrels", q)?;
        }
        if let Some(t) = &self.paths.templates {
            must_exist("templates", t)?;
        }
        if self.run_tag.is_empty() || self.run_tag.chars().any(char::is_whitespace) {
            bail!(
                "run_tag: must be non-empty without whitespace, got {:?}",
                self.run_tag
            );
        }
        self.lamer.validate().map_err(|e| anyhow!("lamer: {e}"))?;
        if self.lamer.needs_qrels() && self.paths.qrels.is_none() {
            bail!("paths.qrels: required by oracle demo selection");
        }
        if self.backend.kind == BackendKind::Openai && self.backend.base_url.is_none() {
            bail!("backend.base_url: required for kind = \"openai\" (or set {ENV_API_BASE})");
        }
        if self.backend.kind == BackendKind::Openai && self.backend.stub.is_some() {
            bail!("backend.stub: only valid with kind = \"stub\"");
        }
        if self.cache.enabled && self.cache.dir.is_none() {
            bail!("cache.dir: required when cache.enabled = true");
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).context("cannot serialize manifest")
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create a temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .with_context(|| format!("cannot write {}", path.display()))?;
    tmp.persist(path)
        .map_err(|e| e.error)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

pub fn cmd_index(args: &IndexArgs) -> Result<InvertedIndex> {
    let docs = load_corpus(&args.corpus)?;
    let options = AnalysisOptions {
        truncation_cap: (args.cap > 0).then_some(args.cap),
        include_title: !args.no_title,
    };
    let idx = build_index(&docs, options);
    save_index(&idx, &args.out)?;
    log::info!(
        "indexed {} documents, {} terms into {}",
        idx.collection_size(),
        idx.num_terms(),
        args.out.display()
    );
    Ok(idx)
}

pub fn cmd_search(args: &SearchArgs) -> Result<RunFile> {
    let params = args.bm25.params()?;
    if args.depth == 0 {
        bail!("depth: must be at least 1");
    }
    let idx = load_index(&args.index)?;
    let queries = load_queries(&args.queries)?;
    let ranked: Vec<_> = queries
        .par_iter()
        .map(|q| retrieve(&idx, &params, &q.text, args.depth))
        .collect();
    let mut run = RunFile::new(&args.run_tag);
    for (q, r) in queries.iter().zip(ranked) {
        run.push(q.query_id.clone(), r);
    }
    write_atomic(&args.output, run.to_trec_string().as_bytes())?;
    Ok(run)
}

fn open_or_build_index(m: &RunManifest, docs: &crate::corpus::Collection) -> Result<InvertedIndex> {
    let dir = &m.paths.index_dir;
    let options = m.index.options();
    if dir.join(crate::index::META_FILE).exists() {
        let idx = load_index(dir).with_context(|| format!("paths.index_dir: {}", dir.display()))?;
        if idx.options() != options {
            bail!(
                "index: {} was built with {:?}, manifest asks for {:?}",
                dir.display(),
                idx.options(),
                options
            );
        }
        if idx.collection_size() != docs.len() {
            bail!(
                "paths.index_dir: {} holds {} documents but the corpus has {}",
                dir.display(),
                idx.collection_size(),
                docs.len()
            );
        }
        return Ok(idx);
    }
    log::info!("no index at {}; building one", dir.display());
    let idx = build_index(docs, options);
    save_index(&idx, dir)?;
    Ok(idx)
}

fn api_key(env: &dyn Env) -> Option<String> {
    ENV_API_KEYS.iter().find_map(|k| env.var(k))
}

fn make_backend(m: &RunManifest, env: &dyn Env) -> Result<Box<dyn GenerationBackend>> {
    let inner: Box<dyn GenerationBackend> = match m.backend.kind {
        BackendKind::Stub => Box::new(stub_backend(
            m.backend.stub.clone().unwrap_or(StubMode::EchoTopCandidate),
        )),
        BackendKind::Openai => {
            let base = m.backend.base_url.clone().unwrap_or_default();
            let key = api_key(env);
            if key.is_none() {
                log::warn!("no API key in {}", ENV_API_KEYS.join(" or "));
            }
            Box::new(OpenAiBackend::new(
                base,
                key,
                Duration::from_secs_f64(m.lamer.generation.timeout_secs),
            ))
        }
    };
    match (&m.cache.dir, m.cache.enabled) {
        (Some(dir), true) => Ok(Box::new(
            CachedBackend::new(inner, dir)
                .with_context(|| format!("cache.dir: cannot use {}", dir.display()))?,
        )),
        _ => Ok(inner),
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub run_path: PathBuf,
    pub report_path: PathBuf,
    pub manifest_path: PathBuf,
    pub num_queries: usize,
    pub fallbacks: usize,
}

/// Load, override, validate and execute a manifest. Writes `run.trec`,
/// `report.json` and the effective `manifest.toml` into the output directory.
pub fn cmd_run(args: &RunArgs, env: &dyn Env) -> Result<RunSummary> {
    let mut m = RunManifest::load(&args.manifest, env)?;
    m.apply_overrides(args);
    m.validate()?;

    let docs = load_corpus(&m.paths.corpus)?;
    let queries = load_queries(&m.paths.queries)?;
    let qrels = m.paths.qrels.as_ref().map(load_qrels).transpose()?;
    let idx = open_or_build_index(&m, &docs)?;
    let templates = match &m.paths.templates {
        Some(p) => TemplateSet::builtin_with_overrides(p)?,
        None => TemplateSet::builtin(),
    };
    let template = templates
        .get(&m.lamer.template)
        .map_err(|e| anyhow!("lamer.template: {e}"))?;
    let backend = make_backend(&m, env)?;

    let pipeline = Pipeline::new(
        &idx,
        &docs,
        template,
        qrels.as_ref(),
        backend.as_ref(),
        &m.lamer,
    )?;
    let out = pipeline.run_batch(&queries, &m.run_tag)?;

    let dir = &m.paths.output_dir;
    let summary = RunSummary {
        run_path: dir.join("run.trec"),
        report_path: dir.join("report.json"),
        manifest_path: dir.join("manifest.toml"),
        num_queries: out.report.num_queries,
        fallbacks: out.report.fallbacks,
    };
    write_atomic(&summary.run_path, out.run.to_trec_string().as_bytes())?;
    let mut report = serde_json::to_vec_pretty(&out.report)?;
    report.push(b'\n');
    write_atomic(&summary.report_path, &report)?;
    write_atomic(&summary.manifest_path, m.to_toml_string()?.as_bytes())?;
    if summary.fallbacks > 0 {
        log::warn!(
            "{} of {} queries fell back to BM25; see {}",
            summary.fallbacks,
            summary.num_queries,
            summary.report_path.display()
        );
    }
    Ok(summary)
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let run = load_run(&args.run)?;
    let mut qrels = load_qrels(&args.qrels)?;
    qrels.set_threshold(args.threshold);
    let report = evaluate_run(&run, &qrels);
    if let Some(path) = &args.json {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)?;
    }
    Ok(report.to_table(args.per_query))
}

pub fn cmd_stats(args: &StatsArgs) -> Result<String> {
    let params = args.bm25.params()?;
    let idx = load_index(&args.index)?;
    let queries = args.queries.as_ref().map(load_queries).transpose()?;
    let report = stats(&idx, queries.as_deref().map(|q| (q, &params, args.depth)))?;
    if args.json {
        return Ok(serde_json::to_string_pretty(&report)? + "\n");
    }
    let mut out = format!(
        "index bytes    {}\nterms          {}\ndocuments      {}\navg length     {:.2}\ntokens         {}\n",
        report.index_bytes,
        report.num_terms,
        report.collection_size,
        report.avg_doc_length,
        report.total_tokens
    );
    if let Some(t) = &report.throughput {
        out += &format!(
            "queries        {}\ndepth          {}\nseconds        {:.3}\nQPS            {:.1}\n",
            t.queries, t.depth, t.elapsed_secs, t.queries_per_second
        );
    }
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Index(a) => {
            let idx = cmd_index(&a)?;
            println!(
                "{} documents, {} terms -> {}",
                idx.collection_size(),
                idx.num_terms(),
                a.out.display()
            );
        }
        Command::Search(a) => {
            let run = cmd_search(&a)?;
            println!("{} queries -> {}", run.num_queries(), a.output.display());
        }
        Command::Run(a) => {
            let s = cmd_run(&a, &ProcessEnv)?;
            println!(
                "{} queries ({} fallbacks) -> {}",
                s.num_queries,
                s.fallbacks,
                s.run_path.display()
            );
        }
        Command::Eval(a) => print!("{}", cmd_eval(&a)?),
        Command::Stats(a) => print!("{}", cmd_stats(&a)?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;
    use std::collections::HashMap;

    const MINIMAL: &str = r#"
[paths]
corpus = "c.jsonl"
queries = "q.tsv"
index_dir = "idx"
output_dir = "out"
"#;

    fn env(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn manifest_defaults() {
        let m = RunManifest::from_toml_str(MINIMAL, &env(&[])).unwrap();
        assert_eq!(m.run_tag, "lamer");
        assert_eq!(m.lamer, LamerConfig::default());
        assert_eq!(m.index.options(), AnalysisOptions::default());
        assert_eq!(m.backend.kind, BackendKind::Stub);
        assert!(!m.cache.enabled);
    }

    #[test]
    fn precedence_flags_over_manifest_over_env() {
        let e = env(&[
            (ENV_CONCURRENCY, "7"),
            (ENV_MODEL, "env-model"),
            (ENV_API_BASE, "http://env"),
        ]);
        let m = RunManifest::from_toml_str(MINIMAL, &e).unwrap();
        assert_eq!(m.lamer.concurrency, 7);
        assert_eq!(m.lamer.generation.model_name, "env-model");
        assert_eq!(m.backend.base_url.as_deref(), Some("http://env"));

        let text = format!(
            "{MINIMAL}\n[lamer]\nconcurrency = 2\n[lamer.generation]\nmodel_name = \"file\"\n"
        );
        let mut m = RunManifest::from_toml_str(&text, &e).unwrap();
        assert_eq!(m.lamer.concurrency, 2);
        assert_eq!(m.lamer.generation.model_name, "file");

        m.apply_overrides(&RunArgs {
            concurrency: Some(9),
            ..Default::default()
        });
        assert_eq!(m.lamer.concurrency, 9);
        assert_eq!(m.lamer.generation.model_name, "file");
    }

    #[test]
    fn errors_name_the_field() {
        let err = |text: &str| {
            format!(
                "{:#}",
                RunManifest::from_toml_str(text, &env(&[])).unwrap_err()
            )
        };
        assert!(
            err(&format!("{MINIMAL}\n[backend]\napi_key = \"sk\"\n")).contains("backend.api_key")
        );
        assert!(err(&format!("{MINIMAL}\n[lamer]\nnum_demoz = 3\n")).contains("num_demoz"));
        assert!(err("[paths]\ncorpus = \"c\"\n").contains("queries"));
        let e = format!(
            "{:#}",
            RunManifest::from_toml_str(MINIMAL, &env(&[(ENV_CONCURRENCY, "lots")])).unwrap_err()
        );
        assert!(e.contains(ENV_CONCURRENCY));

        let mut m = RunManifest::from_toml_str(MINIMAL, &env(&[])).unwrap();
        m.resolve_paths(Path::new("/nonexistent"));
        assert!(format!("{:#}", m.validate().unwrap_err()).contains("paths.corpus"));
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let mut m = RunManifest::from_toml_str(MINIMAL, &env(&[])).unwrap();
        m.resolve_paths(Path::new("/data/exp"));
        assert_eq!(m.paths.corpus, Path::new("/data/exp/c.jsonl"));
        assert_eq!(m.paths.output_dir, Path::new("/data/exp/out"));
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let text = format!(
            "{MINIMAL}\n[lamer]\nmode = \"second_round\"\n[lamer.demo_selection]\nscheme = \"sample_top_n\"\nn = 100\n\
             [backend]\nkind = \"stub\"\n[backend.stub]\nmode = \"keyed_hash\"\nquery_only = true\n"
        );
        let m = RunManifest::from_toml_str(&text, &env(&[])).unwrap();
        let again = RunManifest::from_toml_str(&m.to_toml_string().unwrap(), &env(&[])).unwrap();
        assert_eq!(m, again);
    }
}
