//! Run configuration, the run manifest and the staged `run-all` driver.
//!
//! A run directory holds one artifact per stage:
//!
//! | stage      | artifact                          |
//! |------------|-----------------------------------|
//! | sample     | `sample.jsonl`                    |
//! | conditions | `items.jsonl`                     |
//! | infer      | `responses.jsonl`                 |
//! | parse      | `parsed.jsonl`                    |
//! | claims     | `nvc.jsonl`                       |
//! | score      | `outcomes.jsonl`, `metrics.json`  |
//! | stats      | `stats.json`                      |
//! | audit      | `audit_queue.jsonl`               |
//! | report     | `report.json`, `.csv`, `.md`      |
//!
//! A stage whose artifact exists is loaded instead of recomputed. Once a
//! stage runs, every later stage runs too.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::agents::{AgentKind, AgentSpec};
use crate::audit::{select_high_risk, AuditCase};
use crate::claims::{load_lexicon, tag_response, NvcRecord, VisualLexicon};
use crate::corpus::{
    assign_shuffle, build_evaluation_items, load_benchmark, stratified_sample, BenchmarkExample, BenchmarkFormat,
    EvaluationItem,
};
use crate::inference::{
    run_inference, DecodeParams, EndpointConfig, InferenceOptions, ModelSource, PromptTemplate, RawResponse,
    ReplayStore, ResponseSource,
};
use crate::io::{self, sha256_hex};
use crate::metrics::{compute_metrics, score_records, ExampleOutcome, Metric, MetricsReport};
use crate::parsing::{parse_response, NormalizationConfig, Normalizer, ResponseRecord};
use crate::report::{self, build_report};
use crate::stats::{compute_stats, StatsConfig, StatsReport};

pub const SEED_NAMES: [&str; 5] = ["sample", "shuffle", "bootstrap", "permutation", "audit"];

pub const DEFAULT_AUDIT_PER_MODEL: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    Read { path: String, message: String },
    Parse(String),
    NoBenchmarks,
    NoModels,
    MissingSeed(&'static str),
    BenchmarkPath { id: String, path: String },
    BenchmarkFormat { id: String, format: String },
    ZeroSample { id: String },
    SourceConflict { model: String, sources: Vec<&'static str> },
    NoSource { model: String },
    Endpoint { model: String, message: String },
    ReplayPath { model: String, path: String },
    AgentField { model: String, message: String },
    FileMissing { section: &'static str, path: String },
    Stats(String),
    UnknownMetric(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Read { path, message } => write!(f, "cannot read config {path}: {message}"),
            ConfigError::Parse(m) => write!(f, "config does not parse: {m}"),
            ConfigError::NoBenchmarks => write!(f, "[benchmarks] lists no benchmark"),
            ConfigError::NoModels => write!(f, "[models] lists no model"),
            ConfigError::MissingSeed(name) => write!(f, "missing seed: seeds.{name}"),
            ConfigError::BenchmarkPath { id, path } => write!(f, "benchmark {id}: file {path} not found"),
            ConfigError::BenchmarkFormat { id, format } => {
                write!(f, "benchmark {id}: unknown format \"{format}\" (expected jsonl or csv)")
            }
            ConfigError::ZeroSample { id } => write!(f, "benchmark {id}: n must be at least 2"),
            ConfigError::SourceConflict { model, sources } => {
                write!(f, "model {model}: more than one source set ({})", sources.join(", "))
            }
            ConfigError::NoSource { model } => write!(f, "model {model}: set one of endpoint, replay or agent"),
            ConfigError::Endpoint { model, message } => write!(f, "model {model}: {message}"),
            ConfigError::ReplayPath { model, path } => write!(f, "model {model}: replay log {path} not found"),
            ConfigError::AgentField { model, message } => write!(f, "model {model}: {message}"),
            ConfigError::FileMissing { section, path } => write!(f, "[{section}] path {path} not found"),
            ConfigError::Stats(m) => write!(f, "[stats] {m}"),
            ConfigError::UnknownMetric(m) => write!(f, "[stats] unknown metric \"{m}\""),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Display helper for an error list, one error per line.
pub struct ConfigErrors<'a>(pub &'a [ConfigError]);

impl fmt::Display for ConfigErrors<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub path: PathBuf,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Base URL of an OpenAI-compatible chat-completions server.
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub auth_token_env: Option<String>,
    pub timeout_s: Option<f64>,
    pub max_retries: Option<u32>,
    pub max_parallel: Option<usize>,
    pub backoff_ms: Option<u64>,
    /// Response log to replay.
    pub replay: Option<PathBuf>,
    pub agent: Option<String>,
    pub accuracy: Option<f64>,
    pub seed: Option<u64>,
    pub mixture_weight: Option<f64>,
}

impl ModelConfig {
    fn sources(&self) -> Vec<&'static str> {
        let mut set = Vec::new();
        if self.endpoint.is_some() {
            set.push("endpoint");
        }
        if self.replay.is_some() {
            set.push("replay");
        }
        if self.agent.is_some() {
            set.push("agent");
        }
        set
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub sample: Option<u64>,
    pub shuffle: Option<u64>,
    pub bootstrap: Option<u64>,
    pub permutation: Option<u64>,
    pub audit: Option<u64>,
}

impl SeedsConfig {
    fn get(&self, name: &str) -> Option<u64> {
        match name {
            "sample" => self.sample,
            "shuffle" => self.shuffle,
            "bootstrap" => self.bootstrap,
            "permutation" => self.permutation,
            "audit" => self.audit,
            _ => None,
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, u64> {
        SEED_NAMES
            .iter()
            .filter_map(|n| self.get(n).map(|v| (n.to_string(), v)))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_perm_replicates")]
    pub permutation_replicates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<String>>,
}

fn default_replicates() -> usize {
    1000
}
fn default_level() -> f64 {
    0.95
}
fn default_perm_replicates() -> usize {
    10_000
}

impl Default for StatsSection {
    fn default() -> Self {
        StatsSection {
            replicates: default_replicates(),
            level: default_level(),
            permutation_replicates: default_perm_replicates(),
            metrics: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    #[serde(default = "default_per_model")]
    pub per_model: usize,
}

fn default_per_model() -> usize {
    DEFAULT_AUDIT_PER_MODEL
}

impl Default for AuditSection {
    fn default() -> Self {
        AuditSection {
            per_model: DEFAULT_AUDIT_PER_MODEL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    #[serde(default = "default_workers")]
    pub max_parallel: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
}

fn default_workers() -> usize {
    4
}
fn default_temperature() -> f64 {
    0.0
}
fn default_max_tokens() -> u32 {
    1024
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            max_parallel: default_workers(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// The parsed config file. Relative paths resolve against `base_dir`, the
/// directory holding the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    #[serde(default)]
    pub benchmarks: BTreeMap<String, BenchmarkConfig>,
    /// Kept in file order; this is the model order of every report.
    #[serde(default)]
    pub models: IndexMap<String, ModelConfig>,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub lexicon: PathSection,
    #[serde(default)]
    pub prompt: PathSection,
    #[serde(default)]
    pub normalization: PathSection,
    #[serde(default)]
    pub stats: StatsSection,
    #[serde(default)]
    pub audit: AuditSection,
    #[serde(default)]
    pub inference: InferenceSection,
    pub output: OutputSection,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Config {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Config, ConfigError> {
        let mut cfg: Config = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new("")))
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.output.dir)
    }

    pub fn model_order(&self) -> Vec<String> {
        self.models.keys().cloned().collect()
    }

    pub fn seed(&self, name: &str) -> u64 {
        self.seeds.get(name).unwrap_or(0)
    }

    pub fn stats_metrics(&self) -> Vec<Metric> {
        match &self.stats.metrics {
            None => Metric::ALL.to_vec(),
            Some(names) => names.iter().filter_map(|m| m.parse().ok()).collect(),
        }
    }
}

fn parse_format(format: Option<&str>, path: &Path) -> Result<BenchmarkFormat, String> {
    match format.map(str::to_ascii_lowercase).as_deref() {
        None => Ok(BenchmarkFormat::from_path(path)),
        Some("jsonl") | Some("json") => Ok(BenchmarkFormat::Jsonl),
        Some("csv") => Ok(BenchmarkFormat::Csv),
        Some(other) => Err(other.to_string()),
    }
}

fn parse_agent_kind(name: &str) -> Result<AgentKind, String> {
    name.parse::<AgentKind>()
}

/// Checks paths, seeds and model sources. Returns every problem found.
pub fn validate_config(cfg: &Config) -> Vec<ConfigError> {
    let mut errors = Vec::new();
    if cfg.benchmarks.is_empty() {
        errors.push(ConfigError::NoBenchmarks);
    }
    for (id, b) in &cfg.benchmarks {
        let path = cfg.resolve(&b.path);
        if !path.is_file() {
            errors.push(ConfigError::BenchmarkPath {
                id: id.clone(),
                path: b.path.display().to_string(),
            });
        }
        if let Err(format) = parse_format(b.format.as_deref(), &path) {
            errors.push(ConfigError::BenchmarkFormat { id: id.clone(), format });
        }
        if b.n < 2 {
            errors.push(ConfigError::ZeroSample { id: id.clone() });
        }
    }
    if cfg.models.is_empty() {
        errors.push(ConfigError::NoModels);
    }
    for (id, m) in &cfg.models {
        let sources = m.sources();
        match sources.len() {
            0 => errors.push(ConfigError::NoSource { model: id.clone() }),
            1 => {}
            _ => errors.push(ConfigError::SourceConflict {
                model: id.clone(),
                sources: sources.clone(),
            }),
        }
        if m.endpoint.is_some() {
            if let Err(e) = endpoint_config(id, m).validate() {
                errors.push(ConfigError::Endpoint {
                    model: id.clone(),
                    message: e.to_string(),
                });
            }
        }
        if let Some(replay) = &m.replay {
            if !cfg.resolve(replay).is_file() {
                errors.push(ConfigError::ReplayPath {
                    model: id.clone(),
                    path: replay.display().to_string(),
                });
            }
        }
        if let Some(agent) = &m.agent {
            if let Err(message) = parse_agent_kind(agent) {
                errors.push(ConfigError::AgentField { model: id.clone(), message });
            }
            for (name, value) in [("accuracy", m.accuracy), ("mixture_weight", m.mixture_weight)] {
                if value.is_some_and(|v| !(0.0..=1.0).contains(&v)) {
                    errors.push(ConfigError::AgentField {
                        model: id.clone(),
                        message: format!("{name} must lie in [0, 1]"),
                    });
                }
            }
        }
    }
    for name in SEED_NAMES {
        if cfg.seeds.get(name).is_none() {
            errors.push(ConfigError::MissingSeed(name));
        }
    }
    for (section, p) in [
        ("lexicon", &cfg.lexicon.path),
        ("prompt", &cfg.prompt.path),
        ("normalization", &cfg.normalization.path),
    ] {
        if let Some(p) = p {
            if !cfg.resolve(p).is_file() {
                errors.push(ConfigError::FileMissing {
                    section,
                    path: p.display().to_string(),
                });
            }
        }
    }
    if cfg.stats.replicates == 0 || cfg.stats.permutation_replicates == 0 {
        errors.push(ConfigError::Stats("replicate counts must be positive".into()));
    }
    if !(cfg.stats.level > 0.0 && cfg.stats.level < 1.0) {
        errors.push(ConfigError::Stats("level must lie strictly between 0 and 1".into()));
    }
    for name in cfg.stats.metrics.iter().flatten() {
        if name.parse::<Metric>().is_err() {
            errors.push(ConfigError::UnknownMetric(name.clone()));
        }
    }
    errors
}

/// Loads and validates a config file, returning the full error list on failure.
pub fn load_config(path: &Path) -> Result<Config, Vec<ConfigError>> {
    let cfg = Config::load(path).map_err(|e| vec![e])?;
    let errors = validate_config(&cfg);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

fn endpoint_config(model_id: &str, m: &ModelConfig) -> EndpointConfig {
    let mut cfg = EndpointConfig::new(
        m.endpoint.clone().unwrap_or_default(),
        m.model_name.clone().unwrap_or_else(|| model_id.to_string()),
    );
    cfg.auth_token_env = m.auth_token_env.clone();
    if let Some(v) = m.timeout_s {
        cfg.timeout_s = v;
    }
    if let Some(v) = m.max_retries {
        cfg.max_retries = v;
    }
    if let Some(v) = m.max_parallel {
        cfg.max_parallel = v;
    }
    if let Some(v) = m.backoff_ms {
        cfg.backoff_ms = v;
    }
    cfg
}

fn agent_spec(m: &ModelConfig) -> anyhow::Result<AgentSpec> {
    let kind = parse_agent_kind(m.agent.as_deref().unwrap_or_default()).map_err(|e| anyhow!(e))?;
    let mut spec = AgentSpec::new(kind).with_seed(m.seed.unwrap_or(0));
    if let Some(a) = m.accuracy {
        spec = spec.with_accuracy(a);
    }
    if let Some(w) = m.mixture_weight {
        spec = spec.with_mixture_weight(w);
    }
    Ok(spec)
}

/// Response sources for every configured model, in configured order.
pub fn model_sources(cfg: &Config) -> anyhow::Result<Vec<ModelSource>> {
    let mut stores: HashMap<PathBuf, Arc<ReplayStore>> = HashMap::new();
    let mut out = Vec::new();
    for (id, m) in &cfg.models {
        let source = if m.endpoint.is_some() {
            ResponseSource::Endpoint(endpoint_config(id, m))
        } else if let Some(replay) = &m.replay {
            let path = cfg.resolve(replay);
            let store = match stores.get(&path) {
                Some(s) => s.clone(),
                None => {
                    let s = Arc::new(
                        ReplayStore::load(&path).with_context(|| format!("loading replay log {}", path.display()))?,
                    );
                    stores.insert(path, s.clone());
                    s
                }
            };
            ResponseSource::Replay(store)
        } else {
            ResponseSource::Agent(agent_spec(m)?)
        };
        out.push(ModelSource {
            model_id: id.clone(),
            source,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBenchmark {
    pub id: String,
    pub path: String,
    pub sha256: String,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestModel {
    pub model_id: String,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub tool_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub benchmarks: Vec<ManifestBenchmark>,
    pub models: Vec<ManifestModel>,
    pub lexicon_version: String,
    pub normalization_version: String,
    pub prompt_version: String,
    pub decode_params: DecodeParams,
    pub stats: StatsSection,
    pub audit_per_model: usize,
    /// Creation time. Excluded from [`RunManifest::content_hash`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
}

impl RunManifest {
    /// SHA-256 over everything that determines the outputs: not the run id
    /// and not the timestamp.
    pub fn content_hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.run_id.clear();
        stripped.created_at = None;
        sha256_hex(&serde_json::to_vec(&stripped).expect("manifest serializes"))
    }
}

/// Assets a run needs besides the benchmark files.
#[derive(Debug, Clone)]
pub struct RunAssets {
    pub lexicon: VisualLexicon,
    pub normalizer: Normalizer,
    pub template: PromptTemplate,
}

pub fn load_assets(cfg: &Config) -> anyhow::Result<RunAssets> {
    let lexicon = match &cfg.lexicon.path {
        Some(p) => load_lexicon(&cfg.resolve(p))?,
        None => VisualLexicon::shipped(),
    };
    let normalization = match &cfg.normalization.path {
        Some(p) => NormalizationConfig::load(&cfg.resolve(p))?,
        None => NormalizationConfig::default(),
    };
    let template = match &cfg.prompt.path {
        Some(p) => PromptTemplate::load(&cfg.resolve(p))?,
        None => PromptTemplate::default(),
    };
    Ok(RunAssets {
        lexicon,
        normalizer: Normalizer::new(normalization),
        template,
    })
}

fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn build_manifest(cfg: &Config, assets: &RunAssets) -> anyhow::Result<RunManifest> {
    let mut benchmarks = Vec::new();
    for (id, b) in &cfg.benchmarks {
        benchmarks.push(ManifestBenchmark {
            id: id.clone(),
            path: b.path.display().to_string(),
            sha256: file_sha256(&cfg.resolve(&b.path))?,
            n: b.n,
        });
    }
    let mut models = Vec::new();
    for (id, m) in &cfg.models {
        let mut entry = ManifestModel {
            model_id: id.clone(),
            source: m.sources().first().copied().unwrap_or("none").to_string(),
            endpoint: None,
            model_name: None,
            replay_path: None,
            replay_sha256: None,
            agent: None,
        };
        if m.endpoint.is_some() {
            let e = endpoint_config(id, m);
            entry.endpoint = Some(e.base_url);
            entry.model_name = Some(e.model_name);
        } else if let Some(replay) = &m.replay {
            entry.replay_path = Some(replay.display().to_string());
            entry.replay_sha256 = Some(file_sha256(&cfg.resolve(replay))?);
        } else {
            entry.agent = Some(agent_spec(m)?);
        }
        models.push(entry);
    }
    let mut manifest = RunManifest {
        run_id: String::new(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: cfg.seeds.to_map(),
        benchmarks,
        models,
        lexicon_version: assets.lexicon.version.clone(),
        normalization_version: assets.normalizer.version().to_string(),
        prompt_version: assets.template.version.clone(),
        decode_params: decode_params(cfg),
        stats: cfg.stats.clone(),
        audit_per_model: cfg.audit.per_model,
        created_at: Some(chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)),
    };
    manifest.run_id = match &cfg.run_id {
        Some(id) => id.clone(),
        None => format!("run-{}", &manifest.content_hash()[..12]),
    };
    Ok(manifest)
}

fn decode_params(cfg: &Config) -> DecodeParams {
    DecodeParams {
        temperature: cfg.inference.temperature,
        max_tokens: cfg.inference.max_tokens,
    }
}

/// Loads a benchmark file. With `id` set, it replaces the id derived from
/// the file name.
pub fn load_benchmark_as(path: &Path, format: BenchmarkFormat, id: Option<&str>) -> anyhow::Result<Vec<BenchmarkExample>> {
    let mut examples = load_benchmark(path, format)?;
    if let Some(id) = id {
        for e in &mut examples {
            e.benchmark_id = id.to_string();
        }
    }
    Ok(examples)
}

/// Stratified sample of `n` examples from each benchmark, all drawn with
/// the same seed. Output is grouped by benchmark in input order.
pub fn sample_benchmarks(benchmarks: &[(Vec<BenchmarkExample>, usize)], seed: u64) -> anyhow::Result<Vec<BenchmarkExample>> {
    let mut out = Vec::new();
    for (examples, n) in benchmarks {
        let id = examples.first().map(|e| e.benchmark_id.as_str()).unwrap_or("?");
        out.extend(stratified_sample(examples, *n, seed).with_context(|| format!("sampling benchmark {id}"))?);
    }
    Ok(out)
}

/// Blank and shuffled conditions for a sample that may span benchmarks.
/// Shuffle donors are drawn within each benchmark.
pub fn make_conditions(sample: &[BenchmarkExample], shuffle_seed: u64, sample_seed: u64) -> anyhow::Result<Vec<EvaluationItem>> {
    let mut by_benchmark: BTreeMap<&str, Vec<BenchmarkExample>> = BTreeMap::new();
    for e in sample {
        by_benchmark.entry(e.benchmark_id.as_str()).or_default().push(e.clone());
    }
    let mut items = Vec::with_capacity(sample.len());
    for (id, examples) in by_benchmark {
        let map = assign_shuffle(&examples, shuffle_seed).with_context(|| format!("shuffling benchmark {id}"))?;
        items.extend(build_evaluation_items(&examples, &map, sample_seed)?);
    }
    Ok(items)
}

/// Parses every response against the options of its item.
pub fn parse_responses(
    items: &[EvaluationItem],
    responses: &[RawResponse],
    normalizer: &Normalizer,
) -> anyhow::Result<Vec<ResponseRecord>> {
    let by_id: HashMap<String, &EvaluationItem> = items.iter().map(|i| (i.item_id(), i)).collect();
    responses
        .iter()
        .map(|r| {
            let item = by_id
                .get(&r.item_id)
                .ok_or_else(|| anyhow!("response for unknown item {}", r.item_id))?;
            Ok(parse_response(r, item.base.answer_options.as_deref(), normalizer))
        })
        .collect()
}

/// Claim detection for every parsed response.
pub fn tag_claims(
    items: &[EvaluationItem],
    records: &[ResponseRecord],
    lexicon: &VisualLexicon,
) -> anyhow::Result<Vec<NvcRecord>> {
    let by_id: HashMap<String, &EvaluationItem> = items.iter().map(|i| (i.item_id(), i)).collect();
    records
        .iter()
        .map(|r| {
            let item = by_id
                .get(&r.item_id)
                .ok_or_else(|| anyhow!("parsed record for unknown item {}", r.item_id))?;
            Ok(tag_response(r, &item.base.question, lexicon))
        })
        .collect()
}

/// Provenance fields copied into the metrics artifact.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub run_id: String,
    pub lexicon_version: String,
    pub normalization_version: String,
    pub seeds: BTreeMap<String, u64>,
    pub models: Vec<String>,
    pub benchmarks: Vec<String>,
}

pub fn metrics_report(outcomes: &[ExampleOutcome], ctx: &RunContext) -> anyhow::Result<MetricsReport> {
    let (per_benchmark, overall) = compute_metrics(outcomes, &ctx.models)?;
    let mut models = ctx.models.clone();
    for g in &per_benchmark {
        if !models.contains(&g.model_id) {
            models.push(g.model_id.clone());
        }
    }
    let mut benchmarks = ctx.benchmarks.clone();
    for g in &per_benchmark {
        if !benchmarks.contains(&g.benchmark_id) {
            benchmarks.push(g.benchmark_id.clone());
        }
    }
    benchmarks.sort();
    Ok(MetricsReport {
        run_id: ctx.run_id.clone(),
        lexicon_version: ctx.lexicon_version.clone(),
        normalization_version: ctx.normalization_version.clone(),
        seeds: ctx.seeds.clone(),
        models,
        benchmarks,
        per_benchmark,
        overall,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub out_dir: PathBuf,
    pub manifest_hash: String,
    pub stages: Vec<(String, StageStatus)>,
}

impl RunSummary {
    pub fn status(&self, stage: &str) -> Option<StageStatus> {
        self.stages.iter().find(|(s, _)| s == stage).map(|(_, st)| *st)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid config:\n{}", ConfigErrors(.0))]
    Config(Vec<ConfigError>),
    #[error("{dir} holds a run with a different manifest; choose another output dir or force a rerun")]
    ManifestMismatch { dir: String },
    #[error("stage {stage} failed: {message:#}\npartial artifacts are in {dir}")]
    Stage {
        stage: &'static str,
        dir: String,
        message: anyhow::Error,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::ManifestMismatch { .. } => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Recompute every stage even when artifacts exist, and accept an
    /// existing manifest that differs.
    pub force: bool,
}

struct Runner {
    dir: PathBuf,
    dirty: bool,
    force: bool,
    stages: Vec<(String, StageStatus)>,
}

impl Runner {
    fn fail(&self, stage: &'static str, e: anyhow::Error) -> PipelineError {
        PipelineError::Stage {
            stage,
            dir: self.dir.display().to_string(),
            message: e,
        }
    }

    fn reusable(&self, files: &[&str]) -> bool {
        !self.dirty && !self.force && files.iter().all(|f| self.dir.join(f).is_file())
    }

    fn mark(&mut self, stage: &str, status: StageStatus) {
        if status == StageStatus::Ran {
            self.dirty = true;
        }
        log::info!("stage {stage}: {status:?}");
        self.stages.push((stage.to_string(), status));
    }

    fn jsonl<T, F>(&mut self, stage: &'static str, file: &str, compute: F) -> Result<Vec<T>, PipelineError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> anyhow::Result<Vec<T>>,
    {
        let path = self.dir.join(file);
        if self.reusable(&[file]) {
            let records = io::read_jsonl(&path).map_err(|e| self.fail(stage, e.into()))?;
            self.mark(stage, StageStatus::Reused);
            return Ok(records);
        }
        let records = compute().map_err(|e| self.fail(stage, e))?;
        io::write_jsonl(&path, &records).map_err(|e| self.fail(stage, e.into()))?;
        self.mark(stage, StageStatus::Ran);
        Ok(records)
    }

    fn json<T, F>(&mut self, stage: &'static str, file: &str, compute: F) -> Result<T, PipelineError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> anyhow::Result<T>,
    {
        let path = self.dir.join(file);
        if self.reusable(&[file]) {
            let value = io::read_json(&path).map_err(|e| self.fail(stage, e.into()))?;
            self.mark(stage, StageStatus::Reused);
            return Ok(value);
        }
        let value = compute().map_err(|e| self.fail(stage, e))?;
        io::write_json_pretty(&path, &value).map_err(|e| self.fail(stage, e.into()))?;
        self.mark(stage, StageStatus::Ran);
        Ok(value)
    }
}

pub fn run_all_from_file(config_path: &Path, options: RunOptions) -> Result<RunSummary, PipelineError> {
    let cfg = load_config(config_path).map_err(PipelineError::Config)?;
    run_all(&cfg, options)
}

/// Runs sample, conditions, infer, parse, claims, score, stats, audit and
/// report, reusing artifacts already present in the output directory.
pub fn run_all(cfg: &Config, options: RunOptions) -> Result<RunSummary, PipelineError> {
    let errors = validate_config(cfg);
    if !errors.is_empty() {
        return Err(PipelineError::Config(errors));
    }
    let dir = cfg.output_dir();
    let mut runner = Runner {
        dir: dir.clone(),
        dirty: false,
        force: options.force,
        stages: Vec::new(),
    };

    let assets = load_assets(cfg).map_err(|e| runner.fail("setup", e))?;
    let mut manifest = build_manifest(cfg, &assets).map_err(|e| runner.fail("setup", e))?;
    let manifest_path = dir.join("manifest.json");
    if manifest_path.is_file() {
        let existing: RunManifest = io::read_json(&manifest_path).map_err(|e| runner.fail("setup", e.into()))?;
        if existing.content_hash() != manifest.content_hash() || existing.run_id != manifest.run_id {
            if !options.force {
                return Err(PipelineError::ManifestMismatch {
                    dir: dir.display().to_string(),
                });
            }
        } else {
            manifest = existing;
        }
    }
    if !manifest_path.is_file() || options.force {
        io::write_json_pretty(&manifest_path, &manifest).map_err(|e| runner.fail("setup", e.into()))?;
    }
    let manifest_hash = manifest.content_hash();
    let run_id = manifest.run_id.clone();

    let sample: Vec<BenchmarkExample> = runner.jsonl("sample", "sample.jsonl", || {
        let mut loaded = Vec::new();
        for (id, b) in &cfg.benchmarks {
            let path = cfg.resolve(&b.path);
            let format = parse_format(b.format.as_deref(), &path).map_err(|f| anyhow!("unknown format {f}"))?;
            loaded.push((load_benchmark_as(&path, format, Some(id))?, b.n));
        }
        sample_benchmarks(&loaded, cfg.seed("sample"))
    })?;

    let items: Vec<EvaluationItem> = runner.jsonl("conditions", "items.jsonl", || {
        make_conditions(&sample, cfg.seed("shuffle"), cfg.seed("sample"))
    })?;

    let responses: Vec<RawResponse> = runner.jsonl("infer", "responses.jsonl", || {
        let models = model_sources(cfg)?;
        let options = InferenceOptions {
            template: assets.template.clone(),
            decode_params: decode_params(cfg),
            max_parallel: cfg.inference.max_parallel,
        };
        Ok(run_inference(&items, &models, &options)?)
    })?;

    let parsed: Vec<ResponseRecord> = runner.jsonl("parse", "parsed.jsonl", || {
        parse_responses(&items, &responses, &assets.normalizer)
    })?;

    let nvc: Vec<NvcRecord> = runner.jsonl("claims", "nvc.jsonl", || tag_claims(&items, &parsed, &assets.lexicon))?;

    let ctx = RunContext {
        run_id: run_id.clone(),
        lexicon_version: assets.lexicon.version.clone(),
        normalization_version: assets.normalizer.version().to_string(),
        seeds: cfg.seeds.to_map(),
        models: cfg.model_order(),
        benchmarks: cfg.benchmarks.keys().cloned().collect(),
    };
    let outcomes: Vec<ExampleOutcome> = runner.jsonl("score", "outcomes.jsonl", || {
        Ok(score_records(&items, &parsed, &nvc, &assets.normalizer)?)
    })?;
    let metrics: MetricsReport = runner.json("score", "metrics.json", || metrics_report(&outcomes, &ctx))?;
    // Both score artifacts count as one stage.
    if let [.., (a, sa), (b, sb)] = runner.stages.as_slice() {
        if a == "score" && b == "score" {
            let status = if *sa == StageStatus::Ran || *sb == StageStatus::Ran {
                StageStatus::Ran
            } else {
                StageStatus::Reused
            };
            runner.stages.truncate(runner.stages.len() - 2);
            runner.stages.push(("score".into(), status));
        }
    }

    let stats: StatsReport = runner.json("stats", "stats.json", || {
        let config = StatsConfig {
            replicates: cfg.stats.replicates,
            level: cfg.stats.level,
            bootstrap_seed: cfg.seed("bootstrap"),
            permutation_seed: cfg.seed("permutation"),
            permutation_replicates: cfg.stats.permutation_replicates,
        };
        Ok(compute_stats(&outcomes, &cfg.stats_metrics(), &cfg.model_order(), &config, &run_id)?)
    })?;

    let _queue: Vec<AuditCase> = runner.jsonl("audit", "audit_queue.jsonl", || {
        Ok(select_high_risk(
            &outcomes,
            &items,
            &parsed,
            &nvc,
            cfg.audit.per_model,
            cfg.seed("audit"),
        ))
    })?;

    let report_files = ["report.json", "report.csv", "report.md"];
    if runner.reusable(&report_files) {
        runner.mark("report", StageStatus::Reused);
    } else {
        let report = build_report(&metrics, Some(&stats), &manifest_hash);
        report::export(&report, &dir).map_err(|e| runner.fail("report", e.into()))?;
        runner.mark("report", StageStatus::Ran);
    }

    Ok(RunSummary {
        run_id,
        out_dir: dir,
        manifest_hash,
        stages: runner.stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    const MINIMAL: &str = r#"
[benchmarks.demo]
path = "demo.jsonl"
n = 2

[models.shortcut]
agent = "text-shortcut"

[seeds]
sample = 1
shuffle = 2
bootstrap = 3
permutation = 4
audit = 5

[output]
dir = "out"
"#;

    #[test]
    fn minimal_config_is_valid() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "demo.jsonl", "");
        let cfg_path = write(tmp.path(), "run.toml", MINIMAL);
        let cfg = load_config(&cfg_path).unwrap();
        assert_eq!(cfg.model_order(), ["shortcut"]);
        assert_eq!(cfg.output_dir(), tmp.path().join("out"));
    }

    #[test]
    fn missing_seed_is_named() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "demo.jsonl", "");
        let text = MINIMAL.replace("bootstrap = 3\n", "");
        let cfg = Config::from_toml_str(&text, tmp.path()).unwrap();
        let errors = validate_config(&cfg);
        assert_eq!(errors, vec![ConfigError::MissingSeed("bootstrap")]);
        assert!(errors[0].to_string().contains("seeds.bootstrap"));
    }

    #[test]
    fn endpoint_and_replay_conflict() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "demo.jsonl", "");
        write(tmp.path(), "log.jsonl", "");
        let text = MINIMAL.replace(
            "agent = \"text-shortcut\"",
            "endpoint = \"http://127.0.0.1:9/v1\"\nreplay = \"log.jsonl\"",
        );
        let cfg = Config::from_toml_str(&text, tmp.path()).unwrap();
        let errors = validate_config(&cfg);
        assert!(
            errors.contains(&ConfigError::SourceConflict {
                model: "shortcut".into(),
                sources: vec!["endpoint", "replay"],
            }),
            "{errors:?}"
        );
    }

    #[test]
    fn every_error_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let text = MINIMAL
            .replace("sample = 1\n", "")
            .replace("audit = 5\n", "")
            .replace("agent = \"text-shortcut\"", "agent = \"oracle\"");
        let cfg = Config::from_toml_str(&text, tmp.path()).unwrap();
        let errors = validate_config(&cfg);
        assert_eq!(errors.len(), 4, "{errors:?}");
        assert!(errors.contains(&ConfigError::MissingSeed("sample")));
        assert!(errors.contains(&ConfigError::MissingSeed("audit")));
        assert!(matches!(errors[0], ConfigError::BenchmarkPath { .. }));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("n = 2", "n = 2\nsize = 3");
        assert!(matches!(
            Config::from_toml_str(&text, Path::new(".")),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn models_keep_file_order() {
        let text = MINIMAL.replace(
            "[models.shortcut]\nagent = \"text-shortcut\"",
            "[models.zeta]\nagent = \"random\"\n[models.alpha]\nagent = \"random\"\n[models.mid]\nagent = \"random\"",
        );
        let cfg = Config::from_toml_str(&text, Path::new(".")).unwrap();
        assert_eq!(cfg.model_order(), ["zeta", "alpha", "mid"]);
    }

    #[test]
    fn manifest_hash_ignores_timestamp_and_run_id() {
        let tmp = tempfile::tempdir().unwrap();
        write(tmp.path(), "demo.jsonl", "{}\n");
        let cfg = Config::from_toml_str(MINIMAL, tmp.path()).unwrap();
        let assets = load_assets(&cfg).unwrap();
        let a = build_manifest(&cfg, &assets).unwrap();
        let mut b = a.clone();
        b.created_at = Some("2000-01-01T00:00:00Z".into());
        b.run_id = "other".into();
        assert_eq!(a.content_hash(), b.content_hash());
        b.seeds.insert("sample".into(), 99);
        assert_ne!(a.content_hash(), b.content_hash());
        assert!(a.run_id.starts_with("run-"));
    }
}
