use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use groundcheck::agents::{AgentKind, AgentSpec};
use groundcheck::audit::{
    import_annotations, kappa_from_annotations, read_annotations, select_high_risk, AuditCase, AuditServer,
    ServerOptions,
};
use groundcheck::claims::{load_lexicon, NvcRecord, VisualLexicon};
use groundcheck::corpus::{BenchmarkExample, BenchmarkFormat, EvaluationItem};
use groundcheck::inference::{
    run_inference, EndpointConfig, InferenceOptions, ModelSource, PromptTemplate, RawResponse, ReplayStore,
    ResponseSource,
};
use groundcheck::io;
use groundcheck::metrics::{score_records, ExampleOutcome, Metric, MetricsReport};
use groundcheck::parsing::{NormalizationConfig, Normalizer, ResponseRecord};
use groundcheck::pipeline::{self, RunContext, RunManifest, RunOptions};
use groundcheck::report;
use groundcheck::stats::{compute_stats, StatsConfig, StatsReport};

#[derive(Parser)]
#[command(name = "groundcheck", version, about = "Counterfactual image-ablation grounding evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a stratified sample from one or more benchmark files.
    Sample {
        #[arg(long = "benchmark", required = true)]
        benchmarks: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// jsonl or csv; inferred from the extension when omitted.
        #[arg(long)]
        format: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attach blank and shuffled images to a sample.
    Conditions {
        #[arg(long)]
        sample: PathBuf,
        /// Shuffle seed.
        #[arg(long)]
        seed: u64,
        /// Recorded on every item; the seed the sample was drawn with.
        #[arg(long, default_value_t = 0)]
        sample_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Collect responses for every item under all three conditions.
    Infer(InferArgs),
    /// Extract rationales and normalize answers.
    Parse {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long)]
        normalization: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Novel visual claim detection.
    Claims {
        #[command(subcommand)]
        command: ClaimsCommand,
    },
    /// Per-example outcomes and aggregate metrics.
    Score {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        parsed: PathBuf,
        #[arg(long)]
        nvc: PathBuf,
        #[arg(long)]
        normalization: Option<PathBuf>,
        /// Model order for reports, comma separated.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, default_value = "adhoc")]
        run_id: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics_out: Option<PathBuf>,
    },
    /// Bootstrap intervals, permutation tests and paired t-tests.
    Stats {
        #[arg(long)]
        outcomes: PathBuf,
        /// Repeatable; all metrics when omitted.
        #[arg(long = "metric")]
        metrics: Vec<String>,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        permutation_seed: u64,
        #[arg(long, default_value_t = 10_000)]
        permutation_replicates: usize,
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        #[arg(long, default_value = "adhoc")]
        run_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render report.json, report.csv and report.md.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        stats: Option<PathBuf>,
        /// Run manifest whose hash is stamped on the report.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Write the high-risk audit queue and optionally serve it.
    AuditExport(AuditExportArgs),
    /// Merge annotation files and mark labeled cases.
    AuditImport {
        #[arg(long)]
        queue: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        annotations: Vec<PathBuf>,
        /// Updated queue with case status.
        #[arg(long)]
        out: PathBuf,
        /// Merged annotations.
        #[arg(long)]
        merged_out: Option<PathBuf>,
    },
    /// Cohen's kappa between two annotators.
    Kappa {
        #[arg(long, num_args = 1.., required = true)]
        annotations: Vec<PathBuf>,
    },
    /// Run every stage from a config file, reusing existing artifacts.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Recompute all stages.
        #[arg(long)]
        force: bool,
        /// Validate the config and exit.
        #[arg(long)]
        check: bool,
    },
}

#[derive(Subcommand)]
enum ClaimsCommand {
    Tag {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        /// Lexicon file, or the version of the shipped lexicon.
        #[arg(long)]
        lexicon: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model id recorded on responses (the endpoint model name by default).
    #[arg(long)]
    model_id: Option<String>,
    /// Chat-completions base URL.
    #[arg(long, conflicts_with_all = ["replay", "agent"])]
    endpoint: Option<String>,
    /// Model name sent to the endpoint.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    auth_token_env: Option<String>,
    /// Response log to replay.
    #[arg(long, conflicts_with = "agent")]
    replay: Option<PathBuf>,
    /// Scripted agent kind.
    #[arg(long)]
    agent: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    accuracy: f64,
    #[arg(long, default_value_t = 0)]
    agent_seed: u64,
    #[arg(long, default_value_t = 0.5)]
    mixture_weight: f64,
    #[arg(long)]
    prompt: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
}

#[derive(Args)]
struct AuditExportArgs {
    #[arg(long, requires_all = ["items", "parsed", "nvc"])]
    outcomes: Option<PathBuf>,
    #[arg(long)]
    items: Option<PathBuf>,
    #[arg(long)]
    parsed: Option<PathBuf>,
    #[arg(long)]
    nvc: Option<PathBuf>,
    #[arg(long, default_value_t = pipeline::DEFAULT_AUDIT_PER_MODEL)]
    per_model: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Queue file to write, or to serve when no outcomes are given.
    #[arg(long)]
    out: PathBuf,
    /// Serve the queue over local HTTP until interrupted.
    #[arg(long)]
    serve: bool,
    #[arg(long, default_value = "annotations.jsonl")]
    annotations: PathBuf,
    #[arg(long, default_value = "annotator")]
    annotator: String,
    #[arg(long, default_value = "127.0.0.1:8765")]
    bind: String,
    /// Show model ids to the annotator.
    #[arg(long)]
    unblind: bool,
    /// Hide the model's final answer.
    #[arg(long)]
    hide_answer: bool,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn config_error(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        Failure {
            code: 3,
            error: error.into(),
        }
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<Vec<T>> {
    Ok(io::read_jsonl(path)?)
}

fn normalizer(path: Option<&Path>) -> anyhow::Result<Normalizer> {
    let config = match path {
        Some(p) => NormalizationConfig::load(p)?,
        None => NormalizationConfig::default(),
    };
    Ok(Normalizer::new(config))
}

fn lexicon(spec: Option<&str>) -> Result<VisualLexicon, Failure> {
    let shipped = VisualLexicon::shipped();
    match spec {
        None => Ok(shipped),
        Some(s) if s == shipped.version => Ok(shipped),
        Some(s) if Path::new(s).is_file() => load_lexicon(Path::new(s)).map_err(|e| config_error(e.into())),
        Some(s) => Err(config_error(anyhow!(
            "lexicon \"{s}\" is neither a file nor the shipped version {}",
            shipped.version
        ))),
    }
}

fn infer(args: InferArgs) -> Result<(), Failure> {
    let items: Vec<EvaluationItem> = read_jsonl(&args.items)?;
    let template = match &args.prompt {
        Some(p) => PromptTemplate::load(p).map_err(|e| config_error(e.into()))?,
        None => PromptTemplate::default(),
    };
    let models = if let Some(url) = args.endpoint {
        let name = args
            .model
            .ok_or_else(|| config_error(anyhow!("--endpoint needs --model")))?;
        let mut cfg = EndpointConfig::new(url, name.clone());
        cfg.auth_token_env = args.auth_token_env;
        cfg.max_parallel = args.max_parallel;
        cfg.validate().map_err(|e| config_error(e.into()))?;
        vec![ModelSource {
            model_id: args.model_id.unwrap_or(name),
            source: ResponseSource::Endpoint(cfg),
        }]
    } else if let Some(log) = args.replay {
        let store = Arc::new(ReplayStore::load(&log).with_context(|| format!("loading {}", log.display()))?);
        let ids = match args.model_id.or(args.model) {
            Some(id) => vec![id],
            None => store.model_ids(),
        };
        ids.into_iter()
            .map(|model_id| ModelSource {
                model_id,
                source: ResponseSource::Replay(store.clone()),
            })
            .collect()
    } else if let Some(agent) = args.agent {
        let kind: AgentKind = agent.parse().map_err(|e: String| config_error(anyhow!(e)))?;
        let spec = AgentSpec::new(kind)
            .with_accuracy(args.accuracy)
            .with_seed(args.agent_seed)
            .with_mixture_weight(args.mixture_weight);
        vec![ModelSource {
            model_id: args.model_id.unwrap_or_else(|| kind.as_str().to_string()),
            source: ResponseSource::Agent(spec),
        }]
    } else {
        return Err(config_error(anyhow!("set one of --endpoint, --replay or --agent")));
    };
    let options = InferenceOptions {
        template,
        max_parallel: args.max_parallel,
        ..InferenceOptions::default()
    };
    let responses = run_inference(&items, &models, &options)?;
    io::write_jsonl(&args.out, &responses)?;
    let failed = responses.iter().filter(|r| r.failed).count();
    eprintln!("{} responses ({failed} failed) -> {}", responses.len(), args.out.display());
    Ok(())
}

fn audit_export(args: AuditExportArgs) -> Result<(), Failure> {
    if let Some(outcomes) = &args.outcomes {
        let outcomes: Vec<ExampleOutcome> = read_jsonl(outcomes)?;
        let items: Vec<EvaluationItem> = read_jsonl(args.items.as_deref().unwrap_or(Path::new("")))?;
        let parsed: Vec<ResponseRecord> = read_jsonl(args.parsed.as_deref().unwrap_or(Path::new("")))?;
        let nvc: Vec<NvcRecord> = read_jsonl(args.nvc.as_deref().unwrap_or(Path::new("")))?;
        let queue = select_high_risk(&outcomes, &items, &parsed, &nvc, args.per_model, args.seed);
        io::write_jsonl(&args.out, &queue)?;
        eprintln!("{} cases -> {}", queue.len(), args.out.display());
    } else if !args.serve {
        return Err(config_error(anyhow!("give --outcomes to export, or --serve to serve an existing queue")));
    }
    if args.serve {
        let mut options = ServerOptions::new(args.out.clone(), args.annotations.clone(), args.annotator.clone());
        options.bind = args.bind.clone();
        options.blind = !args.unblind;
        options.show_answer = !args.hide_answer;
        let server = AuditServer::start(options)?;
        eprintln!("serving {} on http://{}", args.out.display(), server.addr());
        server.wait();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Sample {
            benchmarks,
            n,
            seed,
            format,
            out,
        } => {
            let mut loaded = Vec::new();
            for path in &benchmarks {
                let format = match format.as_deref() {
                    None => BenchmarkFormat::from_path(path),
                    Some("jsonl") => BenchmarkFormat::Jsonl,
                    Some("csv") => BenchmarkFormat::Csv,
                    Some(other) => return Err(config_error(anyhow!("unknown format \"{other}\""))),
                };
                loaded.push((pipeline::load_benchmark_as(path, format, None)?, n));
            }
            let sample = pipeline::sample_benchmarks(&loaded, seed)?;
            io::write_jsonl(&out, &sample)?;
            eprintln!("{} examples -> {}", sample.len(), out.display());
        }
        Command::Conditions {
            sample,
            seed,
            sample_seed,
            out,
        } => {
            let sample: Vec<BenchmarkExample> = read_jsonl(&sample)?;
            let items = pipeline::make_conditions(&sample, seed, sample_seed)?;
            io::write_jsonl(&out, &items)?;
            eprintln!("{} items -> {}", items.len(), out.display());
        }
        Command::Infer(args) => infer(args)?,
        Command::Parse {
            items,
            responses,
            normalization,
            out,
        } => {
            let items: Vec<EvaluationItem> = read_jsonl(&items)?;
            let responses: Vec<RawResponse> = read_jsonl(&responses)?;
            let normalizer = normalizer(normalization.as_deref()).map_err(config_error)?;
            let parsed = pipeline::parse_responses(&items, &responses, &normalizer)?;
            io::write_jsonl(&out, &parsed)?;
            eprintln!("{} records -> {}", parsed.len(), out.display());
        }
        Command::Claims {
            command:
                ClaimsCommand::Tag {
                    items,
                    responses,
                    lexicon: spec,
                    out,
                },
        } => {
            let lexicon = lexicon(spec.as_deref())?;
            let items: Vec<EvaluationItem> = read_jsonl(&items)?;
            let parsed: Vec<ResponseRecord> = read_jsonl(&responses)?;
            let nvc = pipeline::tag_claims(&items, &parsed, &lexicon)?;
            io::write_jsonl(&out, &nvc)?;
            let claims = nvc.iter().filter(|r| r.result.nvc == 1).count();
            eprintln!("{} records, {claims} with a novel visual claim -> {}", nvc.len(), out.display());
        }
        Command::Score {
            items,
            parsed,
            nvc,
            normalization,
            models,
            run_id,
            out,
            metrics_out,
        } => {
            let items: Vec<EvaluationItem> = read_jsonl(&items)?;
            let parsed: Vec<ResponseRecord> = read_jsonl(&parsed)?;
            let nvc: Vec<NvcRecord> = read_jsonl(&nvc)?;
            let normalizer = normalizer(normalization.as_deref()).map_err(config_error)?;
            let outcomes = score_records(&items, &parsed, &nvc, &normalizer)?;
            io::write_jsonl(&out, &outcomes)?;
            let mut benchmarks: Vec<String> = items.iter().map(|i| i.base.benchmark_id.clone()).collect();
            benchmarks.sort();
            benchmarks.dedup();
            let ctx = RunContext {
                run_id,
                lexicon_version: nvc.first().map(|r| r.result.lexicon_version.clone()).unwrap_or_default(),
                normalization_version: normalizer.version().to_string(),
                seeds: Default::default(),
                models,
                benchmarks,
            };
            let metrics = pipeline::metrics_report(&outcomes, &ctx)?;
            let metrics_path = metrics_out.unwrap_or_else(|| out.with_file_name("metrics.json"));
            io::write_json_pretty(&metrics_path, &metrics)?;
            eprintln!("{} outcomes -> {}, metrics -> {}", outcomes.len(), out.display(), metrics_path.display());
        }
        Command::Stats {
            outcomes,
            metrics,
            replicates,
            level,
            seed,
            permutation_seed,
            permutation_replicates,
            models,
            run_id,
            out,
        } => {
            let metrics: Vec<Metric> = if metrics.is_empty() {
                Metric::ALL.to_vec()
            } else {
                metrics
                    .iter()
                    .map(|m| m.parse())
                    .collect::<Result<_, String>>()
                    .map_err(|e| config_error(anyhow!(e)))?
            };
            let outcomes: Vec<ExampleOutcome> = read_jsonl(&outcomes)?;
            let config = StatsConfig {
                replicates,
                level,
                bootstrap_seed: seed,
                permutation_seed,
                permutation_replicates,
            };
            let stats = compute_stats(&outcomes, &metrics, &models, &config, &run_id)?;
            io::write_json_pretty(&out, &stats)?;
            eprintln!("{} rows -> {}", stats.metrics.len(), out.display());
        }
        Command::Report {
            metrics,
            stats,
            manifest,
            out_dir,
        } => {
            let metrics: MetricsReport = io::read_json(&metrics)?;
            let stats: Option<StatsReport> = match stats {
                Some(p) => Some(io::read_json(&p)?),
                None => None,
            };
            let manifest_hash = match manifest {
                Some(p) => {
                    let m: RunManifest = io::read_json(&p)?;
                    m.content_hash()
                }
                None => String::new(),
            };
            let report = report::build_report(&metrics, stats.as_ref(), &manifest_hash);
            for path in report::export(&report, &out_dir)? {
                eprintln!("wrote {}", path.display());
            }
        }
        Command::AuditExport(args) => audit_export(args)?,
        Command::AuditImport {
            queue,
            annotations,
            out,
            merged_out,
        } => {
            let mut cases: Vec<AuditCase> = read_jsonl(&queue)?;
            let merged = import_annotations(&mut cases, &annotations)?;
            io::write_jsonl(&out, &cases)?;
            if let Some(p) = merged_out {
                io::write_jsonl(&p, &merged)?;
            }
            let labeled = cases
                .iter()
                .filter(|c| c.status == groundcheck::audit::CaseStatus::Labeled)
                .count();
            eprintln!("{labeled}/{} cases labeled, {} annotations", cases.len(), merged.len());
        }
        Command::Kappa { annotations } => {
            let mut all = Vec::new();
            for path in &annotations {
                all.extend(read_annotations(path)?);
            }
            let result = kappa_from_annotations(&all)?;
            println!("{}", serde_json::to_string_pretty(&result)?);
        }
        Command::RunAll { config, force, check } => {
            if check {
                pipeline::load_config(&config).map_err(|errors| {
                    config_error(anyhow!("{}", pipeline::ConfigErrors(&errors)))
                })?;
                eprintln!("config ok");
                return Ok(());
            }
            let summary = pipeline::run_all_from_file(&config, RunOptions { force }).map_err(|e| Failure {
                code: e.exit_code() as u8,
                error: e.into(),
            })?;
            for (stage, status) in &summary.stages {
                eprintln!("{stage:<10} {status:?}");
            }
            println!("{}", summary.out_dir.join("report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            if code == 2 {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}

