use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand, ValueEnum};
use metastd::agent::{AgentLimits, BackendConfig};
use metastd::batch::{
    run_batch, BackendSpec, LiveSettings, RecordStatus, RunConfig, RunMode, Services, TemplateSource,
};
use metastd::cache::ResponseCache;
use metastd::evaluation::{aggregate, pair_records, render_report, score_pairs, EvaluationReport, ReportFormat};
use metastd::record::{load_records, MetadataRecord, ParseOptions, DEFAULT_ID_KEY};
use metastd::template::{parse_template, TemplateSpec};
use metastd::tools::{serve_stdio, ToolAccess, ToolHost, GET_TEMPLATE_TOOL, SEARCH_BRANCH_TOOL, SEARCH_ONTOLOGY_TOOL};
use serde::Deserialize;
use serde_json::json;

/// Standardize legacy metadata records against a template, serve the
/// template and terminology tools, and score outputs against a gold standard.
#[derive(Parser)]
#[command(name = "metastd", version)]
struct Cli {
    /// More log output on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Standardize a batch of records (agent, baseline or deterministic mode).
    Standardize(StandardizeArgs),
    /// Score predicted records against gold records and print the accuracy table.
    Evaluate(EvaluateArgs),
    /// Serve the three tools over newline-delimited JSON-RPC.
    ServeTools(ServeArgs),
    /// Print a template, parsed into the internal format.
    FetchTemplate(FetchArgs),
    /// Run one term search and print the candidates.
    SearchTerm(SearchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Agent,
    Baseline,
    Deterministic,
}

impl From<Mode> for RunMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Agent => RunMode::Agent,
            Mode::Baseline => RunMode::Baseline,
            Mode::Deterministic => RunMode::Deterministic,
        }
    }
}

/// Every option may also come from the `--config` TOML file, using the long
/// flag name as key. Flags win over the file.
#[derive(Args, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct StandardizeArgs {
    /// TOML file with default values for these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    /// Template document on disk.
    #[arg(long, conflicts_with = "template_id")]
    template: Option<PathBuf>,
    /// Template identifier, fetched through the template service.
    #[arg(long)]
    template_id: Option<String>,
    /// TSV file, object-per-line file, or directory of JSON records.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Records processed concurrently [default: available processors].
    #[arg(long)]
    parallelism: Option<usize>,
    /// Directory with `ontologies.json` and `templates/`; replaces the live services.
    #[arg(long)]
    mock_fixtures: Option<PathBuf>,
    /// Simulated latency per mock lookup, in milliseconds.
    #[arg(long)]
    mock_latency_ms: Option<u64>,
    /// Persist lookups in this file across runs.
    #[arg(long)]
    cache_file: Option<PathBuf>,
    /// Disable the response cache.
    #[arg(long)]
    #[serde(default)]
    no_cache: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Process a seeded random subset of this many records.
    #[arg(long)]
    sample: Option<usize>,
    /// Concurrent requests to live services [default: 8].
    #[arg(long)]
    max_inflight_upstream: Option<usize>,
    /// Skip records whose output file already exists.
    #[arg(long)]
    #[serde(default)]
    skip_existing: bool,
    /// Field holding the record id [default: record_id].
    #[arg(long)]
    id_key: Option<String>,
    /// Directory of `<record id>.json` reply scripts (offline chat backend).
    #[arg(long)]
    backend_script_dir: Option<PathBuf>,
    /// Chat-completion base URL.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Environment variable holding the chat API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Seconds allowed per chat request.
    #[arg(long)]
    request_timeout: Option<f64>,
    #[arg(long)]
    max_tool_iterations: Option<usize>,
    /// Seconds allowed per model or tool call.
    #[arg(long)]
    per_call_timeout: Option<f64>,
    /// Seconds allowed per record.
    #[arg(long)]
    total_budget: Option<f64>,
    #[arg(long)]
    cedar_endpoint: Option<String>,
    #[arg(long)]
    bioportal_endpoint: Option<String>,
    /// Seconds allowed per live service request.
    #[arg(long)]
    upstream_timeout: Option<f64>,
}

macro_rules! prefer_flags {
    ($flags:ident, $file:ident; $($opt:ident),* ; $($switch:ident),*) => {
        StandardizeArgs {
            config: $flags.config,
            $($opt: $flags.$opt.or($file.$opt),)*
            $($switch: $flags.$switch || $file.$switch,)*
        }
    };
}

impl StandardizeArgs {
    fn with_config_file(self) -> Result<Self> {
        let Some(path) = self.config.clone() else {
            return Ok(self);
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let file: StandardizeArgs = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let flags = self;
        Ok(prefer_flags!(flags, file;
            mode, template, template_id, input, out, parallelism, mock_fixtures, mock_latency_ms,
            cache_file, seed, sample, max_inflight_upstream, id_key, backend_script_dir, endpoint,
            model, api_key_env, temperature, request_timeout, max_tool_iterations, per_call_timeout,
            total_budget, cedar_endpoint, bioportal_endpoint, upstream_timeout;
            no_cache, skip_existing))
    }

    /// Exits with a usage error when a required option is set neither by
    /// flag nor by the config file.
    fn require(&self) {
        let missing: Vec<&str> = [
            ("--mode", self.mode.is_none()),
            ("--template or --template-id", self.template.is_none() && self.template_id.is_none()),
            ("--input", self.input.is_none()),
            ("--out", self.out.is_none()),
        ]
        .into_iter()
        .filter_map(|(flag, absent)| absent.then_some(flag))
        .collect();
        if !missing.is_empty() {
            let mut cmd = Cli::command();
            let sub = cmd.find_subcommand_mut("standardize").expect("subcommand exists");
            let mut sub = sub.clone().bin_name("metastd standardize");
            sub.error(
                clap::error::ErrorKind::MissingRequiredArgument,
                format!("missing required option(s): {}", missing.join(", ")),
            )
            .exit();
        }
    }

    fn into_config(self) -> Result<RunConfig> {
        let mode = self.mode.ok_or_else(|| anyhow!("--mode is required"))?;
        let template = match (self.template, self.template_id) {
            (Some(path), None) => TemplateSource::File(path),
            (None, Some(id)) => TemplateSource::Id(id),
            (None, None) => bail!("one of --template or --template-id is required"),
            (Some(_), Some(_)) => bail!("--template and --template-id are mutually exclusive"),
        };
        let input = self.input.ok_or_else(|| anyhow!("--input is required"))?;
        let out = self.out.ok_or_else(|| anyhow!("--out is required"))?;
        let mut c = RunConfig::new(mode.into(), template, input, out);
        if let Some(p) = self.parallelism {
            c.parallelism = p;
        }
        c.mock_fixtures = self.mock_fixtures;
        c.mock_latency = Duration::from_millis(self.mock_latency_ms.unwrap_or(0));
        c.cache_file = self.cache_file;
        c.cache_enabled = !self.no_cache;
        c.seed = self.seed.unwrap_or(0);
        c.sample = self.sample;
        if let Some(n) = self.max_inflight_upstream {
            c.max_inflight_upstream = n;
        }
        c.skip_existing = self.skip_existing;
        if let Some(k) = self.id_key {
            c.id_key = k;
        }
        if let Some(e) = self.cedar_endpoint {
            c.cedar_endpoint = e;
        }
        if let Some(e) = self.bioportal_endpoint {
            c.bioportal_endpoint = e;
        }
        if let Some(s) = self.upstream_timeout {
            c.upstream_timeout = seconds(s, "upstream-timeout")?;
        }
        let mut limits = AgentLimits::default();
        if let Some(n) = self.max_tool_iterations {
            limits.max_tool_iterations = n;
        }
        if let Some(s) = self.per_call_timeout {
            limits.per_call_timeout = seconds(s, "per-call-timeout")?;
        }
        if let Some(s) = self.total_budget {
            limits.total_budget = seconds(s, "total-budget")?;
        }
        c.limits = limits;
        c.backend = match (self.backend_script_dir, c.mode) {
            (_, RunMode::Deterministic) => None,
            (Some(dir), _) => Some(BackendSpec::Scripted(dir)),
            (None, _) => {
                let mut b = BackendConfig::default();
                if let Some(e) = self.endpoint {
                    b.endpoint = e;
                }
                b.model = self
                    .model
                    .ok_or_else(|| anyhow!("--model is required unless --backend-script-dir is given"))?;
                if let Some(k) = self.api_key_env {
                    b.api_key_env = k;
                }
                if let Some(t) = self.temperature {
                    b.temperature = t;
                }
                if let Some(s) = self.request_timeout {
                    b.request_timeout = seconds(s, "request-timeout")?;
                }
                Some(BackendSpec::Http(b))
            }
        };
        Ok(c)
    }
}

fn seconds(value: f64, flag: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(value).map_err(|e| anyhow!("--{flag}: {e}"))
}

#[derive(Args)]
struct EvaluateArgs {
    /// Gold records (TSV, object-per-line file or directory).
    #[arg(long)]
    gold: PathBuf,
    /// Predicted records; repeat to compare runs side by side.
    #[arg(long, required = true)]
    predicted: Vec<PathBuf>,
    /// Column label per --predicted, in the same order [default: file name].
    #[arg(long)]
    label: Vec<String>,
    /// Template document, optionally for one group only (`GROUP=PATH`).
    #[arg(long, required = true)]
    template: Vec<String>,
    /// Gold field whose value names the group (one table row per value).
    #[arg(long)]
    group_by: Option<String>,
    /// Group name when --group-by is not given [default: template id].
    #[arg(long, conflicts_with = "group_by")]
    group: Option<String>,
    /// Fields left out of scoring, in addition to the id field.
    #[arg(long)]
    ignore_field: Vec<String>,
    #[arg(long, default_value = DEFAULT_ID_KEY)]
    id_key: String,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Args)]
struct ServiceArgs {
    /// Serve from fixture files instead of the live services.
    #[arg(long)]
    mock_fixtures: Option<PathBuf>,
    #[arg(long)]
    cache_file: Option<PathBuf>,
    #[arg(long, default_value = metastd::template::source::DEFAULT_CEDAR_ENDPOINT)]
    cedar_endpoint: String,
    #[arg(long, default_value = metastd::terminology::DEFAULT_BIOPORTAL_ENDPOINT)]
    bioportal_endpoint: String,
}

impl ServiceArgs {
    fn host(&self) -> Result<ToolHost> {
        let cache = Arc::new(match &self.cache_file {
            Some(p) => ResponseCache::with_file(p).with_context(|| format!("opening cache {}", p.display()))?,
            None => ResponseCache::in_memory(),
        });
        let services = match &self.mock_fixtures {
            Some(dir) => Services::mock(dir, Duration::ZERO, cache)?,
            None => Services::live(
                &LiveSettings {
                    cedar_endpoint: self.cedar_endpoint.clone(),
                    bioportal_endpoint: self.bioportal_endpoint.clone(),
                    ..LiveSettings::default()
                },
                cache,
            )?,
        };
        Ok(ToolHost::new(services.templates, services.terminology))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Stdio,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, value_enum, default_value_t = Transport::Stdio)]
    transport: Transport,
    #[command(flatten)]
    services: ServiceArgs,
}

#[derive(Args)]
struct FetchArgs {
    template_id: String,
    /// Print the document exactly as served.
    #[arg(long)]
    raw: bool,
    #[command(flatten)]
    services: ServiceArgs,
}

#[derive(Args)]
struct SearchArgs {
    query: String,
    #[arg(long)]
    ontology: String,
    /// Restrict results to the sub-tree under this concept.
    #[arg(long)]
    branch: Option<String>,
    /// Print the structured result instead of the text listing.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    services: ServiceArgs,
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    let outcome = match cli.command {
        Command::Standardize(args) => standardize(args).await,
        Command::Evaluate(args) => evaluate(args),
        Command::ServeTools(args) => serve(args).await,
        Command::FetchTemplate(args) => fetch_template(args).await,
        Command::SearchTerm(args) => search_term(args).await,
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

async fn standardize(args: StandardizeArgs) -> Result<()> {
    let args = args.with_config_file()?;
    args.require();
    let config = args.into_config()?;
    let summary = run_batch(&config).await?;
    let line = json!({
        "records": summary.entries.len(),
        "ok": summary.count(RecordStatus::Ok),
        "error": summary.count(RecordStatus::Error),
        "skipped": summary.count(RecordStatus::Skipped),
        "flagged_fields": summary.entries.iter().map(|e| e.flagged).sum::<usize>(),
        "upstream_calls": summary.upstream_calls,
        "cache_hits": summary.cache_hits,
        "elapsed_ms": summary.elapsed.as_millis() as u64,
    });
    emit(&format!("{line}\n"))?;
    Ok(())
}

fn read_records(path: &Path, id_key: &str) -> Result<Vec<MetadataRecord>> {
    let options = ParseOptions {
        id_key: Some(id_key.to_string()),
        ..ParseOptions::default()
    };
    load_records(path, &options)
        .with_context(|| format!("reading {}", path.display()))?
        .into_iter()
        .map(|r| r.map_err(|(id, e)| anyhow!("{}: record {id}: {e}", path.display())))
        .collect()
}

fn read_template(path: &Path) -> Result<TemplateSpec> {
    let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_template(&raw).with_context(|| format!("parsing template {}", path.display()))
}

/// `--template` values: `PATH` is the default, `GROUP=PATH` applies to one group.
fn read_templates(specs: &[String]) -> Result<(Option<TemplateSpec>, BTreeMap<String, TemplateSpec>)> {
    let mut default = None;
    let mut by_group = BTreeMap::new();
    for spec in specs {
        match spec.split_once('=') {
            Some((group, path)) if !Path::new(spec).exists() => {
                by_group.insert(group.to_string(), read_template(Path::new(path))?);
            }
            _ => {
                if default.replace(read_template(Path::new(spec))?).is_some() {
                    bail!("more than one default --template");
                }
            }
        }
    }
    Ok((default, by_group))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    if !args.label.is_empty() && args.label.len() != args.predicted.len() {
        bail!("--label must be given once per --predicted");
    }
    let (default_template, group_templates) = read_templates(&args.template)?;
    let gold = read_records(&args.gold, &args.id_key)?;

    let mut groups: BTreeMap<String, Vec<MetadataRecord>> = BTreeMap::new();
    for record in gold {
        let group = match (&args.group_by, &args.group) {
            (Some(field), _) => record
                .get(field)
                .filter(|v| !v.is_empty())
                .ok_or_else(|| anyhow!("gold record {} has no `{field}` value", record.record_id()))?
                .to_string(),
            (None, Some(name)) => name.clone(),
            (None, None) => default_template
                .as_ref()
                .or_else(|| group_templates.values().next())
                .map(|t| t.template_id.clone())
                .unwrap_or_default(),
        };
        groups.entry(group).or_default().push(record);
    }
    let template_for = |group: &str| {
        group_templates
            .get(group)
            .or(default_template.as_ref())
            .ok_or_else(|| anyhow!("no --template for group `{group}`"))
    };

    let mut ignore: Vec<&str> = vec![args.id_key.as_str()];
    ignore.extend(args.ignore_field.iter().map(String::as_str));
    let mut runs: Vec<(String, EvaluationReport)> = Vec::new();
    for (i, path) in args.predicted.iter().enumerate() {
        let label = args.label.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("run {}", i + 1))
        });
        let predicted = read_records(path, &args.id_key)?;
        let mut scored = Vec::new();
        let mut matched = 0;
        for (group, gold) in &groups {
            let template = template_for(group)?;
            let paired = pair_records(gold, &predicted, &ignore);
            matched += gold.len();
            scored.extend(score_pairs(&paired.pairs, template, group, &ignore));
        }
        let all_gold: Vec<&str> = groups.values().flatten().map(MetadataRecord::record_id).collect();
        let extra = predicted.iter().filter(|p| !all_gold.contains(&p.record_id())).count();
        if extra > 0 {
            tracing::warn!(run = %label, extra, "predicted records without a gold record were not scored");
        }
        tracing::info!(run = %label, records = matched, "scored");
        runs.push((label, aggregate(&scored)));
    }

    let format = match args.format {
        Format::Table => ReportFormat::Table,
        Format::Json => ReportFormat::Json,
    };
    let views: Vec<(&str, &EvaluationReport)> = runs.iter().map(|(l, r)| (l.as_str(), r)).collect();
    let text = render_report(&views, format);
    match &args.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => emit(&text)?,
    }
    Ok(())
}

async fn serve(args: ServeArgs) -> Result<()> {
    let Transport::Stdio = args.transport;
    let host: Arc<dyn ToolAccess> = Arc::new(args.services.host()?);
    serve_stdio(host).await.context("serving on stdio")
}

async fn print_tool(host: &ToolHost, tool: &str, arguments: serde_json::Value, structured: bool) -> Result<()> {
    let result = host.call_tool(tool, &arguments).await?;
    if result.is_error {
        bail!("{}", result.text);
    }
    if structured {
        emit(&format!("{}\n", serde_json::to_string_pretty(&result.structured)?))?;
    } else {
        emit(&format!("{}\n", result.text))?;
    }
    Ok(())
}

async fn fetch_template(args: FetchArgs) -> Result<()> {
    let host = args.services.host()?;
    if args.raw {
        return print_tool(&host, GET_TEMPLATE_TOOL, json!({"template_id": args.template_id}), false).await;
    }
    let raw = host.templates().fetch_template(&args.template_id).await?;
    let spec = parse_template(&raw)?;
    emit(&format!("{}\n", serde_json::to_string_pretty(&spec.to_internal_json())?))?;
    Ok(())
}

async fn search_term(args: SearchArgs) -> Result<()> {
    let host = args.services.host()?;
    let (tool, arguments) = match &args.branch {
        Some(branch) => (
            SEARCH_BRANCH_TOOL,
            json!({"ontology": args.ontology, "branch_iri": branch, "query": args.query}),
        ),
        None => (SEARCH_ONTOLOGY_TOOL, json!({"ontology": args.ontology, "query": args.query})),
    };
    print_tool(&host, tool, arguments, args.json).await
}
