//! Batch standardization runs with a bounded worker pool and a run manifest.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tokio::io::AsyncWriteExt;
use tokio::sync::Semaphore;

use crate::agent::{run_agent, run_baseline, AgentLimits, BackendConfig, ChatBackend, HttpChatBackend, ScriptedBackend};
use crate::cache::{CacheOutcome, ResponseCache};
use crate::http::{HttpClient, RetryPolicy, ServiceError};
use crate::record::{load_records, serialize_record, MetadataRecord, ParseOptions, RecordFormat, REVIEW_SUFFIX};
use crate::resolver::{standardize_record, CorrectionResult, ResolutionStatus};
use crate::template::source::{CEDAR_API_KEY_ENV, DEFAULT_CEDAR_ENDPOINT};
use crate::template::{parse_template, CedarClient, FixtureTemplates, TemplateBackend, TemplateService, TemplateSpec};
use crate::terminology::{
    BioPortalClient, MockTerminology, SearchQuery, TermCandidate, TermLookup, Terminology, TerminologyBackend,
    BIOPORTAL_API_KEY_ENV, DEFAULT_BIOPORTAL_ENDPOINT,
};
use crate::tools::{CountingTools, ToolHost};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const TRANSCRIPT_FILE: &str = "transcripts.jsonl";
/// Inside a mock fixtures directory.
pub const MOCK_ONTOLOGIES_FILE: &str = "ontologies.json";
pub const MOCK_TEMPLATES_DIR: &str = "templates";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Agent,
    Baseline,
    Deterministic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateSource {
    File(PathBuf),
    Id(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendSpec {
    Http(BackendConfig),
    /// Directory of `<record id>.json` reply scripts.
    Scripted(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: RunMode,
    pub template: TemplateSource,
    pub input: PathBuf,
    pub out: PathBuf,
    pub parallelism: usize,
    pub backend: Option<BackendSpec>,
    pub mock_fixtures: Option<PathBuf>,
    #[serde(with = "millis")]
    pub mock_latency: Duration,
    pub cache_file: Option<PathBuf>,
    pub cache_enabled: bool,
    pub seed: u64,
    /// Process a seeded random subset of this many records.
    pub sample: Option<usize>,
    pub max_inflight_upstream: usize,
    pub skip_existing: bool,
    pub id_key: String,
    pub cedar_endpoint: String,
    pub bioportal_endpoint: String,
    #[serde(with = "millis")]
    pub upstream_timeout: Duration,
    #[serde(skip)]
    pub limits: AgentLimits,
}

mod millis {
    use std::time::Duration;

    pub fn serialize<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }
}

impl RunConfig {
    pub fn new(mode: RunMode, template: TemplateSource, input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            mode,
            template,
            input: input.into(),
            out: out.into(),
            parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            backend: None,
            mock_fixtures: None,
            mock_latency: Duration::ZERO,
            cache_file: None,
            cache_enabled: true,
            seed: 0,
            sample: None,
            max_inflight_upstream: 8,
            skip_existing: false,
            id_key: crate::record::DEFAULT_ID_KEY.to_string(),
            cedar_endpoint: DEFAULT_CEDAR_ENDPOINT.to_string(),
            bioportal_endpoint: DEFAULT_BIOPORTAL_ENDPOINT.to_string(),
            upstream_timeout: Duration::from_secs(30),
            limits: AgentLimits::default(),
        }
    }

    pub fn validate(&self) -> Result<(), BatchError> {
        let bad = |m: String| Err(BatchError::Config(m));
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        if self.max_inflight_upstream == 0 {
            return bad("max-inflight-upstream must be at least 1".into());
        }
        if self.mode != RunMode::Deterministic && self.backend.is_none() {
            return bad(format!("{:?} mode needs a chat backend", self.mode).to_lowercase());
        }
        if self.sample == Some(0) {
            return bad("sample size must be positive".into());
        }
        self.limits.validate().map_err(BatchError::Config)
    }

    pub fn live_settings(&self) -> LiveSettings {
        LiveSettings {
            cedar_endpoint: self.cedar_endpoint.clone(),
            bioportal_endpoint: self.bioportal_endpoint.clone(),
            upstream_timeout: self.upstream_timeout,
            max_inflight_upstream: self.max_inflight_upstream,
        }
    }

    /// Digest of the canonical JSON form of the configuration.
    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot load template: {0}")]
    Template(String),
    #[error("cannot read input records: {0}")]
    Input(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_error(path: &Path) -> impl Fn(std::io::Error) -> BatchError + '_ {
    move |e| BatchError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Stand-in backend when a live service has no credential; every call fails.
struct Unconfigured(&'static str);

#[async_trait]
impl TemplateBackend for Unconfigured {
    async fn fetch(&self, _: &str) -> Result<String, ServiceError> {
        Err(ServiceError::MissingCredential(self.0.into()))
    }
}

#[async_trait]
impl TerminologyBackend for Unconfigured {
    async fn search(&self, _: &SearchQuery) -> Result<String, ServiceError> {
        Err(ServiceError::MissingCredential(self.0.into()))
    }
}

/// Endpoints and limits for the live CEDAR and BioPortal clients.
#[derive(Debug, Clone, PartialEq)]
pub struct LiveSettings {
    pub cedar_endpoint: String,
    pub bioportal_endpoint: String,
    pub upstream_timeout: Duration,
    pub max_inflight_upstream: usize,
}

impl Default for LiveSettings {
    fn default() -> Self {
        Self {
            cedar_endpoint: DEFAULT_CEDAR_ENDPOINT.to_string(),
            bioportal_endpoint: DEFAULT_BIOPORTAL_ENDPOINT.to_string(),
            upstream_timeout: Duration::from_secs(30),
            max_inflight_upstream: 8,
        }
    }
}

/// Template and terminology services shared by every record of a run.
#[derive(Clone)]
pub struct Services {
    pub templates: TemplateService,
    pub terminology: Terminology,
    /// Present in mock mode; its call counter is the upstream-call count.
    pub mock: Option<Arc<MockTerminology>>,
}

impl Services {
    pub fn mock(fixtures: &Path, latency: Duration, cache: Arc<ResponseCache>) -> Result<Self, BatchError> {
        let mock = MockTerminology::load(&fixtures.join(MOCK_ONTOLOGIES_FILE))
            .map_err(|e| BatchError::Config(e.to_string()))?
            .with_latency(latency);
        let mock = Arc::new(mock);
        let templates_dir = fixtures.join(MOCK_TEMPLATES_DIR);
        let templates = if templates_dir.is_dir() {
            FixtureTemplates::load_dir(&templates_dir).map_err(io_error(&templates_dir))?
        } else {
            FixtureTemplates::new()
        };
        Ok(Self {
            templates: TemplateService::new(Arc::new(templates), Arc::clone(&cache)),
            terminology: Terminology::new(mock.clone(), cache),
            mock: Some(mock),
        })
    }

    /// Live clients. A missing API key only fails the calls that need it.
    pub fn live(config: &LiveSettings, cache: Arc<ResponseCache>) -> Result<Self, BatchError> {
        if config.max_inflight_upstream == 0 {
            return Err(BatchError::Config("max-inflight-upstream must be at least 1".into()));
        }
        let limiter = Arc::new(Semaphore::new(config.max_inflight_upstream));
        let http = HttpClient::new(config.upstream_timeout, RetryPolicy::default())
            .map_err(|e| BatchError::Config(e.to_string()))?
            .with_limiter(limiter);
        let templates: Arc<dyn TemplateBackend> = match CedarClient::from_env(&config.cedar_endpoint, http.clone()) {
            Ok(c) => Arc::new(c),
            Err(ServiceError::MissingCredential(_)) => Arc::new(Unconfigured(CEDAR_API_KEY_ENV)),
            Err(e) => return Err(BatchError::Config(e.to_string())),
        };
        let terms: Arc<dyn TerminologyBackend> = match BioPortalClient::from_env(&config.bioportal_endpoint, http) {
            Ok(c) => Arc::new(c),
            Err(ServiceError::MissingCredential(_)) => Arc::new(Unconfigured(BIOPORTAL_API_KEY_ENV)),
            Err(e) => return Err(BatchError::Config(e.to_string())),
        };
        Ok(Self {
            templates: TemplateService::new(templates, Arc::clone(&cache)),
            terminology: Terminology::new(terms, cache),
            mock: None,
        })
    }

    pub fn from_config(config: &RunConfig) -> Result<Self, BatchError> {
        let cache = Arc::new(match (&config.cache_file, config.cache_enabled) {
            (_, false) => ResponseCache::disabled(),
            (Some(path), true) => ResponseCache::with_file(path).map_err(io_error(path))?,
            (None, true) => ResponseCache::in_memory(),
        });
        match &config.mock_fixtures {
            Some(dir) => Self::mock(dir, config.mock_latency, cache),
            None => Self::live(&config.live_settings(), cache),
        }
    }

    pub fn cache(&self) -> &Arc<ResponseCache> {
        self.terminology.cache()
    }

    pub async fn load_template(&self, source: &TemplateSource) -> Result<TemplateSpec, BatchError> {
        let raw = match source {
            TemplateSource::File(path) => std::fs::read_to_string(path).map_err(io_error(path))?,
            TemplateSource::Id(id) => self
                .templates
                .fetch_template(id)
                .await
                .map_err(|e| BatchError::Template(e.to_string()))?,
        };
        parse_template(&raw).map_err(|e| BatchError::Template(e.to_string()))
    }
}

/// Chat backend for each record.
pub trait BackendProvider: Send + Sync {
    fn backend_for(&self, record_id: &str) -> Result<Arc<dyn ChatBackend>, String>;
}

struct SharedBackend(Arc<dyn ChatBackend>);

impl BackendProvider for SharedBackend {
    fn backend_for(&self, _: &str) -> Result<Arc<dyn ChatBackend>, String> {
        Ok(Arc::clone(&self.0))
    }
}

/// Loads `<dir>/<record id>.json` as the reply script for each record.
pub struct ScriptDirectory(pub PathBuf);

impl BackendProvider for ScriptDirectory {
    fn backend_for(&self, record_id: &str) -> Result<Arc<dyn ChatBackend>, String> {
        let path = self.0.join(format!("{}.json", file_stem_for(record_id)));
        let text = std::fs::read_to_string(&path).map_err(|e| format!("no script {}: {e}", path.display()))?;
        let backend = ScriptedBackend::from_json(&text).map_err(|e| format!("bad script {}: {e}", path.display()))?;
        Ok(Arc::new(backend))
    }
}

pub fn backend_provider(spec: &BackendSpec) -> Result<Arc<dyn BackendProvider>, BatchError> {
    Ok(match spec {
        BackendSpec::Http(config) => {
            let backend = HttpChatBackend::new(config.clone()).map_err(|e| BatchError::Config(e.to_string()))?;
            Arc::new(SharedBackend(Arc::new(backend)))
        }
        BackendSpec::Scripted(dir) => Arc::new(ScriptDirectory(dir.clone())),
    })
}

/// File stem for a record id: characters outside `[A-Za-z0-9._-]` become `_`.
pub fn file_stem_for(record_id: &str) -> String {
    let stem: String = record_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    match stem.as_str() {
        "" | "." | ".." => format!("_{stem}"),
        _ => stem,
    }
}

/// Counts lookups and cache hits for one record.
struct CountingLookup<'a> {
    terms: &'a Terminology,
    lookups: AtomicU64,
    hits: AtomicU64,
}

#[async_trait]
impl TermLookup for CountingLookup<'_> {
    async fn lookup(&self, query: &SearchQuery) -> Result<Vec<TermCandidate>, ServiceError> {
        self.lookups.fetch_add(1, Ordering::SeqCst);
        let (candidates, outcome) = self.terms.search_traced(query).await?;
        if outcome == CacheOutcome::Hit {
            self.hits.fetch_add(1, Ordering::SeqCst);
        }
        Ok(candidates)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordStatus {
    Ok,
    Error,
    Skipped,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordEntry {
    pub record_id: String,
    pub status: RecordStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed_ms: u64,
    pub tool_calls: u64,
    pub cache_hits: u64,
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub entries: Vec<RecordEntry>,
    pub elapsed: Duration,
    /// Upstream terminology requests (mock mode only).
    pub upstream_calls: Option<u64>,
    pub cache_hits: u64,
}

impl BatchSummary {
    pub fn count(&self, status: RecordStatus) -> usize {
        self.entries.iter().filter(|e| e.status == status).count()
    }
}

struct Processed {
    entry: RecordEntry,
    transcript: Vec<String>,
}

/// Seeded subset of `n` positions out of `len`, in input order.
pub fn sample_positions(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, len, n).into_vec();
    picked.sort_unstable();
    picked
}

/// Runs a batch with services and backends built from the configuration.
pub async fn run_batch(config: &RunConfig) -> Result<BatchSummary, BatchError> {
    config.validate()?;
    let services = Services::from_config(config)?;
    let backends = config.backend.as_ref().map(backend_provider).transpose()?;
    run_batch_with(config, &services, backends).await
}

pub async fn run_batch_with(
    config: &RunConfig,
    services: &Services,
    backends: Option<Arc<dyn BackendProvider>>,
) -> Result<BatchSummary, BatchError> {
    config.validate()?;
    if config.mode != RunMode::Deterministic && backends.is_none() {
        return Err(BatchError::Config("no chat backend supplied".into()));
    }
    let started = Instant::now();
    let template = services.load_template(&config.template).await?;
    let options = ParseOptions {
        id_key: Some(config.id_key.clone()),
        ..ParseOptions::default()
    };
    let mut loaded = load_records(&config.input, &options).map_err(|e| BatchError::Input(e.to_string()))?;
    let mut seen = BTreeSet::new();
    for item in &loaded {
        let id = match item {
            Ok(r) => r.record_id(),
            Err((id, _)) => id.as_str(),
        };
        if !seen.insert(file_stem_for(id)) {
            return Err(BatchError::Config(format!("duplicate record id `{id}`")));
        }
    }
    if let Some(n) = config.sample {
        let keep = sample_positions(loaded.len(), n, config.seed);
        loaded = keep.into_iter().map(|i| loaded[i].clone()).collect();
    }
    std::fs::create_dir_all(&config.out).map_err(io_error(&config.out))?;

    let manifest_path = config.out.join(MANIFEST_FILE);
    let mut manifest = tokio::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&manifest_path)
        .await
        .map_err(io_error(&manifest_path))?;
    let header = json!({
        "kind": "config",
        "started_at": chrono::Utc::now().to_rfc3339(),
        "digest": config.digest(),
        "config": config,
        "template_id": template.template_id,
        "records": loaded.len(),
    });
    write_line(&mut manifest, &manifest_path, &header.to_string()).await?;
    let transcript_path = config.out.join(TRANSCRIPT_FILE);
    let mut transcripts = if config.mode == RunMode::Deterministic {
        None
    } else {
        let file = tokio::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&transcript_path)
            .await
            .map_err(io_error(&transcript_path))?;
        Some(file)
    };

    let template = &template;
    let backends = backends.as_deref();
    let mut results = stream::iter(loaded)
        .map(|item| process(config, services, template, backends, item))
        .buffered(config.parallelism);
    let mut entries = Vec::new();
    while let Some(processed) = results.next().await {
        let mut line = serde_json::to_value(&processed.entry).expect("entry serializes");
        line["kind"] = json!("record");
        write_line(&mut manifest, &manifest_path, &line.to_string()).await?;
        if let Some(file) = transcripts.as_mut() {
            for l in &processed.transcript {
                write_line(file, &transcript_path, l).await?;
            }
        }
        entries.push(processed.entry);
    }
    let cache_hits = entries.iter().map(|e| e.cache_hits).sum();
    Ok(BatchSummary {
        entries,
        elapsed: started.elapsed(),
        upstream_calls: services.mock.as_ref().map(|m| m.calls()),
        cache_hits,
    })
}

async fn write_line(file: &mut tokio::fs::File, path: &Path, line: &str) -> Result<(), BatchError> {
    let mut bytes = line.as_bytes().to_vec();
    bytes.push(b'\n');
    file.write_all(&bytes).await.map_err(io_error(path))?;
    file.flush().await.map_err(io_error(path))
}

/// Output files for one result: the record object and its review sidecar.
pub fn write_outputs(out: &Path, result: &CorrectionResult) -> Result<PathBuf, BatchError> {
    let stem = file_stem_for(&result.record_id);
    let record_path = out.join(format!("{stem}.json"));
    let bytes = serialize_record(&result.to_record(), RecordFormat::Object)
        .map_err(|e| BatchError::Io {
            path: record_path.display().to_string(),
            message: e.to_string(),
        })?;
    std::fs::write(&record_path, bytes).map_err(io_error(&record_path))?;
    let review_path = out.join(format!("{stem}{REVIEW_SUFFIX}"));
    let mut review = serde_json::to_string_pretty(&result.review_document()).expect("review serializes");
    review.push('\n');
    std::fs::write(&review_path, review).map_err(io_error(&review_path))?;
    Ok(record_path)
}

async fn process(
    config: &RunConfig,
    services: &Services,
    template: &TemplateSpec,
    backends: Option<&dyn BackendProvider>,
    item: Result<MetadataRecord, (String, crate::record::RecordError)>,
) -> Processed {
    let started = Instant::now();
    let entry = |record_id: &str, status| RecordEntry {
        record_id: record_id.to_string(),
        status,
        output: None,
        error: None,
        elapsed_ms: 0,
        tool_calls: 0,
        cache_hits: 0,
        flagged: 0,
    };
    let record = match item {
        Ok(r) => r,
        Err((id, e)) => {
            let mut failed = entry(&id, RecordStatus::Error);
            failed.error = Some(e.to_string());
            return Processed {
                entry: failed,
                transcript: Vec::new(),
            };
        }
    };
    let id = record.record_id().to_string();
    let target = config.out.join(format!("{}.json", file_stem_for(&id)));
    if config.skip_existing && target.exists() {
        return Processed {
            entry: entry(&id, RecordStatus::Skipped),
            transcript: Vec::new(),
        };
    }

    let mut done = entry(&id, RecordStatus::Ok);
    let mut transcript = Vec::new();
    let outcome: Result<CorrectionResult, String> = match config.mode {
        RunMode::Deterministic => {
            let probe = CountingLookup {
                terms: &services.terminology,
                lookups: AtomicU64::new(0),
                hits: AtomicU64::new(0),
            };
            let result = standardize_record(&record, template, &probe).await;
            done.tool_calls = probe.lookups.load(Ordering::SeqCst);
            done.cache_hits = probe.hits.load(Ordering::SeqCst);
            Ok(result)
        }
        RunMode::Agent | RunMode::Baseline => {
            let provider = backends.expect("checked before the run");
            match provider.backend_for(&id) {
                Err(e) => Err(e),
                Ok(backend) => {
                    let run = if config.mode == RunMode::Agent {
                        let host = Arc::new(ToolHost::new(services.templates.clone(), services.terminology.clone()));
                        let tools = CountingTools::new(host);
                        let run = run_agent(&record, template, backend.as_ref(), &tools, &config.limits).await;
                        done.tool_calls = tools.calls();
                        done.cache_hits = tools.cache_hits();
                        run
                    } else {
                        let names: Vec<String> = template.field_names().map(str::to_string).collect();
                        run_baseline(&record, &names, &template.ontology_names(), backend.as_ref(), &config.limits)
                            .await
                    };
                    match run {
                        Ok(outcome) => {
                            transcript = outcome.transcript.log_lines();
                            Ok(outcome.result)
                        }
                        Err(failure) => {
                            transcript = failure.transcript.log_lines();
                            Err(failure.error.to_string())
                        }
                    }
                }
            }
        }
    };
    match outcome.and_then(|result| {
        let path = write_outputs(&config.out, &result).map_err(|e| e.to_string())?;
        Ok((result, path))
    }) {
        Ok((result, path)) => {
            done.flagged = result
                .resolutions
                .iter()
                .filter(|r| r.status == ResolutionStatus::FlaggedForReview)
                .count();
            done.output = Some(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        }
        Err(e) => {
            tracing::warn!(record = %id, error = %e, "record failed");
            done.status = RecordStatus::Error;
            done.error = Some(e);
        }
    }
    done.elapsed_ms = started.elapsed().as_millis() as u64;
    Processed { entry: done, transcript }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stems_are_path_safe() {
        assert_eq!(file_stem_for("HBM123.ABCD.456"), "HBM123.ABCD.456");
        assert_eq!(file_stem_for("a/b c"), "a_b_c");
        assert_eq!(file_stem_for(".."), "_..");
        assert_eq!(file_stem_for(""), "_");
    }

    #[test]
    fn sampling_is_seeded_and_ordered() {
        let a = sample_positions(100, 10, 7);
        assert_eq!(a, sample_positions(100, 10, 7));
        assert_ne!(a, sample_positions(100, 10, 8));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_positions(3, 10, 1), [0, 1, 2]);
    }

    #[test]
    fn config_validation() {
        let mut c = RunConfig::new(RunMode::Deterministic, TemplateSource::Id("t".into()), "in", "out");
        assert!(c.validate().is_ok());
        c.parallelism = 0;
        assert!(c.validate().is_err());
        c.parallelism = 1;
        c.mode = RunMode::Agent;
        assert!(c.validate().is_err());
        c.backend = Some(BackendSpec::Scripted("s".into()));
        assert!(c.validate().is_ok());
        assert_eq!(c.digest(), c.clone().digest());
    }
}
