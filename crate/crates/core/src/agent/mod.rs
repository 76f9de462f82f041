//! Chat-model orchestration: the tool loop and the prompt-only baseline.
//!
//! Both modes parse the final model message into a record and derive
//! per-field statuses by comparing it with the legacy record and with the
//! candidate labels the run actually retrieved.

pub mod backend;
pub mod parse;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use futures::future::join_all;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::record::{MetadataRecord, DEFAULT_ID_KEY};
use crate::resolver::{map_legacy_names, CorrectionResult, Resolution, ResolutionStatus};
use crate::template::{classify_field, FieldCategory, TemplateSpec, ValueConstraint};
use crate::tools::{ToolAccess, ToolDescriptor, ToolResult, GET_TEMPLATE_TOOL};

pub use backend::{BackendConfig, ChatBackend, ChatReply, HttpChatBackend, ScriptedBackend, Usage};
pub use parse::{parse_final_output, OutputError, ParsedOutput, FLAGGED_KEY};

pub const PROMPT_VERSION: &str = "v1";
pub const AGENT_SYSTEM_PROMPT: &str = include_str!("../../resources/prompts/agent_system.v1.txt");
pub const BASELINE_SYSTEM_PROMPT: &str = include_str!("../../resources/prompts/baseline_system.v1.txt");
pub const REPROMPT: &str = "Return only the record object.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChatRole {
    System,
    User,
    Model,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub arguments: Value,
}

impl ToolCallRequest {
    pub fn new(id: impl Into<String>, name: impl Into<String>, arguments: Value) -> Self {
        Self {
            id: id.into(),
            name: name.into(),
            arguments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: ChatRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatTurn {
    fn plain(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(ChatRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(ChatRole::User, content)
    }

    pub fn model(content: impl Into<String>, tool_calls: Vec<ToolCallRequest>) -> Self {
        Self {
            tool_calls,
            ..Self::plain(ChatRole::Model, content)
        }
    }

    pub fn tool_result(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            tool_call_id: Some(call_id.into()),
            ..Self::plain(ChatRole::ToolResult, content)
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AgentError {
    #[error("chat backend failed: {0}")]
    Backend(String),
    #[error("chat backend call timed out")]
    CallTimeout,
    #[error("run exceeded its total time budget")]
    BudgetExhausted,
    #[error("model still requesting tools after {0} iterations")]
    IterationLimit(usize),
    #[error("unusable model output after reprompt: {0}")]
    Unparseable(OutputError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentLimits {
    pub max_tool_iterations: usize,
    pub per_call_timeout: Duration,
    pub total_budget: Duration,
}

impl Default for AgentLimits {
    fn default() -> Self {
        Self {
            max_tool_iterations: 25,
            per_call_timeout: Duration::from_secs(120),
            total_budget: Duration::from_secs(900),
        }
    }
}

impl AgentLimits {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_tool_iterations == 0 {
            return Err("max_tool_iterations must be positive".into());
        }
        if self.per_call_timeout.is_zero() || self.total_budget.is_zero() {
            return Err("timeouts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    #[serde(flatten)]
    pub turn: ChatTurn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

/// Full message sequence of one run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub record_id: String,
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    fn new(record_id: &str) -> Self {
        Self {
            record_id: record_id.to_string(),
            entries: Vec::new(),
        }
    }

    fn push(&mut self, turn: ChatTurn) {
        self.entries.push(TranscriptEntry {
            turn,
            latency_ms: None,
            usage: None,
        });
    }

    fn push_timed(&mut self, turn: ChatTurn, started: Instant, usage: Option<Usage>) {
        self.entries.push(TranscriptEntry {
            turn,
            latency_ms: Some(started.elapsed().as_millis() as u64),
            usage,
        });
    }

    pub fn turns(&self) -> Vec<ChatTurn> {
        self.entries.iter().map(|e| e.turn.clone()).collect()
    }

    pub fn tool_call_count(&self) -> usize {
        self.entries.iter().map(|e| e.turn.tool_calls.len()).sum()
    }

    pub fn model_calls(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.turn.role == ChatRole::Model)
            .count()
    }

    /// One structured line per turn, with a digest in place of the content.
    pub fn log_lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let digest = hex::encode(Sha256::digest(e.turn.content.as_bytes()));
                json!({
                    "record_id": self.record_id,
                    "turn": i,
                    "role": e.turn.role,
                    "content_sha256": digest,
                    "content_bytes": e.turn.content.len(),
                    "tool_calls": e.turn.tool_calls,
                    "tool_call_id": e.turn.tool_call_id,
                    "latency_ms": e.latency_ms,
                    "usage": e.usage,
                })
                .to_string()
            })
            .collect()
    }

    /// Every tool result answers a call from the latest model turn, and every
    /// call is answered before the next model turn.
    pub fn check_alternation(&self) -> Result<(), String> {
        let mut outstanding: BTreeSet<&str> = BTreeSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            match e.turn.role {
                ChatRole::Model => {
                    if !outstanding.is_empty() {
                        return Err(format!("turn {i}: model turn before calls {outstanding:?} were answered"));
                    }
                    outstanding = e.turn.tool_calls.iter().map(|c| c.id.as_str()).collect();
                }
                ChatRole::ToolResult => {
                    let id = e.turn.tool_call_id.as_deref().unwrap_or_default();
                    if !outstanding.remove(id) {
                        return Err(format!("turn {i}: result for unknown call `{id}`"));
                    }
                }
                ChatRole::System | ChatRole::User => {
                    if !outstanding.is_empty() {
                        return Err(format!("turn {i}: message before calls {outstanding:?} were answered"));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub result: CorrectionResult,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentFailure {
    pub error: AgentError,
    /// Messages exchanged before the failure.
    pub transcript: Transcript,
}

fn record_json(record: &MetadataRecord) -> String {
    serde_json::to_string_pretty(&record.to_json_object()).expect("record serializes")
}

pub fn agent_user_prompt(record: &MetadataRecord, template_id: &str) -> String {
    format!(
        "Template identifier: {template_id}\n\nLegacy metadata record:\n{}\n",
        record_json(record)
    )
}

pub fn baseline_user_prompt(
    record: &MetadataRecord,
    field_names: &[String],
    ontology_names: &[(String, String)],
) -> String {
    let mut prompt = format!("Legacy metadata record:\n{}\n\nTarget field names:\n", record_json(record));
    for name in field_names {
        prompt.push_str(&format!("- {name}\n"));
    }
    if !ontology_names.is_empty() {
        prompt.push_str("\nOntologies constraining fields:\n");
        for (field, ontology) in ontology_names {
            prompt.push_str(&format!("- {field}: {ontology}\n"));
        }
    }
    prompt
}

/// What a run retrieved and what the output is validated against.
struct Validation<'a> {
    field_names: Vec<&'a str>,
    ontology_fields: BTreeSet<&'a str>,
    candidate_labels: BTreeSet<String>,
}

/// Builds the correction result for a parsed model output.
fn derive_result(legacy: &MetadataRecord, output: &ParsedOutput, v: &Validation) -> CorrectionResult {
    let legacy_names: Vec<&str> = legacy.field_names().collect();
    let mapping = map_legacy_names(&legacy_names, &v.field_names);
    let flagged: BTreeSet<&str> = output.flagged.iter().map(String::as_str).collect();
    let mut resolutions = Vec::new();
    let mut omitted = Vec::new();
    for &field in &v.field_names {
        let Some(value) = output.fields.get(field) else {
            omitted.push(field.to_string());
            continue;
        };
        let legacy_value = mapping.legacy_for(field).and_then(|l| legacy.get(l));
        let resolution = if flagged.contains(field) {
            let kept = legacy_value.unwrap_or_default();
            let mut note = "flagged by model".to_string();
            if value != kept {
                note.push_str("; model value replaced by the legacy value");
            }
            Resolution::flagged(field, kept, note)
        } else if Some(value.as_str()) == legacy_value {
            Resolution::new(field, value.clone(), ResolutionStatus::Unchanged)
        } else if v.ontology_fields.contains(field) && v.candidate_labels.contains(value) {
            Resolution::new(field, value.clone(), ResolutionStatus::OntologyResolved)
        } else if legacy_value.map_or(true, |l| l.trim().is_empty()) && !value.is_empty() {
            Resolution::new(field, value.clone(), ResolutionStatus::InferredFromRecord)
        } else {
            let r = Resolution::new(field, value.clone(), ResolutionStatus::Normalized);
            if v.ontology_fields.contains(field) {
                r.with_note("value is not among the candidates retrieved in this run")
            } else {
                r
            }
        };
        resolutions.push(resolution);
    }
    let known: BTreeSet<&str> = v.field_names.iter().copied().collect();
    let extra_fields = output
        .fields
        .iter()
        .filter(|(k, _)| !known.contains(k.as_str()) && k.as_str() != DEFAULT_ID_KEY)
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    CorrectionResult {
        record_id: legacy.record_id().to_string(),
        resolutions,
        extra_fields,
        omitted_fields: omitted,
    }
}

fn template_literals(template: &TemplateSpec) -> impl Iterator<Item = String> + '_ {
    template.fields.iter().flat_map(|f| match &f.constraint {
        ValueConstraint::OntologyBinding { extra_literals, .. } => extra_literals.clone(),
        _ => Vec::new(),
    })
}

async fn call_backend(
    backend: &dyn ChatBackend,
    transcript: &mut Transcript,
    tools: &[ToolDescriptor],
    limits: &AgentLimits,
) -> Result<ChatReply, AgentError> {
    let started = Instant::now();
    let turns = transcript.turns();
    let reply = tokio::time::timeout(limits.per_call_timeout, backend.complete(&turns, tools))
        .await
        .map_err(|_| AgentError::CallTimeout)??;
    transcript.push_timed(
        ChatTurn::model(reply.content.clone(), reply.tool_calls.clone()),
        started,
        reply.usage,
    );
    Ok(reply)
}

async fn execute_call(
    tools: &dyn ToolAccess,
    call: &ToolCallRequest,
    timeout: Duration,
) -> (String, Option<ToolResult>) {
    match tokio::time::timeout(timeout, tools.call_tool(&call.name, &call.arguments)).await {
        Ok(Ok(result)) => {
            let text = if result.is_error {
                format!("error: {}", result.text)
            } else {
                result.text.clone()
            };
            (text, Some(result))
        }
        Ok(Err(e)) => (format!("error: {e}"), None),
        Err(_) => ("error: tool call timed out".to_string(), None),
    }
}

/// Tool-loop run for one record. `template` is used to validate the output;
/// the model only receives its identifier and must fetch it itself.
pub async fn run_agent(
    record: &MetadataRecord,
    template: &TemplateSpec,
    backend: &dyn ChatBackend,
    tools: &dyn ToolAccess,
    limits: &AgentLimits,
) -> Result<AgentOutcome, AgentFailure> {
    let mut transcript = Transcript::new(record.record_id());
    transcript.push(ChatTurn::system(AGENT_SYSTEM_PROMPT));
    transcript.push(ChatTurn::user(agent_user_prompt(record, &template.template_id)));
    let descriptors = tools.descriptors();
    let mut labels: BTreeSet<String> = template_literals(template).collect();

    let run = async {
        let mut iterations = 0;
        let mut reprompted = false;
        loop {
            let reply = call_backend(backend, &mut transcript, &descriptors, limits).await?;
            if reply.tool_calls.is_empty() {
                match parse_final_output(&reply.content) {
                    Ok(parsed) => return Ok(parsed),
                    Err(e) if reprompted => return Err(AgentError::Unparseable(e)),
                    Err(e) => {
                        tracing::debug!(record = record.record_id(), error = %e, "reprompting");
                        reprompted = true;
                        transcript.push(ChatTurn::user(REPROMPT));
                        continue;
                    }
                }
            }
            if iterations >= limits.max_tool_iterations {
                return Err(AgentError::IterationLimit(iterations));
            }
            iterations += 1;
            let results = join_all(
                reply
                    .tool_calls
                    .iter()
                    .map(|c| execute_call(tools, c, limits.per_call_timeout)),
            )
            .await;
            for (call, (text, result)) in reply.tool_calls.iter().zip(results) {
                if let Some(result) = &result {
                    if call.name != GET_TEMPLATE_TOOL {
                        labels.extend(result.candidates().into_iter().map(|c| c.preferred_label));
                    }
                }
                transcript.push(ChatTurn::tool_result(call.id.clone(), text));
            }
        }
    };
    let outcome = match tokio::time::timeout(limits.total_budget, run).await {
        Ok(r) => r,
        Err(_) => Err(AgentError::BudgetExhausted),
    };
    match outcome {
        Ok(parsed) => {
            let validation = Validation {
                field_names: template.field_names().collect(),
                ontology_fields: template
                    .fields
                    .iter()
                    .filter(|f| classify_field(f) == FieldCategory::OntologyConstrained)
                    .map(|f| f.name.as_str())
                    .collect(),
                candidate_labels: labels,
            };
            Ok(AgentOutcome {
                result: derive_result(record, &parsed, &validation),
                transcript,
            })
        }
        Err(error) => Err(AgentFailure { error, transcript }),
    }
}

/// Prompt-only run: one user prompt, no tool access.
pub async fn run_baseline(
    record: &MetadataRecord,
    field_names: &[String],
    ontology_names: &[(String, String)],
    backend: &dyn ChatBackend,
    limits: &AgentLimits,
) -> Result<AgentOutcome, AgentFailure> {
    let mut transcript = Transcript::new(record.record_id());
    transcript.push(ChatTurn::system(BASELINE_SYSTEM_PROMPT));
    transcript.push(ChatTurn::user(baseline_user_prompt(record, field_names, ontology_names)));
    let run = async {
        let mut reprompted = false;
        loop {
            let reply = call_backend(backend, &mut transcript, &[], limits).await?;
            if !reply.tool_calls.is_empty() {
                tracing::warn!(record = record.record_id(), "baseline model requested tools; ignored");
            }
            match parse_final_output(&reply.content) {
                Ok(parsed) => return Ok(parsed),
                Err(e) if reprompted => return Err(AgentError::Unparseable(e)),
                Err(_) => {
                    reprompted = true;
                    transcript.push(ChatTurn::user(REPROMPT));
                }
            }
        }
    };
    let outcome = match tokio::time::timeout(limits.total_budget, run).await {
        Ok(r) => r,
        Err(_) => Err(AgentError::BudgetExhausted),
    };
    match outcome {
        Ok(parsed) => {
            let ontology_fields = ontology_names.iter().map(|(f, _)| f.as_str()).collect();
            let validation = Validation {
                field_names: field_names.iter().map(String::as_str).collect(),
                ontology_fields,
                candidate_labels: BTreeSet::new(),
            };
            Ok(AgentOutcome {
                result: derive_result(record, &parsed, &validation),
                transcript,
            })
        }
        Err(error) => Err(AgentFailure { error, transcript }),
    }
}
