//! The three lookup tools offered to agents, and a JSON-RPC stdio server for them.

pub mod server;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::cache::CacheOutcome;
use crate::http::ServiceError;
use crate::template::TemplateService;
use crate::terminology::{SearchQuery, TermCandidate, Terminology, SEARCH_BRANCH_OP, SEARCH_ONTOLOGY_OP};

pub use server::{serve, serve_stdio};

pub const GET_TEMPLATE_TOOL: &str = "get_cedar_template";
pub const SEARCH_ONTOLOGY_TOOL: &str = SEARCH_ONTOLOGY_OP;
pub const SEARCH_BRANCH_TOOL: &str = SEARCH_BRANCH_OP;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    #[serde(rename = "inputSchema")]
    pub input_schema: Value,
}

impl ToolDescriptor {
    pub fn required_params(&self) -> Vec<&str> {
        self.input_schema["required"]
            .as_array()
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default()
    }
}

fn descriptor(name: &str, description: &str, params: &[(&str, &str)]) -> ToolDescriptor {
    let mut properties = Map::new();
    for (param, doc) in params {
        properties.insert(
            param.to_string(),
            json!({"type": "string", "description": doc}),
        );
    }
    let required: Vec<&str> = params.iter().map(|(p, _)| *p).collect();
    ToolDescriptor {
        name: name.to_string(),
        description: description.to_string(),
        input_schema: json!({
            "type": "object",
            "properties": properties,
            "required": required,
            "additionalProperties": false,
        }),
    }
}

/// The three tool descriptors, in their advertised order.
pub fn tool_descriptors() -> Vec<ToolDescriptor> {
    vec![
        descriptor(
            GET_TEMPLATE_TOOL,
            "Retrieve the full metadata template for a template identifier: field definitions, data types, string patterns and ontology-based value constraints.",
            &[("template_id", "Template identifier")],
        ),
        descriptor(
            SEARCH_ONTOLOGY_TOOL,
            "Search an entire ontology for terms matching a search string. Returns candidate terms with preferred labels and concept identifiers.",
            &[
                ("ontology", "Ontology acronym, e.g. UBERON"),
                ("query", "Search string"),
            ],
        ),
        descriptor(
            SEARCH_BRANCH_TOOL,
            "Search one branch of an ontology for terms matching a search string. Returns candidate terms with preferred labels and concept identifiers.",
            &[
                ("ontology", "Ontology acronym, e.g. HRAVS"),
                ("branch_iri", "Identifier of the branch root concept"),
                ("query", "Search string"),
            ],
        ),
    ]
}

/// Protocol-level failure of a tool call (as opposed to an upstream error,
/// which is reported inside a [`ToolResult`]).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ToolCallError {
    #[error("Unknown tool: {0}")]
    UnknownTool(String),
    #[error("Invalid arguments for {tool}: {message}")]
    InvalidArguments { tool: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    /// Human-readable rendering for text-only agent runtimes.
    pub text: String,
    pub structured: Value,
    pub is_error: bool,
}

impl ToolResult {
    pub fn error(err: &ServiceError) -> Self {
        let kind = match err {
            ServiceError::NotFound(_) => "not-found",
            ServiceError::Auth(_) | ServiceError::MissingCredential(_) => "auth",
            ServiceError::Timeout { .. } => "timeout",
            ServiceError::Malformed(_) => "malformed-upstream",
            ServiceError::InvalidRequest(_) => "invalid-request",
            ServiceError::Status { .. } | ServiceError::Transport(_) => "upstream",
        };
        Self {
            text: err.to_string(),
            structured: json!({"error": {"kind": kind, "message": err.to_string()}}),
            is_error: true,
        }
    }

    /// Candidates carried by a search result; empty for other results.
    pub fn candidates(&self) -> Vec<TermCandidate> {
        self.structured
            .get("candidates")
            .and_then(|c| serde_json::from_value(c.clone()).ok())
            .unwrap_or_default()
    }

    /// MCP `tools/call` result body.
    pub fn to_call_result(&self) -> Value {
        json!({
            "content": [{"type": "text", "text": self.text}],
            "structuredContent": self.structured,
            "isError": self.is_error,
        })
    }
}

/// Tool invocation as seen by an agent loop.
#[async_trait]
pub trait ToolAccess: Send + Sync {
    fn descriptors(&self) -> Vec<ToolDescriptor> {
        tool_descriptors()
    }

    async fn call_tool(&self, name: &str, args: &Value) -> Result<ToolResult, ToolCallError> {
        self.call_tool_traced(name, args).await.map(|(r, _)| r)
    }

    /// Same as [`ToolAccess::call_tool`], also reporting whether the answer came from cache.
    async fn call_tool_traced(
        &self,
        name: &str,
        args: &Value,
    ) -> Result<(ToolResult, Option<CacheOutcome>), ToolCallError>;
}

/// Validated arguments of one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolRequest {
    GetTemplate { template_id: String },
    Search(SearchQuery),
}

/// Checks `args` against the tool's schema: an object with exactly the
/// declared string parameters, all nonempty.
pub fn validate_call(name: &str, args: &Value) -> Result<ToolRequest, ToolCallError> {
    let descriptor = tool_descriptors()
        .into_iter()
        .find(|d| d.name == name)
        .ok_or_else(|| ToolCallError::UnknownTool(name.to_string()))?;
    let invalid = |message: String| ToolCallError::InvalidArguments {
        tool: name.to_string(),
        message,
    };
    let empty = Map::new();
    let obj = match args {
        Value::Object(o) => o,
        Value::Null => &empty,
        _ => return Err(invalid("arguments must be an object".into())),
    };
    let required = descriptor.required_params();
    if let Some(extra) = obj.keys().find(|k| !required.contains(&k.as_str())) {
        return Err(invalid(format!("unexpected parameter `{extra}`")));
    }
    let mut values = Vec::with_capacity(required.len());
    for param in &required {
        match obj.get(*param) {
            Some(Value::String(s)) if !s.trim().is_empty() => values.push(s.clone()),
            Some(Value::String(_)) => return Err(invalid(format!("`{param}` is empty"))),
            Some(_) => return Err(invalid(format!("`{param}` must be a string"))),
            None => return Err(invalid(format!("missing required parameter `{param}`"))),
        }
    }
    let mut values = values.into_iter();
    let mut next = || values.next().expect("one value per required parameter");
    Ok(match name {
        GET_TEMPLATE_TOOL => ToolRequest::GetTemplate {
            template_id: next(),
        },
        SEARCH_ONTOLOGY_TOOL => {
            let ontology = next();
            ToolRequest::Search(SearchQuery::ontology(ontology, next()))
        }
        _ => {
            let ontology = next();
            let branch = next();
            ToolRequest::Search(SearchQuery::branch(ontology, branch, next()))
        }
    })
}

fn search_result(query: &SearchQuery, candidates: &[TermCandidate]) -> ToolResult {
    let text = if candidates.is_empty() {
        format!("No candidates found for \"{}\" in {}.", query.query, query.ontology)
    } else {
        candidates
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{}. {} <{}>", i + 1, c.preferred_label, c.concept_iri))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let mut structured = Map::new();
    structured.insert("ontology".into(), json!(query.ontology));
    if let Some(branch) = &query.branch_iri {
        structured.insert("branch_iri".into(), json!(branch));
    }
    structured.insert("query".into(), json!(query.query));
    structured.insert("candidates".into(), json!(candidates));
    ToolResult {
        text,
        structured: Value::Object(structured),
        is_error: false,
    }
}

fn template_result(template_id: &str, raw: String) -> ToolResult {
    let parsed = serde_json::from_str::<Value>(&raw).unwrap_or(Value::Null);
    ToolResult {
        structured: json!({"template_id": template_id, "template": parsed}),
        text: raw,
        is_error: false,
    }
}

/// In-process tool implementation over the template and terminology services.
#[derive(Clone)]
pub struct ToolHost {
    templates: TemplateService,
    terminology: Terminology,
}

impl ToolHost {
    pub fn new(templates: TemplateService, terminology: Terminology) -> Self {
        Self {
            templates,
            terminology,
        }
    }

    pub fn templates(&self) -> &TemplateService {
        &self.templates
    }

    pub fn terminology(&self) -> &Terminology {
        &self.terminology
    }

    pub async fn execute(&self, request: &ToolRequest) -> (ToolResult, Option<CacheOutcome>) {
        match request {
            ToolRequest::GetTemplate { template_id } => {
                match self.templates.fetch_template_traced(template_id).await {
                    Ok((raw, outcome)) => (template_result(template_id, raw), Some(outcome)),
                    Err(e) => (ToolResult::error(&e), None),
                }
            }
            ToolRequest::Search(query) => match self.terminology.search_traced(query).await {
                Ok((candidates, outcome)) => (search_result(query, &candidates), Some(outcome)),
                Err(e) => (ToolResult::error(&e), None),
            },
        }
    }
}

#[async_trait]
impl ToolAccess for ToolHost {
    async fn call_tool_traced(
        &self,
        name: &str,
        args: &Value,
    ) -> Result<(ToolResult, Option<CacheOutcome>), ToolCallError> {
        let request = validate_call(name, args)?;
        Ok(self.execute(&request).await)
    }
}

/// Wraps a tool access and counts invocations and cache hits.
pub struct CountingTools<T: ?Sized> {
    inner: Arc<T>,
    calls: AtomicU64,
    cache_hits: AtomicU64,
}

impl<T: ToolAccess + ?Sized> CountingTools<T> {
    pub fn new(inner: Arc<T>) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl<T: ToolAccess + ?Sized> ToolAccess for CountingTools<T> {
    fn descriptors(&self) -> Vec<ToolDescriptor> {
        self.inner.descriptors()
    }

    async fn call_tool_traced(
        &self,
        name: &str,
        args: &Value,
    ) -> Result<(ToolResult, Option<CacheOutcome>), ToolCallError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let out = self.inner.call_tool_traced(name, args).await?;
        if out.1 == Some(CacheOutcome::Hit) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_three_tools_in_order() {
        let d = tool_descriptors();
        let names: Vec<_> = d.iter().map(|d| d.name.as_str()).collect();
        assert_eq!(
            names,
            ["get_cedar_template", "term_search_from_ontology", "term_search_from_branch"]
        );
        assert_eq!(d[0].required_params(), ["template_id"]);
        assert_eq!(d[1].required_params(), ["ontology", "query"]);
        assert_eq!(d[2].required_params(), ["ontology", "branch_iri", "query"]);
        assert_eq!(tool_descriptors(), d);
    }

    #[test]
    fn validation() {
        assert_eq!(
            validate_call("no_such_tool", &json!({})).unwrap_err(),
            ToolCallError::UnknownTool("no_such_tool".into())
        );
        assert!(validate_call("term_search_from_ontology", &json!({"ontology": "X"})).is_err());
        assert!(validate_call("term_search_from_ontology", &json!({"ontology": "X", "query": 3})).is_err());
        assert!(validate_call("term_search_from_ontology", &json!({"ontology": "X", "query": " "})).is_err());
        assert!(validate_call(
            "term_search_from_ontology",
            &json!({"ontology": "X", "query": "q", "extra": "y"})
        )
        .is_err());
        assert!(validate_call("get_cedar_template", &json!([])).is_err());
        assert_eq!(
            validate_call(
                "term_search_from_branch",
                &json!({"query": "q", "branch_iri": "b", "ontology": "O"})
            )
            .unwrap(),
            ToolRequest::Search(SearchQuery::branch("O", "b", "q"))
        );
    }

    #[test]
    fn error_results_are_marked() {
        let r = ToolResult::error(&ServiceError::NotFound("t9".into()));
        assert!(r.is_error);
        assert_eq!(r.structured["error"]["kind"], "not-found");
        assert_eq!(r.to_call_result()["isError"], true);
    }
}
