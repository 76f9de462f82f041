//! Chat-model backends: a scripted in-process mock and an HTTP client for
//! chat-completion style endpoints.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AgentError, ChatRole, ChatTurn, ToolCallRequest};
use crate::http::{HttpClient, RetryPolicy, ServiceError};
use crate::tools::ToolDescriptor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One model reply: either tool-call requests or final text (or both).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChatReply {
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ToolCallRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<Usage>,
}

impl ChatReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            ..Self::default()
        }
    }

    pub fn calls(calls: Vec<ToolCallRequest>) -> Self {
        Self {
            tool_calls: calls,
            ..Self::default()
        }
    }
}

#[async_trait]
pub trait ChatBackend: Send + Sync {
    /// `tools` is empty when the conversation has no tool access.
    async fn complete(&self, turns: &[ChatTurn], tools: &[ToolDescriptor]) -> Result<ChatReply, AgentError>;
}

/// Replays a fixed list of replies and records every request it receives.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<ChatReply>>,
    requests: Mutex<Vec<(Vec<ChatTurn>, usize)>>,
}

impl ScriptedBackend {
    pub fn new(replies: impl IntoIterator<Item = ChatReply>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            requests: Mutex::new(Vec::new()),
        }
    }

    /// Reads a JSON array of replies.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let replies: Vec<ChatReply> = serde_json::from_str(text)?;
        Ok(Self::new(replies))
    }

    /// Conversations seen so far, each with the number of tools offered.
    pub fn requests(&self) -> Vec<(Vec<ChatTurn>, usize)> {
        self.requests.lock().expect("poisoned").clone()
    }

    pub fn calls(&self) -> usize {
        self.requests.lock().expect("poisoned").len()
    }

    pub fn remaining(&self) -> usize {
        self.replies.lock().expect("poisoned").len()
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    async fn complete(&self, turns: &[ChatTurn], tools: &[ToolDescriptor]) -> Result<ChatReply, AgentError> {
        self.requests
            .lock()
            .expect("poisoned")
            .push((turns.to_vec(), tools.len()));
        self.replies
            .lock()
            .expect("poisoned")
            .pop_front()
            .ok_or_else(|| AgentError::Backend("scripted backend has no replies left".into()))
    }
}

pub const DEFAULT_API_KEY_ENV: &str = "LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Base URL; requests go to `<endpoint>/chat/completions`.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the API key. An unset variable means no
    /// Authorization header (local servers).
    pub api_key_env: String,
    pub temperature: f64,
    #[serde(with = "secs")]
    pub request_timeout: Duration,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://localhost:8000/v1".into(),
            model: String::new(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 0.0,
            request_timeout: Duration::from_secs(120),
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// Chat-completion client (messages in; tool calls or text out).
pub struct HttpChatBackend {
    config: BackendConfig,
    url: url::Url,
    api_key: Option<String>,
    http: HttpClient,
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self, AgentError> {
        let base = config.endpoint.trim_end_matches('/');
        let url = url::Url::parse(&format!("{base}/chat/completions"))
            .map_err(|e| AgentError::Backend(format!("bad endpoint `{}`: {e}", config.endpoint)))?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        let http = HttpClient::new(config.request_timeout, RetryPolicy::default())
            .map_err(|e| AgentError::Backend(e.to_string()))?;
        Ok(Self {
            config,
            url,
            api_key,
            http,
        })
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn request_body(&self, turns: &[ChatTurn], tools: &[ToolDescriptor]) -> Value {
        let messages: Vec<Value> = turns.iter().map(wire_message).collect();
        let mut body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "messages": messages,
        });
        if !tools.is_empty() {
            let tools: Vec<Value> = tools
                .iter()
                .map(|t| {
                    json!({"type": "function", "function": {
                        "name": t.name, "description": t.description, "parameters": t.input_schema,
                    }})
                })
                .collect();
            body["tools"] = Value::Array(tools);
        }
        body
    }
}

fn wire_message(turn: &ChatTurn) -> Value {
    match turn.role {
        ChatRole::System => json!({"role": "system", "content": turn.content}),
        ChatRole::User => json!({"role": "user", "content": turn.content}),
        ChatRole::Model => {
            let mut m = json!({"role": "assistant", "content": turn.content});
            if !turn.tool_calls.is_empty() {
                let calls: Vec<Value> = turn
                    .tool_calls
                    .iter()
                    .map(|c| {
                        json!({"id": c.id, "type": "function", "function": {
                            "name": c.name, "arguments": c.arguments.to_string(),
                        }})
                    })
                    .collect();
                m["tool_calls"] = Value::Array(calls);
            }
            m
        }
        ChatRole::ToolResult => json!({
            "role": "tool",
            "tool_call_id": turn.tool_call_id,
            "content": turn.content,
        }),
    }
}

/// Decodes a chat-completion response body.
pub fn parse_completion(body: &str) -> Result<ChatReply, AgentError> {
    let bad = |m: &str| AgentError::Backend(format!("malformed completion: {m}"));
    let v: Value = serde_json::from_str(body).map_err(|e| bad(&e.to_string()))?;
    let message = v
        .pointer("/choices/0/message")
        .ok_or_else(|| bad("no choices[0].message"))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let mut tool_calls = Vec::new();
    for call in message
        .get("tool_calls")
        .and_then(Value::as_array)
        .map(Vec::as_slice)
        .unwrap_or_default()
    {
        let id = call.get("id").and_then(Value::as_str).ok_or_else(|| bad("tool call without id"))?;
        let function = call.get("function").ok_or_else(|| bad("tool call without function"))?;
        let name = function
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| bad("tool call without name"))?;
        // Arguments arrive as a JSON-encoded string; undecodable text is passed
        // on as a string so tool validation reports it to the model.
        let arguments = match function.get("arguments") {
            Some(Value::String(s)) => serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.clone())),
            Some(other) => other.clone(),
            None => Value::Null,
        };
        tool_calls.push(ToolCallRequest {
            id: id.to_string(),
            name: name.to_string(),
            arguments,
        });
    }
    let usage = v.get("usage").map(|u| Usage {
        prompt_tokens: u.get("prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: u.get("completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    });
    Ok(ChatReply {
        content,
        tool_calls,
        usage,
    })
}

#[async_trait]
impl ChatBackend for HttpChatBackend {
    async fn complete(&self, turns: &[ChatTurn], tools: &[ToolDescriptor]) -> Result<ChatReply, AgentError> {
        let body = self.request_body(turns, tools);
        let auth = self.api_key.as_ref().map(|k| format!("Bearer {k}"));
        let text = self
            .http
            .post_json(&self.url, auth.as_deref(), &body)
            .await
            .map_err(|e| match e {
                ServiceError::Timeout { .. } => AgentError::CallTimeout,
                other => AgentError::Backend(other.to_string()),
            })?;
        parse_completion(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn completion_with_tool_calls() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":null,
            "tool_calls":[{"id":"c1","type":"function","function":{"name":"get_cedar_template","arguments":"{\"template_id\":\"t\"}"}}]}}],
            "usage":{"prompt_tokens":10,"completion_tokens":3}}"#;
        let reply = parse_completion(body).unwrap();
        assert_eq!(reply.content, "");
        assert_eq!(reply.tool_calls[0].arguments, json!({"template_id": "t"}));
        assert_eq!(reply.usage, Some(Usage { prompt_tokens: 10, completion_tokens: 3 }));
    }

    #[test]
    fn malformed_completion() {
        assert!(parse_completion("{}").is_err());
        assert!(parse_completion("nope").is_err());
    }

    #[test]
    fn wire_roles() {
        let turn = ChatTurn::model("", vec![ToolCallRequest::new("c1", "t", json!({"a": "b"}))]);
        let m = wire_message(&turn);
        assert_eq!(m["role"], "assistant");
        assert_eq!(m["tool_calls"][0]["function"]["arguments"], "{\"a\":\"b\"}");
        let r = wire_message(&ChatTurn::tool_result("c1", "out"));
        assert_eq!(r, json!({"role": "tool", "tool_call_id": "c1", "content": "out"}));
    }

    #[test]
    fn config_timeout_in_seconds() {
        let c: BackendConfig = serde_json::from_str(r#"{"model": "m", "request_timeout": 2.5}"#).unwrap();
        assert_eq!(c.request_timeout, Duration::from_millis(2500));
        assert_eq!(c.api_key_env, DEFAULT_API_KEY_ENV);
    }
}
