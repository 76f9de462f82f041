//! Newline-delimited JSON-RPC 2.0 tool server (MCP framing).
//!
//! Requests are handled concurrently; every response is written as one
//! complete line by a single writer task, so frames never interleave.

use std::sync::Arc;

use serde_json::{json, Value};
use tokio::io::{AsyncBufRead, AsyncBufReadExt, AsyncWrite, AsyncWriteExt};
use tokio::sync::mpsc;
use tokio::task::JoinSet;

use super::{ToolAccess, ToolCallError};

pub const PROTOCOL_VERSION: &str = "2024-11-05";
const SUPPORTED_VERSIONS: &[&str] = &["2024-11-05", "2025-03-26", "2025-06-18"];
pub const SERVER_NAME: &str = "metastd";

pub const PARSE_ERROR: i64 = -32700;
pub const INVALID_REQUEST: i64 = -32600;
pub const METHOD_NOT_FOUND: i64 = -32601;
pub const INVALID_PARAMS: i64 = -32602;

fn success(id: Value, result: Value) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "result": result})
}

fn failure(id: Value, code: i64, message: impl Into<String>) -> Value {
    json!({"jsonrpc": "2.0", "id": id, "error": {"code": code, "message": message.into()}})
}

fn initialize_result(params: &Value) -> Value {
    let requested = params.get("protocolVersion").and_then(Value::as_str);
    let version = requested
        .filter(|v| SUPPORTED_VERSIONS.contains(v))
        .unwrap_or(PROTOCOL_VERSION);
    json!({
        "protocolVersion": version,
        "capabilities": {"tools": {"listChanged": false}},
        "serverInfo": {"name": SERVER_NAME, "version": env!("CARGO_PKG_VERSION")},
    })
}

/// Handles one decoded message. Returns `None` for notifications.
pub async fn handle_message(message: Value, tools: &dyn ToolAccess) -> Option<Value> {
    let Value::Object(obj) = message else {
        return Some(failure(Value::Null, INVALID_REQUEST, "Invalid Request"));
    };
    let id = obj.get("id").cloned();
    let method = obj.get("method").and_then(Value::as_str);
    let valid_id = matches!(id, None | Some(Value::String(_) | Value::Number(_) | Value::Null));
    if obj.get("jsonrpc").and_then(Value::as_str) != Some("2.0") || method.is_none() || !valid_id {
        return Some(failure(id.unwrap_or(Value::Null), INVALID_REQUEST, "Invalid Request"));
    }
    let method = method.unwrap_or_default();
    let Some(id) = id else {
        if method != "notifications/initialized" {
            tracing::debug!(method, "ignoring notification");
        }
        return None;
    };
    let params = obj.get("params").cloned().unwrap_or(Value::Null);
    let response = match method {
        "initialize" => success(id, initialize_result(&params)),
        "ping" => success(id, json!({})),
        "tools/list" => {
            let list: Vec<Value> = tools
                .descriptors()
                .into_iter()
                .map(|d| serde_json::to_value(d).expect("descriptor serializes"))
                .collect();
            success(id, json!({"tools": list}))
        }
        "tools/call" => {
            let Some(name) = params.get("name").and_then(Value::as_str) else {
                return Some(failure(id, INVALID_PARAMS, "Invalid params: missing tool name"));
            };
            let args = params.get("arguments").cloned().unwrap_or(Value::Null);
            match tools.call_tool(name, &args).await {
                Ok(result) => success(id, result.to_call_result()),
                Err(e @ (ToolCallError::UnknownTool(_) | ToolCallError::InvalidArguments { .. })) => {
                    failure(id, INVALID_PARAMS, e.to_string())
                }
            }
        }
        other => failure(id, METHOD_NOT_FOUND, format!("Method not found: {other}")),
    };
    Some(response)
}

/// Serves requests read from `reader` until end of input, then waits for
/// in-flight calls and flushes their responses.
pub async fn serve<R, W>(reader: R, mut writer: W, tools: Arc<dyn ToolAccess>) -> std::io::Result<()>
where
    R: AsyncBufRead + Unpin,
    W: AsyncWrite + Unpin + Send + 'static,
{
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let writer_task = tokio::spawn(async move {
        while let Some(mut frame) = rx.recv().await {
            frame.push('\n');
            writer.write_all(frame.as_bytes()).await?;
            writer.flush().await?;
        }
        Ok::<_, std::io::Error>(())
    });

    let mut in_flight = JoinSet::new();
    let mut lines = reader.lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let message = match serde_json::from_str::<Value>(&line) {
            Ok(m) => m,
            Err(e) => {
                let frame = failure(Value::Null, PARSE_ERROR, format!("Parse error: {e}"));
                let _ = tx.send(frame.to_string());
                continue;
            }
        };
        let tools = Arc::clone(&tools);
        let tx = tx.clone();
        in_flight.spawn(async move {
            if let Some(response) = handle_message(message, tools.as_ref()).await {
                let _ = tx.send(response.to_string());
            }
        });
    }
    while let Some(joined) = in_flight.join_next().await {
        if let Err(e) = joined {
            tracing::error!(error = %e, "tool request task failed");
        }
    }
    drop(tx);
    writer_task
        .await
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::Other, e))?
}

/// Serves on the process's standard input and output.
pub async fn serve_stdio(tools: Arc<dyn ToolAccess>) -> std::io::Result<()> {
    let stdin = tokio::io::BufReader::new(tokio::io::stdin());
    serve(stdin, tokio::io::stdout(), tools).await
}
