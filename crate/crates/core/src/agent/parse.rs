//! Extraction of the record object from free-form model output.

use indexmap::IndexMap;
use serde_json::Value;
use thiserror::Error;

/// Key the model uses to list fields it flagged for review.
pub const FLAGGED_KEY: &str = "_flagged_for_review";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OutputError {
    #[error("no record object in model output")]
    NoObject,
    #[error("model output contains {0} record objects; expected one")]
    MultipleObjects(usize),
    #[error("field `{0}` holds a list or object, not text")]
    NonTextValue(String),
    #[error("`{FLAGGED_KEY}` must be a list of field names")]
    BadFlagList,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedOutput {
    pub fields: IndexMap<String, String>,
    pub flagged: Vec<String>,
}

/// Top-level JSON objects embedded in `text`, in order. Objects nested inside
/// another object are part of that object, not separate hits.
fn embedded_objects(text: &str) -> Vec<serde_json::Map<String, Value>> {
    let mut found = Vec::new();
    let mut pos = 0;
    while let Some(offset) = text[pos..].find('{') {
        let start = pos + offset;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(obj))) => {
                found.push(obj);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    found
}

fn coerce(field: &str, value: Value) -> Result<String, OutputError> {
    match value {
        Value::String(s) => Ok(s),
        Value::Null => Ok(String::new()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Array(_) | Value::Object(_) => Err(OutputError::NonTextValue(field.to_string())),
    }
}

pub fn parse_final_output(text: &str) -> Result<ParsedOutput, OutputError> {
    let mut objects = embedded_objects(text);
    let obj = match objects.len() {
        0 => return Err(OutputError::NoObject),
        1 => objects.remove(0),
        n => return Err(OutputError::MultipleObjects(n)),
    };
    let mut out = ParsedOutput::default();
    for (key, value) in obj {
        if key == FLAGGED_KEY {
            out.flagged = match value {
                Value::Array(items) => items
                    .into_iter()
                    .map(|v| match v {
                        Value::String(s) => Ok(s),
                        _ => Err(OutputError::BadFlagList),
                    })
                    .collect::<Result<_, _>>()?,
                Value::Null => Vec::new(),
                _ => return Err(OutputError::BadFlagList),
            };
            continue;
        }
        let text = coerce(&key, value)?;
        out.fields.insert(key, text);
    }
    Ok(out)
}
