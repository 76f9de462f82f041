//! Flat metadata records and their two on-disk formats.
//!
//! A [`MetadataRecord`] is an ordered map of field name to value text. A field
//! that is present with an empty value is distinct from a field that is absent;
//! the evaluator depends on that distinction.
//!
//! Two formats are supported:
//!
//! * TSV: first line holds the field names, every following line is one record.
//!   There is no quoting; names or values containing a tab, CR or LF are rejected
//!   on write.
//! * Object: one JSON object per record mapping field name to string value.
//!   Several objects may be concatenated in one stream (JSON lines works).

use std::fmt;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer};
use thiserror::Error;

/// Key used to take a record id from the record's own fields when present.
pub const DEFAULT_ID_KEY: &str = "record_id";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("line {line}: expected {expected} cells, found {found}")]
    RaggedRow {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed document {index}: {message}")]
    MalformedDocument { index: usize, message: String },
    #[error("input is not valid UTF-8: {0}")]
    Encoding(String),
    #[error("`{0}` contains a tab or line break; TSV quoting is not supported")]
    QuotingUnsupported(String),
    #[error("records have different field layouts; TSV needs a shared header")]
    HeaderMismatch,
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RecordFormat {
    Tsv,
    Object,
}

impl RecordFormat {
    /// Picks the format from a file extension (`.tsv`/`.txt` → TSV, anything else → object).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("tsv") || ext.eq_ignore_ascii_case("txt") => {
                RecordFormat::Tsv
            }
            _ => RecordFormat::Object,
        }
    }
}

/// One legacy, predicted or gold-standard record.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MetadataRecord {
    record_id: String,
    fields: IndexMap<String, String>,
}

impl MetadataRecord {
    pub fn new(record_id: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            fields: IndexMap::new(),
        }
    }

    /// Builds a record from name/value pairs, rejecting repeated names.
    pub fn from_pairs<I, K, V>(record_id: impl Into<String>, pairs: I) -> Result<Self, RecordError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut record = Self::new(record_id);
        for (name, value) in pairs {
            record.insert(name, value)?;
        }
        Ok(record)
    }

    pub fn record_id(&self) -> &str {
        &self.record_id
    }

    pub fn set_record_id(&mut self, id: impl Into<String>) {
        self.record_id = id.into();
    }

    /// Adds a new field at the end. Fails if the name is already present.
    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: impl Into<String>,
    ) -> Result<(), RecordError> {
        let name = name.into();
        if self.fields.contains_key(&name) {
            return Err(RecordError::DuplicateField(name));
        }
        self.fields.insert(name, value.into());
        Ok(())
    }

    /// Overwrites the value of an existing field or appends a new one.
    pub fn set(&mut self, name: impl Into<String>, value: impl Into<String>) {
        self.fields.insert(name.into(), value.into());
    }

    /// Removes a field, keeping the order of the remaining ones.
    pub fn remove(&mut self, name: &str) -> Option<String> {
        self.fields.shift_remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.fields.get(name).map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fields.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.fields.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Same names, order and values; the record id is ignored.
    pub fn same_fields(&self, other: &MetadataRecord) -> bool {
        self.fields.len() == other.fields.len()
            && self.fields.iter().zip(other.fields.iter()).all(|(a, b)| a == b)
    }

    /// Renders the fields as a single JSON object (no trailing newline).
    pub fn to_json_object(&self) -> serde_json::Value {
        serde_json::Value::Object(
            self.fields
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect(),
        )
    }
}

/// How record ids are assigned while parsing.
#[derive(Debug, Clone)]
pub struct ParseOptions {
    /// Field whose value becomes the record id when the field exists.
    pub id_key: Option<String>,
    /// Prefix for positional ids (`<prefix>-1`, `<prefix>-2`, ...) when no id field exists.
    pub fallback_prefix: String,
}

impl Default for ParseOptions {
    fn default() -> Self {
        Self {
            id_key: Some(DEFAULT_ID_KEY.to_string()),
            fallback_prefix: "row".to_string(),
        }
    }
}

impl ParseOptions {
    fn assign_id(&self, record: &mut MetadataRecord, position: usize) {
        let from_field = self
            .id_key
            .as_deref()
            .and_then(|key| record.get(key))
            .filter(|v| !v.is_empty())
            .map(str::to_string);
        let id = from_field.unwrap_or_else(|| format!("{}-{}", self.fallback_prefix, position + 1));
        record.set_record_id(id);
    }
}

/// Parses a table of records with the default id options.
pub fn parse_record_table(
    raw: &[u8],
    format: RecordFormat,
) -> Result<Vec<MetadataRecord>, RecordError> {
    parse_record_table_with(raw, format, &ParseOptions::default())
}

pub fn parse_record_table_with(
    raw: &[u8],
    format: RecordFormat,
    options: &ParseOptions,
) -> Result<Vec<MetadataRecord>, RecordError> {
    match format {
        RecordFormat::Tsv => parse_tsv(raw, options),
        RecordFormat::Object => parse_objects(raw, options),
    }
}

fn parse_tsv(raw: &[u8], options: &ParseOptions) -> Result<Vec<MetadataRecord>, RecordError> {
    let text = std::str::from_utf8(raw).map_err(|e| RecordError::Encoding(e.to_string()))?;
    let mut lines = text.lines();
    let Some(header_line) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: Vec<&str> = if header_line.is_empty() {
        Vec::new()
    } else {
        header_line.split('\t').collect()
    };
    for (i, name) in header.iter().enumerate() {
        if header[..i].contains(name) {
            return Err(RecordError::DuplicateField((*name).to_string()));
        }
    }

    let mut records = Vec::new();
    for (row, line) in lines.enumerate() {
        let cells: Vec<&str> = if header.is_empty() && line.is_empty() {
            Vec::new()
        } else {
            line.split('\t').collect()
        };
        if cells.len() != header.len() {
            return Err(RecordError::RaggedRow {
                line: row + 2,
                expected: header.len(),
                found: cells.len(),
            });
        }
        let mut record = MetadataRecord::from_pairs("", header.iter().copied().zip(cells))?;
        options.assign_id(&mut record, row);
        records.push(record);
    }
    Ok(records)
}

fn parse_objects(raw: &[u8], options: &ParseOptions) -> Result<Vec<MetadataRecord>, RecordError> {
    let stream = serde_json::Deserializer::from_slice(raw).into_iter::<StrictFields>();
    let mut records = Vec::new();
    for (index, doc) in stream.enumerate() {
        let doc = doc.map_err(|e| RecordError::MalformedDocument {
            index,
            message: e.to_string(),
        })?;
        if let Some(name) = doc.duplicate {
            return Err(RecordError::DuplicateField(name));
        }
        let fields = doc.fields;
        let mut record = MetadataRecord {
            record_id: String::new(),
            fields,
        };
        options.assign_id(&mut record, index);
        records.push(record);
    }
    Ok(records)
}

/// Object document whose values must all be strings. The first repeated key
/// is remembered so the caller can reject it.
struct StrictFields {
    fields: IndexMap<String, String>,
    duplicate: Option<String>,
}

impl<'de> Deserialize<'de> for StrictFields {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct FieldsVisitor;

        impl<'de> Visitor<'de> for FieldsVisitor {
            type Value = StrictFields;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object mapping field names to string values")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut fields = IndexMap::new();
                let mut duplicate = None;
                while let Some(key) = map.next_key::<String>()? {
                    let value: String = map.next_value()?;
                    if fields.contains_key(&key) {
                        duplicate.get_or_insert(key);
                    } else {
                        fields.insert(key, value);
                    }
                }
                Ok(StrictFields { fields, duplicate })
            }
        }

        deserializer.deserialize_map(FieldsVisitor)
    }
}

fn check_tsv_cell(text: &str) -> Result<(), RecordError> {
    if text.contains(['\t', '\n', '\r']) {
        Err(RecordError::QuotingUnsupported(text.to_string()))
    } else {
        Ok(())
    }
}

/// Serializes one record. TSV output is a header line plus one data line.
pub fn serialize_record(
    record: &MetadataRecord,
    format: RecordFormat,
) -> Result<Vec<u8>, RecordError> {
    serialize_records(std::slice::from_ref(record), format)
}

/// Serializes several records into one stream. TSV requires every record to
/// share the same field names in the same order.
pub fn serialize_records(
    records: &[MetadataRecord],
    format: RecordFormat,
) -> Result<Vec<u8>, RecordError> {
    let mut out = String::new();
    match format {
        RecordFormat::Tsv => {
            let Some(first) = records.first() else {
                return Ok(Vec::new());
            };
            let names: Vec<&str> = first.field_names().collect();
            for name in &names {
                check_tsv_cell(name)?;
            }
            out.push_str(&names.join("\t"));
            out.push('\n');
            for record in records {
                if !record.field_names().eq(names.iter().copied()) {
                    return Err(RecordError::HeaderMismatch);
                }
                let values: Vec<&str> = record.fields.values().map(String::as_str).collect();
                for value in &values {
                    check_tsv_cell(value)?;
                }
                out.push_str(&values.join("\t"));
                out.push('\n');
            }
        }
        RecordFormat::Object => {
            for record in records {
                out.push_str(&record.to_json_object().to_string());
                out.push('\n');
            }
        }
    }
    Ok(out.into_bytes())
}

/// A record loaded from disk, or the reason one entry could not be loaded.
pub type LoadedRecord = Result<MetadataRecord, (String, RecordError)>;

/// Loads records from a TSV/object file or from a directory of object files.
///
/// For a directory, each `*.json` file holds one record whose id defaults to
/// the file stem. A malformed file becomes an `Err` entry instead of failing the
/// whole load, so a batch can report it and continue. Errors reading a single
/// file path are returned as the outer error.
/// Sidecar review files share a directory with record files and are skipped.
pub const REVIEW_SUFFIX: &str = ".review.json";

pub fn load_records(path: &Path, options: &ParseOptions) -> Result<Vec<LoadedRecord>, RecordError> {
    let io_err = |e: std::io::Error| RecordError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)
            .map_err(io_err)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                name.ends_with(".json") && !name.ends_with(REVIEW_SUFFIX)
            })
            .collect();
        entries.sort();
        let mut out = Vec::with_capacity(entries.len());
        for file in entries {
            let stem = file
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let loaded = std::fs::read(&file)
                .map_err(|e| RecordError::Io {
                    path: file.display().to_string(),
                    message: e.to_string(),
                })
                .and_then(|bytes| {
                    let per_file = ParseOptions {
                        id_key: options.id_key.clone(),
                        fallback_prefix: stem.clone(),
                    };
                    let mut docs = parse_record_table_with(&bytes, RecordFormat::Object, &per_file)?;
                    if docs.len() != 1 {
                        return Err(RecordError::MalformedDocument {
                            index: 0,
                            message: format!("expected exactly one object, found {}", docs.len()),
                        });
                    }
                    let mut record = docs.remove(0);
                    if record.record_id() == format!("{stem}-1") {
                        record.set_record_id(stem.clone());
                    }
                    Ok(record)
                });
            out.push(loaded.map_err(|e| (stem, e)));
        }
        Ok(out)
    } else {
        let bytes = std::fs::read(path).map_err(io_err)?;
        let records = parse_record_table_with(&bytes, RecordFormat::from_path(path), options)?;
        Ok(records.into_iter().map(Ok).collect())
    }
}
