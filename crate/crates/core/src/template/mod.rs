//! Machine-actionable templates: fields and the value constraint on each.
//!
//! Two input documents are accepted by [`parse_template`]:
//!
//! * the internal template format, a JSON object with `template_id` and a
//!   `fields` array where each field carries exactly one of `ontology`,
//!   `enum`, `pattern` or `type`;
//! * a CEDAR-native template (JSON schema with `properties` and
//!   `_valueConstraints`), read on a best-effort basis by [`cedar`].

pub mod cedar;
pub mod source;

use std::fmt;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use source::{CedarClient, FixtureTemplates, TemplateBackend, TemplateService};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template document is not valid JSON: {0}")]
    Json(String),
    #[error("document is neither an internal nor a CEDAR template")]
    UnknownFormat,
    #[error("template has no identifier")]
    MissingTemplateId,
    #[error("field `{field}`: {message}")]
    InvalidField { field: String, message: String },
    #[error("duplicate field name `{0}`")]
    DuplicateField(String),
    #[error("field with empty name at position {0}")]
    EmptyName(usize),
}

impl TemplateError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        TemplateError::InvalidField {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Data kinds for fields that are neither ontology-bound, enumerated nor patterned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueKind {
    FreeText,
    Integer,
    Decimal,
    BooleanYesNo,
    DoiUrl,
    Date,
}

impl ValueKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ValueKind::FreeText => "free-text",
            ValueKind::Integer => "integer",
            ValueKind::Decimal => "decimal",
            ValueKind::BooleanYesNo => "boolean-yes-no",
            ValueKind::DoiUrl => "doi-url",
            ValueKind::Date => "date",
        }
    }
}

impl FromStr for ValueKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "free-text" | "text" | "string" => ValueKind::FreeText,
            "integer" => ValueKind::Integer,
            "decimal" | "number" => ValueKind::Decimal,
            "boolean-yes-no" | "boolean" => ValueKind::BooleanYesNo,
            "doi-url" | "doi" => ValueKind::DoiUrl,
            "date" => ValueKind::Date,
            other => return Err(format!("unknown type `{other}`")),
        })
    }
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A regular expression a whole value must match.
#[derive(Debug, Clone)]
pub struct FieldPattern {
    source: String,
    anchored: Regex,
}

impl FieldPattern {
    pub fn new(source: &str) -> Result<Self, regex::Error> {
        let anchored = Regex::new(&format!("^(?:{source})$"))?;
        Ok(Self {
            source: source.to_string(),
            anchored,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn is_full_match(&self, text: &str) -> bool {
        self.anchored.is_match(text)
    }
}

impl PartialEq for FieldPattern {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
    }
}

impl Eq for FieldPattern {}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ValueConstraint {
    /// Values must be terms of an ontology, optionally under one branch root.
    /// Literals declared next to the binding are kept as extra candidates.
    OntologyBinding {
        ontology_acronym: String,
        branch_iri: Option<String>,
        extra_literals: Vec<String>,
    },
    EnumLiterals {
        permitted: Vec<String>,
    },
    Pattern(FieldPattern),
    Typed(ValueKind),
}

impl ValueConstraint {
    pub fn ontology(acronym: impl Into<String>, branch_iri: Option<String>) -> Self {
        ValueConstraint::OntologyBinding {
            ontology_acronym: acronym.into(),
            branch_iri,
            extra_literals: Vec::new(),
        }
    }

    fn validate(&self, field: &str) -> Result<(), TemplateError> {
        match self {
            ValueConstraint::OntologyBinding {
                ontology_acronym,
                branch_iri,
                ..
            } => {
                if ontology_acronym.trim().is_empty() {
                    return Err(TemplateError::field(field, "ontology acronym is empty"));
                }
                if branch_iri.as_deref().is_some_and(|b| b.trim().is_empty()) {
                    return Err(TemplateError::field(field, "branch identifier is empty"));
                }
            }
            ValueConstraint::EnumLiterals { permitted } => {
                if permitted.is_empty() {
                    return Err(TemplateError::field(field, "permitted value list is empty"));
                }
                for (i, v) in permitted.iter().enumerate() {
                    if permitted[..i].contains(v) {
                        return Err(TemplateError::field(
                            field,
                            format!("permitted value `{v}` listed twice"),
                        ));
                    }
                }
            }
            ValueConstraint::Pattern(_) | ValueConstraint::Typed(_) => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldCategory {
    OntologyConstrained,
    NonOntologyConstrained,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub description: String,
    pub required: bool,
    pub constraint: ValueConstraint,
}

impl FieldSpec {
    pub fn new(name: impl Into<String>, constraint: ValueConstraint) -> Self {
        Self {
            name: name.into(),
            description: String::new(),
            required: false,
            constraint,
        }
    }

    pub fn is_doi(&self) -> bool {
        matches!(self.constraint, ValueConstraint::Typed(ValueKind::DoiUrl))
    }
}

pub fn classify_field(field: &FieldSpec) -> FieldCategory {
    match field.constraint {
        ValueConstraint::OntologyBinding { .. } => FieldCategory::OntologyConstrained,
        _ => FieldCategory::NonOntologyConstrained,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSpec {
    pub template_id: String,
    pub fields: Vec<FieldSpec>,
}

impl TemplateSpec {
    /// Validates names and constraints.
    pub fn new(template_id: impl Into<String>, fields: Vec<FieldSpec>) -> Result<Self, TemplateError> {
        for (i, f) in fields.iter().enumerate() {
            if f.name.trim().is_empty() {
                return Err(TemplateError::EmptyName(i));
            }
            if fields[..i].iter().any(|g| g.name == f.name) {
                return Err(TemplateError::DuplicateField(f.name.clone()));
            }
            f.constraint.validate(&f.name)?;
        }
        Ok(Self {
            template_id: template_id.into(),
            fields,
        })
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    /// Ontology acronym for each ontology-bound field, in template order.
    pub fn ontology_names(&self) -> Vec<(String, String)> {
        self.fields
            .iter()
            .filter_map(|f| match &f.constraint {
                ValueConstraint::OntologyBinding {
                    ontology_acronym, ..
                } => Some((f.name.clone(), ontology_acronym.clone())),
                _ => None,
            })
            .collect()
    }

    /// Renders the template in the internal document format.
    pub fn to_internal_json(&self) -> Value {
        let fields: Vec<Value> = self
            .fields
            .iter()
            .map(|f| {
                let mut obj = serde_json::Map::new();
                obj.insert("name".into(), Value::String(f.name.clone()));
                obj.insert("description".into(), Value::String(f.description.clone()));
                obj.insert("required".into(), Value::Bool(f.required));
                match &f.constraint {
                    ValueConstraint::OntologyBinding {
                        ontology_acronym,
                        branch_iri,
                        extra_literals,
                    } => {
                        let mut ont = serde_json::Map::new();
                        ont.insert("acronym".into(), Value::String(ontology_acronym.clone()));
                        if let Some(b) = branch_iri {
                            ont.insert("branch".into(), Value::String(b.clone()));
                        }
                        obj.insert("ontology".into(), Value::Object(ont));
                        if !extra_literals.is_empty() {
                            obj.insert("enum".into(), serde_json::json!(extra_literals));
                        }
                    }
                    ValueConstraint::EnumLiterals { permitted } => {
                        obj.insert("enum".into(), serde_json::json!(permitted));
                    }
                    ValueConstraint::Pattern(p) => {
                        obj.insert("pattern".into(), Value::String(p.source().to_string()));
                    }
                    ValueConstraint::Typed(kind) => {
                        obj.insert("type".into(), Value::String(kind.as_str().to_string()));
                    }
                }
                Value::Object(obj)
            })
            .collect();
        serde_json::json!({ "template_id": self.template_id, "fields": fields })
    }
}

/// Parses an internal or CEDAR-native template document.
pub fn parse_template(raw: &str) -> Result<TemplateSpec, TemplateError> {
    let doc: Value = serde_json::from_str(raw).map_err(|e| TemplateError::Json(e.to_string()))?;
    let obj = doc.as_object().ok_or(TemplateError::UnknownFormat)?;
    if obj.get("fields").is_some_and(Value::is_array) {
        parse_internal(obj)
    } else if obj.get("properties").is_some_and(Value::is_object) {
        cedar::parse_cedar_template(obj)
    } else {
        Err(TemplateError::UnknownFormat)
    }
}

fn parse_internal(obj: &serde_json::Map<String, Value>) -> Result<TemplateSpec, TemplateError> {
    let template_id = obj
        .get("template_id")
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or(TemplateError::MissingTemplateId)?;
    let raw_fields = obj["fields"].as_array().expect("checked by caller");
    let mut fields = Vec::with_capacity(raw_fields.len());
    for (i, raw) in raw_fields.iter().enumerate() {
        let f = raw
            .as_object()
            .ok_or_else(|| TemplateError::field(&format!("#{i}"), "field entry is not an object"))?;
        let name = f.get("name").and_then(Value::as_str).unwrap_or_default();
        if name.trim().is_empty() {
            return Err(TemplateError::EmptyName(i));
        }
        let description = f
            .get("description")
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string();
        let required = match f.get("required") {
            None | Some(Value::Null) => false,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(TemplateError::field(name, "`required` must be a boolean")),
        };
        let constraint = internal_constraint(name, f)?;
        fields.push(FieldSpec {
            name: name.to_string(),
            description,
            required,
            constraint,
        });
    }
    TemplateSpec::new(template_id, fields)
}

fn string_list(field: &str, value: &Value) -> Result<Vec<String>, TemplateError> {
    value
        .as_array()
        .ok_or_else(|| TemplateError::field(field, "`enum` must be a list of strings"))?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or_else(|| TemplateError::field(field, "`enum` must be a list of strings"))
        })
        .collect()
}

fn internal_constraint(
    name: &str,
    f: &serde_json::Map<String, Value>,
) -> Result<ValueConstraint, TemplateError> {
    let ontology = f.get("ontology");
    let literals = f.get("enum");
    let pattern = f.get("pattern");
    let kind = f.get("type");

    if let Some(ont) = ontology {
        if pattern.is_some() || kind.is_some() {
            return Err(TemplateError::field(
                name,
                "`ontology` cannot be combined with `pattern` or `type`",
            ));
        }
        let ont = ont
            .as_object()
            .ok_or_else(|| TemplateError::field(name, "`ontology` must be an object"))?;
        let acronym = ont
            .get("acronym")
            .and_then(Value::as_str)
            .ok_or_else(|| TemplateError::field(name, "`ontology.acronym` is required"))?;
        let branch_iri = match ont.get("branch") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(TemplateError::field(name, "`ontology.branch` must be a string")),
        };
        let extra_literals = match literals {
            Some(v) => string_list(name, v)?,
            None => Vec::new(),
        };
        return Ok(ValueConstraint::OntologyBinding {
            ontology_acronym: acronym.to_string(),
            branch_iri,
            extra_literals,
        });
    }

    let declared = [literals, pattern, kind].iter().filter(|c| c.is_some()).count();
    if declared != 1 {
        return Err(TemplateError::field(
            name,
            format!("expected exactly one of ontology, enum, pattern, type; found {declared}"),
        ));
    }
    if let Some(v) = literals {
        return Ok(ValueConstraint::EnumLiterals {
            permitted: string_list(name, v)?,
        });
    }
    if let Some(v) = pattern {
        let source = v
            .as_str()
            .ok_or_else(|| TemplateError::field(name, "`pattern` must be a string"))?;
        let compiled = FieldPattern::new(source)
            .map_err(|e| TemplateError::field(name, format!("pattern does not compile: {e}")))?;
        return Ok(ValueConstraint::Pattern(compiled));
    }
    let kind = kind
        .and_then(Value::as_str)
        .ok_or_else(|| TemplateError::field(name, "`type` must be a string"))?;
    kind.parse()
        .map(ValueConstraint::Typed)
        .map_err(|e| TemplateError::field(name, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const HRAVS_BRANCH: &str = "http://purl.humanatlas.io/vocab/hravs#HRAVS_0000100";

    fn template(fields: &str) -> Result<TemplateSpec, TemplateError> {
        parse_template(&format!("{{\"template_id\":\"t\",\"fields\":[{fields}]}}"))
    }

    #[test]
    fn ontology_with_branch() {
        let t = template(&format!(
            "{{\"name\":\"assay_input_entity\",\"required\":true,\"ontology\":{{\"acronym\":\"HRAVS\",\"branch\":\"{HRAVS_BRANCH}\"}}}}"
        ))
        .unwrap();
        let f = &t.fields[0];
        assert!(f.required);
        assert_eq!(
            f.constraint,
            ValueConstraint::ontology("HRAVS", Some(HRAVS_BRANCH.to_string()))
        );
        assert_eq!(classify_field(f), FieldCategory::OntologyConstrained);
    }

    #[test]
    fn yes_no_literals_become_enum() {
        let t = template(r#"{"name":"is_targeted","enum":["Yes","No"]}"#).unwrap();
        assert_eq!(
            t.fields[0].constraint,
            ValueConstraint::EnumLiterals {
                permitted: vec!["Yes".into(), "No".into()]
            }
        );
        assert_eq!(classify_field(&t.fields[0]), FieldCategory::NonOntologyConstrained);
    }

    #[test]
    fn doi_type() {
        let t = template(r#"{"name":"protocols_io_doi","type":"doi-url"}"#).unwrap();
        assert_eq!(t.fields[0].constraint, ValueConstraint::Typed(ValueKind::DoiUrl));
        assert!(t.fields[0].is_doi());
    }

    #[test]
    fn ontology_plus_literals_keeps_binding() {
        let t = template(r#"{"name":"x","ontology":{"acronym":"OBI"},"enum":["other"]}"#).unwrap();
        assert_eq!(
            t.fields[0].constraint,
            ValueConstraint::OntologyBinding {
                ontology_acronym: "OBI".into(),
                branch_iri: None,
                extra_literals: vec!["other".into()],
            }
        );
    }

    #[test]
    fn pattern_and_boolean_are_non_ontology() {
        let t = template(
            r#"{"name":"p","pattern":"[0-9]+"},{"name":"b","type":"boolean-yes-no"}"#,
        )
        .unwrap();
        assert!(t
            .fields
            .iter()
            .all(|f| classify_field(f) == FieldCategory::NonOntologyConstrained));
        match &t.fields[0].constraint {
            ValueConstraint::Pattern(p) => {
                assert!(p.is_full_match("123"));
                assert!(!p.is_full_match("12a"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        let err = template(r#"{"name":"weird","colour":"blue"}"#).unwrap_err();
        assert!(matches!(err, TemplateError::InvalidField { ref field, .. } if field == "weird"));
        let err = template(r#"{"name":"two","enum":["a"],"type":"integer"}"#).unwrap_err();
        assert!(matches!(err, TemplateError::InvalidField { ref field, .. } if field == "two"));
        let err = template(r#"{"name":"bad","pattern":"("}"#).unwrap_err();
        assert!(matches!(err, TemplateError::InvalidField { ref field, .. } if field == "bad"));
        let err = template(r#"{"name":"k","type":"colour"}"#).unwrap_err();
        assert!(matches!(err, TemplateError::InvalidField { ref field, .. } if field == "k"));
    }

    #[test]
    fn duplicates_and_invalid_constraints() {
        assert_eq!(
            template(r#"{"name":"a","type":"integer"},{"name":"a","type":"date"}"#).unwrap_err(),
            TemplateError::DuplicateField("a".into())
        );
        assert!(template(r#"{"name":"e","enum":[]}"#).is_err());
        assert!(template(r#"{"name":"e","enum":["x","x"]}"#).is_err());
        assert!(template(r#"{"name":"o","ontology":{"acronym":""}}"#).is_err());
        assert_eq!(template(r#"{"name":"","type":"date"}"#).unwrap_err(), TemplateError::EmptyName(0));
    }

    #[test]
    fn internal_format_round_trips() {
        let t = template(&format!(
            concat!(
                r#"{{"name":"a","description":"d","required":true,"ontology":{{"acronym":"HRAVS","branch":"{}"}}}},"#,
                r#"{{"name":"b","enum":["Yes","No"]}},{{"name":"c","pattern":"\\d+"}},{{"name":"d","type":"date"}}"#
            ),
            HRAVS_BRANCH
        ))
        .unwrap();
        let again = parse_template(&t.to_internal_json().to_string()).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn partition_counts_sum_to_field_count() {
        let t = template(
            r#"{"name":"a","ontology":{"acronym":"X"}},{"name":"b","type":"integer"},{"name":"c","enum":["q"]}"#,
        )
        .unwrap();
        let ont = t
            .fields
            .iter()
            .filter(|f| classify_field(f) == FieldCategory::OntologyConstrained)
            .count();
        let non = t
            .fields
            .iter()
            .filter(|f| classify_field(f) == FieldCategory::NonOntologyConstrained)
            .count();
        assert_eq!((ont, non), (1, 2));
        assert_eq!(ont + non, t.fields.len());
    }

    #[test]
    fn unknown_document_shape() {
        assert_eq!(parse_template("{\"x\":1}").unwrap_err(), TemplateError::UnknownFormat);
        assert!(matches!(parse_template("nope"), Err(TemplateError::Json(_))));
    }
}
