//! Best-effort reader for CEDAR-native template documents.
//!
//! Only top-level template fields are read. Nested elements, static fields and
//! multi-instance fields are skipped with a warning.

use serde_json::{Map, Value};

use super::{FieldPattern, FieldSpec, TemplateError, TemplateSpec, ValueConstraint, ValueKind};

const FIELD_TYPE: &str = "https://schema.metadatacenter.org/core/TemplateField";
const STATIC_FIELD_TYPE: &str = "https://schema.metadatacenter.org/core/StaticTemplateField";

const KNOWN_INPUT_TYPES: &[&str] = &[
    "textfield",
    "textarea",
    "temporal",
    "numeric",
    "link",
    "email",
    "phone-number",
    "list",
    "radio",
    "checkbox",
    "boolean",
    "attribute-value",
];

pub(super) fn parse_cedar_template(doc: &Map<String, Value>) -> Result<TemplateSpec, TemplateError> {
    let template_id = ["@id", "schema:identifier", "schema:name"]
        .iter()
        .find_map(|k| doc.get(*k).and_then(Value::as_str))
        .filter(|s| !s.is_empty())
        .ok_or(TemplateError::MissingTemplateId)?;
    let properties = doc["properties"].as_object().expect("checked by caller");

    let order: Vec<&str> = match doc
        .get("_ui")
        .and_then(|ui| ui.get("order"))
        .and_then(Value::as_array)
    {
        Some(order) => order.iter().filter_map(Value::as_str).collect(),
        None => properties.keys().map(String::as_str).collect(),
    };

    let mut fields = Vec::new();
    for name in order {
        let Some(prop) = properties.get(name).and_then(Value::as_object) else {
            continue;
        };
        if prop.contains_key("items") {
            tracing::warn!(field = name, "skipping multi-instance field");
            continue;
        }
        match type_of(prop) {
            Some(FIELD_TYPE) => {}
            Some(STATIC_FIELD_TYPE) => continue,
            Some(t) if t.ends_with("TemplateElement") => {
                tracing::warn!(field = name, "skipping nested template element");
                continue;
            }
            _ => continue,
        }
        fields.push(read_field(name, prop)?);
    }
    TemplateSpec::new(template_id, fields)
}

fn type_of(prop: &Map<String, Value>) -> Option<&str> {
    match prop.get("@type") {
        Some(Value::String(s)) => Some(s.as_str()),
        Some(Value::Array(list)) => list.iter().find_map(Value::as_str),
        _ => None,
    }
}

fn read_field(name: &str, prop: &Map<String, Value>) -> Result<FieldSpec, TemplateError> {
    let empty = Map::new();
    let vc = prop
        .get("_valueConstraints")
        .and_then(Value::as_object)
        .unwrap_or(&empty);
    let input_type = prop
        .get("_ui")
        .and_then(|ui| ui.get("inputType"))
        .and_then(Value::as_str)
        .unwrap_or("textfield");
    if !KNOWN_INPUT_TYPES.contains(&input_type) {
        return Err(TemplateError::field(
            name,
            format!("unrecognized input type `{input_type}`"),
        ));
    }
    let description = prop
        .get("schema:description")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let required = vc.get("requiredValue").and_then(Value::as_bool).unwrap_or(false);

    Ok(FieldSpec {
        name: name.to_string(),
        description,
        required,
        constraint: constraint_of(name, vc, input_type)?,
    })
}

fn entries<'a>(vc: &'a Map<String, Value>, key: &str) -> Vec<&'a Map<String, Value>> {
    vc.get(key)
        .and_then(Value::as_array)
        .map(|a| a.iter().filter_map(Value::as_object).collect())
        .unwrap_or_default()
}

fn text<'a>(entry: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a str> {
    keys.iter()
        .find_map(|k| entry.get(*k).and_then(Value::as_str))
        .filter(|s| !s.is_empty())
}

fn constraint_of(
    name: &str,
    vc: &Map<String, Value>,
    input_type: &str,
) -> Result<ValueConstraint, TemplateError> {
    let literals: Vec<String> = entries(vc, "literals")
        .into_iter()
        .filter_map(|l| text(l, &["label"]).map(str::to_string))
        .collect();
    let branches = entries(vc, "branches");
    let ontologies = entries(vc, "ontologies");
    let classes = entries(vc, "classes");

    if let Some(branch) = branches.first() {
        let acronym = text(branch, &["acronym"])
            .ok_or_else(|| TemplateError::field(name, "branch constraint without acronym"))?;
        let root = text(branch, &["uri", "@id"])
            .ok_or_else(|| TemplateError::field(name, "branch constraint without root identifier"))?;
        if branches.len() + ontologies.len() > 1 {
            tracing::warn!(field = name, "several ontology bindings; using the first branch");
        }
        return Ok(ValueConstraint::OntologyBinding {
            ontology_acronym: acronym.to_string(),
            branch_iri: Some(root.to_string()),
            extra_literals: literals,
        });
    }
    if let Some(ontology) = ontologies.first() {
        let acronym = text(ontology, &["acronym"])
            .ok_or_else(|| TemplateError::field(name, "ontology constraint without acronym"))?;
        if ontologies.len() > 1 {
            tracing::warn!(field = name, "several ontologies; using the first");
        }
        return Ok(ValueConstraint::OntologyBinding {
            ontology_acronym: acronym.to_string(),
            branch_iri: None,
            extra_literals: literals,
        });
    }
    if let Some(first) = classes.first() {
        let acronym = text(first, &["source", "acronym"])
            .ok_or_else(|| TemplateError::field(name, "class constraint without source ontology"))?;
        let mut extra_literals: Vec<String> = classes
            .iter()
            .filter_map(|c| text(c, &["prefLabel", "label"]).map(str::to_string))
            .collect();
        extra_literals.extend(literals);
        return Ok(ValueConstraint::OntologyBinding {
            ontology_acronym: acronym.to_string(),
            branch_iri: None,
            extra_literals,
        });
    }
    if !literals.is_empty() {
        return Ok(ValueConstraint::EnumLiterals { permitted: literals });
    }
    if let Some(regex) = vc.get("regex").and_then(Value::as_str).filter(|s| !s.is_empty()) {
        let pattern = FieldPattern::new(regex)
            .map_err(|e| TemplateError::field(name, format!("pattern does not compile: {e}")))?;
        return Ok(ValueConstraint::Pattern(pattern));
    }
    if let Some(number_type) = vc.get("numberType").and_then(Value::as_str) {
        let kind = match number_type {
            "xsd:integer" | "xsd:int" | "xsd:long" | "xsd:short" | "xsd:byte" => ValueKind::Integer,
            "xsd:decimal" | "xsd:double" | "xsd:float" => ValueKind::Decimal,
            other => {
                return Err(TemplateError::field(
                    name,
                    format!("unrecognized number type `{other}`"),
                ))
            }
        };
        return Ok(ValueConstraint::Typed(kind));
    }
    if input_type == "temporal" {
        let kind = match vc.get("temporalType").and_then(Value::as_str) {
            Some("xsd:date") | None => ValueKind::Date,
            Some(_) => ValueKind::FreeText,
        };
        return Ok(ValueConstraint::Typed(kind));
    }
    if input_type == "boolean" {
        return Ok(ValueConstraint::Typed(ValueKind::BooleanYesNo));
    }
    if has_doi_token(name) {
        return Ok(ValueConstraint::Typed(ValueKind::DoiUrl));
    }
    if input_type == "numeric" {
        return Ok(ValueConstraint::Typed(ValueKind::Decimal));
    }
    Ok(ValueConstraint::Typed(ValueKind::FreeText))
}

fn has_doi_token(name: &str) -> bool {
    name.split(|c: char| !c.is_ascii_alphanumeric())
        .any(|t| t.eq_ignore_ascii_case("doi"))
}
