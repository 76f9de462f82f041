//! Format corrections for fields without an ontology binding.

use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;

use super::{Resolution, ResolutionStatus};
use crate::template::{FieldSpec, ValueConstraint, ValueKind};

pub const DOI_BASE: &str = "https://doi.org/";

const DOI_URL_PREFIXES: &[&str] = &[
    "https://doi.org/",
    "https://dx.doi.org/",
    "http://doi.org/",
    "http://dx.doi.org/",
];

fn bare_doi() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^10\.[0-9]+(\.[0-9]+)*/\S+$").expect("static regex"))
}

/// Lower-cases and collapses runs of whitespace; leading/trailing whitespace is dropped.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Maps the usual spellings of a boolean onto `true`/`false`.
pub fn parse_boolean(text: &str) -> Option<bool> {
    match text.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Some(true),
        "false" | "no" | "0" => Some(false),
        _ => None,
    }
}

/// Normalizes `raw` under a non-ontology constraint. Failures keep the raw
/// value and come back flagged for review.
pub fn normalize_value(spec: &FieldSpec, raw: &str) -> Resolution {
    let field = spec.name.as_str();
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return Resolution::new(field, raw, status_for(raw, raw));
    }
    let outcome = match &spec.constraint {
        ValueConstraint::OntologyBinding { .. } => {
            Err("ontology-bound field needs a terminology lookup".to_string())
        }
        ValueConstraint::EnumLiterals { permitted } => normalize_enum(permitted, trimmed),
        ValueConstraint::Pattern(pattern) => {
            if pattern.is_full_match(trimmed) {
                Ok(trimmed.to_string())
            } else {
                Err(format!("does not match pattern `{}`", pattern.source()))
            }
        }
        ValueConstraint::Typed(kind) => normalize_typed(*kind, trimmed),
    };
    match outcome {
        Ok(value) => {
            let status = status_for(raw, &value);
            Resolution::new(field, value, status)
        }
        Err(note) => Resolution::flagged(field, raw, note),
    }
}

fn status_for(raw: &str, value: &str) -> ResolutionStatus {
    if raw == value {
        ResolutionStatus::Unchanged
    } else {
        ResolutionStatus::Normalized
    }
}

fn normalize_enum(permitted: &[String], value: &str) -> Result<String, String> {
    if let Some(exact) = permitted.iter().find(|p| p.as_str() == value) {
        return Ok(exact.clone());
    }
    let wanted = normalize_text(value);
    let loose: Vec<&String> = permitted.iter().filter(|p| normalize_text(p) == wanted).collect();
    if let [only] = loose.as_slice() {
        return Ok((*only).clone());
    }
    if loose.len() > 1 {
        return Err(format!("`{value}` matches several permitted values"));
    }
    let yes = permitted.iter().find(|p| p.eq_ignore_ascii_case("yes"));
    let no = permitted.iter().find(|p| p.eq_ignore_ascii_case("no"));
    if let (Some(yes), Some(no), Some(flag)) = (yes, no, parse_boolean(value)) {
        return Ok(if flag { yes.clone() } else { no.clone() });
    }
    Err(format!("`{value}` is not a permitted value"))
}

fn normalize_typed(kind: ValueKind, value: &str) -> Result<String, String> {
    match kind {
        ValueKind::FreeText => Ok(value.to_string()),
        ValueKind::BooleanYesNo => parse_boolean(value)
            .map(|b| if b { "Yes" } else { "No" }.to_string())
            .ok_or_else(|| format!("`{value}` is not a yes/no value")),
        ValueKind::Integer => value
            .parse::<i64>()
            .map(|_| value.to_string())
            .map_err(|_| format!("`{value}` is not an integer")),
        ValueKind::Decimal => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(value.to_string()),
            _ => Err(format!("`{value}` is not a decimal number")),
        },
        ValueKind::DoiUrl => normalize_doi(value),
        ValueKind::Date => normalize_date(value),
    }
}

fn normalize_doi(value: &str) -> Result<String, String> {
    if DOI_URL_PREFIXES.iter().any(|p| value.starts_with(p)) {
        return Ok(value.to_string());
    }
    let bare = value
        .get(..4)
        .filter(|p| p.eq_ignore_ascii_case("doi:"))
        .map(|_| value[4..].trim_start())
        .unwrap_or(value);
    if bare_doi().is_match(bare) {
        Ok(format!("{DOI_BASE}{bare}"))
    } else {
        Err(format!("`{value}` is not a DOI"))
    }
}

fn normalize_date(value: &str) -> Result<String, String> {
    if NaiveDate::parse_from_str(value, "%Y-%m-%d").is_ok() {
        return Ok(value.to_string());
    }
    for format in ["%Y/%m/%d", "%Y.%m.%d", "%Y%m%d"] {
        if let Ok(date) = NaiveDate::parse_from_str(value, format) {
            return Ok(date.format("%Y-%m-%d").to_string());
        }
    }
    Err(format!("`{value}` is not an unambiguous year-month-day date"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::FieldPattern;

    fn typed(kind: ValueKind) -> FieldSpec {
        FieldSpec::new("f", ValueConstraint::Typed(kind))
    }

    fn check(spec: &FieldSpec, raw: &str, value: &str, status: ResolutionStatus) {
        let r = normalize_value(spec, raw);
        assert_eq!((r.value.as_str(), r.status), (value, status), "raw {raw:?}");
    }

    #[test]
    fn booleans() {
        let spec = typed(ValueKind::BooleanYesNo);
        check(&spec, "true", "Yes", ResolutionStatus::Normalized);
        check(&spec, "false", "No", ResolutionStatus::Normalized);
        for raw in ["TRUE", "1", "yes"] {
            check(&spec, raw, "Yes", ResolutionStatus::Normalized);
        }
        for raw in ["FALSE", "0", "no"] {
            check(&spec, raw, "No", ResolutionStatus::Normalized);
        }
        check(&spec, "Yes", "Yes", ResolutionStatus::Unchanged);
        check(&spec, "No", "No", ResolutionStatus::Unchanged);
        check(&spec, "maybe", "maybe", ResolutionStatus::FlaggedForReview);
    }

    #[test]
    fn yes_no_enum_accepts_boolean_spellings() {
        let spec = FieldSpec::new(
            "f",
            ValueConstraint::EnumLiterals {
                permitted: vec!["Yes".into(), "No".into()],
            },
        );
        check(&spec, "true", "Yes", ResolutionStatus::Normalized);
        check(&spec, "false", "No", ResolutionStatus::Normalized);
        check(&spec, "no ", "No", ResolutionStatus::Normalized);
        check(&spec, "perhaps", "perhaps", ResolutionStatus::FlaggedForReview);
    }

    #[test]
    fn enum_case_folding() {
        let spec = FieldSpec::new(
            "f",
            ValueConstraint::EnumLiterals {
                permitted: vec!["Illumina NovaSeq".into(), "Other".into()],
            },
        );
        check(&spec, "illumina  novaseq", "Illumina NovaSeq", ResolutionStatus::Normalized);
        check(&spec, "Other", "Other", ResolutionStatus::Unchanged);
        check(&spec, "true", "true", ResolutionStatus::FlaggedForReview);
    }

    #[test]
    fn doi() {
        let spec = typed(ValueKind::DoiUrl);
        check(
            &spec,
            "10.17504/protocols.io.abcd",
            "https://doi.org/10.17504/protocols.io.abcd",
            ResolutionStatus::Normalized,
        );
        check(
            &spec,
            "doi:10.1/x",
            "https://doi.org/10.1/x",
            ResolutionStatus::Normalized,
        );
        for kept in ["https://doi.org/10.1/x", "https://dx.doi.org/10.1/x"] {
            check(&spec, kept, kept, ResolutionStatus::Unchanged);
        }
        check(&spec, "protocols.io/abcd", "protocols.io/abcd", ResolutionStatus::FlaggedForReview);
    }

    #[test]
    fn numbers() {
        let int = typed(ValueKind::Integer);
        check(&int, "12", "12", ResolutionStatus::Unchanged);
        check(&int, " 12 ", "12", ResolutionStatus::Normalized);
        check(&int, "twelve", "twelve", ResolutionStatus::FlaggedForReview);
        check(&int, "1.5", "1.5", ResolutionStatus::FlaggedForReview);
        let dec = typed(ValueKind::Decimal);
        check(&dec, "1.5", "1.5", ResolutionStatus::Unchanged);
        check(&dec, "NaN", "NaN", ResolutionStatus::FlaggedForReview);
    }

    #[test]
    fn pattern_and_free_text() {
        let spec = FieldSpec::new("f", ValueConstraint::Pattern(FieldPattern::new("[A-Z]{2}[0-9]+").unwrap()));
        check(&spec, "AB12", "AB12", ResolutionStatus::Unchanged);
        check(&spec, "ab12", "ab12", ResolutionStatus::FlaggedForReview);
        let text = typed(ValueKind::FreeText);
        check(&text, "Axio Scan.Z1", "Axio Scan.Z1", ResolutionStatus::Unchanged);
        check(&text, " padded", "padded", ResolutionStatus::Normalized);
    }

    #[test]
    fn dates() {
        let spec = typed(ValueKind::Date);
        check(&spec, "2021-03-04", "2021-03-04", ResolutionStatus::Unchanged);
        check(&spec, "2021/03/04", "2021-03-04", ResolutionStatus::Normalized);
        check(&spec, "03/04/2021", "03/04/2021", ResolutionStatus::FlaggedForReview);
    }

    #[test]
    fn empty_stays_empty_and_flags_keep_raw_bytes() {
        for kind in [ValueKind::Integer, ValueKind::DoiUrl, ValueKind::BooleanYesNo] {
            check(&typed(kind), "", "", ResolutionStatus::Unchanged);
        }
        let r = normalize_value(&typed(ValueKind::Integer), "  x ");
        assert_eq!(r.value, "  x ");
        assert!(r.note.is_some());
    }
}
