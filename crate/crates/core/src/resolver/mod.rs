//! Deterministic standardization engine.
//!
//! Legacy fields are mapped onto template fields by name, non-ontology values
//! are format-corrected, and ontology-bound values are looked up and ranked.
//! When a lookup yields no candidate or an ambiguous tie, the legacy value is
//! kept verbatim and flagged for review. Nothing is ever inferred: a template
//! field with no mapped legacy value comes out empty.

pub mod mapping;
pub mod normalize;
pub mod rank;

use futures::future::join_all;
use serde::{Deserialize, Serialize};

use crate::record::MetadataRecord;
use crate::template::{FieldSpec, TemplateSpec, ValueConstraint};
use crate::terminology::{SearchQuery, TermCandidate, TermLookup};

pub use mapping::{map_legacy_fields, map_legacy_names, match_tier, FieldMapping, LegacyMapping, MatchTier};
pub use normalize::{normalize_text, normalize_value};
pub use rank::{rank_candidates, score_candidate, RankOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResolutionStatus {
    Unchanged,
    Normalized,
    OntologyResolved,
    InferredFromRecord,
    FlaggedForReview,
}

impl ResolutionStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResolutionStatus::Unchanged => "unchanged",
            ResolutionStatus::Normalized => "normalized",
            ResolutionStatus::OntologyResolved => "ontology-resolved",
            ResolutionStatus::InferredFromRecord => "inferred-from-record",
            ResolutionStatus::FlaggedForReview => "flagged-for-review",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub field: String,
    pub value: String,
    pub status: ResolutionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Resolution {
    pub fn new(field: impl Into<String>, value: impl Into<String>, status: ResolutionStatus) -> Self {
        Self {
            field: field.into(),
            value: value.into(),
            status,
            note: None,
        }
    }

    /// Keeps the legacy value byte-for-byte.
    pub fn flagged(field: impl Into<String>, legacy: impl Into<String>, note: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            value: legacy.into(),
            status: ResolutionStatus::FlaggedForReview,
            note: Some(note.into()),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }
}

/// Standardized record: one resolution per template field it covers, plus any
/// fields the producer emitted that the template does not know.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub record_id: String,
    pub resolutions: Vec<Resolution>,
    /// Non-template fields present in the output (agent outputs only).
    #[serde(default)]
    pub extra_fields: Vec<(String, String)>,
    /// Template fields absent from the output (agent outputs only).
    #[serde(default)]
    pub omitted_fields: Vec<String>,
}

impl CorrectionResult {
    pub fn resolution(&self, field: &str) -> Option<&Resolution> {
        self.resolutions.iter().find(|r| r.field == field)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &Resolution> {
        self.resolutions
            .iter()
            .filter(|r| r.status == ResolutionStatus::FlaggedForReview)
    }

    /// The output record: resolved fields in template order, then extras.
    pub fn to_record(&self) -> MetadataRecord {
        let mut record = MetadataRecord::new(self.record_id.clone());
        for r in &self.resolutions {
            record.set(r.field.clone(), r.value.clone());
        }
        for (name, value) in &self.extra_fields {
            record.set(name.clone(), value.clone());
        }
        record
    }

    /// Sidecar document listing flagged fields with their diagnostics.
    pub fn review_document(&self) -> serde_json::Value {
        let flagged: Vec<serde_json::Value> = self
            .flagged()
            .map(|r| serde_json::json!({"field": r.field, "value": r.value, "note": r.note}))
            .collect();
        let mut counts = std::collections::BTreeMap::new();
        for r in &self.resolutions {
            *counts.entry(r.status.as_str()).or_insert(0u32) += 1;
        }
        serde_json::json!({
            "record_id": self.record_id,
            "flagged": flagged,
            "extra_fields": self.extra_fields.iter().map(|(n, _)| n).collect::<Vec<_>>(),
            "omitted_fields": self.omitted_fields,
            "status_counts": counts,
        })
    }
}

/// Candidates for an ontology-bound field plus any literals declared next to the binding.
fn with_literals(mut candidates: Vec<TermCandidate>, spec: &FieldSpec) -> Vec<TermCandidate> {
    if let ValueConstraint::OntologyBinding {
        ontology_acronym,
        extra_literals,
        ..
    } = &spec.constraint
    {
        candidates.extend(extra_literals.iter().map(|lit| TermCandidate {
            preferred_label: lit.clone(),
            concept_iri: format!("urn:literal:{lit}"),
            ontology_acronym: ontology_acronym.clone(),
            synonyms: Vec::new(),
        }));
    }
    candidates
}

/// Looks up an ontology-bound value and applies the ranking rules. Branch
/// search is used whenever the binding names a branch.
pub async fn resolve_ontology_value(
    spec: &FieldSpec,
    raw: &str,
    terms: &dyn TermLookup,
) -> Resolution {
    let field = spec.name.as_str();
    let ValueConstraint::OntologyBinding {
        ontology_acronym,
        branch_iri,
        ..
    } = &spec.constraint
    else {
        return normalize_value(spec, raw);
    };
    let query_text = raw.trim();
    if query_text.is_empty() {
        return Resolution::new(field, raw, ResolutionStatus::Unchanged);
    }
    let query = SearchQuery {
        ontology: ontology_acronym.clone(),
        branch_iri: branch_iri.clone(),
        query: query_text.to_string(),
    };
    let candidates = match terms.lookup(&query).await {
        Ok(c) => with_literals(c, spec),
        Err(e) => return Resolution::flagged(field, raw, format!("terminology lookup failed: {e}")),
    };
    match rank_candidates(raw, &candidates) {
        RankOutcome::Selected { candidate, score } => {
            let status = if candidate.preferred_label == raw {
                ResolutionStatus::Unchanged
            } else {
                ResolutionStatus::OntologyResolved
            };
            Resolution::new(field, candidate.preferred_label.clone(), status)
                .with_note(format!("{} (tier {score})", candidate.concept_iri))
        }
        RankOutcome::Tie { score, concepts } => {
            let iris: Vec<&str> = concepts.iter().map(|c| c.concept_iri.as_str()).collect();
            Resolution::flagged(
                field,
                raw,
                format!("tie at tier {score} between {}", iris.join(", ")),
            )
        }
        RankOutcome::NoMatch if candidates.is_empty() => {
            Resolution::flagged(field, raw, "no candidates returned")
        }
        RankOutcome::NoMatch => Resolution::flagged(
            field,
            raw,
            format!("none of {} candidates matches", candidates.len()),
        ),
    }
}

/// Resolves one template field given its mapped legacy value.
pub async fn resolve_field(spec: &FieldSpec, raw: Option<&str>, terms: &dyn TermLookup) -> Resolution {
    let Some(raw) = raw else {
        return Resolution::new(spec.name.clone(), "", ResolutionStatus::Unchanged)
            .with_note("no legacy field mapped");
    };
    match spec.constraint {
        ValueConstraint::OntologyBinding { .. } => resolve_ontology_value(spec, raw, terms).await,
        _ => normalize_value(spec, raw),
    }
}

/// Deterministic standardization of one record. Field lookups run concurrently.
pub async fn standardize_record(
    record: &MetadataRecord,
    template: &TemplateSpec,
    terms: &dyn TermLookup,
) -> CorrectionResult {
    let mapping = map_legacy_fields(record, template);
    let resolutions = join_all(template.fields.iter().zip(&mapping.fields).map(|(spec, m)| {
        let raw = m.legacy_field.as_deref().and_then(|name| record.get(name));
        async move {
            let mut resolution = resolve_field(spec, raw, terms).await;
            if let (Some(d), None) = (&m.diagnostic, &resolution.note) {
                resolution.note = Some(d.clone());
            }
            resolution
        }
    }))
    .await;
    if !mapping.unused_legacy.is_empty() {
        tracing::debug!(
            record = record.record_id(),
            unused = ?mapping.unused_legacy,
            "legacy fields not mapped to the template"
        );
    }
    CorrectionResult {
        record_id: record.record_id().to_string(),
        resolutions,
        extra_fields: Vec::new(),
        omitted_fields: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::http::ServiceError;
    use crate::template::ValueKind;
    use async_trait::async_trait;
    use std::collections::HashMap;
    use std::sync::Mutex;

    /// Lookup answering from a fixed table and remembering the queries.
    #[derive(Default)]
    struct TableLookup {
        answers: HashMap<String, Vec<TermCandidate>>,
        seen: Mutex<Vec<SearchQuery>>,
        fail: bool,
    }

    #[async_trait]
    impl TermLookup for TableLookup {
        async fn lookup(&self, query: &SearchQuery) -> Result<Vec<TermCandidate>, ServiceError> {
            self.seen.lock().unwrap().push(query.clone());
            if self.fail {
                return Err(ServiceError::Timeout { attempts: 3 });
            }
            Ok(self.answers.get(&query.query).cloned().unwrap_or_default())
        }
    }

    fn cand(label: &str, iri: &str) -> TermCandidate {
        TermCandidate {
            preferred_label: label.into(),
            concept_iri: iri.into(),
            ontology_acronym: "HRAVS".into(),
            synonyms: vec![],
        }
    }

    fn branch_field() -> FieldSpec {
        FieldSpec::new(
            "assay_input_entity",
            ValueConstraint::ontology("HRAVS", Some("h:root".into())),
        )
    }

    #[tokio::test]
    async fn branch_binding_uses_branch_search() {
        let lookup = TableLookup {
            answers: HashMap::from([("nucleus".to_string(), vec![cand("single nucleus", "h:nuc")])]),
            ..Default::default()
        };
        let r = resolve_ontology_value(&branch_field(), "nucleus", &lookup).await;
        assert_eq!(r.value, "single nucleus");
        assert_eq!(r.status, ResolutionStatus::OntologyResolved);
        let seen = lookup.seen.lock().unwrap();
        assert_eq!(seen[0].branch_iri.as_deref(), Some("h:root"));
    }

    #[tokio::test]
    async fn no_candidates_keeps_legacy_and_flags() {
        let lookup = TableLookup::default();
        let r = resolve_ontology_value(&branch_field(), "lipids", &lookup).await;
        assert_eq!(r.value, "lipids");
        assert_eq!(r.status, ResolutionStatus::FlaggedForReview);
        assert_eq!(r.note.as_deref(), Some("no candidates returned"));
    }

    #[tokio::test]
    async fn empty_value_skips_lookup() {
        let lookup = TableLookup::default();
        let r = resolve_ontology_value(&branch_field(), "", &lookup).await;
        assert_eq!((r.value.as_str(), r.status), ("", ResolutionStatus::Unchanged));
        assert!(lookup.seen.lock().unwrap().is_empty());
    }

    #[tokio::test]
    async fn tie_flags() {
        let lookup = TableLookup {
            answers: HashMap::from([("lung".to_string(), vec![cand("lung", "a"), cand("lung", "b")])]),
            ..Default::default()
        };
        let r = resolve_ontology_value(&branch_field(), " lung", &lookup).await;
        assert_eq!(r.value, " lung");
        assert_eq!(r.status, ResolutionStatus::FlaggedForReview);
    }

    #[tokio::test]
    async fn upstream_failure_flags_instead_of_aborting() {
        let lookup = TableLookup {
            fail: true,
            ..Default::default()
        };
        let r = resolve_ontology_value(&branch_field(), "nucleus", &lookup).await;
        assert_eq!(r.status, ResolutionStatus::FlaggedForReview);
        assert!(r.note.unwrap().contains("timed out"));
    }

    #[tokio::test]
    async fn extra_literals_are_candidates() {
        let spec = FieldSpec::new(
            "x",
            ValueConstraint::OntologyBinding {
                ontology_acronym: "OBI".into(),
                branch_iri: None,
                extra_literals: vec!["Other".into()],
            },
        );
        let r = resolve_ontology_value(&spec, "other", &TableLookup::default()).await;
        assert_eq!((r.value.as_str(), r.status), ("Other", ResolutionStatus::OntologyResolved));
    }

    #[tokio::test]
    async fn standardize_covers_every_template_field() {
        let template = TemplateSpec::new(
            "t",
            vec![
                FieldSpec::new("is_targeted", ValueConstraint::Typed(ValueKind::BooleanYesNo)),
                branch_field(),
                FieldSpec::new("umi_size", ValueConstraint::Typed(ValueKind::Integer)),
            ],
        )
        .unwrap();
        let record = MetadataRecord::from_pairs(
            "r1",
            [("is_targeted", "false"), ("assay_input_entity", "nucleus"), ("unrelated", "z")],
        )
        .unwrap();
        let lookup = TableLookup {
            answers: HashMap::from([("nucleus".to_string(), vec![cand("single nucleus", "h:nuc")])]),
            ..Default::default()
        };
        let out = standardize_record(&record, &template, &lookup).await;
        let got: Vec<_> = out
            .resolutions
            .iter()
            .map(|r| (r.field.as_str(), r.value.as_str(), r.status))
            .collect();
        assert_eq!(
            got,
            [
                ("is_targeted", "No", ResolutionStatus::Normalized),
                ("assay_input_entity", "single nucleus", ResolutionStatus::OntologyResolved),
                ("umi_size", "", ResolutionStatus::Unchanged),
            ]
        );
        let rec = out.to_record();
        assert!(!rec.contains("unrelated"));
        assert_eq!(rec.len(), 3);
    }
}
