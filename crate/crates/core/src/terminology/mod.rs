//! Terminology search: ontology-wide or branch-restricted term lookups.
//!
//! Backends return the raw search payload (BioPortal's JSON shape, also
//! produced by the fixture mock). [`Terminology`] caches payloads by
//! canonical query key and parses them into [`TermCandidate`]s.

mod bioportal;
mod mock;

use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::cache::{canonical_key, CacheOutcome, ResponseCache};
use crate::http::ServiceError;

pub use bioportal::{BioPortalClient, BIOPORTAL_API_KEY_ENV, DEFAULT_BIOPORTAL_ENDPOINT};
pub use mock::{MockFixtureError, MockTerm, MockTerminology};

/// Upper bound on candidates requested per search; only the first page is read.
pub const PAGE_SIZE: usize = 50;

pub const SEARCH_ONTOLOGY_OP: &str = "term_search_from_ontology";
pub const SEARCH_BRANCH_OP: &str = "term_search_from_branch";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermCandidate {
    pub preferred_label: String,
    pub concept_iri: String,
    pub ontology_acronym: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

/// One term search. `branch_iri` restricts results to the sub-tree under that concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SearchQuery {
    pub ontology: String,
    pub branch_iri: Option<String>,
    pub query: String,
}

impl SearchQuery {
    pub fn ontology(ontology: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            ontology: ontology.into(),
            branch_iri: None,
            query: query.into(),
        }
    }

    pub fn branch(
        ontology: impl Into<String>,
        branch_iri: impl Into<String>,
        query: impl Into<String>,
    ) -> Self {
        Self {
            ontology: ontology.into(),
            branch_iri: Some(branch_iri.into()),
            query: query.into(),
        }
    }

    pub fn operation(&self) -> &'static str {
        if self.branch_iri.is_some() {
            SEARCH_BRANCH_OP
        } else {
            SEARCH_ONTOLOGY_OP
        }
    }

    pub fn cache_key(&self) -> String {
        let mut params = vec![("ontology", self.ontology.as_str()), ("query", self.query.as_str())];
        if let Some(branch) = &self.branch_iri {
            params.push(("branch_iri", branch.as_str()));
        }
        canonical_key(self.operation(), &params)
    }

    fn validate(&self) -> Result<(), ServiceError> {
        if self.ontology.trim().is_empty() {
            return Err(ServiceError::InvalidRequest("ontology acronym is empty".into()));
        }
        if self.query.trim().is_empty() {
            return Err(ServiceError::InvalidRequest("search text is empty".into()));
        }
        if self.branch_iri.as_deref().is_some_and(|b| b.trim().is_empty()) {
            return Err(ServiceError::InvalidRequest("branch identifier is empty".into()));
        }
        Ok(())
    }
}

/// A search service returning the raw upstream payload.
#[async_trait]
pub trait TerminologyBackend: Send + Sync {
    async fn search(&self, query: &SearchQuery) -> Result<String, ServiceError>;
}

/// Read access to terminology search, as used by the resolver.
#[async_trait]
pub trait TermLookup: Send + Sync {
    async fn lookup(&self, query: &SearchQuery) -> Result<Vec<TermCandidate>, ServiceError>;
}

/// Parses a search payload (`{"collection": [...]}`) into candidates, in
/// upstream order. Entries without a label or identifier are dropped.
pub fn parse_search_payload(
    payload: &str,
    default_acronym: &str,
) -> Result<Vec<TermCandidate>, ServiceError> {
    let doc: Value =
        serde_json::from_str(payload).map_err(|e| ServiceError::Malformed(e.to_string()))?;
    let collection = doc
        .get("collection")
        .and_then(Value::as_array)
        .ok_or_else(|| ServiceError::Malformed("missing `collection` array".into()))?;
    let mut out = Vec::with_capacity(collection.len());
    for item in collection.iter().take(PAGE_SIZE) {
        let label = item.get("prefLabel").and_then(Value::as_str).unwrap_or_default();
        let iri = item.get("@id").and_then(Value::as_str).unwrap_or_default();
        if label.is_empty() || iri.is_empty() {
            tracing::debug!(?item, "dropping search result without label or identifier");
            continue;
        }
        let synonyms = match item.get("synonym") {
            Some(Value::Array(list)) => list.iter().filter_map(Value::as_str).map(str::to_string).collect(),
            Some(Value::String(s)) => vec![s.clone()],
            _ => Vec::new(),
        };
        let acronym = item
            .get("links")
            .and_then(|l| l.get("ontology"))
            .and_then(Value::as_str)
            .and_then(|u| u.trim_end_matches('/').rsplit('/').next())
            .filter(|a| !a.is_empty())
            .unwrap_or(default_acronym);
        out.push(TermCandidate {
            preferred_label: label.to_string(),
            concept_iri: iri.to_string(),
            ontology_acronym: acronym.to_string(),
            synonyms,
        });
    }
    Ok(out)
}

/// Renders candidates in the search payload shape understood by [`parse_search_payload`].
pub fn render_search_payload(candidates: &[TermCandidate], ontology_base: &str) -> String {
    let collection: Vec<Value> = candidates
        .iter()
        .map(|c| {
            serde_json::json!({
                "@id": c.concept_iri,
                "prefLabel": c.preferred_label,
                "synonym": c.synonyms,
                "links": { "ontology": format!("{}/ontologies/{}", ontology_base, c.ontology_acronym) },
            })
        })
        .collect();
    serde_json::json!({
        "page": 1,
        "pageCount": 1,
        "totalCount": candidates.len(),
        "collection": collection,
    })
    .to_string()
}

/// Cached terminology search.
#[derive(Clone)]
pub struct Terminology {
    backend: Arc<dyn TerminologyBackend>,
    cache: Arc<ResponseCache>,
}

impl Terminology {
    pub fn new(backend: Arc<dyn TerminologyBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { backend, cache }
    }

    pub fn cache(&self) -> &Arc<ResponseCache> {
        &self.cache
    }

    pub async fn search_ontology(
        &self,
        acronym: &str,
        query: &str,
    ) -> Result<Vec<TermCandidate>, ServiceError> {
        self.search(&SearchQuery::ontology(acronym, query)).await
    }

    pub async fn search_branch(
        &self,
        acronym: &str,
        branch_iri: &str,
        query: &str,
    ) -> Result<Vec<TermCandidate>, ServiceError> {
        self.search(&SearchQuery::branch(acronym, branch_iri, query)).await
    }

    pub async fn search(&self, query: &SearchQuery) -> Result<Vec<TermCandidate>, ServiceError> {
        self.search_traced(query).await.map(|(c, _)| c)
    }

    pub async fn search_traced(
        &self,
        query: &SearchQuery,
    ) -> Result<(Vec<TermCandidate>, CacheOutcome), ServiceError> {
        query.validate()?;
        let (payload, outcome) = self
            .cache
            .cached_call(&query.cache_key(), || self.backend.search(query))
            .await?;
        let candidates = parse_search_payload(&payload, &query.ontology)?;
        if candidates.is_empty() {
            if let Some(branch) = &query.branch_iri {
                tracing::info!(
                    ontology = %query.ontology,
                    branch = %branch,
                    query = %query.query,
                    "branch search returned no candidates"
                );
            }
        }
        Ok((candidates, outcome))
    }
}

#[async_trait]
impl TermLookup for Terminology {
    async fn lookup(&self, query: &SearchQuery) -> Result<Vec<TermCandidate>, ServiceError> {
        self.search(query).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trips_through_render() {
        let cands = vec![
            TermCandidate {
                preferred_label: "single nucleus".into(),
                concept_iri: "http://x/1".into(),
                ontology_acronym: "HRAVS".into(),
                synonyms: vec!["snRNA".into()],
            },
            TermCandidate {
                preferred_label: "lung".into(),
                concept_iri: "http://x/2".into(),
                ontology_acronym: "UBERON".into(),
                synonyms: vec![],
            },
        ];
        let payload = render_search_payload(&cands, "https://data.bioontology.org");
        assert_eq!(parse_search_payload(&payload, "?").unwrap(), cands);
    }

    #[test]
    fn malformed_payloads_are_errors() {
        assert!(matches!(
            parse_search_payload("[]", "X"),
            Err(ServiceError::Malformed(_))
        ));
        assert!(matches!(
            parse_search_payload("{", "X"),
            Err(ServiceError::Malformed(_))
        ));
    }

    #[test]
    fn incomplete_entries_are_dropped_and_acronym_defaults() {
        let payload = r#"{"collection":[{"@id":"i1","prefLabel":""},{"@id":"i2","prefLabel":"ok","synonym":"alt"}]}"#;
        let c = parse_search_payload(payload, "HRAVS").unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].ontology_acronym, "HRAVS");
        assert_eq!(c[0].synonyms, ["alt"]);
    }

    #[test]
    fn cache_keys_separate_operations() {
        let a = SearchQuery::ontology("HRAVS", "x").cache_key();
        let b = SearchQuery::branch("HRAVS", "http://b", "x").cache_key();
        assert_ne!(a, b);
        assert!(b.contains(SEARCH_BRANCH_OP));
    }
}
