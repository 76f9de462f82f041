//! Offline terminology backend driven by a recorded fixture file.
//!
//! Matching: case-insensitive substring of the search text against each term's
//! label and synonyms. Terms whose label equals the search text
//! (case-insensitively) come first, then the rest in fixture order. Branch
//! membership is the reflexive-transitive closure over `parent_iri`.

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use async_trait::async_trait;
use serde::Deserialize;
use thiserror::Error;

use super::{render_search_payload, SearchQuery, TermCandidate, TerminologyBackend, PAGE_SIZE};
use crate::http::ServiceError;

const MOCK_BASE: &str = "https://data.bioontology.org";

#[derive(Debug, Error)]
pub enum MockFixtureError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid fixture: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct MockTerm {
    pub iri: String,
    pub label: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    #[serde(default)]
    pub parent_iri: Option<String>,
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    ontologies: Vec<FixtureOntology>,
    /// Search texts that make the mock answer with HTTP 503.
    #[serde(default)]
    failing_queries: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct FixtureOntology {
    acronym: String,
    terms: Vec<MockTerm>,
}

#[derive(Debug)]
struct MockOntology {
    terms: Vec<MockTerm>,
    children: HashMap<String, Vec<usize>>,
    index: HashMap<String, usize>,
}

impl MockOntology {
    fn new(terms: Vec<MockTerm>) -> Result<Self, MockFixtureError> {
        let mut children: HashMap<String, Vec<usize>> = HashMap::new();
        let mut index = HashMap::new();
        for (i, term) in terms.iter().enumerate() {
            if term.iri.is_empty() || term.label.is_empty() {
                return Err(MockFixtureError::Invalid(format!(
                    "term #{i} needs a nonempty iri and label"
                )));
            }
            if index.insert(term.iri.clone(), i).is_some() {
                return Err(MockFixtureError::Invalid(format!("duplicate iri {}", term.iri)));
            }
            if let Some(parent) = &term.parent_iri {
                children.entry(parent.clone()).or_default().push(i);
            }
        }
        Ok(Self {
            terms,
            children,
            index,
        })
    }

    /// Indices of the branch root and all its descendants, or `None` when the
    /// root is not a term of this ontology.
    fn branch(&self, root: &str) -> Option<HashSet<usize>> {
        let start = *self.index.get(root)?;
        let mut seen = HashSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for &child in self.children.get(&self.terms[i].iri).into_iter().flatten() {
                if seen.insert(child) {
                    queue.push_back(child);
                }
            }
        }
        Some(seen)
    }
}

#[derive(Debug, Default)]
pub struct MockTerminology {
    ontologies: HashMap<String, MockOntology>,
    failing: HashSet<String>,
    latency: Option<Duration>,
    calls: AtomicU64,
}

impl MockTerminology {
    pub fn from_json(text: &str) -> Result<Self, MockFixtureError> {
        let file: FixtureFile =
            serde_json::from_str(text).map_err(|e| MockFixtureError::Invalid(e.to_string()))?;
        let mut ontologies = HashMap::new();
        for ont in file.ontologies {
            let acronym = ont.acronym.clone();
            if ontologies.insert(acronym.clone(), MockOntology::new(ont.terms)?).is_some() {
                return Err(MockFixtureError::Invalid(format!("ontology {acronym} listed twice")));
            }
        }
        Ok(Self {
            ontologies,
            failing: file.failing_queries.into_iter().collect(),
            latency: None,
            calls: AtomicU64::new(0),
        })
    }

    pub fn load(path: &Path) -> Result<Self, MockFixtureError> {
        let text = std::fs::read_to_string(path).map_err(|e| MockFixtureError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// Sleeps this long on every search, to stand in for network latency.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Number of searches this backend has answered.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn terms(&self, acronym: &str) -> &[MockTerm] {
        self.ontologies
            .get(acronym)
            .map(|o| o.terms.as_slice())
            .unwrap_or_default()
    }

    /// Candidates for a query, without payload rendering.
    pub fn matches(&self, query: &SearchQuery) -> Vec<TermCandidate> {
        let Some(ont) = self.ontologies.get(&query.ontology) else {
            tracing::info!(ontology = %query.ontology, "mock has no such ontology");
            return Vec::new();
        };
        let allowed = match &query.branch_iri {
            Some(root) => match ont.branch(root) {
                Some(set) => Some(set),
                None => {
                    tracing::info!(ontology = %query.ontology, branch = %root, "unknown branch root");
                    return Vec::new();
                }
            },
            None => None,
        };
        let needle = query.query.trim().to_lowercase();
        let mut exact = Vec::new();
        let mut partial = Vec::new();
        for (i, term) in ont.terms.iter().enumerate() {
            if allowed.as_ref().is_some_and(|a| !a.contains(&i)) {
                continue;
            }
            let label = term.label.to_lowercase();
            if label == needle {
                exact.push(term);
            } else if label.contains(&needle)
                || term.synonyms.iter().any(|s| s.to_lowercase().contains(&needle))
            {
                partial.push(term);
            }
        }
        exact
            .into_iter()
            .chain(partial)
            .take(PAGE_SIZE)
            .map(|t| TermCandidate {
                preferred_label: t.label.clone(),
                concept_iri: t.iri.clone(),
                ontology_acronym: query.ontology.clone(),
                synonyms: t.synonyms.clone(),
            })
            .collect()
    }
}

#[async_trait]
impl TerminologyBackend for MockTerminology {
    async fn search(&self, query: &SearchQuery) -> Result<String, ServiceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(latency) = self.latency {
            tokio::time::sleep(latency).await;
        }
        if self.failing.contains(&query.query) {
            return Err(ServiceError::Status {
                status: 503,
                body: "mock failure".into(),
            });
        }
        Ok(render_search_payload(&self.matches(query), MOCK_BASE))
    }
}
