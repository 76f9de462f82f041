use async_trait::async_trait;
use url::Url;

use super::{SearchQuery, TerminologyBackend, PAGE_SIZE};
use crate::http::{HttpClient, ServiceError};

pub const DEFAULT_BIOPORTAL_ENDPOINT: &str = "https://data.bioontology.org";
pub const BIOPORTAL_API_KEY_ENV: &str = "BIOPORTAL_API_KEY";

/// BioPortal search API client.
#[derive(Debug, Clone)]
pub struct BioPortalClient {
    endpoint: Url,
    api_key: String,
    http: HttpClient,
}

impl BioPortalClient {
    pub fn new(endpoint: &str, api_key: impl Into<String>, http: HttpClient) -> Result<Self, ServiceError> {
        let endpoint =
            Url::parse(endpoint).map_err(|e| ServiceError::Transport(format!("bad endpoint: {e}")))?;
        Ok(Self {
            endpoint,
            api_key: api_key.into(),
            http,
        })
    }

    pub fn from_env(endpoint: &str, http: HttpClient) -> Result<Self, ServiceError> {
        let key = std::env::var(BIOPORTAL_API_KEY_ENV)
            .map_err(|_| ServiceError::MissingCredential(BIOPORTAL_API_KEY_ENV.into()))?;
        Self::new(endpoint, key, http)
    }

    pub fn search_url(&self, query: &SearchQuery) -> Url {
        let mut url = self.endpoint.clone();
        {
            let mut path = url.path_segments_mut().expect("http url has path");
            path.pop_if_empty().push("search");
        }
        {
            let mut params = url.query_pairs_mut();
            params
                .append_pair("q", &query.query)
                .append_pair("ontologies", &query.ontology);
            if let Some(root) = &query.branch_iri {
                params
                    .append_pair("ontology", &query.ontology)
                    .append_pair("subtree_root_id", root);
            }
            params.append_pair("pagesize", &PAGE_SIZE.to_string());
        }
        url
    }
}

#[async_trait]
impl TerminologyBackend for BioPortalClient {
    async fn search(&self, query: &SearchQuery) -> Result<String, ServiceError> {
        let auth = format!("apikey token={}", self.api_key);
        self.http.get_text(&self.search_url(query), Some(&auth)).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn search_url_carries_all_parameters() {
        let http = HttpClient::new(Duration::from_secs(1), Default::default()).unwrap();
        let client = BioPortalClient::new("https://data.bioontology.org", "k", http).unwrap();
        let url = client.search_url(&SearchQuery::branch(
            "HRAVS",
            "http://purl.humanatlas.io/vocab/hravs#HRAVS_0000100",
            "single nucleus",
        ));
        assert_eq!(url.path(), "/search");
        let pairs: Vec<(String, String)> = url.query_pairs().into_owned().collect();
        assert_eq!(
            pairs,
            [
                ("q", "single nucleus"),
                ("ontologies", "HRAVS"),
                ("ontology", "HRAVS"),
                ("subtree_root_id", "http://purl.humanatlas.io/vocab/hravs#HRAVS_0000100"),
                ("pagesize", "50"),
            ]
            .map(|(a, b)| (a.to_string(), b.to_string()))
        );

        let url = client.search_url(&SearchQuery::ontology("UBERON", "lung"));
        assert!(!url.as_str().contains("subtree_root_id"));
    }
}
