use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use url::Url;

use crate::cache::{canonical_key, CacheOutcome, ResponseCache};
use crate::http::{HttpClient, ServiceError};

pub const DEFAULT_CEDAR_ENDPOINT: &str = "https://resource.metadatacenter.org";
pub const CEDAR_API_KEY_ENV: &str = "CEDAR_API_KEY";

/// Cache operation name for template fetches; shared with the tool name.
pub const FETCH_TEMPLATE_OP: &str = "get_cedar_template";

/// Something that returns raw template documents by id.
#[async_trait]
pub trait TemplateBackend: Send + Sync {
    async fn fetch(&self, template_id: &str) -> Result<String, ServiceError>;
}

/// CEDAR resource server client.
#[derive(Debug, Clone)]
pub struct CedarClient {
    endpoint: Url,
    api_key: String,
    http: HttpClient,
}

impl CedarClient {
    pub fn new(endpoint: &str, api_key: impl Into<String>, http: HttpClient) -> Result<Self, ServiceError> {
        let mut endpoint =
            Url::parse(endpoint).map_err(|e| ServiceError::Transport(format!("bad endpoint: {e}")))?;
        if !endpoint.path().ends_with('/') {
            let path = format!("{}/", endpoint.path());
            endpoint.set_path(&path);
        }
        Ok(Self {
            endpoint,
            api_key: api_key.into(),
            http,
        })
    }

    /// Reads the key from `CEDAR_API_KEY`.
    pub fn from_env(endpoint: &str, http: HttpClient) -> Result<Self, ServiceError> {
        let key = std::env::var(CEDAR_API_KEY_ENV)
            .map_err(|_| ServiceError::MissingCredential(CEDAR_API_KEY_ENV.into()))?;
        Self::new(endpoint, key, http)
    }

    pub fn template_url(&self, template_id: &str) -> Url {
        let mut url = self.endpoint.join("templates/").expect("static path joins");
        url.path_segments_mut()
            .expect("http url has path")
            .pop_if_empty()
            .push(template_id);
        url
    }
}

#[async_trait]
impl TemplateBackend for CedarClient {
    async fn fetch(&self, template_id: &str) -> Result<String, ServiceError> {
        let url = self.template_url(template_id);
        let auth = format!("apiKey {}", self.api_key);
        self.http.get_text(&url, Some(&auth)).await.map_err(|e| match e {
            ServiceError::NotFound(_) => ServiceError::NotFound(template_id.to_string()),
            other => other,
        })
    }
}

/// Recorded template documents served from memory, keyed by template id.
#[derive(Debug, Default)]
pub struct FixtureTemplates {
    documents: HashMap<String, String>,
    calls: AtomicU64,
}

impl FixtureTemplates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, template_id: impl Into<String>, raw: impl Into<String>) {
        self.documents.insert(template_id.into(), raw.into());
    }

    /// Loads every `*.json` file in `dir`; the id is the document's
    /// `template_id` or `@id`, falling back to the file stem.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut fixtures = Self::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("json"))
            .collect();
        paths.sort();
        for path in paths {
            let raw = std::fs::read_to_string(&path)?;
            let id = serde_json::from_str::<serde_json::Value>(&raw)
                .ok()
                .and_then(|v| {
                    ["template_id", "@id"]
                        .iter()
                        .find_map(|k| v.get(*k).and_then(|x| x.as_str()).map(str::to_string))
                })
                .unwrap_or_else(|| {
                    path.file_stem()
                        .and_then(|s| s.to_str())
                        .unwrap_or_default()
                        .to_string()
                });
            fixtures.insert(id, raw);
        }
        Ok(fixtures)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.documents.keys().map(String::as_str)
    }

    /// Number of fetches served (cache misses only, when wrapped in a service).
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

#[async_trait]
impl TemplateBackend for FixtureTemplates {
    async fn fetch(&self, template_id: &str) -> Result<String, ServiceError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.documents
            .get(template_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(template_id.to_string()))
    }
}

/// Template fetches routed through the shared response cache.
#[derive(Clone)]
pub struct TemplateService {
    backend: Arc<dyn TemplateBackend>,
    cache: Arc<ResponseCache>,
}

impl TemplateService {
    pub fn new(backend: Arc<dyn TemplateBackend>, cache: Arc<ResponseCache>) -> Self {
        Self { backend, cache }
    }

    pub fn cache(&self) -> &Arc<ResponseCache> {
        &self.cache
    }

    /// Returns the unmodified upstream document.
    pub async fn fetch_template(&self, template_id: &str) -> Result<String, ServiceError> {
        self.fetch_template_traced(template_id).await.map(|(doc, _)| doc)
    }

    pub async fn fetch_template_traced(
        &self,
        template_id: &str,
    ) -> Result<(String, CacheOutcome), ServiceError> {
        let key = canonical_key(FETCH_TEMPLATE_OP, &[("template_id", template_id)]);
        self.cache
            .cached_call(&key, || self.backend.fetch(template_id))
            .await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn template_url_escapes_the_id() {
        let http = HttpClient::new(Duration::from_secs(1), Default::default()).unwrap();
        let client = CedarClient::new("https://resource.example.org/api", "k", http).unwrap();
        assert_eq!(
            client
                .template_url("https://repo.metadatacenter.org/templates/abc")
                .as_str(),
            "https://resource.example.org/api/templates/https:%2F%2Frepo.metadatacenter.org%2Ftemplates%2Fabc"
        );
    }

    #[tokio::test]
    async fn fixture_fetch_is_byte_identical_and_cached() {
        let raw = "{\"template_id\":\"t1\",\n  \"fields\":[]}\n";
        let mut fixtures = FixtureTemplates::new();
        fixtures.insert("t1", raw);
        let fixtures = Arc::new(fixtures);
        let service = TemplateService::new(fixtures.clone(), Arc::new(ResponseCache::in_memory()));

        assert_eq!(service.fetch_template("t1").await.unwrap(), raw);
        let (again, outcome) = service.fetch_template_traced("t1").await.unwrap();
        assert_eq!(again, raw);
        assert_eq!(outcome, CacheOutcome::Hit);
        assert_eq!(fixtures.calls(), 1);

        assert_eq!(
            service.fetch_template("missing").await.unwrap_err(),
            ServiceError::NotFound("missing".into())
        );
    }
}
