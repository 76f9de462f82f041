//! Standardization of legacy metadata records against machine-actionable
//! templates.
//!
//! The crate is organised by stage:
//!
//! * [`record`]: flat metadata records in TSV and object (JSON) form.
//! * [`template`]: template documents and their per-field value constraints.
//! * [`terminology`]: ontology term search with a query-keyed [`cache`].
//! * [`tools`]: the three lookup tools and a JSON-RPC stdio server for them.
//! * [`resolver`]: the deterministic standardization engine.
//! * [`agent`]: chat-model orchestration (tool loop and prompt-only baseline).
//! * [`evaluation`]: exact-match scoring against gold-standard records.
//! * [`batch`]: parallel batch runs with manifests.

pub mod agent;
pub mod batch;
pub mod cache;
pub mod evaluation;
pub mod http;
pub mod record;
pub mod resolver;
pub mod template;
pub mod terminology;
pub mod tools;

pub use cache::{CacheOutcome, ResponseCache};
pub use http::{RetryPolicy, ServiceError};
pub use record::{MetadataRecord, RecordError, RecordFormat};
pub use template::{classify_field, FieldCategory, FieldSpec, TemplateSpec, ValueConstraint, ValueKind};
pub use terminology::{SearchQuery, TermCandidate, TermLookup, Terminology};
pub use resolver::{standardize_record, CorrectionResult, Resolution, ResolutionStatus};
pub use tools::{ToolAccess, ToolDescriptor, ToolHost, ToolResult};
