use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use metastd::agent::{
    run_agent, run_baseline, AgentError, AgentLimits, ChatReply, ChatRole, ScriptedBackend, ToolCallRequest,
    REPROMPT,
};
use metastd::batch::Services;
use metastd::cache::ResponseCache;
use metastd::record::{parse_record_table, RecordFormat};
use metastd::template::parse_template;
use metastd::tools::{CountingTools, ToolHost};
use metastd::{MetadataRecord, ResolutionStatus, TemplateSpec};
use serde_json::json;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn template() -> TemplateSpec {
    parse_template(&std::fs::read_to_string(fixtures().join("mock/templates/rnaseq.json")).unwrap()).unwrap()
}

fn legacy(id: &str) -> MetadataRecord {
    let all = parse_record_table(&std::fs::read(fixtures().join("records/legacy.tsv")).unwrap(), RecordFormat::Tsv)
        .unwrap();
    all.into_iter().find(|r| r.record_id() == id).unwrap()
}

fn tools() -> Arc<ToolHost> {
    let s = Services::mock(&fixtures().join("mock"), Duration::ZERO, Arc::new(ResponseCache::in_memory())).unwrap();
    Arc::new(ToolHost::new(s.templates, s.terminology))
}

fn script(id: &str) -> ScriptedBackend {
    ScriptedBackend::from_json(&std::fs::read_to_string(fixtures().join(format!("agent/{id}.json"))).unwrap()).unwrap()
}

#[tokio::test]
async fn scripted_run_is_deterministic() {
    let t = template();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let backend = script("r-003");
        let counting = CountingTools::new(tools());
        let out = run_agent(&legacy("r-003"), &t, &backend, &counting, &AgentLimits::default())
            .await
            .unwrap();
        assert_eq!(backend.remaining(), 0);
        assert_eq!(counting.calls() as usize, out.transcript.tool_call_count());
        out.transcript.check_alternation().unwrap();
        runs.push(out);
    }
    assert_eq!(runs[0].result, runs[1].result);
    assert_eq!(runs[0].transcript.turns(), runs[1].transcript.turns());

    let r = &runs[0].result;
    let status = |f: &str| r.resolution(f).unwrap().status;
    assert_eq!(status("analyte_class"), ResolutionStatus::FlaggedForReview);
    assert_eq!(r.resolution("analyte_class").unwrap().value, "lipids");
    assert_eq!(status("assay_input_entity"), ResolutionStatus::Unchanged);
    assert_eq!(status("is_targeted"), ResolutionStatus::Normalized);
    assert_eq!(status("umi_size"), ResolutionStatus::InferredFromRecord);
    assert!(r.extra_fields.is_empty());
    assert!(r.omitted_fields.is_empty());
}

#[tokio::test]
async fn label_from_search_counts_as_resolved() {
    let backend = script("r-001");
    let out = run_agent(&legacy("r-001"), &template(), &backend, tools().as_ref(), &AgentLimits::default())
        .await
        .unwrap();
    let r = out.result.resolution("acquisition_instrument_model").unwrap();
    assert_eq!(r.value, "Illumina NovaSeq 6000");
    assert_eq!(r.status, ResolutionStatus::OntologyResolved);
}

#[tokio::test]
async fn first_request_offers_tools_and_only_the_template_id() {
    let backend = script("r-002");
    let t = template();
    run_agent(&legacy("r-002"), &t, &backend, tools().as_ref(), &AgentLimits::default())
        .await
        .unwrap();
    let (turns, offered) = backend.requests().remove(0);
    assert_eq!(offered, 3);
    assert_eq!(turns.len(), 2);
    assert!(turns[1].content.contains("rnaseq-v1"));
    assert!(!turns[1].content.contains("HRAVS_0000100"), "template body leaked into the prompt");
}

#[tokio::test]
async fn baseline_offers_no_tools() {
    let text = std::fs::read_to_string(fixtures().join("baseline/r-001.json")).unwrap();
    let backend = ScriptedBackend::from_json(&text).unwrap();
    let t = template();
    let names: Vec<String> = t.field_names().map(str::to_string).collect();
    let out = run_baseline(&legacy("r-001"), &names, &t.ontology_names(), &backend, &AgentLimits::default())
        .await
        .unwrap();
    assert_eq!(out.transcript.tool_call_count(), 0);
    assert!(backend.requests().iter().all(|(_, offered)| *offered == 0));
    let prompt = &backend.requests()[0].0[1].content;
    assert!(prompt.contains("- organ: UBERON"));
}

#[tokio::test]
async fn one_reprompt_then_failure() {
    let backend = ScriptedBackend::new([ChatReply::text("sorry"), ChatReply::text("still no")]);
    let err = run_agent(&legacy("r-001"), &template(), &backend, tools().as_ref(), &AgentLimits::default())
        .await
        .unwrap_err();
    assert!(matches!(err.error, AgentError::Unparseable(_)));
    let turns = err.transcript.turns();
    assert_eq!(turns.iter().filter(|t| t.role == ChatRole::User && t.content == REPROMPT).count(), 1);
}

#[tokio::test]
async fn endless_tool_requests_hit_the_limit() {
    let call = || ChatReply::calls(vec![ToolCallRequest::new("c", "get_cedar_template", json!({"template_id": "rnaseq-v1"}))]);
    let backend = ScriptedBackend::new((0..10).map(|_| call()));
    let limits = AgentLimits {
        max_tool_iterations: 3,
        ..AgentLimits::default()
    };
    let err = run_agent(&legacy("r-001"), &template(), &backend, tools().as_ref(), &limits)
        .await
        .unwrap_err();
    assert_eq!(err.error, AgentError::IterationLimit(3));
}

#[tokio::test]
async fn bad_tool_arguments_are_reported_to_the_model() {
    let backend = ScriptedBackend::new([
        ChatReply::calls(vec![ToolCallRequest::new("c1", "term_search_from_branch", json!({"ontology": "HRAVS"}))]),
        ChatReply::text("{\"organ\": \"lung\"}"),
    ]);
    let out = run_agent(&legacy("r-001"), &template(), &backend, tools().as_ref(), &AgentLimits::default())
        .await
        .unwrap();
    let turns = out.transcript.turns();
    let result = turns.iter().find(|t| t.role == ChatRole::ToolResult).unwrap();
    assert!(result.content.starts_with("error: Invalid arguments"), "{}", result.content);
    assert!(out.result.omitted_fields.contains(&"umi_size".to_string()));
}
