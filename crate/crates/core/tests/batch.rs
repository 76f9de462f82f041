use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use metastd::batch::{run_batch, BackendSpec, RecordStatus, RunConfig, RunMode, TemplateSource, MANIFEST_FILE, TRANSCRIPT_FILE};
use metastd::record::{load_records, ParseOptions};
use serde_json::Value;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn config(mode: RunMode, out: &Path) -> RunConfig {
    let mut c = RunConfig::new(
        mode,
        TemplateSource::Id("rnaseq-v1".into()),
        fixtures().join("records/legacy.tsv"),
        out,
    );
    c.mock_fixtures = Some(fixtures().join("mock"));
    c.parallelism = 3;
    c
}

/// Record files in an output directory, keyed by name.
fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

fn output_record(dir: &Path, id: &str) -> Value {
    serde_json::from_slice(&std::fs::read(dir.join(format!("{id}.json"))).unwrap()).unwrap()
}

#[tokio::test]
async fn deterministic_run_writes_records_sidecars_and_manifest() {
    let out = tempfile::tempdir().unwrap();
    let summary = run_batch(&config(RunMode::Deterministic, out.path())).await.unwrap();
    assert_eq!(summary.count(RecordStatus::Ok), 6);
    let files = outputs(out.path());
    assert_eq!(files.len(), 12);
    assert!(files.contains_key("r-003.review.json"));

    let manifest = std::fs::read_to_string(out.path().join(MANIFEST_FILE)).unwrap();
    let lines: Vec<Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[0]["kind"], "config");
    assert_eq!(lines[0]["template_id"], "rnaseq-v1");
    let ids: Vec<&str> = lines[1..].iter().map(|l| l["record_id"].as_str().unwrap()).collect();
    assert_eq!(ids, ["r-001", "r-002", "r-003", "r-004", "r-005", "r-006"]);
    assert!(!out.path().join(TRANSCRIPT_FILE).exists());

    let r3 = output_record(out.path(), "r-003");
    assert_eq!(r3["analyte_class"], "lipids");
    assert_eq!(r3["acquisition_instrument_model"], "Illumina");
    assert_eq!(r3["is_targeted"], "Yes");
    assert_eq!(r3["protocols_io_doi"], "https://doi.org/10.17504/protocols.io.z9y8");
    assert_eq!(r3["preparation_protocol_doi"], "");
    let review: Value =
        serde_json::from_slice(&std::fs::read(out.path().join("r-003.review.json")).unwrap()).unwrap();
    let flagged: Vec<&str> = review["flagged"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["field"].as_str().unwrap())
        .collect();
    assert_eq!(flagged, ["analyte_class", "acquisition_instrument_model"]);
}

#[tokio::test]
async fn scripted_agent_is_repeatable_and_offline() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for dir in [&a, &b] {
        let mut c = config(RunMode::Agent, dir.path());
        c.backend = Some(BackendSpec::Scripted(fixtures().join("agent")));
        let summary = run_batch(&c).await.unwrap();
        assert_eq!(summary.count(RecordStatus::Ok), 6, "{:?}", summary.entries);
        assert!(summary.entries.iter().all(|e| e.tool_calls >= 3));
    }
    assert_eq!(outputs(a.path()), outputs(b.path()));

    let r3 = output_record(a.path(), "r-003");
    assert_eq!(r3["analyte_class"], "lipids");
    assert_eq!(r3["umi_size"], "12");
    let transcripts = std::fs::read_to_string(a.path().join(TRANSCRIPT_FILE)).unwrap();
    assert!(transcripts.lines().count() >= 6 * 4);
}

#[tokio::test]
async fn baseline_makes_no_tool_calls() {
    let out = tempfile::tempdir().unwrap();
    let mut c = config(RunMode::Baseline, out.path());
    c.backend = Some(BackendSpec::Scripted(fixtures().join("baseline")));
    let summary = run_batch(&c).await.unwrap();
    assert_eq!(summary.count(RecordStatus::Ok), 6);
    assert!(summary.entries.iter().all(|e| e.tool_calls == 0));
    assert_eq!(summary.upstream_calls, Some(0));
}

#[tokio::test]
async fn missing_script_fails_only_that_record() {
    let scripts = tempfile::tempdir().unwrap();
    for id in ["r-001", "r-002"] {
        std::fs::copy(
            fixtures().join(format!("agent/{id}.json")),
            scripts.path().join(format!("{id}.json")),
        )
        .unwrap();
    }
    let out = tempfile::tempdir().unwrap();
    let mut c = config(RunMode::Agent, out.path());
    c.backend = Some(BackendSpec::Scripted(scripts.path().to_path_buf()));
    let summary = run_batch(&c).await.unwrap();
    assert_eq!(summary.count(RecordStatus::Ok), 2);
    assert_eq!(summary.count(RecordStatus::Error), 4);
}

#[tokio::test]
async fn skip_existing_leaves_outputs_alone() {
    let out = tempfile::tempdir().unwrap();
    run_batch(&config(RunMode::Deterministic, out.path())).await.unwrap();
    std::fs::write(out.path().join("r-001.json"), "{\"kept\":\"yes\"}\n").unwrap();
    let mut c = config(RunMode::Deterministic, out.path());
    c.skip_existing = true;
    let summary = run_batch(&c).await.unwrap();
    assert_eq!(summary.count(RecordStatus::Skipped), 6);
    assert_eq!(std::fs::read_to_string(out.path().join("r-001.json")).unwrap(), "{\"kept\":\"yes\"}\n");
    let manifest = std::fs::read_to_string(out.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.lines().count(), 14);
}

#[tokio::test]
async fn duplicate_ids_abort_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("dup.tsv");
    std::fs::write(&input, "record_id\torgan\nx\tlung\nx\theart\n").unwrap();
    let mut c = config(RunMode::Deterministic, &dir.path().join("out"));
    c.input = input;
    let err = run_batch(&c).await.unwrap_err();
    assert!(err.to_string().contains("duplicate record id"), "{err}");
}

#[tokio::test]
async fn output_directory_reloads_as_records() {
    let out = tempfile::tempdir().unwrap();
    run_batch(&config(RunMode::Deterministic, out.path())).await.unwrap();
    let loaded = load_records(out.path(), &ParseOptions::default()).unwrap();
    let ids: Vec<String> = loaded.into_iter().map(|r| r.unwrap().record_id().to_string()).collect();
    assert_eq!(ids, ["r-001", "r-002", "r-003", "r-004", "r-005", "r-006"]);
}

#[tokio::test]
async fn sampling_picks_a_seeded_subset() {
    let out = tempfile::tempdir().unwrap();
    let mut c = config(RunMode::Deterministic, out.path());
    c.sample = Some(2);
    c.seed = 11;
    let first = run_batch(&c).await.unwrap();
    assert_eq!(first.entries.len(), 2);
    let out2 = tempfile::tempdir().unwrap();
    c.out = out2.path().to_path_buf();
    let second = run_batch(&c).await.unwrap();
    let ids = |s: &metastd::batch::BatchSummary| s.entries.iter().map(|e| e.record_id.clone()).collect::<Vec<_>>();
    assert_eq!(ids(&first), ids(&second));
}
