//! Table and JSON rendering of one or more evaluation runs.

use num_rational::Ratio;
use serde_json::{json, Value};

use super::{Category, EvaluationReport, GroupSummary, RecordTally};

pub const POOLED_ROW: &str = "Overall Accuracy";
const GROUP_HEADING: &str = "Group";
const RECORDS_HEADING: &str = "Number of records";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// Tab-separated table: one row per group plus the pooled row, and one
    /// column per run under each of the three categories.
    Table,
    Json,
}

/// Two-decimal rendering with round-half-up on the exact ratio.
pub fn format_ratio(r: Ratio<u64>) -> String {
    let (n, d) = (*r.numer() as u128, *r.denom() as u128);
    let hundredths = (200 * n + d) / (2 * d);
    format!("{}.{:02}", hundredths / 100, hundredths % 100)
}

fn cell(summary: Option<&GroupSummary>, category: Category) -> String {
    summary
        .and_then(|s| s.tallies.get(category).accuracy())
        .map(format_ratio)
        .unwrap_or_else(|| "-".to_string())
}

fn all_groups(runs: &[(&str, &EvaluationReport)]) -> Vec<String> {
    let mut groups: Vec<String> = runs.iter().flat_map(|(_, r)| r.groups()).collect();
    groups.sort();
    groups.dedup();
    groups
}

fn render_table(runs: &[(&str, &EvaluationReport)]) -> String {
    let mut lines = Vec::new();
    let mut head = vec![GROUP_HEADING.to_string(), RECORDS_HEADING.to_string()];
    let mut sub = vec![String::new(), String::new()];
    for category in Category::ALL {
        for (i, (label, _)) in runs.iter().enumerate() {
            head.push(if i == 0 { category.heading().to_string() } else { String::new() });
            sub.push(label.to_string());
        }
    }
    lines.push(head.join("\t"));
    lines.push(sub.join("\t"));

    let mut row = |name: &str, summaries: Vec<Option<GroupSummary>>| {
        let records = summaries.iter().flatten().map(|s| s.records).max().unwrap_or(0);
        let mut cells = vec![name.to_string(), records.to_string()];
        for category in Category::ALL {
            cells.extend(summaries.iter().map(|s| cell(s.as_ref(), category)));
        }
        lines.push(cells.join("\t"));
    };
    for group in all_groups(runs) {
        let summaries = runs
            .iter()
            .map(|(_, r)| r.groups().contains(&group).then(|| r.group(&group)))
            .collect();
        row(&group, summaries);
    }
    row(POOLED_ROW, runs.iter().map(|(_, r)| Some(r.pooled())).collect());
    let mut out = lines.join("\n");
    out.push('\n');
    out
}

fn summary_json(name: &str, s: &GroupSummary) -> Value {
    let [sd_ont, sd_non, sd_all] = s.record_sd;
    json!({
        "group": name,
        "records": s.records,
        "ontology": s.tallies.ontology,
        "non_ontology": s.tallies.non_ontology,
        "all": s.tallies.all(),
        "record_accuracy_sd": {"ontology": sd_ont, "non_ontology": sd_non, "all": sd_all},
    })
}

fn render_json(runs: &[(&str, &EvaluationReport)]) -> String {
    let runs: Vec<Value> = runs
        .iter()
        .map(|(label, report)| {
            let groups: Vec<Value> = report
                .groups()
                .iter()
                .map(|g| summary_json(g, &report.group(g)))
                .collect();
            json!({
                "label": label,
                "groups": groups,
                "pooled": summary_json(POOLED_ROW, &report.pooled()),
                "records": report.records,
            })
        })
        .collect();
    let mut out = serde_json::to_string_pretty(&json!({"runs": runs})).expect("report serializes");
    out.push('\n');
    out
}

/// Renders labelled runs side by side.
pub fn render_report(runs: &[(&str, &EvaluationReport)], format: ReportFormat) -> String {
    match format {
        ReportFormat::Table => render_table(runs),
        ReportFormat::Json => render_json(runs),
    }
}

/// Reads labelled runs back from [`ReportFormat::Json`] output. Summaries are
/// recomputed from the per-record tallies.
pub fn parse_report_json(text: &str) -> Result<Vec<(String, EvaluationReport)>, serde_json::Error> {
    #[derive(serde::Deserialize)]
    struct Run {
        label: String,
        records: Vec<RecordTally>,
    }
    #[derive(serde::Deserialize)]
    struct Doc {
        runs: Vec<Run>,
    }
    let doc: Doc = serde_json::from_str(text)?;
    Ok(doc
        .runs
        .into_iter()
        .map(|run| {
            let mut records = run.records;
            records.sort_by(|a, b| (&a.group, &a.record_id).cmp(&(&b.group, &b.record_id)));
            (run.label, EvaluationReport { records })
        })
        .collect())
}
