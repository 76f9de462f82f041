//! Exact-match scoring of predicted records against gold records.
//!
//! Every field in the union of gold and predicted names is scored once, so a
//! hallucinated field adds to the denominator. Tallies are exact integer
//! counts; accuracies are exact rationals.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::MetadataRecord;
use crate::template::{classify_field, FieldCategory, TemplateSpec, ValueConstraint, ValueKind};

pub use report::{format_ratio, parse_report_json, render_report, ReportFormat, POOLED_ROW};

/// Base URLs treated as the same DOI resolver.
pub const DOI_EQUIVALENT_BASES: &[&str] = &["https://doi.org/", "https://dx.doi.org/"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Correct,
    Incorrect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Cause {
    Match,
    Mismatch,
    MissingInPrediction,
    Hallucinated,
    EmptyMatch,
}

impl Cause {
    pub fn verdict(self) -> Verdict {
        match self {
            Cause::Match | Cause::EmptyMatch => Verdict::Correct,
            _ => Verdict::Incorrect,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldScore {
    pub field: String,
    pub category: FieldCategory,
    pub verdict: Verdict,
    pub cause: Cause,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvaluationError {
    #[error("field `{0}` is absent from both gold and prediction")]
    BothAbsent(String),
}

/// How a field is compared and counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringRule {
    pub category: FieldCategory,
    pub doi: bool,
}

impl ScoringRule {
    /// Rule for a field the template does not declare.
    pub const UNDECLARED: ScoringRule = ScoringRule {
        category: FieldCategory::NonOntologyConstrained,
        doi: false,
    };

    pub fn for_field(template: &TemplateSpec, field: &str) -> Option<ScoringRule> {
        template.field(field).map(|spec| ScoringRule {
            category: classify_field(spec),
            doi: matches!(spec.constraint, ValueConstraint::Typed(ValueKind::DoiUrl)),
        })
    }
}

fn doi_canonical(value: &str) -> &str {
    DOI_EQUIVALENT_BASES
        .iter()
        .find_map(|base| value.strip_prefix(base))
        .unwrap_or(value)
}

fn values_equal(gold: &str, predicted: &str, doi: bool) -> bool {
    if gold == predicted {
        return true;
    }
    if !doi {
        return false;
    }
    let g_url = DOI_EQUIVALENT_BASES.iter().any(|b| gold.starts_with(b));
    let p_url = DOI_EQUIVALENT_BASES.iter().any(|b| predicted.starts_with(b));
    g_url && p_url && doi_canonical(gold) == doi_canonical(predicted)
}

/// Scores one field. `None` means the field name is absent from that record.
pub fn score_field(
    field: &str,
    gold: Option<&str>,
    predicted: Option<&str>,
    rule: ScoringRule,
) -> Result<FieldScore, EvaluationError> {
    let cause = match (gold, predicted) {
        (None, None) => return Err(EvaluationError::BothAbsent(field.to_string())),
        (Some(_), None) => Cause::MissingInPrediction,
        (None, Some(_)) => Cause::Hallucinated,
        (Some(""), Some("")) => Cause::EmptyMatch,
        (Some(g), Some(p)) if values_equal(g, p, rule.doi) => Cause::Match,
        (Some(_), Some(_)) => Cause::Mismatch,
    };
    Ok(FieldScore {
        field: field.to_string(),
        category: rule.category,
        verdict: cause.verdict(),
        cause,
    })
}

/// Scores the union of gold and predicted field names: gold order first,
/// then prediction-only fields in prediction order.
pub fn score_record(
    gold: &MetadataRecord,
    predicted: &MetadataRecord,
    template: &TemplateSpec,
) -> Vec<FieldScore> {
    let mut names: Vec<&str> = gold.field_names().collect();
    names.extend(predicted.field_names().filter(|n| !gold.contains(n)));
    names
        .into_iter()
        .map(|name| {
            let rule = ScoringRule::for_field(template, name).unwrap_or_else(|| {
                tracing::debug!(field = name, "field not in template; scored as non-ontology");
                ScoringRule::UNDECLARED
            });
            score_field(name, gold.get(name), predicted.get(name), rule)
                .expect("field comes from one of the two records")
        })
        .collect()
}

/// Correct-of-total counter.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Tally {
    pub correct: u64,
    pub total: u64,
}

impl Tally {
    pub fn new(correct: u64, total: u64) -> Self {
        assert!(correct <= total, "correct count exceeds total");
        Self { correct, total }
    }

    /// Exact accuracy; `None` for 0/0.
    pub fn accuracy(&self) -> Option<Ratio<u64>> {
        (self.total > 0).then(|| Ratio::new(self.correct, self.total))
    }

    pub fn add(&mut self, correct: bool) {
        self.total += 1;
        if correct {
            self.correct += 1;
        }
    }
}

impl std::ops::Add for Tally {
    type Output = Tally;
    fn add(self, rhs: Tally) -> Tally {
        Tally {
            correct: self.correct + rhs.correct,
            total: self.total + rhs.total,
        }
    }
}

impl std::ops::AddAssign for Tally {
    fn add_assign(&mut self, rhs: Tally) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for Tally {
    fn sum<I: Iterator<Item = Tally>>(iter: I) -> Tally {
        iter.fold(Tally::default(), |a, b| a + b)
    }
}

impl Serialize for Tally {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("Tally", 3)?;
        st.serialize_field("correct", &self.correct)?;
        st.serialize_field("total", &self.total)?;
        let accuracy = self
            .accuracy()
            .map(|r| *r.numer() as f64 / *r.denom() as f64);
        st.serialize_field("accuracy", &accuracy)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for Tally {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            correct: u64,
            total: u64,
        }
        let raw = Raw::deserialize(d)?;
        if raw.correct > raw.total {
            return Err(serde::de::Error::custom("correct count exceeds total"));
        }
        Ok(Tally::new(raw.correct, raw.total))
    }
}

/// Counts for the two field categories; the all-fields count is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTallies {
    pub ontology: Tally,
    pub non_ontology: Tally,
}

impl CategoryTallies {
    pub fn from_scores<'a>(scores: impl IntoIterator<Item = &'a FieldScore>) -> Self {
        let mut t = CategoryTallies::default();
        for s in scores {
            t.record(s);
        }
        t
    }

    pub fn record(&mut self, score: &FieldScore) {
        let correct = score.verdict == Verdict::Correct;
        match score.category {
            FieldCategory::OntologyConstrained => self.ontology.add(correct),
            FieldCategory::NonOntologyConstrained => self.non_ontology.add(correct),
        }
    }

    pub fn all(&self) -> Tally {
        self.ontology + self.non_ontology
    }

    pub fn get(&self, category: Category) -> Tally {
        match category {
            Category::Ontology => self.ontology,
            Category::NonOntology => self.non_ontology,
            Category::All => self.all(),
        }
    }
}

impl std::ops::Add for CategoryTallies {
    type Output = CategoryTallies;
    fn add(self, rhs: Self) -> Self {
        CategoryTallies {
            ontology: self.ontology + rhs.ontology,
            non_ontology: self.non_ontology + rhs.non_ontology,
        }
    }
}

/// The three reported accuracy categories, in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Category {
    Ontology,
    NonOntology,
    All,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Ontology, Category::NonOntology, Category::All];

    pub fn heading(self) -> &'static str {
        match self {
            Category::Ontology => "Ontology-Constrained Field Accuracy",
            Category::NonOntology => "Non-Ontology-Constrained Field Accuracy",
            Category::All => "All Field Accuracy",
        }
    }
}

/// Field scores of one record with its group label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoredRecord {
    pub record_id: String,
    pub group: String,
    pub scores: Vec<FieldScore>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTally {
    pub record_id: String,
    pub group: String,
    pub tallies: CategoryTallies,
}

/// Per-record tallies, kept sorted by (group, record id); every summary is
/// derived from them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<RecordTally>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub records: usize,
    pub tallies: CategoryTallies,
    /// Sample standard deviation of per-record accuracy, per category.
    pub record_sd: [Option<f64>; 3],
}

impl EvaluationReport {
    pub fn groups(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.records.iter().map(|r| r.group.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn group(&self, group: &str) -> GroupSummary {
        summarize(self.records.iter().filter(|r| r.group == group))
    }

    pub fn pooled(&self) -> GroupSummary {
        summarize(self.records.iter())
    }
}

fn summarize<'a>(records: impl Iterator<Item = &'a RecordTally>) -> GroupSummary {
    let records: Vec<&RecordTally> = records.collect();
    let tallies = records
        .iter()
        .fold(CategoryTallies::default(), |acc, r| acc + r.tallies);
    let record_sd = Category::ALL.map(|c| {
        let accs: Vec<f64> = records
            .iter()
            .filter_map(|r| r.tallies.get(c).accuracy())
            .map(|a| *a.numer() as f64 / *a.denom() as f64)
            .collect();
        sample_sd(&accs)
    });
    GroupSummary {
        records: records.len(),
        tallies,
        record_sd,
    }
}

fn sample_sd(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    Some((ss / (n - 1.0)).sqrt())
}

/// Field-pooled aggregation. Input order does not matter.
pub fn aggregate(records: &[ScoredRecord]) -> EvaluationReport {
    let mut by_key: BTreeMap<(String, String), CategoryTallies> = BTreeMap::new();
    for r in records {
        let t = CategoryTallies::from_scores(&r.scores);
        let slot = by_key
            .entry((r.group.clone(), r.record_id.clone()))
            .or_default();
        *slot = *slot + t;
    }
    EvaluationReport {
        records: by_key
            .into_iter()
            .map(|((group, record_id), tallies)| RecordTally {
                record_id,
                group,
                tallies,
            })
            .collect(),
    }
}

/// Gold records paired with predictions by record id. Gold records with no
/// prediction are paired with an empty record, so all their fields count as
/// missing; predictions with no gold record are returned separately.
pub struct PairedRecords<'a> {
    pub pairs: Vec<(&'a MetadataRecord, MetadataRecord)>,
    pub unmatched_predictions: Vec<String>,
}

pub fn pair_records<'a>(
    gold: &'a [MetadataRecord],
    predicted: &[MetadataRecord],
    ignore_fields: &[&str],
) -> PairedRecords<'a> {
    let by_id: BTreeMap<&str, &MetadataRecord> =
        predicted.iter().map(|r| (r.record_id(), r)).collect();
    let strip = |r: &MetadataRecord| {
        let mut r = r.clone();
        for f in ignore_fields {
            r.remove(f);
        }
        r
    };
    let pairs = gold
        .iter()
        .map(|g| {
            let p = by_id
                .get(g.record_id())
                .map(|p| strip(p))
                .unwrap_or_else(|| MetadataRecord::new(g.record_id()));
            (g, p)
        })
        .collect();
    let gold_ids: BTreeSet<&str> = gold.iter().map(|g| g.record_id()).collect();
    let unmatched_predictions = predicted
        .iter()
        .map(|p| p.record_id())
        .filter(|id| !gold_ids.contains(id))
        .map(str::to_string)
        .collect();
    PairedRecords {
        pairs,
        unmatched_predictions,
    }
}

/// Scores paired records. `ignore_fields` (typically the record-id column)
/// are removed from both sides first.
pub fn score_pairs(
    pairs: &[(&MetadataRecord, MetadataRecord)],
    template: &TemplateSpec,
    group: &str,
    ignore_fields: &[&str],
) -> Vec<ScoredRecord> {
    pairs
        .iter()
        .map(|(g, p)| {
            let mut g = (*g).clone();
            for f in ignore_fields {
                g.remove(f);
            }
            ScoredRecord {
                record_id: g.record_id().to_string(),
                group: group.to_string(),
                scores: score_record(&g, p, template),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::FieldSpec;

    const PLAIN: ScoringRule = ScoringRule::UNDECLARED;
    const DOI: ScoringRule = ScoringRule {
        category: FieldCategory::NonOntologyConstrained,
        doi: true,
    };

    fn cause(g: Option<&str>, p: Option<&str>, rule: ScoringRule) -> Cause {
        score_field("f", g, p, rule).unwrap().cause
    }

    #[test]
    fn field_rules() {
        assert_eq!(cause(Some("x"), Some("x"), PLAIN), Cause::Match);
        assert_eq!(cause(Some("single nucleus"), Some("nucleus"), PLAIN), Cause::Mismatch);
        assert_eq!(cause(Some(""), Some(""), PLAIN), Cause::EmptyMatch);
        assert_eq!(cause(Some(""), None, PLAIN), Cause::MissingInPrediction);
        assert_eq!(cause(None, Some(""), PLAIN), Cause::Hallucinated);
        assert_eq!(cause(Some("x"), Some("X"), PLAIN), Cause::Mismatch);
        assert_eq!(cause(Some(""), Some("x"), PLAIN), Cause::Mismatch);
        assert_eq!(
            score_field("f", None, None, PLAIN),
            Err(EvaluationError::BothAbsent("f".into()))
        );
    }

    #[test]
    fn doi_bases_are_equivalent_only_for_doi_fields() {
        let g = Some("https://doi.org/10.1/x");
        let p = Some("https://dx.doi.org/10.1/x");
        assert_eq!(cause(g, p, DOI), Cause::Match);
        assert_eq!(cause(p, g, DOI), Cause::Match);
        assert_eq!(cause(g, p, PLAIN), Cause::Mismatch);
        assert_eq!(cause(g, Some("https://dx.doi.org/10.1/X"), DOI), Cause::Mismatch);
        assert_eq!(cause(g, Some("http://doi.org/10.1/x"), DOI), Cause::Mismatch);
        assert_eq!(cause(g, Some("10.1/x"), DOI), Cause::Mismatch);
    }

    #[test]
    fn record_union_and_categories() {
        let template = TemplateSpec::new(
            "t",
            vec![
                FieldSpec::new("a", ValueConstraint::ontology("X", None)),
                FieldSpec::new("b", ValueConstraint::Typed(ValueKind::FreeText)),
            ],
        )
        .unwrap();
        let gold = MetadataRecord::from_pairs("r", [("a", "x"), ("b", "y")]).unwrap();
        let pred = MetadataRecord::from_pairs("r", [("a", "x"), ("c", "q")]).unwrap();
        let scores = score_record(&gold, &pred, &template);
        let causes: Vec<_> = scores.iter().map(|s| (s.field.as_str(), s.cause)).collect();
        assert_eq!(
            causes,
            [("a", Cause::Match), ("b", Cause::MissingInPrediction), ("c", Cause::Hallucinated)]
        );
        assert_eq!(scores[0].category, FieldCategory::OntologyConstrained);
        assert_eq!(scores[2].category, FieldCategory::NonOntologyConstrained);
        let t = CategoryTallies::from_scores(&scores);
        assert_eq!(t.ontology, Tally::new(1, 1));
        assert_eq!(t.non_ontology, Tally::new(0, 2));
    }

    fn scored(id: &str, group: &str, correct: &[bool]) -> ScoredRecord {
        ScoredRecord {
            record_id: id.into(),
            group: group.into(),
            scores: correct
                .iter()
                .enumerate()
                .map(|(i, c)| FieldScore {
                    field: format!("f{i}"),
                    category: FieldCategory::NonOntologyConstrained,
                    verdict: if *c { Verdict::Correct } else { Verdict::Incorrect },
                    cause: if *c { Cause::Match } else { Cause::Mismatch },
                })
                .collect(),
        }
    }

    #[test]
    fn pooled_is_field_weighted() {
        let report = aggregate(&[scored("1", "A", &[true, true]), scored("2", "B", &[false, false])]);
        assert_eq!(report.pooled().tallies.all().accuracy(), Some(Ratio::new(1, 2)));
        assert_eq!(report.group("A").tallies.all().accuracy(), Some(Ratio::new(1, 1)));
        let single = aggregate(&[scored("1", "A", &[true])]);
        assert_eq!(single.pooled().tallies.all().accuracy(), Some(Ratio::from_integer(1)));
        assert_eq!(single.pooled().tallies.ontology.accuracy(), None);
    }

    #[test]
    fn record_sd_is_sample_sd() {
        let report = aggregate(&[scored("1", "A", &[true]), scored("2", "A", &[false])]);
        let sd = report.group("A").record_sd[2].unwrap();
        assert!((sd - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(report.group("A").record_sd[0], None);
    }

    #[test]
    fn unmatched_gold_counts_every_field_missing() {
        let gold = vec![MetadataRecord::from_pairs("g1", [("record_id", "g1"), ("a", "x")]).unwrap()];
        let pred = vec![MetadataRecord::from_pairs("other", [("a", "x")]).unwrap()];
        let paired = pair_records(&gold, &pred, &["record_id"]);
        assert_eq!(paired.unmatched_predictions, ["other"]);
        let template = TemplateSpec::new("t", vec![]).unwrap();
        let scored = score_pairs(&paired.pairs, &template, "g", &["record_id"]);
        assert_eq!(scored[0].scores.len(), 1);
        assert_eq!(scored[0].scores[0].cause, Cause::MissingInPrediction);
    }
}
