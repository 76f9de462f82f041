//! Legacy-field to template-field mapping by name similarity tiers.
//!
//! Tiers, strongest first: exact name; same tokens in the same order once
//! case and separators (`_`, `-`, space, `.`) are ignored; same token set.
//! There is no fuzzy tier, so a longer near-miss name such as
//! `section_prep_protocols_io_doi` never maps onto `protocols_io_doi`.

use std::collections::{BTreeSet, HashMap};

use crate::record::MetadataRecord;
use crate::template::TemplateSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatchTier {
    TokenSet = 1,
    Normalized = 2,
    Exact = 3,
}

/// Result of mapping one template field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldMapping {
    pub template_field: String,
    pub legacy_field: Option<String>,
    pub tier: Option<MatchTier>,
    pub diagnostic: Option<String>,
}

/// Mapping for every template field (template order) plus the legacy fields
/// left unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LegacyMapping {
    pub fields: Vec<FieldMapping>,
    pub unused_legacy: Vec<String>,
}

impl LegacyMapping {
    pub fn legacy_for(&self, template_field: &str) -> Option<&str> {
        self.fields
            .iter()
            .find(|m| m.template_field == template_field)
            .and_then(|m| m.legacy_field.as_deref())
    }
}

fn tokens(name: &str) -> Vec<String> {
    name.split(['_', '-', ' ', '.'])
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn match_tier(template_field: &str, legacy_field: &str) -> Option<MatchTier> {
    if template_field == legacy_field {
        return Some(MatchTier::Exact);
    }
    let a = tokens(template_field);
    let b = tokens(legacy_field);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    if a == b {
        return Some(MatchTier::Normalized);
    }
    let sa: BTreeSet<&String> = a.iter().collect();
    let sb: BTreeSet<&String> = b.iter().collect();
    (sa == sb).then_some(MatchTier::TokenSet)
}

pub fn map_legacy_fields(record: &MetadataRecord, template: &TemplateSpec) -> LegacyMapping {
    let template_names: Vec<&str> = template.field_names().collect();
    let legacy_names: Vec<&str> = record.field_names().collect();
    map_legacy_names(&legacy_names, &template_names)
}

/// Same as [`map_legacy_fields`] over bare name lists.
pub fn map_legacy_names(legacy_names: &[&str], template_names: &[&str]) -> LegacyMapping {
    let mut assigned: Vec<Option<(usize, MatchTier)>> = vec![None; template_names.len()];
    let mut settled = vec![false; template_names.len()];
    let mut diagnostics: Vec<Option<String>> = vec![None; template_names.len()];
    let mut legacy_used = vec![false; legacy_names.len()];

    for tier in [MatchTier::Exact, MatchTier::Normalized, MatchTier::TokenSet] {
        // Candidates at this tier among fields and legacy names still open.
        let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); template_names.len()];
        let mut claimants: HashMap<usize, Vec<usize>> = HashMap::new();
        for (ti, tname) in template_names.iter().enumerate() {
            if settled[ti] {
                continue;
            }
            for (li, lname) in legacy_names.iter().enumerate() {
                if !legacy_used[li] && match_tier(tname, lname) == Some(tier) {
                    candidates[ti].push(li);
                    claimants.entry(li).or_default().push(ti);
                }
            }
        }
        for ti in 0..template_names.len() {
            match candidates[ti].as_slice() {
                [] => {}
                [li] if claimants[li].len() == 1 => {
                    assigned[ti] = Some((*li, tier));
                    settled[ti] = true;
                    legacy_used[*li] = true;
                }
                [li] => {
                    let others: Vec<&str> = claimants[li]
                        .iter()
                        .filter(|&&o| o != ti)
                        .map(|&o| template_names[o])
                        .collect();
                    diagnostics[ti] = Some(format!(
                        "legacy field `{}` matches several template fields ({}); left unmapped",
                        legacy_names[*li],
                        others.join(", ")
                    ));
                    settled[ti] = true;
                }
                many => {
                    let names: Vec<&str> = many.iter().map(|&li| legacy_names[li]).collect();
                    diagnostics[ti] = Some(format!(
                        "ambiguous legacy fields ({}); left unmapped",
                        names.join(", ")
                    ));
                    settled[ti] = true;
                }
            }
        }
        // Legacy names involved in an ambiguity are not offered to weaker tiers.
        for (li, owners) in &claimants {
            if owners.len() > 1 || owners.iter().any(|&ti| candidates[ti].len() > 1) {
                legacy_used[*li] = true;
            }
        }
    }

    let fields = template_names
        .iter()
        .enumerate()
        .map(|(ti, name)| FieldMapping {
            template_field: name.to_string(),
            legacy_field: assigned[ti].map(|(li, _)| legacy_names[li].to_string()),
            tier: assigned[ti].map(|(_, t)| t),
            diagnostic: diagnostics[ti].take(),
        })
        .collect();
    let used: BTreeSet<&str> = assigned
        .iter()
        .flatten()
        .map(|(li, _)| legacy_names[*li])
        .collect();
    let unused_legacy = legacy_names
        .iter()
        .filter(|n| !used.contains(*n))
        .map(|n| n.to_string())
        .collect();
    LegacyMapping {
        fields,
        unused_legacy,
    }
}
