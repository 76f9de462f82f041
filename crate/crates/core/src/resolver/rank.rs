//! Tiered scoring of terminology candidates against a legacy value.

use std::collections::BTreeSet;

use super::normalize::normalize_text;
use crate::terminology::TermCandidate;

pub const EXACT_LABEL: u8 = 4;
pub const EXACT_SYNONYM: u8 = 3;
pub const LABEL_TOKEN_SET: u8 = 2;
pub const SUBSTRING: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RankOutcome {
    Selected { candidate: TermCandidate, score: u8 },
    /// Several distinct concepts share the top score.
    Tie { score: u8, concepts: Vec<TermCandidate> },
    NoMatch,
}

/// Score of one candidate, 0 to 4. `raw` must already be normalized.
pub fn score_candidate(normalized_raw: &str, candidate: &TermCandidate) -> u8 {
    if normalized_raw.is_empty() {
        return 0;
    }
    let label = normalize_text(&candidate.preferred_label);
    if label == normalized_raw {
        return EXACT_LABEL;
    }
    if candidate
        .synonyms
        .iter()
        .any(|s| normalize_text(s) == normalized_raw)
    {
        return EXACT_SYNONYM;
    }
    let raw_tokens: BTreeSet<&str> = normalized_raw.split(' ').collect();
    let label_tokens: BTreeSet<&str> = label.split(' ').collect();
    if raw_tokens == label_tokens {
        return LABEL_TOKEN_SET;
    }
    if !label.is_empty() && (label.contains(normalized_raw) || normalized_raw.contains(&label)) {
        return SUBSTRING;
    }
    0
}

pub fn rank_candidates(raw: &str, candidates: &[TermCandidate]) -> RankOutcome {
    let normalized = normalize_text(raw);
    let scored: Vec<(u8, &TermCandidate)> = candidates
        .iter()
        .map(|c| (score_candidate(&normalized, c), c))
        .collect();
    let best = scored.iter().map(|(s, _)| *s).max().unwrap_or(0);
    if best == 0 {
        return RankOutcome::NoMatch;
    }
    let mut seen = BTreeSet::new();
    let top: Vec<TermCandidate> = scored
        .iter()
        .filter(|(s, c)| *s == best && seen.insert(c.concept_iri.as_str()))
        .map(|(_, c)| (*c).clone())
        .collect();
    match <[TermCandidate; 1]>::try_from(top) {
        Ok([candidate]) => RankOutcome::Selected {
            candidate,
            score: best,
        },
        Err(concepts) => RankOutcome::Tie {
            score: best,
            concepts,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(label: &str, iri: &str, synonyms: &[&str]) -> TermCandidate {
        TermCandidate {
            preferred_label: label.into(),
            concept_iri: iri.into(),
            ontology_acronym: "HRAVS".into(),
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn tiers_match_the_rules() {
        let n = normalize_text;
        assert_eq!(score_candidate(&n("Single  Nucleus"), &cand("single nucleus", "1", &[])), 4);
        assert_eq!(score_candidate(&n("snRNA"), &cand("single nucleus", "1", &["SNRNA"])), 3);
        assert_eq!(score_candidate(&n("nucleus single"), &cand("single nucleus", "1", &[])), 2);
        assert_eq!(score_candidate(&n("nucleus"), &cand("single nucleus", "1", &[])), 1);
        assert_eq!(score_candidate(&n("single nucleus rna"), &cand("single nucleus", "1", &[])), 1);
        assert_eq!(score_candidate(&n("lipids"), &cand("Lipid", "1", &[])), 1);
        assert_eq!(score_candidate(&n("AxioScan.Z1"), &cand("Axio Scan.Z1", "1", &[])), 0);
    }

    #[test]
    fn exact_label_wins_over_partial() {
        let out = rank_candidates(
            "single nucleus",
            &[cand("single cell", "c", &[]), cand("single nucleus", "n", &[])],
        );
        assert_eq!(
            out,
            RankOutcome::Selected {
                candidate: cand("single nucleus", "n", &[]),
                score: 4
            }
        );
    }

    #[test]
    fn empty_candidates_is_no_match() {
        assert_eq!(rank_candidates("lipids", &[]), RankOutcome::NoMatch);
        assert_eq!(
            rank_candidates("lipids", &[cand("protein", "p", &[])]),
            RankOutcome::NoMatch
        );
    }

    #[test]
    fn equal_top_scores_with_distinct_concepts_tie() {
        let out = rank_candidates("lung", &[cand("lung", "a", &[]), cand("Lung", "b", &[])]);
        assert!(matches!(out, RankOutcome::Tie { score: 4, ref concepts } if concepts.len() == 2));
    }

    #[test]
    fn repeated_concept_is_not_a_tie() {
        let out = rank_candidates("lung", &[cand("lung", "a", &[]), cand("lung", "a", &[])]);
        assert!(matches!(out, RankOutcome::Selected { score: 4, .. }));
    }

    #[test]
    fn candidate_order_never_breaks_ties() {
        let a = cand("left lung", "a", &[]);
        let b = cand("right lung", "b", &[]);
        let fwd = rank_candidates("lung", &[a.clone(), b.clone()]);
        let rev = rank_candidates("lung", &[b, a]);
        assert!(matches!(fwd, RankOutcome::Tie { .. }));
        assert!(matches!(rev, RankOutcome::Tie { .. }));
    }
}
