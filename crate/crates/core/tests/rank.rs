//! Candidate ranking checked against a brute-force tier computation.

use metastd::resolver::{rank_candidates, RankOutcome};
use metastd::TermCandidate;
use proptest::prelude::*;

fn norm(s: &str) -> String {
    let mut out = String::new();
    let mut gap = false;
    for ch in s.trim().chars() {
        if ch.is_whitespace() {
            gap = true;
            continue;
        }
        if gap && !out.is_empty() {
            out.push(' ');
        }
        gap = false;
        out.extend(ch.to_lowercase());
    }
    out
}

fn tier(raw: &str, c: &TermCandidate) -> u8 {
    let r = norm(raw);
    let l = norm(&c.preferred_label);
    if r.is_empty() {
        return 0;
    }
    if r == l {
        return 4;
    }
    if c.synonyms.iter().any(|s| norm(s) == r) {
        return 3;
    }
    let mut rt: Vec<&str> = r.split(' ').collect();
    let mut lt: Vec<&str> = l.split(' ').collect();
    rt.sort();
    rt.dedup();
    lt.sort();
    lt.dedup();
    if rt == lt {
        return 2;
    }
    if !l.is_empty() && (l.contains(&r) || r.contains(&l)) {
        return 1;
    }
    0
}

const WORDS: &[&str] = &["lung", "Lung", "left", "single", "cell", "nucleus", "RNA", "rna", "seq"];

fn phrase() -> impl Strategy<Value = String> {
    proptest::collection::vec(proptest::sample::select(WORDS.to_vec()), 1..4)
        .prop_flat_map(|w| (Just(w), proptest::sample::select(vec![" ", "  ", "\t"])))
        .prop_map(|(w, sep)| w.join(sep))
}

fn candidate() -> impl Strategy<Value = TermCandidate> {
    (phrase(), proptest::collection::vec(phrase(), 0..2), 0u8..4).prop_map(|(label, synonyms, iri)| TermCandidate {
        preferred_label: label,
        concept_iri: format!("x:{iri}"),
        ontology_acronym: "X".into(),
        synonyms,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn matches_brute_force(
        raw in prop_oneof![phrase(), Just(String::new()), Just("   ".to_string())],
        cands in proptest::collection::vec(candidate(), 0..6),
    ) {
        let best = cands.iter().map(|c| tier(&raw, c)).max().unwrap_or(0);
        let mut top: Vec<&TermCandidate> = cands.iter().filter(|c| tier(&raw, c) == best).collect();
        let mut iris: Vec<&str> = top.iter().map(|c| c.concept_iri.as_str()).collect();
        iris.sort();
        iris.dedup();
        match rank_candidates(&raw, &cands) {
            RankOutcome::NoMatch => prop_assert_eq!(best, 0),
            RankOutcome::Selected { candidate, score } => {
                prop_assert!(best > 0);
                prop_assert_eq!(score, best);
                prop_assert_eq!(iris.len(), 1);
                prop_assert_eq!(&candidate, top.remove(0));
            }
            RankOutcome::Tie { score, concepts } => {
                prop_assert!(best > 0);
                prop_assert_eq!(score, best);
                let mut got: Vec<&str> = concepts.iter().map(|c| c.concept_iri.as_str()).collect();
                got.sort();
                prop_assert_eq!(got, iris);
            }
        }
    }
}
