use fraglm::safe::{
    contains_constraint, parse_safe, remove_fragment, substitute_fragment, token_similarity,
    Fragment, SafeMolecule,
};
use fraglm_oracle::safe_gen::{label_text, random_safe};
use proptest::prelude::*;

fn bigram_multiset(m: &SafeMolecule) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for f in m.fragments() {
        let mut seq = vec!["^".to_string()];
        seq.extend(f.tokens().iter().map(|t| t.to_string()));
        seq.push("$".to_string());
        for i in 0..seq.len() - 1 {
            out.push((seq[i].clone(), seq[i + 1].clone()));
        }
    }
    out
}

/// Jaccard by explicit removal of matched elements from a copy.
fn brute_jaccard(a: &[(String, String)], b: &[(String, String)]) -> f64 {
    let mut rest = b.to_vec();
    let mut inter = 0;
    for x in a {
        if let Some(p) = rest.iter().position(|y| y == x) {
            rest.remove(p);
            inter += 1;
        }
    }
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

#[test]
fn brute_force_similarity_oracle() {
    let a = parse_safe("CCO").unwrap();
    let b = parse_safe("CCN").unwrap();
    let oracle = brute_jaccard(&bigram_multiset(&a), &bigram_multiset(&b));
    assert!((token_similarity(&a, &b) - oracle).abs() < 1e-12);
    assert!((oracle - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn documented_scaffolds_parse_with_expected_counts() {
    let linker = parse_safe("[2*]C#C.[14*]OCCOC").unwrap();
    assert_eq!(linker.len(), 2);
    assert!(linker.is_partial());
    let core = parse_safe("[1*]c1cccc(Nc2ncnc3cc([2*])c([3*])cc23)c1").unwrap();
    assert_eq!(core.len(), 1);
    assert_eq!(core.fragments()[0].open_sites().len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn generated_strings_round_trip(seed in any::<u64>()) {
        let text = random_safe(seed);
        let m = parse_safe(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(m.serialize(), text.clone());
        let again = parse_safe(&m.serialize()).unwrap();
        prop_assert_eq!(&again, &m);
        prop_assert_eq!(m.len(), 1 + text.matches('.').count());
        if !m.is_partial() {
            prop_assert!(m.closure_map().values().all(|s| s.len() == 2));
        }
        prop_assert!(contains_constraint(&m, &m));
    }

    #[test]
    fn arbitrary_text_never_panics(s in "[CcNnO()=#\\[\\]*%0-9.lBr@+H-]{0,30}") {
        if let Ok(m) = parse_safe(&s) {
            let text = m.serialize();
            prop_assert_eq!(parse_safe(&text).unwrap().serialize(), text);
        }
    }

    #[test]
    fn similarity_axioms(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = parse_safe(&random_safe(s1)).unwrap();
        let b = parse_safe(&random_safe(s2)).unwrap();
        let ab = token_similarity(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, token_similarity(&b, &a));
        prop_assert_eq!(token_similarity(&a, &a), 1.0);
        let oracle = brute_jaccard(&bigram_multiset(&a), &bigram_multiset(&b));
        prop_assert!((ab - oracle).abs() < 1e-12);
    }

    /// Growing `a` into a superset multiset gives d = |a| / |grown| <= 1.
    #[test]
    fn similarity_monotone_under_growth(s1 in any::<u64>(), s2 in any::<u64>()) {
        let a = parse_safe(&random_safe(s1)).unwrap();
        let extra = parse_safe(&random_safe(s2)).unwrap();
        let mut frags = a.fragments().to_vec();
        // labels in `extra` may collide; keep only closure-free fragments
        frags.extend(extra.fragments().iter().filter(|f| f.closure_labels().is_empty()).cloned());
        let grown = SafeMolecule::from_fragments(frags).unwrap();
        // a ⊆ grown as multisets, so d(a, grown) = |a| / |grown|
        let expected = bigram_multiset(&a).len() as f64 / bigram_multiset(&grown).len() as f64;
        prop_assert!((token_similarity(&a, &grown) - expected).abs() < 1e-12);
        prop_assert!(token_similarity(&a, &grown) <= 1.0);
    }

    #[test]
    fn substitution_is_local(seed in any::<u64>(), pick in any::<prop::sample::Index>()) {
        let m = parse_safe(&random_safe(seed)).unwrap();
        let i = pick.index(m.len());
        let same = substitute_fragment(&m, i, &m.fragments()[i].clone()).unwrap();
        prop_assert_eq!(&same, &m);
        // replace with a minimal fragment carrying the same open sites
        let sites = m.fragments()[i].open_sites();
        let mut text = String::from("O");
        for s in sites {
            match s {
                fraglm::safe::Site::Closure(l) => text.push_str(&label_text(*l)),
                fraglm::safe::Site::Stub(l) => text = format!("[{l}*]{text}"),
            }
        }
        let rep = Fragment::parse(&text).unwrap();
        let r = substitute_fragment(&m, i, &rep).unwrap();
        for (j, f) in r.fragments().iter().enumerate() {
            if j != i {
                prop_assert_eq!(f, &m.fragments()[j]);
            }
        }
        prop_assert_eq!(r.is_partial(), m.is_partial());
        if m.len() > 1 {
            let removed = remove_fragment(&m, i).unwrap();
            prop_assert_eq!(removed.len(), m.len() - 1);
            let cross = m.fragments()[i]
                .open_sites()
                .iter()
                .any(|s| matches!(s, fraglm::safe::Site::Closure(_)));
            if !m.is_partial() {
                prop_assert_eq!(removed.is_partial(), cross);
            }
        }
    }
}
