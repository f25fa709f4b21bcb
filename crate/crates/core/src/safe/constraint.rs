use std::collections::HashMap;

use super::{Fragment, Lexeme, SafeMolecule};

/// Exact-lexeme match of `pattern` against `target`, where each stub in the
/// pattern matches itself or any non-empty, parenthesis-balanced run of
/// target lexemes.
pub fn fragment_matches(target: &Fragment, pattern: &Fragment) -> bool {
    let (t, p) = (target.tokens(), pattern.tokens());
    // reach[j] = pattern prefix of length i can consume target prefix of length j
    let mut reach = vec![false; t.len() + 1];
    reach[0] = true;
    for pl in p {
        let mut next = vec![false; t.len() + 1];
        for j in 0..=t.len() {
            if !reach[j] {
                continue;
            }
            if let Lexeme::Stub { .. } = pl {
                let mut depth = 0i32;
                for (k, tl) in t.iter().enumerate().skip(j) {
                    match tl {
                        Lexeme::BranchOpen => depth += 1,
                        Lexeme::BranchClose => depth -= 1,
                        _ => {}
                    }
                    if depth < 0 {
                        break;
                    }
                    if depth == 0 {
                        next[k + 1] = true;
                    }
                }
            } else if j < t.len() && &t[j] == pl {
                next[j + 1] = true;
            }
        }
        reach = next;
    }
    reach[t.len()]
}

/// True when every scaffold fragment matches a distinct fragment of `mol`.
pub fn contains_constraint(mol: &SafeMolecule, scaffold: &SafeMolecule) -> bool {
    let (mf, sf) = (mol.fragments(), scaffold.fragments());
    if sf.len() > mf.len() {
        return false;
    }
    let adj: Vec<Vec<usize>> = sf
        .iter()
        .map(|s| {
            (0..mf.len())
                .filter(|&j| fragment_matches(&mf[j], s))
                .collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; mf.len()];
    fn augment(
        i: usize,
        adj: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if owner[j].is_none_or(|o| augment(o, adj, owner, seen)) {
                owner[j] = Some(i);
                return true;
            }
        }
        false
    }
    (0..sf.len()).all(|i| augment(i, &adj, &mut owner, &mut vec![false; mf.len()]))
}

fn bigrams(mol: &SafeMolecule) -> HashMap<(String, String), usize> {
    let mut out = HashMap::new();
    for frag in mol.fragments() {
        let seq: Vec<String> = std::iter::once("^".to_string())
            .chain(frag.tokens().iter().map(ToString::to_string))
            .chain(std::iter::once("$".to_string()))
            .collect();
        for w in seq.windows(2) {
            *out.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
        }
    }
    out
}

/// Multiset Jaccard over per-fragment lexeme bigrams, each fragment padded
/// with start and end markers.
pub fn token_similarity(a: &SafeMolecule, b: &SafeMolecule) -> f64 {
    let (ba, bb) = (bigrams(a), bigrams(b));
    let (mut inter, mut union) = (0usize, 0usize);
    for (k, &ca) in &ba {
        let cb = bb.get(k).copied().unwrap_or(0);
        inter += ca.min(cb);
        union += ca.max(cb);
    }
    union += bb
        .iter()
        .filter(|(k, _)| !ba.contains_key(*k))
        .map(|(_, &c)| c)
        .sum::<usize>();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
