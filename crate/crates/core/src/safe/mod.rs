//! SAFE fragment strings: parsing, closure bookkeeping and fragment algebra.
//!
//! A SAFE string is a `.`-separated list of fragments written in a SMILES
//! subset. Inter-fragment bonds are closure labels shared between fragments;
//! `[n*]` stubs mark open attachment sites of partial scaffolds. Validity here
//! means grammar plus closure validity, no valence or aromaticity checks.

mod constraint;
mod lexer;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use constraint::{contains_constraint, fragment_matches, token_similarity};
use lexer::{lex, Item};
pub use lexer::{lex_fragment, Lexeme};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SafeError {
    #[error("empty input")]
    Empty,
    #[error("illegal character {ch:?} at byte {pos}")]
    Lex { pos: usize, ch: char },
    #[error("unterminated bracket atom starting at byte {pos}")]
    UnterminatedBracket { pos: usize },
    #[error("invalid bracket atom [{content}] at byte {pos}")]
    InvalidBracketAtom { pos: usize, content: String },
    #[error("unbalanced branch parentheses in fragment {fragment}")]
    UnbalancedBranch { fragment: usize },
    #[error("closure label {label} used more than twice")]
    TripledClosureLabel { label: u16 },
    #[error("fragment {fragment} is empty")]
    EmptyFragment { fragment: usize },
    #[error("syntax error at byte {pos}: {msg}")]
    Grammar { pos: usize, msg: &'static str },
    #[error("fragment index {index} out of range for {len} fragments")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("open sites differ: expected {expected:?}, found {found:?}")]
    SiteMismatch {
        expected: Vec<Site>,
        found: Vec<Site>,
    },
    #[error("cannot remove the only fragment")]
    CannotRemoveLast,
}

/// An attachment point left open by a fragment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    /// Closure label with a single occurrence inside the fragment.
    Closure(u16),
    /// `[n*]` stub.
    Stub(u16),
}

/// Position of one closure-label occurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SiteRef {
    pub fragment: usize,
    pub position: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Fragment {
    tokens: Vec<Lexeme>,
    open_sites: Vec<Site>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Prev {
    Start,
    Atom,
    Closure,
    Bond { after_open: bool },
    Open,
    Close,
}

/// Checks the chain grammar of a single fragment. `offsets` are byte offsets
/// used for error positions.
fn check_grammar(tokens: &[Lexeme], offsets: &[usize], fragment: usize) -> Result<(), SafeError> {
    let mut depth = 0usize;
    let mut prev = Prev::Start;
    for (tok, &pos) in tokens.iter().zip(offsets) {
        let err = |msg| Err(SafeError::Grammar { pos, msg });
        prev = match tok {
            Lexeme::Atom(_) | Lexeme::Stub { .. } => Prev::Atom,
            Lexeme::Closure { .. } => match prev {
                Prev::Atom | Prev::Closure | Prev::Bond { after_open: false } => Prev::Closure,
                _ => return err("closure label must follow an atom"),
            },
            Lexeme::Bond(_) => match prev {
                Prev::Atom | Prev::Closure | Prev::Close => Prev::Bond { after_open: false },
                Prev::Open => Prev::Bond { after_open: true },
                _ => return err("bond must follow an atom"),
            },
            Lexeme::BranchOpen => match prev {
                Prev::Atom | Prev::Closure | Prev::Close => {
                    depth += 1;
                    Prev::Open
                }
                _ => return err("branch must follow an atom"),
            },
            Lexeme::BranchClose => {
                if depth == 0 {
                    return Err(SafeError::UnbalancedBranch { fragment });
                }
                match prev {
                    Prev::Atom | Prev::Closure | Prev::Close => {
                        depth -= 1;
                        Prev::Close
                    }
                    _ => return err("empty or dangling branch"),
                }
            }
        };
    }
    if depth != 0 {
        return Err(SafeError::UnbalancedBranch { fragment });
    }
    match prev {
        Prev::Bond { .. } | Prev::Open => Err(SafeError::Grammar {
            pos: offsets.last().copied().unwrap_or(0),
            msg: "fragment ends with a dangling bond or branch",
        }),
        Prev::Start => Err(SafeError::EmptyFragment { fragment }),
        _ => Ok(()),
    }
}

impl Fragment {
    fn from_checked(tokens: Vec<Lexeme>) -> Self {
        let mut counts: BTreeMap<u16, usize> = BTreeMap::new();
        let mut stubs = Vec::new();
        for t in &tokens {
            match t {
                Lexeme::Closure { label, .. } => *counts.entry(*label).or_default() += 1,
                Lexeme::Stub { label, .. } => stubs.push(Site::Stub(*label)),
                _ => {}
            }
        }
        let mut open_sites: Vec<Site> = counts
            .into_iter()
            .filter(|&(_, n)| n == 1)
            .map(|(l, _)| Site::Closure(l))
            .collect();
        open_sites.extend(stubs);
        open_sites.sort();
        Self { tokens, open_sites }
    }

    /// Builds a fragment from lexemes, validating the chain grammar.
    pub fn new(tokens: Vec<Lexeme>) -> Result<Self, SafeError> {
        if tokens.is_empty() {
            return Err(SafeError::EmptyFragment { fragment: 0 });
        }
        let offsets: Vec<usize> = (0..tokens.len()).collect();
        check_grammar(&tokens, &offsets, 0)?;
        Ok(Self::from_checked(tokens))
    }

    pub fn parse(text: &str) -> Result<Self, SafeError> {
        if text.is_empty() {
            return Err(SafeError::Empty);
        }
        Self::new(lex_fragment(text)?)
    }

    pub fn tokens(&self) -> &[Lexeme] {
        &self.tokens
    }

    /// Sorted open attachment sites (unpaired closures and stubs).
    pub fn open_sites(&self) -> &[Site] {
        &self.open_sites
    }

    pub fn text(&self) -> String {
        self.tokens.iter().map(ToString::to_string).collect()
    }

    pub fn closure_labels(&self) -> BTreeSet<u16> {
        self.tokens
            .iter()
            .filter_map(|t| match t {
                Lexeme::Closure { label, .. } => Some(*label),
                _ => None,
            })
            .collect()
    }

    /// Renames labels that are closed inside this fragment (rings) so they do
    /// not collide with `used`. Open sites keep their labels.
    pub fn relabel_internal(&self, used: &BTreeSet<u16>) -> Self {
        let internal: Vec<u16> = self
            .closure_labels()
            .into_iter()
            .filter(|l| !self.open_sites.contains(&Site::Closure(*l)))
            .collect();
        let mut taken: BTreeSet<u16> = used.union(&self.closure_labels()).copied().collect();
        let mut mapping = BTreeMap::new();
        for l in internal {
            if used.contains(&l) {
                let fresh = (1..100).find(|c| !taken.contains(c)).unwrap_or(99);
                taken.insert(fresh);
                mapping.insert(l, fresh);
            }
        }
        if mapping.is_empty() {
            return self.clone();
        }
        let tokens = self
            .tokens
            .iter()
            .map(|t| match t {
                Lexeme::Closure { label, .. } if mapping.contains_key(label) => {
                    Lexeme::closure(mapping[label])
                }
                other => other.clone(),
            })
            .collect();
        Self::from_checked(tokens)
    }
}

impl fmt::Display for Fragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tokens {
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for Fragment {
    type Err = SafeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}

/// A parsed SAFE string.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SafeMolecule {
    fragments: Vec<Fragment>,
    closure_map: BTreeMap<u16, Vec<SiteRef>>,
    source_text: String,
    partial: bool,
}

impl SafeMolecule {
    /// Assembles a molecule from fragments, rebuilding the closure map.
    pub fn from_fragments(fragments: Vec<Fragment>) -> Result<Self, SafeError> {
        if fragments.is_empty() {
            return Err(SafeError::Empty);
        }
        let mut closure_map: BTreeMap<u16, Vec<SiteRef>> = BTreeMap::new();
        let mut has_stub = false;
        for (fi, frag) in fragments.iter().enumerate() {
            for (pi, tok) in frag.tokens.iter().enumerate() {
                match tok {
                    Lexeme::Closure { label, .. } => {
                        let sites = closure_map.entry(*label).or_default();
                        if sites.len() == 2 {
                            return Err(SafeError::TripledClosureLabel { label: *label });
                        }
                        sites.push(SiteRef {
                            fragment: fi,
                            position: pi,
                        });
                    }
                    Lexeme::Stub { .. } => has_stub = true,
                    _ => {}
                }
            }
        }
        let partial = has_stub || closure_map.values().any(|s| s.len() != 2);
        let source_text = fragments
            .iter()
            .map(Fragment::text)
            .collect::<Vec<_>>()
            .join(".");
        Ok(Self {
            fragments,
            closure_map,
            source_text,
            partial,
        })
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn len(&self) -> usize {
        self.fragments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fragments.is_empty()
    }

    pub fn closure_map(&self) -> &BTreeMap<u16, Vec<SiteRef>> {
        &self.closure_map
    }

    pub fn source_text(&self) -> &str {
        &self.source_text
    }

    /// True when any stub or unpaired closure label remains.
    pub fn is_partial(&self) -> bool {
        self.partial
    }

    pub fn serialize(&self) -> String {
        self.source_text.clone()
    }

    /// Total lexeme count, excluding separators.
    pub fn lexeme_count(&self) -> usize {
        self.fragments.iter().map(|f| f.tokens.len()).sum()
    }

    /// Molecule with fragments reordered by `order` (a permutation of indices).
    pub fn permuted(&self, order: &[usize]) -> Result<Self, SafeError> {
        let mut seen = vec![false; self.fragments.len()];
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(SafeError::IndexOutOfRange {
                    index: i,
                    len: self.fragments.len(),
                });
            }
        }
        if order.len() != self.fragments.len() {
            return Err(SafeError::IndexOutOfRange {
                index: order.len(),
                len: self.fragments.len(),
            });
        }
        Self::from_fragments(order.iter().map(|&i| self.fragments[i].clone()).collect())
    }
}

impl fmt::Display for SafeMolecule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.source_text)
    }
}

impl FromStr for SafeMolecule {
    type Err = SafeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_safe(s)
    }
}

/// Serialized as its SAFE string.
impl serde::Serialize for SafeMolecule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.serialize())
    }
}

impl<'de> serde::Deserialize<'de> for SafeMolecule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_safe(&text).map_err(serde::de::Error::custom)
    }
}

pub fn parse_safe(text: &str) -> Result<SafeMolecule, SafeError> {
    if text.is_empty() {
        return Err(SafeError::Empty);
    }
    let items = lex(text)?;
    let mut fragments = Vec::new();
    let mut tokens = Vec::new();
    let mut offsets = Vec::new();
    let flush =
        |tokens: &mut Vec<Lexeme>, offsets: &mut Vec<usize>, fragments: &mut Vec<Fragment>| {
            let idx = fragments.len();
            if tokens.is_empty() {
                return Err(SafeError::EmptyFragment { fragment: idx });
            }
            check_grammar(tokens, offsets, idx)?;
            fragments.push(Fragment::from_checked(std::mem::take(tokens)));
            offsets.clear();
            Ok(())
        };
    for (pos, item) in items {
        match item {
            Item::Dot => flush(&mut tokens, &mut offsets, &mut fragments)?,
            Item::Lex(l) => {
                tokens.push(l);
                offsets.push(pos);
            }
        }
    }
    flush(&mut tokens, &mut offsets, &mut fragments)?;
    let mol = SafeMolecule::from_fragments(fragments)?;
    debug_assert_eq!(mol.source_text, text);
    Ok(mol)
}

pub fn split_fragments(mol: &SafeMolecule) -> Vec<Fragment> {
    mol.fragments.clone()
}

/// Replaces fragment `index`; the replacement must expose the same open sites.
/// Ring labels internal to the replacement are renamed if they collide with
/// labels used by the remaining fragments.
pub fn substitute_fragment(
    mol: &SafeMolecule,
    index: usize,
    replacement: &Fragment,
) -> Result<SafeMolecule, SafeError> {
    let len = mol.fragments.len();
    let old = mol
        .fragments
        .get(index)
        .ok_or(SafeError::IndexOutOfRange { index, len })?;
    if old.open_sites != replacement.open_sites {
        return Err(SafeError::SiteMismatch {
            expected: old.open_sites.clone(),
            found: replacement.open_sites.clone(),
        });
    }
    let used: BTreeSet<u16> = mol
        .fragments
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != index)
        .flat_map(|(_, f)| f.closure_labels())
        .collect();
    let mut fragments = mol.fragments.clone();
    fragments[index] = replacement.relabel_internal(&used);
    SafeMolecule::from_fragments(fragments)
}

pub fn remove_fragment(mol: &SafeMolecule, index: usize) -> Result<SafeMolecule, SafeError> {
    let len = mol.fragments.len();
    if index >= len {
        return Err(SafeError::IndexOutOfRange { index, len });
    }
    if len == 1 {
        return Err(SafeError::CannotRemoveLast);
    }
    let mut fragments = mol.fragments.clone();
    fragments.remove(index);
    SafeMolecule::from_fragments(fragments)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linker_scaffold_parses_as_partial() {
        let m = parse_safe("[2*]C#C.[14*]OCCOC").unwrap();
        assert_eq!(m.len(), 2);
        assert!(m.is_partial());
        assert_eq!(m.fragments()[0].open_sites(), &[Site::Stub(2)]);
        assert_eq!(m.fragments()[1].open_sites(), &[Site::Stub(14)]);
    }

    #[test]
    fn decoration_scaffold_parses() {
        let m = parse_safe("[1*]c1cccc(Nc2ncnc3cc([2*])c([3*])cc23)c1").unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.is_partial());
        assert_eq!(
            m.fragments()[0].open_sites(),
            &[Site::Stub(1), Site::Stub(2), Site::Stub(3)]
        );
        // every ring closes inside the fragment
        assert!(m.closure_map().values().all(|s| s.len() == 2));
    }

    #[test]
    fn minimal_molecule() {
        let m = parse_safe("C").unwrap();
        assert_eq!(m.len(), 1);
        assert!(m.fragments()[0].open_sites().is_empty());
        assert!(!m.is_partial());
    }

    #[test]
    fn ring_closed_within_fragment() {
        let m = parse_safe("C1CC1.C").unwrap();
        assert_eq!(m.len(), 2);
        let sites = &m.closure_map()[&1];
        assert_eq!(sites.len(), 2);
        assert!(sites.iter().all(|s| s.fragment == 0));
        assert!(!m.is_partial());
        assert_eq!(m.serialize(), "C1CC1.C");
    }

    #[test]
    fn cross_fragment_closure() {
        let m = parse_safe("c1ccccc12.N2").unwrap();
        assert!(!m.is_partial());
        assert_eq!(m.fragments()[0].open_sites(), &[Site::Closure(2)]);
        assert_eq!(m.fragments()[1].open_sites(), &[Site::Closure(2)]);
        let partial = parse_safe("c1ccccc12").unwrap();
        assert!(partial.is_partial());
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_safe(""), Err(SafeError::Empty));
        assert!(matches!(
            parse_safe("CQ"),
            Err(SafeError::Lex { pos: 1, .. })
        ));
        assert_eq!(
            parse_safe("C(C"),
            Err(SafeError::UnbalancedBranch { fragment: 0 })
        );
        assert_eq!(
            parse_safe("C.CC)C"),
            Err(SafeError::UnbalancedBranch { fragment: 1 })
        );
        assert_eq!(
            parse_safe("C1CC1.C1"),
            Err(SafeError::TripledClosureLabel { label: 1 })
        );
        assert_eq!(
            parse_safe("C..C"),
            Err(SafeError::EmptyFragment { fragment: 1 })
        );
        assert_eq!(
            parse_safe("C."),
            Err(SafeError::EmptyFragment { fragment: 1 })
        );
        assert!(matches!(
            parse_safe("=C"),
            Err(SafeError::Grammar { pos: 0, .. })
        ));
        assert!(matches!(parse_safe("C="), Err(SafeError::Grammar { .. })));
        assert!(matches!(parse_safe("C()"), Err(SafeError::Grammar { .. })));
        assert!(matches!(parse_safe("1C"), Err(SafeError::Grammar { .. })));
        assert!(matches!(
            parse_safe("C(C)1"),
            Err(SafeError::Grammar { .. })
        ));
    }

    #[test]
    fn accepted_bond_and_branch_forms() {
        for s in [
            "C(=O)O",
            "C=1CC1",
            "C(C)(C)C",
            "c1ccc(cc1)-c2ccccc2",
            "C/C=C\\C",
            "[NH4+].[Cl-]",
            "C%10CC%10",
        ] {
            let m = parse_safe(s).unwrap_or_else(|e| panic!("{s}: {e}"));
            assert_eq!(m.serialize(), s);
        }
    }

    #[test]
    fn split_preserves_order() {
        let m = parse_safe("[2*]C#C.[14*]OCCOC").unwrap();
        let texts: Vec<String> = split_fragments(&m).iter().map(Fragment::text).collect();
        assert_eq!(texts, ["[2*]C#C", "[14*]OCCOC"]);
        assert_eq!(texts.join("."), m.source_text());
        let c = parse_safe("C").unwrap();
        assert_eq!(split_fragments(&c).len(), 1);
    }

    #[test]
    fn permuted_fragments_share_multiset() {
        let ab = parse_safe("CC.N").unwrap();
        let ba = parse_safe("N.CC").unwrap();
        let mut a: Vec<String> = ab.fragments().iter().map(Fragment::text).collect();
        let mut b: Vec<String> = ba.fragments().iter().map(Fragment::text).collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(ab.permuted(&[1, 0]).unwrap(), ba);
        assert!(ab.permuted(&[0, 0]).is_err());
    }

    #[test]
    fn substitution() {
        let m = parse_safe("C1CC1N.C").unwrap();
        let same = substitute_fragment(&m, 1, &m.fragments()[1].clone()).unwrap();
        assert_eq!(same, m);
        let o = Fragment::parse("O").unwrap();
        let r = substitute_fragment(&m, 1, &o).unwrap();
        assert_eq!(r.serialize(), "C1CC1N.O");
        assert_eq!(r, parse_safe("C1CC1N.O").unwrap());
        assert_eq!(r.fragments()[0], m.fragments()[0]);

        let linker = parse_safe("[2*]C#C.[14*]OCCOC").unwrap();
        let no_site = Fragment::parse("CC").unwrap();
        assert!(matches!(
            substitute_fragment(&linker, 0, &no_site),
            Err(SafeError::SiteMismatch { .. })
        ));
        assert!(matches!(
            substitute_fragment(&linker, 7, &no_site),
            Err(SafeError::IndexOutOfRange { index: 7, len: 2 })
        ));
    }

    #[test]
    fn substitution_renames_colliding_rings() {
        let m = parse_safe("C1CC1C2.N2").unwrap();
        let ring = Fragment::parse("C1CCN1C2").unwrap();
        let r = substitute_fragment(&m, 1, &Fragment::parse("O2").unwrap()).unwrap();
        assert_eq!(r.serialize(), "C1CC1C2.O2");
        let r = substitute_fragment(&parse_safe("N2.C1CC1C2").unwrap(), 1, &ring).unwrap();
        assert_eq!(r.serialize(), "N2.C1CCN1C2");
        // ring label 1 collides with another fragment's ring
        let m2 = parse_safe("C1CC1C2.N2").unwrap();
        let r2 = substitute_fragment(&m2, 1, &Fragment::parse("C1CC1N2").unwrap()).unwrap();
        assert!(!r2.is_partial());
        assert_eq!(r2.serialize(), "C1CC1C2.C3CC3N2");
    }

    #[test]
    fn removal() {
        let m = parse_safe("CC.N").unwrap();
        let r = remove_fragment(&m, 1).unwrap();
        assert_eq!(r.serialize(), "CC");
        assert!(!r.is_partial());

        let linked = parse_safe("c1ccccc12.N2").unwrap();
        let r = remove_fragment(&linked, 1).unwrap();
        assert!(r.is_partial());
        assert_eq!(r.closure_map()[&2].len(), 1);

        assert!(matches!(
            remove_fragment(&m, 5),
            Err(SafeError::IndexOutOfRange { index: 5, len: 2 })
        ));
        assert_eq!(
            remove_fragment(&parse_safe("C").unwrap(), 0),
            Err(SafeError::CannotRemoveLast)
        );
    }
}
