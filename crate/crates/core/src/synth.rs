//! Desk-scale synthetic corpora with known ground truth.
//!
//! Every molecule is three fragments joined by closure labels 1 and 2:
//! a core carrying both labels, a class fragment on label 1 and a decoration
//! on label 2. The class fragment is the only context-dependent part: target
//! `A` always carries a nitrogen fragment, target `B` an oxygen fragment.
//! Under target `A`, sulfur decorations are active and all others inactive,
//! which gives activity cliffs one fragment swap apart.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::safe::{parse_safe, SafeMolecule};
use crate::tokenizer::{train_bpe, ContextTriplet, Vocabulary};
use crate::train::{PreferencePair, TrainSample};

pub const CORES: &[&str] = &[
    "C1CCC2",
    "C1CCCC2",
    "C1CC2",
    "C1CSC2",
    "C1CCSC2",
    "C1C(C)CC2",
];
pub const N_CLASS: &[&str] = &["N1", "NC1", "CN1", "CCN1"];
pub const O_CLASS: &[&str] = &["O1", "OC1", "CO1", "CCO1"];
pub const DECORATIONS: &[&str] = &["C2", "CC2", "CCC2", "F2", "Cl2", "S2", "SC2", "CS2"];
pub const ACTIVE_DECORATIONS: &[&str] = &["S2", "SC2", "CS2"];

pub const FAMILY: &str = "toyfam";
pub const MOA: &str = "inhibitor";

/// Which class fragment a molecule carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Class {
    N,
    O,
}

impl Class {
    pub fn target(self) -> &'static str {
        match self {
            Class::N => "A",
            Class::O => "B",
        }
    }

    pub fn pool(self) -> &'static [&'static str] {
        match self {
            Class::N => N_CLASS,
            Class::O => O_CLASS,
        }
    }

    pub fn other(self) -> Class {
        match self {
            Class::N => Class::O,
            Class::O => Class::N,
        }
    }

    pub fn context(self) -> ContextTriplet {
        ContextTriplet::new(Some(FAMILY), Some(self.target()), Some(MOA))
    }
}

/// BPE vocabulary trained on every synthetic molecule, extended with both
/// contexts.
pub fn vocabulary(target_size: usize) -> Vocabulary {
    let texts: Vec<String> = [Class::N, Class::O]
        .iter()
        .flat_map(|&c| all_molecules(c))
        .map(|m| m.serialize())
        .collect();
    train_bpe(&texts, target_size)
        .and_then(|v| v.with_contexts(&contexts()))
        .expect("synthetic corpus trains a vocabulary")
}

/// Both candidate contexts of the conditioning corpus.
pub fn contexts() -> Vec<ContextTriplet> {
    vec![Class::N.context(), Class::O.context()]
}

pub fn assemble(core: &str, class_frag: &str, decoration: &str) -> SafeMolecule {
    parse_safe(&format!("{core}.{class_frag}.{decoration}")).expect("synthetic molecule parses")
}

/// Position of the class fragment in a molecule built by [`assemble`].
pub const CLASS_INDEX: usize = 1;

pub fn class_of(mol: &SafeMolecule) -> Option<Class> {
    let text = mol.fragments().get(CLASS_INDEX)?.text();
    if N_CLASS.contains(&text.as_str()) {
        Some(Class::N)
    } else if O_CLASS.contains(&text.as_str()) {
        Some(Class::O)
    } else {
        None
    }
}

pub fn is_active(mol: &SafeMolecule) -> bool {
    mol.fragments()
        .get(2)
        .is_some_and(|f| ACTIVE_DECORATIONS.contains(&f.text().as_str()))
}

/// All distinct molecules of one class, in a fixed order.
pub fn all_molecules(class: Class) -> Vec<SafeMolecule> {
    let mut out = Vec::new();
    for core in CORES {
        for c in class.pool() {
            for d in DECORATIONS {
                out.push(assemble(core, c, d));
            }
        }
    }
    out
}

/// Disjoint train and held-out samples of the conditioning corpus, balanced
/// between the two classes.
pub fn conditioning_split(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<TrainSample>, Vec<TrainSample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<TrainSample> = [Class::N, Class::O]
        .iter()
        .flat_map(|&c| {
            all_molecules(c).into_iter().map(move |mol| TrainSample {
                mol,
                ctx: c.context(),
            })
        })
        .collect();
    pool.shuffle(&mut rng);
    assert!(
        n_train + n_test <= pool.len(),
        "corpus has only {} molecules",
        pool.len()
    );
    let test = pool.split_off(pool.len() - n_test);
    pool.truncate(n_train);
    (pool, test)
}

/// Random molecules of either class, with duplicates allowed.
pub fn random_molecules(n: usize, seed: u64) -> Vec<SafeMolecule> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let class = if rng.gen_bool(0.5) {
                Class::N
            } else {
                Class::O
            };
            assemble(
                CORES.choose(&mut rng).unwrap(),
                class.pool().choose(&mut rng).unwrap(),
                DECORATIONS.choose(&mut rng).unwrap(),
            )
        })
        .collect()
}

/// Distinct molecules split into train and held-out parts.
pub fn molecule_split(
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> (Vec<SafeMolecule>, Vec<SafeMolecule>) {
    let (train, test) = conditioning_split(n_train, n_test, seed);
    (
        train.into_iter().map(|s| s.mol).collect(),
        test.into_iter().map(|s| s.mol).collect(),
    )
}

/// Pair of class-N molecules that differ only in the decoration.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CliffPair {
    pub a: SafeMolecule,
    pub b: SafeMolecule,
    /// True when exactly one of the two is active.
    pub cliff: bool,
}

fn decoration_pair(rng: &mut ChaCha8Rng, core: &str, cliff: bool) -> CliffPair {
    let class_frag = N_CLASS.choose(rng).unwrap();
    let inactive: Vec<&str> = DECORATIONS
        .iter()
        .copied()
        .filter(|d| !ACTIVE_DECORATIONS.contains(d))
        .collect();
    let (d1, d2) = if cliff {
        (
            *ACTIVE_DECORATIONS.choose(rng).unwrap(),
            *inactive.choose(rng).unwrap(),
        )
    } else {
        let pool = if rng.gen_bool(0.5) {
            &inactive[..]
        } else {
            ACTIVE_DECORATIONS
        };
        let two: Vec<&&str> = pool.choose_multiple(rng, 2).collect();
        (*two[0], *two[1])
    };
    CliffPair {
        a: assemble(core, class_frag, d1),
        b: assemble(core, class_frag, d2),
        cliff,
    }
}

/// Preference pairs under target `A`: active over inactive, on the first
/// three cores.
pub fn preference_pairs(n: usize, seed: u64) -> Vec<PreferencePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let core = CORES[..3].choose(&mut rng).unwrap();
            let p = decoration_pair(&mut rng, core, true);
            PreferencePair {
                ctx: Class::N.context(),
                preferred: p.a,
                rejected: p.b,
            }
        })
        .collect()
}

/// Held-out cliff and non-cliff pairs on the remaining cores, alternating.
pub fn heldout_cliff_pairs(n: usize, seed: u64) -> Vec<CliffPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let core = CORES[3..].choose(&mut rng).unwrap();
            decoration_pair(&mut rng, core, i % 2 == 0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::safe::Site;

    #[test]
    fn pools_parse_with_expected_sites() {
        for m in all_molecules(Class::N)
            .iter()
            .chain(&all_molecules(Class::O))
        {
            assert_eq!(m.len(), 3);
            assert!(!m.is_partial(), "{}", m.serialize());
            assert_eq!(m.fragments()[1].open_sites(), &[Site::Closure(1)]);
            assert_eq!(m.fragments()[2].open_sites(), &[Site::Closure(2)]);
        }
        assert_eq!(
            all_molecules(Class::N).len(),
            CORES.len() * 4 * DECORATIONS.len()
        );
    }

    #[test]
    fn splits_are_disjoint_and_labelled() {
        let (train, test) = conditioning_split(200, 50, 3);
        for t in &test {
            assert!(!train.contains(t));
            let c = class_of(&t.mol).unwrap();
            assert_eq!(t.ctx, c.context());
        }
        for p in preference_pairs(20, 1) {
            assert!(is_active(&p.preferred) && !is_active(&p.rejected));
        }
        for (i, p) in heldout_cliff_pairs(10, 2).iter().enumerate() {
            assert_eq!(p.cliff, is_active(&p.a) != is_active(&p.b));
            assert_eq!(p.cliff, i % 2 == 0);
            assert_ne!(p.a, p.b);
        }
    }
}
