//! Grammar-valid SAFE strings and byte-level mutations of them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATOMS: &[&str] = &[
    "C", "c", "N", "n", "O", "S", "Cl", "Br", "F", "[nH]", "[C@H]", "[O-]",
];
const BONDS: &[&str] = &["", "", "", "=", "#", "-"];

/// Grammar-valid fragment text with rings closed inside the fragment and
/// optional extra labels left open for cross-fragment links.
fn random_fragment(rng: &mut ChaCha8Rng, next_label: &mut u16, open: &[u16]) -> String {
    let mut s = String::new();
    let n_atoms = rng.gen_range(1..6);
    let mut pending_ring: Option<u16> = None;
    let mut depth = 0;
    for i in 0..n_atoms {
        if i > 0 {
            if depth < 2 && rng.gen_bool(0.2) {
                s.push('(');
                depth += 1;
            }
            s.push_str(BONDS[rng.gen_range(0..BONDS.len())]);
        }
        s.push_str(ATOMS[rng.gen_range(0..ATOMS.len())]);
        if i == 0 {
            for &l in open {
                s.push_str(&label_text(l));
            }
        }
        if let Some(l) = pending_ring {
            if i + 1 == n_atoms || rng.gen_bool(0.5) {
                s.push_str(&label_text(l));
                pending_ring = None;
            }
        } else if *next_label < 60 && i + 1 < n_atoms && rng.gen_bool(0.3) {
            s.push_str(&label_text(*next_label));
            pending_ring = Some(*next_label);
            *next_label += 1;
        }
        if depth > 0 && rng.gen_bool(0.4) {
            s.push(')');
            depth -= 1;
        }
    }
    for _ in 0..depth {
        s.push(')');
    }
    if rng.gen_bool(0.15) {
        s = format!("[{}*]{}", rng.gen_range(0..20), s);
    }
    s
}

pub fn label_text(l: u16) -> String {
    if l >= 10 {
        format!("%{l:02}")
    } else {
        l.to_string()
    }
}

pub fn random_safe(seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..5);
    let mut next_label = 1u16;
    let mut frags = Vec::new();
    let mut prev_link: Option<u16> = None;
    for i in 0..n {
        let mut open = Vec::new();
        if let Some(l) = prev_link.take() {
            open.push(l);
        }
        if i + 1 < n && rng.gen_bool(0.6) {
            open.push(next_label);
            prev_link = Some(next_label);
            next_label += 1;
        }
        frags.push(random_fragment(&mut rng, &mut next_label, &open));
    }
    frags.join(".")
}

const ALPHABET: &[u8] = b"CcNnOSFl()=#[]*%0123456789.Br@+H-";

/// Applies 1 to 3 random insertions, deletions or substitutions.
pub fn mutate(text: &str, rng: &mut ChaCha8Rng) -> String {
    let mut b = text.as_bytes().to_vec();
    for _ in 0..rng.gen_range(1..=3) {
        let c = ALPHABET[rng.gen_range(0..ALPHABET.len())];
        match rng.gen_range(0..3) {
            0 => {
                let i = rng.gen_range(0..=b.len());
                b.insert(i, c);
            }
            1 if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                b.remove(i);
            }
            _ if !b.is_empty() => {
                let i = rng.gen_range(0..b.len());
                b[i] = c;
            }
            _ => b.push(c),
        }
    }
    String::from_utf8(b).expect("ascii alphabet")
}
