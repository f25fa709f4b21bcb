//! Brute-force screening metrics: pair counting and insertion ranking.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Counts concordant active/inactive pairs, ties worth one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut u = 0.0;
    let (mut np, mut nn) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1.0;
        } else {
            nn += 1.0;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                u += 1.0;
            } else if scores[i] == scores[j] {
                u += 0.5;
            }
        }
    }
    u / (np * nn)
}

/// Top `m` by insertion: each item goes before the first strictly smaller one.
pub fn top(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::new();
    for i in 0..scores.len() {
        let pos = order
            .iter()
            .position(|&j| scores[j] < scores[i])
            .unwrap_or(order.len());
        order.insert(pos, i);
    }
    order.truncate(m);
    order
}

/// Smallest count covering `frac` of `n`, found by counting up.
pub fn cover(frac: f64, n: usize) -> usize {
    let mut m = 0;
    while (m as f64) < frac * n as f64 - 1e-9 {
        m += 1;
    }
    m
}

pub fn ef(scores: &[f64], labels: &[bool], alpha: f64) -> f64 {
    let hits = top(scores, cover(alpha, scores.len()))
        .iter()
        .filter(|&&i| labels[i])
        .count();
    let total = labels.iter().filter(|&&l| l).count();
    hits as f64 / (total as f64 * alpha)
}

pub fn topk(pred: &[Vec<f64>], truth: &[Vec<bool>], k_percent: f64) -> f64 {
    let hits = pred
        .iter()
        .zip(truth)
        .filter(|(p, t)| {
            let slots = cover(k_percent / 100.0, p.len()).max(1);
            top(p, slots).iter().any(|&j| t[j])
        })
        .count();
    hits as f64 / pred.len() as f64
}

/// Scores on a coarse grid so ties are common; at least one active and one
/// inactive.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(2..=50);
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 * 0.5).collect();
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    labels[0] = true;
    labels[1] = false;
    (scores, labels)
}

/// Up to 20 samples over up to 12 labels, scores on a coarse grid.
pub fn random_topk_instance(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
    let n_labels = rng.gen_range(1..=12);
    let n = rng.gen_range(1..=20);
    let pred = (0..n)
        .map(|_| (0..n_labels).map(|_| rng.gen_range(0..4) as f64).collect())
        .collect();
    let truth = (0..n)
        .map(|_| (0..n_labels).map(|_| rng.gen_bool(0.2)).collect())
        .collect();
    (pred, truth)
}
