//! Brute-force reference implementations, written without reference to the
//! library code paths they check.
#![allow(dead_code)]

use rand::Rng;

/// Concordant pairs count 2, ties 1; the sum is exact, so is the half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut twice = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            if scores[i] > scores[j] {
                twice += 2;
            } else if scores[i] == scores[j] {
                twice += 1;
            }
        }
    }
    (twice as f64 / 2.0) / (pos as f64 * neg as f64)
}

/// Mean over positives of the precision among everything scored at least
/// as high.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut pos = 0usize;
    for i in 0..scores.len() {
        if !labels[i] {
            continue;
        }
        pos += 1;
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
        let hits = above.iter().filter(|&&j| labels[j]).count();
        total += hits as f64 / above.len() as f64;
    }
    total / pos as f64
}

pub fn macro_f1(pred: &[usize], truth: &[usize], c: usize) -> f64 {
    let mut sum = 0.0;
    for class in 0..c {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == class, t == class) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        if tp > 0 {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / (tp + fn_) as f64;
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    sum / c as f64
}

pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> f64 {
    let n = probs.len() as f64;
    let mut out = 0.0;
    for b in 0..bins {
        let lo = b as f64 / bins as f64;
        let hi = (b + 1) as f64 / bins as f64;
        let members: Vec<usize> = (0..probs.len())
            .filter(|&i| if b == 0 { probs[i] <= hi } else { probs[i] > lo && probs[i] <= hi })
            .collect();
        if members.is_empty() {
            continue;
        }
        let m = members.len() as f64;
        let acc = members.iter().filter(|&&i| labels[i]).count() as f64 / m;
        let conf = members.iter().map(|&i| probs[i]).sum::<f64>() / m;
        out += (m / n) * (acc - conf).abs();
    }
    out
}

/// Hubert–Arabie pair form over all O(n²) pairs.
pub fn ari(a: &[usize], b: &[usize]) -> f64 {
    let (mut n11, mut n10, mut n01, mut n00) = (0i128, 0i128, 0i128, 0i128);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => n11 += 1,
                (true, false) => n10 += 1,
                (false, true) => n01 += 1,
                (false, false) => n00 += 1,
            }
        }
    }
    let num = 2 * (n00 * n11 - n01 * n10);
    let den = (n00 + n01) * (n01 + n11) + (n00 + n10) * (n10 + n11);
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// A query hits when fewer than `k` points precede its nearest same-class
/// point in (distance, index) order.
pub fn recall_at_k(emb: &[Vec<f64>], classes: &[usize], k: usize) -> f64 {
    let d = |i: usize, j: usize| -> f64 { emb[i].iter().zip(&emb[j]).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut hits = 0;
    for i in 0..emb.len() {
        let best = (0..emb.len())
            .filter(|&j| j != i && classes[j] == classes[i])
            .map(|j| (d(i, j), j))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let Some((bd, bj)) = best else { continue };
        let ahead = (0..emb.len())
            .filter(|&j| j != i)
            .filter(|&j| {
                let dj = d(i, j);
                dj < bd || (dj == bd && j < bj)
            })
            .count();
        if ahead < k {
            hits += 1;
        }
    }
    hits as f64 / emb.len() as f64
}

/// Scores from a coarse grid so ties are common.
pub fn scores<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0..6) as f64 / 5.0).collect()
}

/// Labels with at least one of each value.
pub fn both_labels<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    loop {
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        if l.iter().any(|&v| v) && l.iter().any(|&v| !v) {
            return l;
        }
    }
}

pub fn classes<R: Rng>(rng: &mut R, n: usize, c: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

/// Points on a small integer grid so distance ties occur.
pub fn points<R: Rng>(rng: &mut R, n: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2..=2) as f64).collect())
        .collect()
}

/// Confidences that include exact bin edges.
pub fn confidences<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                rng.random_range(0..=10) as f64 / 10.0
            } else {
                rng.random::<f64>()
            }
        })
        .collect()
}
