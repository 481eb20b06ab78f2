//! Independent reference computations shared by the test targets.
#![allow(dead_code)]

use dualda::losses::ConfidentSubset;
use dualda::matrix::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn brute_nearest(z: &[f64], mu: &Matrix) -> usize {
    let mut best = 0;
    let mut best_cos = f64::NEG_INFINITY;
    for c in 0..mu.rows() {
        let s = cosine(z, mu.row(c));
        if s > best_cos {
            best_cos = s;
            best = c;
        }
    }
    best
}

/// Exact 1-D squared Wasserstein-2 between equal-size empirical measures: the
/// monotone coupling pairs order statistics.
pub fn wasserstein2_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Class means by explicit loops, then the two averages over class pairs.
pub fn brute_alignment(
    zs: &Matrix,
    ys: &[usize],
    zt: &Matrix,
    yt: &[usize],
    classes: usize,
) -> (f64, f64) {
    let d = zs.cols();
    let mean = |z: &Matrix, y: &[usize], c: usize| -> Option<Vec<f64>> {
        let mut acc = vec![0.0; d];
        let mut n = 0;
        for i in 0..z.rows() {
            if y[i] == c {
                n += 1;
                for j in 0..d {
                    acc[j] += z.get(i, j);
                }
            }
        }
        (n > 0).then(|| acc.into_iter().map(|v| v / n as f64).collect())
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let present: Vec<usize> = (0..classes)
        .filter(|&c| mean(zs, ys, c).is_some() && mean(zt, yt, c).is_some())
        .collect();
    let mut l_c = 0.0;
    for &c in &present {
        l_c += dist(&mean(zs, ys, c).unwrap(), &mean(zt, yt, c).unwrap());
    }
    l_c /= present.len() as f64;
    let mut l_d = 0.0;
    let mut pairs = 0;
    for &a in &present {
        for &b in &present {
            if a != b {
                l_d += dist(&mean(zs, ys, a).unwrap(), &mean(zt, yt, b).unwrap());
                pairs += 1;
            }
        }
    }
    (l_c, if pairs > 0 { l_d / pairs as f64 } else { 0.0 })
}

pub fn random_alignment_case(
    rng: &mut ChaCha8Rng,
) -> (Matrix, Vec<usize>, Matrix, Vec<usize>) {
    let d = rng.random_range(2..6);
    let ns = rng.random_range(6..20);
    let nt = rng.random_range(6..20);
    let mut ys: Vec<usize> = (0..ns).map(|i| i % 3).collect();
    let mut yt: Vec<usize> = (0..nt).map(|i| i % 3).collect();
    ys.shuffle(rng);
    yt.shuffle(rng);
    (randn(rng, ns, d), ys, randn(rng, nt, d), yt)
}

/// Every target row confident, with the given pseudo labels.
pub fn full_subset(labels: &[usize]) -> ConfidentSubset {
    let mut subset = ConfidentSubset::default();
    for (i, &c) in labels.iter().enumerate() {
        subset.indices.push(i);
        subset.labels.push(c);
        subset.classes_present.insert(c);
    }
    subset
}
