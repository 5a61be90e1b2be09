//! Independent reference implementations shared by the integration tests.
//! Everything here is written from the definitions with plain loops and no
//! numerical tricks, so it can catch mistakes in the library versions.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sticker_core::retrieval::RetrievalIndex;
use sticker_core::tensor::Tensor;

/// `N` random unit vectors of dimension `d`, row-major.
pub fn unit_rows<R: Rng>(n: usize, d: usize, rng: &mut R) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    Tensor::from_vec(n, d, data).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-log(exp(s[target]) / Σ exp(s[j]))`, computed directly.
pub fn softmax_xent(scores: &[f64], target: usize) -> f64 {
    let denom: f64 = scores.iter().map(|s| s.exp()).sum();
    -(scores[target].exp() / denom).ln()
}

/// Text-to-image InfoNCE from the similarity definition.
pub fn oracle_t2i(text: &Tensor<f64>, image: &Tensor<f64>, tau: f64) -> f64 {
    let n = text.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| cosine(text.row(i), image.row(j)) / tau).collect();
        total += softmax_xent(&row, i);
    }
    total / n as f64
}

/// Image-to-text InfoNCE from the similarity definition.
pub fn oracle_i2t(text: &Tensor<f64>, image: &Tensor<f64>, tau: f64) -> f64 {
    let n = text.rows();
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| cosine(image.row(i), text.row(j)) / tau).collect();
        total += softmax_xent(&row, i);
    }
    total / n as f64
}

/// Mean per-position cross-entropy over unmasked rows.
pub fn oracle_lm_nll(logits: &Tensor<f64>, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut m = 0;
    for t in 0..logits.rows() {
        if mask[t] {
            total += softmax_xent(logits.row(t), targets[t]);
            m += 1;
        }
    }
    total / m as f64
}

/// Scores every row with a sequential `f32` sum, sorts the whole gallery, and
/// keeps the top `k`: score descending, lower id first on ties.
pub fn full_sort_oracle(index: &RetrievalIndex, query: &[f32], k: usize) -> Vec<(u32, f32)> {
    let mut all: Vec<(u32, f32)> = (0..index.len())
        .map(|i| {
            let mut s = 0.0f32;
            for (a, b) in index.row(i).iter().zip(query) {
                s += a * b;
            }
            (index.ids[i], s)
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Every (R@1, R@5, R@10, MR) cell group reported in the two retrieval
/// tables: dual-encoder image-to-text and text-to-image rows, then the
/// language-model I2I and T2I rows.
pub const REPORTED_RECALLS: [(f64, f64, f64, f64); 14] = [
    (5.8, 12.8, 17.0, 11.9),
    (3.4, 7.6, 10.3, 7.1),
    (43.3, 61.0, 66.5, 56.9),
    (33.0, 52.3, 59.3, 48.2),
    (59.0, 76.0, 80.3, 71.8),
    (57.9, 75.4, 79.8, 71.0),
    (13.3, 25.8, 32.1, 23.8),
    (8.8, 18.1, 23.0, 16.7),
    (58.8, 77.1, 81.9, 72.6),
    (52.4, 72.9, 78.5, 67.9),
    (71.4, 87.7, 91.2, 83.4),
    (71.3, 86.9, 90.0, 82.7),
    (96.9, 99.9, 99.9, 99.0),
    (61.5, 82.4, 87.5, 77.1),
];

/// Largest gap between a reported mean and the mean of its reported inputs
/// that one-decimal rounding can explain: each input is off by at most 0.05,
/// so their mean is too, and the reported mean adds another 0.05.
pub const ROUNDING_SLACK: f64 = 0.1 + 1e-9;

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}
