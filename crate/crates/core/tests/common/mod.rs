#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sample_attention::{AttentionHead, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Random head whose logits have roughly unit spread.
pub fn random_head(seed: u64, s: usize, d: usize) -> AttentionHead {
    let mut r = rng(seed);
    let q = uniform_matrix(&mut r, s, d, 1.7);
    let k = uniform_matrix(&mut r, s, d, 1.7);
    let v = uniform_matrix(&mut r, s, d, 1.0);
    AttentionHead::new(q, k, v, 0).unwrap()
}

/// Causal probabilities by the textbook formula, one entry at a time.
pub fn naive_probs(q: &Matrix, k: &Matrix) -> Vec<Vec<f64>> {
    let (s, d) = (q.rows(), q.cols());
    let scale = 1.0 / (d as f64).sqrt();
    (0..s)
        .map(|i| {
            let logits: Vec<f64> = (0..=i)
                .map(|j| (0..d).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut row: Vec<f64> = e.iter().map(|x| x / z).collect();
            row.resize(s, 0.0);
            row
        })
        .collect()
}

/// `P · V` with explicit loops.
pub fn naive_output(p: &[Vec<f64>], v: &Matrix) -> Vec<Vec<f64>> {
    p.iter()
        .map(|row| {
            (0..v.cols())
                .map(|t| row.iter().enumerate().map(|(j, pj)| pj * v.get(j, t)).sum())
                .collect()
        })
        .collect()
}

/// Masked softmax with a finite penalty `c` subtracted from masked logits.
pub fn finite_c_masked_output(
    head: &AttentionHead,
    active: impl Fn(usize, usize) -> bool,
    c: f64,
) -> Matrix {
    let (s, d) = (head.seq_len(), head.dim());
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(s * d);
    for i in 0..s {
        let logits: Vec<f64> = (0..=i)
            .map(|j| {
                let x: f64 = (0..d).map(|t| head.q.get(i, t) * head.k.get(j, t)).sum::<f64>() * scale;
                if active(i, j) {
                    x
                } else {
                    x - c
                }
            })
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for t in 0..d {
            out.push((0..=i).map(|j| e[j] / z * head.v.get(j, t)).sum());
        }
    }
    Matrix::new(s, d, out).unwrap()
}

/// Max over rows of `‖a_i − b_i‖ / ‖b_i‖`.
pub fn max_row_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    (0..a.rows())
        .map(|i| {
            let num: f64 = a.row(i).iter().zip(b.row(i)).map(|(x, y)| (x - y).powi(2)).sum();
            let den: f64 = b.row(i).iter().map(|y| y * y).sum();
            (num / den.max(1e-300)).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Random causal block mask that always keeps the diagonal.
pub fn random_block_mask_rows(rng: &mut ChaCha8Rng, n: usize, keep: f64) -> Vec<Vec<usize>> {
    (0..n)
        .map(|qb| {
            (0..=qb)
                .filter(|&kb| kb == qb || rng.random_bool(keep))
                .collect()
        })
        .collect()
}
