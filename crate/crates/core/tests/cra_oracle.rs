mod common;

use common::{naive_probs, random_block_mask_rows, random_head, rng};
use proptest::prelude::*;
use sample_attention::cra::{minimal_mass_count, minimal_mass_fraction_head, retained_mass};
use sample_attention::{
    cra_of_mask, minimal_mass_fraction, output_error, sparsity_ratio, BlockMask, EntryMask, Matrix,
};

fn p_matrix(rows: &[Vec<f64>]) -> Matrix {
    Matrix::from_rows(rows).unwrap()
}

/// Smallest subset size reaching `alpha` of the row, by trying every subset.
fn brute_min_count(row: &[f64], alpha: f64) -> usize {
    let n = row.len();
    let total: f64 = row.iter().sum();
    let mut best = n;
    for bits in 0u32..(1 << n) {
        let kept: f64 = (0..n).filter(|&j| bits >> j & 1 == 1).map(|j| row[j]).sum();
        if kept >= alpha * total - 1e-12 {
            best = best.min(bits.count_ones() as usize);
        }
    }
    best
}

#[test]
fn two_by_two_examples() {
    let p = p_matrix(&[vec![1.0, 0.0], vec![0.6, 0.4]]);
    let all = EntryMask::causal(2);
    assert_eq!(cra_of_mask(&p, &all).unwrap().min, 1.0);
    let diag = EntryMask::from_fn(2, |i, j| i == j);
    let kept = cra_of_mask(&p, &diag).unwrap();
    assert!((kept.min - 0.4).abs() < 1e-15);
    assert!((kept.mean - 0.7).abs() < 1e-15);
}

#[test]
fn cra_matches_entrywise_sum() {
    let mut r = rng(5);
    for seed in 0..20 {
        let h = random_head(seed, 24, 4);
        let probs = naive_probs(&h.q, &h.k);
        let rows = random_block_mask_rows(&mut r, 6, 0.4);
        let mask = BlockMask::new(24, 4, rows).unwrap();
        let want: Vec<f64> = (0..24)
            .map(|i| (0..=i).filter(|&j| mask.contains(i / 4, j / 4)).map(|j| probs[i][j]).sum())
            .collect();
        let got = retained_mass(&h, &mask).unwrap();
        let entry = cra_of_mask(&p_matrix(&probs), &EntryMask::from_block_mask(&mask)).unwrap();
        for i in 0..24 {
            assert!((got.per_row[i] - want[i]).abs() < 1e-12);
            assert!((entry.per_row[i] - want[i]).abs() < 1e-12);
        }
        let wmin = want.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((got.min - wmin).abs() < 1e-12);
    }
}

#[test]
fn minimal_count_matches_subset_search() {
    let mut r = rng(8);
    use rand::Rng;
    for _ in 0..200 {
        let n = r.random_range(1..=10);
        let row: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        for alpha in [0.0, 0.3, 0.5, 0.9, 0.95, 1.0] {
            assert_eq!(
                minimal_mass_count(&row, alpha).unwrap(),
                brute_min_count(&row, alpha),
                "{row:?} alpha={alpha}"
            );
        }
    }
}

#[test]
fn uniform_rows_need_alpha_of_entries() {
    let s = 400;
    let rows: Vec<Vec<f64>> = (0..s)
        .map(|i| (0..s).map(|j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 }).collect())
        .collect();
    let f = minimal_mass_fraction(&p_matrix(&rows), 0.95).unwrap();
    assert!((f - 0.95).abs() < 0.01, "{f}");
}

#[test]
fn fraction_streaming_matches_matrix_path() {
    let h = random_head(2, 50, 6);
    let p = p_matrix(&naive_probs(&h.q, &h.k));
    for alpha in [0.5, 0.9, 0.99] {
        let a = minimal_mass_fraction(&p, alpha).unwrap();
        let b = minimal_mass_fraction_head(&h, alpha).unwrap();
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn sparsity_ratio_counts_causal_entries() {
    let diag = EntryMask::from_fn(4, |i, j| i == j);
    assert!((sparsity_ratio(&diag) - 0.6).abs() < 1e-15);
    assert_eq!(sparsity_ratio(&EntryMask::causal(7)), 0.0);
    let bm = BlockMask::diagonal(8, 4).unwrap();
    let em = EntryMask::from_block_mask(&bm);
    assert!((bm.sparsity_ratio() - sparsity_ratio(&em)).abs() < 1e-15);
    assert!((bm.sparsity_ratio() - (1.0 - 20.0 / 36.0)).abs() < 1e-15);
}

#[test]
fn output_error_is_relative() {
    let a = p_matrix(&[vec![3.0, 4.0], vec![1.0, 0.0]]);
    let b = p_matrix(&[vec![3.0, 4.0], vec![1.0, 1.0]]);
    assert!((output_error(&a, &b).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    assert!(output_error(&a, &Matrix::zeros(3, 2)).is_err());
}

#[test]
fn entry_mask_rejects_acausal_entries() {
    let mut m = EntryMask::empty(3, 3);
    assert!(m.set(0, 2, true).is_err());
    assert!(m.set(2, 0, true).is_ok());
}

proptest! {
    #[test]
    fn more_entries_never_lower_cra(seed in 0u64..500, keep in 0.0f64..0.8) {
        let h = random_head(seed, 32, 4);
        let mut r = rng(seed ^ 0xabc);
        let small = random_block_mask_rows(&mut r, 8, keep);
        let big: Vec<Vec<usize>> = small
            .iter()
            .enumerate()
            .map(|(qb, row)| {
                let mut row = row.clone();
                if qb > 0 { row.push(qb - 1); }
                row
            })
            .collect();
        let a = retained_mass(&h, &BlockMask::new(32, 4, small).unwrap()).unwrap();
        let b = retained_mass(&h, &BlockMask::new(32, 4, big).unwrap()).unwrap();
        prop_assert!(b.min >= a.min - 1e-12);
        for (x, y) in a.per_row.iter().zip(&b.per_row) {
            prop_assert!(y + 1e-12 >= *x);
            prop_assert!(*y <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn fraction_is_monotone_in_alpha(seed in 0u64..500) {
        let h = random_head(seed, 30, 3);
        let mut last = 0.0;
        for alpha in [0.0, 0.2, 0.5, 0.8, 0.95, 1.0] {
            let f = minimal_mass_fraction_head(&h, alpha).unwrap();
            prop_assert!(f >= last);
            last = f;
        }
    }
}
