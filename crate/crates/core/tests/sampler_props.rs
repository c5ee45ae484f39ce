mod common;

use common::{naive_probs, random_head};
use proptest::prelude::*;
use sample_attention::{block_reduce, plan_chunks, sample_scores, SparseConfig};

fn cfg(chunk_n: usize, blk: usize) -> SparseConfig {
    SparseConfig::new(0.95, 0.95, chunk_n, blk).unwrap()
}

#[test]
fn sampled_rows_are_exact_probability_rows() {
    let h = random_head(4, 64, 8);
    let plan = plan_chunks(64, &cfg(2, 8)).unwrap();
    let samples = sample_scores(&h, &plan).unwrap();
    let p = naive_probs(&h.q, &h.k);
    for chunk in &samples.chunks {
        for (r, &q) in chunk.positions.iter().enumerate() {
            for j in 0..64 {
                assert!((chunk.probs.get(r, j) - p[q][j]).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn reduction_matches_direct_binning() {
    let h = random_head(6, 50, 4);
    let blk = 7;
    let plan = plan_chunks(50, &cfg(3, blk)).unwrap();
    let samples = sample_scores(&h, &plan).unwrap();
    let red = block_reduce(&samples, blk).unwrap();
    let p = naive_probs(&h.q, &h.k);
    for (c, scores) in plan.chunks.iter().zip(&red.chunks) {
        let n = 50usize.div_ceil(blk);
        for b in 0..n {
            let col: f64 = c.sampled.clone().map(|q| (0..=q).filter(|j| j / blk == b).map(|j| p[q][j]).sum::<f64>()).sum();
            let slash: f64 = c
                .sampled
                .clone()
                .map(|q| (0..=q).filter(|j| (q - j) / blk == b).map(|j| p[q][j]).sum::<f64>())
                .sum();
            assert!((scores.col_scores[b] - col).abs() < 1e-12);
            assert!((scores.slash_scores[b] - slash).abs() < 1e-12);
        }
        assert!((scores.total_mass - c.sampled.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn sampling_ratio_at_common_lengths() {
    let plan = plan_chunks(4096, &cfg(2, 128)).unwrap();
    assert!((plan.sampling_ratio() - 0.0625).abs() < 1e-15);
    let plan = plan_chunks(32768, &cfg(1, 128)).unwrap();
    assert_eq!(plan.sampled_rows(), 128);
}

proptest! {
    #[test]
    fn plan_invariants(s in 1usize..5000, chunk_n in 1usize..12, blk in 1usize..300) {
        let plan = plan_chunks(s, &cfg(chunk_n, blk)).unwrap();
        let n = plan.chunk_count();
        prop_assert!(n >= 1 && n <= chunk_n);
        prop_assert_eq!(plan.chunks.first().unwrap().region.start, 0);
        prop_assert_eq!(plan.chunks.last().unwrap().region.end, s);
        for w in plan.chunks.windows(2) {
            prop_assert_eq!(w[0].region.end, w[1].region.start);
        }
        for c in &plan.chunks {
            prop_assert!(c.sampled.end <= s);
            prop_assert!(c.sampled.end <= c.region.end);
            prop_assert_eq!(c.sampled.len(), blk.min(s));
            prop_assert!(c.sampled.start >= c.region.start || s < blk);
        }
        if s >= blk && s / chunk_n >= blk {
            prop_assert_eq!(n, chunk_n);
        }
    }

    #[test]
    fn column_and_slash_mass_agree(seed in 0u64..1000, s in 4usize..120, chunk_n in 1usize..4, blk in 2usize..20) {
        let h = random_head(seed, s, 5);
        let plan = plan_chunks(s, &cfg(chunk_n, blk)).unwrap();
        let red = block_reduce(&sample_scores(&h, &plan).unwrap(), blk).unwrap();
        for c in &red.chunks {
            let col: f64 = c.col_scores.iter().sum();
            let slash: f64 = c.slash_scores.iter().sum();
            prop_assert!((col - slash).abs() < 1e-6);
            prop_assert!(c.col_scores.iter().chain(&c.slash_scores).all(|&x| x >= 0.0));
        }
    }
}
