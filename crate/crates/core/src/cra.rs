//! Ground-truth accuracy metrics computed from the dense probability matrix:
//! cumulative residual attention (CRA) of a mask, minimal per-row mass
//! budgets, sparsity ratio and output error.
//!
//! CRA is measured on the original probabilities `P`, i.e. the mass of the
//! dense distribution that a mask keeps, not on the renormalised sparse
//! distribution.

use crate::attention::{probability_row, AttentionHead};
use crate::error::{check_alpha, Error, Result};
use crate::filtering::BlockMask;
use crate::matrix::Matrix;

/// Anything that can answer "is key `k` visible to query `q`".
pub trait AttentionMask {
    fn seq_len(&self) -> usize;

    fn is_active(&self, q: usize, k: usize) -> bool;

    /// Calls `f(lo, hi)` for each maximal run of active keys `lo..hi` of
    /// query `q`, in ascending order. Runs never extend past `q`.
    fn for_each_active_run(&self, q: usize, f: &mut dyn FnMut(usize, usize)) {
        let mut start = None;
        for k in 0..=q {
            match (self.is_active(q, k), start) {
                (true, None) => start = Some(k),
                (false, Some(lo)) => {
                    f(lo, k);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(lo) = start {
            f(lo, q + 1);
        }
    }
}

/// Token-granular causal mask stored as an explicit bit grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntryMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl EntryMask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    /// Every causal entry active.
    pub fn causal(s: usize) -> Self {
        Self::from_fn(s, |_, _| true)
    }

    /// Builds an `s × s` mask from a predicate; acausal entries stay 0.
    pub fn from_fn(s: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(s, s);
        for i in 0..s {
            for j in 0..=i {
                m.bits[i * s + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_block_mask(mask: &BlockMask) -> Self {
        let s = mask.seq_len();
        let mut m = Self::empty(s, s);
        for i in 0..s {
            mask.for_each_active_run(i, &mut |lo, hi| {
                m.bits[i * s + lo..i * s + hi].fill(true);
            });
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) -> Result<()> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::shape(format!("({i}, {j}) outside {}x{}", self.rows, self.cols)));
        }
        if on && j > i {
            return Err(Error::invalid(format!("entry ({i}, {j}) is acausal")));
        }
        self.bits[i * self.cols + j] = on;
        Ok(())
    }

    pub fn active_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

impl AttentionMask for EntryMask {
    fn seq_len(&self) -> usize {
        self.rows
    }

    fn is_active(&self, q: usize, k: usize) -> bool {
        k <= q && self.get(q, k)
    }
}

/// Per-row mass of `P` that survives a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct RetainedMass {
    pub per_row: Vec<f64>,
    /// CRA: the minimum over rows.
    pub min: f64,
    pub mean: f64,
}

impl RetainedMass {
    fn from_rows(per_row: Vec<f64>) -> Self {
        let min = per_row.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = per_row.iter().sum::<f64>() / per_row.len().max(1) as f64;
        Self {
            per_row,
            min: if min.is_finite() { min } else { 1.0 },
            mean,
        }
    }

    pub fn cra(&self) -> f64 {
        self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub cra: f64,
    pub mean_retained_mass: f64,
    pub sparsity_ratio: f64,
    pub max_row_rel_error: f64,
}

pub fn cra_of_mask(p: &Matrix, mask: &EntryMask) -> Result<RetainedMass> {
    if p.rows() != mask.rows() || p.cols() != mask.cols() {
        return Err(Error::shape(format!(
            "probabilities are {}x{}, mask is {}x{}",
            p.rows(),
            p.cols(),
            mask.rows(),
            mask.cols()
        )));
    }
    let per_row = (0..p.rows())
        .map(|i| {
            let row = p.row(i);
            (0..=i.min(p.cols().saturating_sub(1)))
                .filter(|&j| mask.get(i, j))
                .map(|j| row[j])
                .sum()
        })
        .collect();
    Ok(RetainedMass::from_rows(per_row))
}

/// Minimal number of largest entries of `row` whose sum reaches
/// `alpha · Σ row`. Sums run in descending order.
pub fn minimal_mass_count(row: &[f64], alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    let mut sorted = row.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(count_to_reach(&sorted, alpha))
}

fn count_to_reach(desc: &[f64], alpha: f64) -> usize {
    let total: f64 = desc.iter().sum();
    let goal = alpha * total;
    let mut acc = 0.0;
    for (k, &x) in desc.iter().enumerate() {
        if acc >= goal {
            return k;
        }
        acc += x;
    }
    desc.len()
}

/// Fraction of causal entries needed, row by row, to keep `alpha` of each
/// row's probability mass. Sparsity at `alpha` is `1 −` this value.
pub fn minimal_mass_fraction(p: &Matrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if p.rows() != p.cols() {
        return Err(Error::shape("probability matrix must be square"));
    }
    let s = p.rows();
    let mut buf = Vec::with_capacity(s);
    let mut needed = 0usize;
    for i in 0..s {
        buf.clear();
        buf.extend_from_slice(&p.row(i)[..=i]);
        buf.sort_unstable_by(|a, b| b.total_cmp(a));
        needed += count_to_reach(&buf, alpha);
    }
    Ok(needed as f64 / causal_entries(s) as f64)
}

/// Same as [`minimal_mass_fraction`] on the dense `P` of `head`, computed row
/// by row without holding `P`.
pub fn minimal_mass_fraction_head(head: &AttentionHead, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let s = head.seq_len();
    let mut buf = Vec::with_capacity(s);
    let mut needed = 0usize;
    for i in 0..s {
        probability_row(head, i, &mut buf);
        buf.sort_unstable_by(|a, b| b.total_cmp(a));
        needed += count_to_reach(&buf, alpha);
    }
    Ok(needed as f64 / causal_entries(s) as f64)
}

pub(crate) fn causal_entries(s: usize) -> u64 {
    s as u64 * (s as u64 + 1) / 2
}

pub fn sparsity_ratio(mask: &EntryMask) -> f64 {
    let s = mask.rows();
    if s == 0 {
        return 0.0;
    }
    let active = (0..s)
        .map(|i| (0..=i.min(mask.cols() - 1)).filter(|&j| mask.get(i, j)).count() as u64)
        .sum::<u64>();
    1.0 - active as f64 / causal_entries(s) as f64
}

/// Largest per-row relative L2 error `‖a_i − b_i‖ / max(‖b_i‖, 1e-12)`.
pub fn output_error(o_sparse: &Matrix, o_dense: &Matrix) -> Result<f64> {
    if !o_sparse.same_shape(o_dense) {
        return Err(Error::shape(format!(
            "outputs are {}x{} and {}x{}",
            o_sparse.rows(),
            o_sparse.cols(),
            o_dense.rows(),
            o_dense.cols()
        )));
    }
    let mut worst = 0.0f64;
    for i in 0..o_dense.rows() {
        let (a, b) = (o_sparse.row(i), o_dense.row(i));
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-12));
    }
    Ok(worst)
}

/// Retained mass of several block masks over the dense `P` of one head, in a
/// single pass that computes each probability row once.
pub fn retained_mass_many(head: &AttentionHead, masks: &[&BlockMask]) -> Result<Vec<RetainedMass>> {
    let s = head.seq_len();
    if let Some(m) = masks.iter().find(|m| m.seq_len() != s) {
        return Err(Error::shape(format!(
            "mask built for S={}, head has S={s}",
            m.seq_len()
        )));
    }
    let mut per_mask: Vec<Vec<f64>> = masks.iter().map(|_| Vec::with_capacity(s)).collect();
    let mut buf = Vec::with_capacity(s);
    for i in 0..s {
        probability_row(head, i, &mut buf);
        // dividing by the row's own sum makes a fully kept row exactly 1
        let total: f64 = buf.iter().sum();
        for (mask, rows) in masks.iter().zip(per_mask.iter_mut()) {
            let mut kept = 0.0;
            mask.for_each_active_run(i, &mut |lo, hi| {
                kept += buf[lo..hi].iter().sum::<f64>();
            });
            rows.push(kept / total);
        }
    }
    Ok(per_mask.into_iter().map(RetainedMass::from_rows).collect())
}

pub fn retained_mass(head: &AttentionHead, mask: &BlockMask) -> Result<RetainedMass> {
    Ok(retained_mass_many(head, &[mask])?.remove(0))
}

pub fn accuracy_report(
    p: &Matrix,
    mask: &EntryMask,
    o_sparse: &Matrix,
    o_dense: &Matrix,
) -> Result<AccuracyReport> {
    let kept = cra_of_mask(p, mask)?;
    Ok(AccuracyReport {
        cra: kept.min,
        mean_retained_mass: kept.mean,
        sparsity_ratio: sparsity_ratio(mask),
        max_row_rel_error: output_error(o_sparse, o_dense)?,
    })
}
