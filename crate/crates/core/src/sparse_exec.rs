//! Block-sparse causal attention with a streaming softmax, the masked dense
//! reference it must agree with, and FLOP accounting.
//!
//! Masked logits are excluded exactly (the `c → ∞` limit of subtracting a
//! large constant), so active entries renormalise to one per row.

use serde::Serialize;

use crate::attention::AttentionHead;
use crate::cra::AttentionMask;
use crate::error::{Error, Result};
use crate::filtering::BlockMask;
use crate::matrix::{axpy, dot, scale_in_place, Matrix};

/// Work estimate for one mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopReport {
    pub active_blocks: usize,
    pub causal_blocks: usize,
    pub block_density: f64,
    pub estimated_flops_sparse: u64,
    pub estimated_flops_dense: u64,
    pub wall_time_sparse: Option<f64>,
    pub wall_time_dense: Option<f64>,
}

impl FlopReport {
    pub fn flop_ratio(&self) -> f64 {
        self.estimated_flops_sparse as f64 / self.estimated_flops_dense as f64
    }
}

/// Counts blocks and estimates `QKᵀ` plus `PV` work at `4 · rows · cols · d`
/// per block pair, where partial trailing blocks count their real size.
pub fn flop_accounting(mask: &BlockMask, s: usize, d: usize) -> Result<FlopReport> {
    if mask.seq_len() != s {
        return Err(Error::shape(format!(
            "mask built for S={}, asked for S={s}",
            mask.seq_len()
        )));
    }
    let block_flops = |qb: usize, kb: usize| -> u64 {
        4 * (mask.block_range(qb).len() * mask.block_range(kb).len() * d) as u64
    };
    let mut sparse = 0u64;
    let mut dense = 0u64;
    for qb in 0..mask.n_blocks() {
        for kb in 0..=qb {
            dense += block_flops(qb, kb);
        }
        for &kb in mask.active(qb) {
            sparse += block_flops(qb, kb);
        }
    }
    Ok(FlopReport {
        active_blocks: mask.active_blocks(),
        causal_blocks: mask.causal_blocks(),
        block_density: mask.block_density(),
        estimated_flops_sparse: sparse,
        estimated_flops_dense: dense,
        wall_time_sparse: None,
        wall_time_dense: None,
    })
}

/// Internal state of the executor after a run, exposed for verification.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecTrace {
    /// `(query block, key block)` pairs processed.
    pub blocks_visited: usize,
    /// Final running max per row.
    pub row_max: Vec<f64>,
    /// Final `Σ exp(s − row_max)` over the row's active entries.
    pub row_normalizer: Vec<f64>,
    /// Number of key entries that contributed to each row.
    pub row_entries: Vec<usize>,
}

/// Block-sparse causal attention under `mask`.
///
/// Each query block walks its active key blocks in ascending order, keeping
/// a running max, normaliser and weighted value sum per row. No `S × S`
/// buffer is allocated.
pub fn sparse_attention(head: &AttentionHead, mask: &BlockMask) -> Result<(Matrix, FlopReport)> {
    let (out, _) = sparse_attention_traced(head, mask)?;
    let report = flop_accounting(mask, head.seq_len(), head.dim())?;
    Ok((out, report))
}

pub fn sparse_attention_traced(head: &AttentionHead, mask: &BlockMask) -> Result<(Matrix, ExecTrace)> {
    let (s, d) = (head.seq_len(), head.dim());
    if mask.seq_len() != s {
        return Err(Error::shape(format!(
            "mask built for S={}, head has S={s}",
            mask.seq_len()
        )));
    }
    if let Some(qb) = (0..mask.n_blocks()).find(|&qb| mask.active(qb).is_empty()) {
        return Err(Error::EmptyQueryBlock(qb));
    }
    let scale = head.scale();
    let blk = mask.blk();
    let mut out = Matrix::zeros(s, d);
    let mut trace = ExecTrace {
        blocks_visited: 0,
        row_max: vec![f64::NEG_INFINITY; s],
        row_normalizer: vec![0.0; s],
        row_entries: vec![0; s],
    };
    let mut acc = vec![0.0; d];
    let mut logits = Vec::with_capacity(blk);

    for qb in 0..mask.n_blocks() {
        let active = mask.active(qb);
        trace.blocks_visited += active.len();
        for q in mask.block_range(qb) {
            let qrow = head.q.row(q);
            let mut m = f64::NEG_INFINITY;
            let mut l = 0.0;
            let mut seen = 0usize;
            acc.fill(0.0);
            for &kb in active {
                let lo = kb * blk;
                let hi = ((kb + 1) * blk).min(q + 1);
                if lo >= hi {
                    continue;
                }
                logits.clear();
                logits.extend((lo..hi).map(|j| dot(qrow, head.k.row(j)) * scale));
                let block_max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let m_new = m.max(block_max);
                if m > f64::NEG_INFINITY && m_new > m {
                    let shrink = (m - m_new).exp();
                    l *= shrink;
                    scale_in_place(&mut acc, shrink);
                }
                m = m_new;
                for (j, &x) in (lo..hi).zip(&logits) {
                    let w = (x - m).exp();
                    l += w;
                    axpy(&mut acc, w, head.v.row(j));
                }
                seen += hi - lo;
            }
            if seen == 0 {
                return Err(Error::EmptyRow(q));
            }
            let orow = out.row_mut(q);
            let inv = 1.0 / l;
            for (o, a) in orow.iter_mut().zip(&acc) {
                *o = a * inv;
            }
            trace.row_max[q] = m;
            trace.row_normalizer[q] = l;
            trace.row_entries[q] = seen;
        }
    }
    Ok((out, trace))
}

/// Dense reference for a masked softmax: masked logits are dropped and the
/// remaining probabilities renormalised. 64-bit throughout.
pub fn masked_dense_attention(head: &AttentionHead, mask: &dyn AttentionMask) -> Result<Matrix> {
    let (s, d) = (head.seq_len(), head.dim());
    if mask.seq_len() != s {
        return Err(Error::shape(format!(
            "mask built for S={}, head has S={s}",
            mask.seq_len()
        )));
    }
    let scale = head.scale();
    let mut out = Matrix::zeros(s, d);
    let mut keys = Vec::with_capacity(s);
    let mut logits = Vec::with_capacity(s);
    for q in 0..s {
        keys.clear();
        mask.for_each_active_run(q, &mut |lo, hi| keys.extend(lo..hi));
        if keys.is_empty() {
            return Err(Error::EmptyRow(q));
        }
        let qrow = head.q.row(q);
        logits.clear();
        logits.extend(keys.iter().map(|&j| dot(qrow, head.k.row(j)) * scale));
        crate::attention::softmax_in_place(&mut logits);
        let orow = out.row_mut(q);
        for (&j, &p) in keys.iter().zip(&logits) {
            axpy(orow, p, head.v.row(j));
        }
    }
    Ok(out)
}
