//! Stage two: score-based key/value block filtering.
//!
//! Each chunk keeps the fewest column blocks and slash blocks whose sampled
//! mass reaches `alpha_c` and `alpha_s` of the total, and the selected
//! indices are then extended over the chunk's query region into a
//! block-level mask.

use std::fmt::Write as _;

use crate::cra::AttentionMask;
use crate::error::{check_alpha, Error, Result};
use crate::sampler::{ChunkPlan, ReducedScores, SparseConfig};

/// Minimal `k` such that the `k` largest scores sum to at least
/// `alpha · Σ scores`, both sums taken in descending order.
/// Returns 0 when the scores sum to zero.
pub fn find_k(scores: &[f64], alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    if scores.is_empty() {
        return Err(Error::invalid("find_k needs at least one score"));
    }
    if let Some(x) = scores.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(Error::invalid(format!("scores must be finite and >= 0, got {x}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let cumsum: Vec<f64> = sorted
        .iter()
        .scan(0.0, |acc, &x| {
            *acc += x;
            Some(*acc)
        })
        .collect();
    let goal = alpha * cumsum[cumsum.len() - 1];
    if goal <= 0.0 {
        return Ok(0);
    }
    // cumsum is non-decreasing, so the first prefix reaching the goal is minimal
    Ok(cumsum.partition_point(|&c| c < goal) + 1)
}

/// Indices of the `k` largest scores in ascending index order. Equal scores
/// prefer the lower index.
pub fn arg_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::invalid(format!(
            "k={k} exceeds {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    Ok(order)
}

/// Column and slash blocks kept by one chunk.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChunkSelection {
    pub i_c: Vec<usize>,
    pub i_s: Vec<usize>,
    pub k_c: usize,
    pub k_s: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SelectedIndices {
    pub chunks: Vec<ChunkSelection>,
}

/// Block-level causal sparsity pattern over the (query block × key block)
/// grid. Active key blocks of each query block are kept sorted.
#[derive(Debug, Clone)]
pub struct BlockMask {
    seq_len: usize,
    blk: usize,
    rows: Vec<Vec<usize>>,
    provenance: Option<SelectedIndices>,
}

impl PartialEq for BlockMask {
    fn eq(&self, other: &Self) -> bool {
        self.seq_len == other.seq_len && self.blk == other.blk && self.rows == other.rows
    }
}

impl Eq for BlockMask {}

impl BlockMask {
    /// Validates causality (`kb <= qb`) and bounds; sorts and dedups each row.
    pub fn new(seq_len: usize, blk: usize, mut rows: Vec<Vec<usize>>) -> Result<Self> {
        if seq_len == 0 || blk == 0 {
            return Err(Error::invalid("block mask needs S >= 1 and blk >= 1"));
        }
        let n = seq_len.div_ceil(blk);
        if rows.len() != n {
            return Err(Error::shape(format!(
                "{} query blocks given, S={seq_len} with blk={blk} has {n}",
                rows.len()
            )));
        }
        for (qb, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            row.dedup();
            if let Some(&kb) = row.iter().find(|&&kb| kb > qb) {
                return Err(Error::invalid(format!(
                    "block ({qb}, {kb}) lies above the diagonal"
                )));
            }
        }
        Ok(Self {
            seq_len,
            blk,
            rows,
            provenance: None,
        })
    }

    /// Every causal block active.
    pub fn full(seq_len: usize, blk: usize) -> Result<Self> {
        let n = seq_len.div_ceil(blk.max(1));
        Self::new(seq_len, blk, (0..n).map(|qb| (0..=qb).collect()).collect())
    }

    /// Only the diagonal blocks active.
    pub fn diagonal(seq_len: usize, blk: usize) -> Result<Self> {
        let n = seq_len.div_ceil(blk.max(1));
        Self::new(seq_len, blk, (0..n).map(|qb| vec![qb]).collect())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn blk(&self) -> usize {
        self.blk
    }

    pub fn n_blocks(&self) -> usize {
        self.rows.len()
    }

    pub fn active(&self, qb: usize) -> &[usize] {
        &self.rows[qb]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, qb: usize, kb: usize) -> bool {
        self.rows[qb].binary_search(&kb).is_ok()
    }

    pub fn provenance(&self) -> Option<&SelectedIndices> {
        self.provenance.as_ref()
    }

    pub fn active_blocks(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn causal_blocks(&self) -> usize {
        let n = self.n_blocks();
        n * (n + 1) / 2
    }

    pub fn block_density(&self) -> f64 {
        self.active_blocks() as f64 / self.causal_blocks() as f64
    }

    /// Token range covered by block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        b * self.blk..((b + 1) * self.blk).min(self.seq_len)
    }

    /// Number of causal token entries inside active blocks.
    pub fn active_entries(&self) -> u64 {
        let mut total = 0u64;
        for (qb, row) in self.rows.iter().enumerate() {
            let qr = self.block_range(qb);
            for &kb in row {
                let kr = self.block_range(kb);
                total += if kb < qb {
                    (qr.len() * kr.len()) as u64
                } else {
                    // diagonal block: row q sees keys kr.start..=q
                    qr.clone().map(|q| (q + 1 - kr.start) as u64).sum::<u64>()
                };
            }
        }
        total
    }

    /// Entry-level sparsity ratio of the mask.
    pub fn sparsity_ratio(&self) -> f64 {
        let s = self.seq_len as u64;
        1.0 - self.active_entries() as f64 / (s * (s + 1) / 2) as f64
    }

    /// Query blocks missing their diagonal block, if any.
    pub fn missing_diagonal(&self) -> Vec<usize> {
        (0..self.n_blocks())
            .filter(|&qb| !self.contains(qb, qb))
            .collect()
    }

    /// Componentwise containment `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BlockMask) -> bool {
        self.rows.len() == other.rows.len()
            && self
                .rows
                .iter()
                .enumerate()
                .all(|(qb, row)| row.iter().all(|&kb| other.contains(qb, kb)))
    }

    /// `BLOCKMASK v1 <n_qblocks> <n_kblocks> <blk>` followed by one line of
    /// ascending active key blocks per query block.
    pub fn to_text(&self) -> String {
        let n = self.n_blocks();
        let mut out = format!("BLOCKMASK v1 {n} {n} {}\n", self.blk);
        for row in &self.rows {
            let mut first = true;
            for kb in row {
                if !first {
                    out.push(' ');
                }
                first = false;
                let _ = write!(out, "{kb}");
            }
            out.push('\n');
        }
        out
    }

    /// Parses one mask. The format does not carry `S`; without `seq_len` the
    /// mask is assumed to span `n_qblocks · blk` tokens.
    pub fn from_text(text: &str, seq_len: Option<usize>) -> Result<Self> {
        let mut masks = Self::parse_all(text, seq_len)?;
        if masks.len() != 1 {
            return Err(Error::format(0, format!("expected one mask, found {}", masks.len())));
        }
        Ok(masks.remove(0))
    }

    /// Parses a concatenation of masks, e.g. one per head.
    pub fn parse_all(text: &str, seq_len: Option<usize>) -> Result<Vec<Self>> {
        let mut masks = Vec::new();
        let mut offset = 0usize;
        let mut lines = text.split_inclusive('\n').peekable();
        while let Some(header) = lines.next() {
            let header_offset = offset;
            offset += header.len();
            if header.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() != 5 || fields[0] != "BLOCKMASK" || fields[1] != "v1" {
                return Err(Error::format(header_offset, "expected `BLOCKMASK v1 <nq> <nk> <blk>`"));
            }
            let num = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::format(header_offset, format!("bad number `{s}`")))
            };
            let (nq, nk, blk) = (num(fields[2])?, num(fields[3])?, num(fields[4])?);
            if nq != nk || nq == 0 || blk == 0 {
                return Err(Error::format(header_offset, "block grid must be square and nonempty"));
            }
            let mut rows = Vec::with_capacity(nq);
            for _ in 0..nq {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::format(offset, "truncated block mask"))?;
                let line_offset = offset;
                offset += line.len();
                let row = line
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<usize>()
                            .map_err(|_| Error::format(line_offset, format!("bad block index `{t}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
            let s = seq_len.unwrap_or(nq * blk);
            masks.push(Self::new(s, blk, rows).map_err(|e| Error::format(header_offset, e.to_string()))?);
        }
        Ok(masks)
    }
}

impl AttentionMask for BlockMask {
    fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn is_active(&self, q: usize, k: usize) -> bool {
        k <= q && q < self.seq_len && self.contains(q / self.blk, k / self.blk)
    }

    fn for_each_active_run(&self, q: usize, f: &mut dyn FnMut(usize, usize)) {
        let mut run: Option<(usize, usize)> = None;
        for &kb in &self.rows[q / self.blk] {
            let lo = kb * self.blk;
            let hi = ((kb + 1) * self.blk).min(q + 1);
            if lo >= hi {
                continue;
            }
            run = match run {
                Some((a, b)) if b == lo => Some((a, hi)),
                Some((a, b)) => {
                    f(a, b);
                    Some((lo, hi))
                }
                None => Some((lo, hi)),
            };
        }
        if let Some((a, b)) = run {
            f(a, b);
        }
    }
}

/// Extends each chunk's selected column and slash blocks over the chunk's
/// query region:
///
/// * a column block `kb` activates `(qb, kb)` for `kb <= qb`;
/// * a slash block `ob` activates `(qb, qb − ob − 1)` and `(qb, qb − ob)`,
///   the two key blocks its offset band can reach from query block `qb`;
/// * the diagonal block `(qb, qb)` is always active.
///
/// Query blocks overlapping two regions take the union of both selections.
pub fn merge_index(
    selected: &SelectedIndices,
    plan: &ChunkPlan,
    blk: usize,
    s: usize,
) -> Result<BlockMask> {
    if plan.seq_len != s || plan.blk != blk {
        return Err(Error::shape(format!(
            "plan is for S={} blk={}, merge asked for S={s} blk={blk}",
            plan.seq_len, plan.blk
        )));
    }
    if selected.chunks.len() != plan.chunks.len() {
        return Err(Error::shape(format!(
            "{} chunk selections for {} chunks",
            selected.chunks.len(),
            plan.chunks.len()
        )));
    }
    let n = s.div_ceil(blk);
    let mut grid = vec![vec![false; n]; n];
    for (sel, chunk) in selected.chunks.iter().zip(&plan.chunks) {
        if chunk.region.is_empty() {
            continue;
        }
        let first = chunk.region.start / blk;
        let last = (chunk.region.end - 1) / blk;
        for qb in first..=last {
            let row = &mut grid[qb];
            for &kb in &sel.i_c {
                if kb <= qb {
                    row[kb] = true;
                }
            }
            for &ob in &sel.i_s {
                if ob <= qb {
                    row[qb - ob] = true;
                }
                if ob < qb {
                    row[qb - ob - 1] = true;
                }
            }
            row[qb] = true;
        }
    }
    let rows = grid
        .into_iter()
        .map(|r| r.iter().enumerate().filter(|(_, &on)| on).map(|(kb, _)| kb).collect())
        .collect();
    let mut mask = BlockMask::new(s, blk, rows)?;
    mask.provenance = Some(selected.clone());
    Ok(mask)
}

/// Per-chunk threshold selection in both directions.
pub fn select_indices(reduced: &ReducedScores, cfg: &SparseConfig) -> Result<SelectedIndices> {
    cfg.validate()?;
    let chunks = reduced
        .chunks
        .iter()
        .map(|c| {
            let k_c = find_k(&c.col_scores, cfg.alpha_c)?;
            let k_s = find_k(&c.slash_scores, cfg.alpha_s)?;
            Ok(ChunkSelection {
                i_c: arg_topk(&c.col_scores, k_c)?,
                i_s: arg_topk(&c.slash_scores, k_s)?,
                k_c,
                k_s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SelectedIndices { chunks })
}

/// `find_k` and `arg_topk` per direction per chunk, then `merge_index`.
pub fn select_and_merge(
    reduced: &ReducedScores,
    plan: &ChunkPlan,
    cfg: &SparseConfig,
) -> Result<BlockMask> {
    if reduced.blk != plan.blk {
        return Err(Error::shape("reduced scores and plan use different block sizes"));
    }
    let selected = select_indices(reduced, cfg)?;
    merge_index(&selected, plan, plan.blk, plan.seq_len)
}
