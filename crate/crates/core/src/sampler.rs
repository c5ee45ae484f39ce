//! Stage one: query-guided chunked sampling.
//!
//! The query axis is split into `chunk_n` equal regions. The last `blk`
//! queries of each region are attended exactly against every key, and the
//! resulting probability rows are reduced to block-granular mass along the
//! column (fixed key) and slash (fixed `q − k` offset) directions.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::attention::{probability_row, AttentionHead};
use crate::error::{check_alpha, Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_BLOCK: usize = 128;

/// Hyperparameters of the sparse attention pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseConfig {
    /// CRA threshold for column strips.
    pub alpha_c: f64,
    /// CRA threshold for slash strips.
    pub alpha_s: f64,
    /// Number of sampling chunks along the query axis.
    pub chunk_n: usize,
    /// Block edge length.
    #[serde(default = "default_block")]
    pub blk: usize,
}

fn default_block() -> usize {
    DEFAULT_BLOCK
}

impl Default for SparseConfig {
    fn default() -> Self {
        Self {
            alpha_c: 0.95,
            alpha_s: 0.95,
            chunk_n: 1,
            blk: DEFAULT_BLOCK,
        }
    }
}

impl SparseConfig {
    pub fn new(alpha_c: f64, alpha_s: f64, chunk_n: usize, blk: usize) -> Result<Self> {
        let cfg = Self {
            alpha_c,
            alpha_s,
            chunk_n,
            blk,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha_c)?;
        check_alpha(self.alpha_s)?;
        if self.chunk_n == 0 {
            return Err(Error::invalid("chunk_n must be at least 1"));
        }
        if self.blk == 0 {
            return Err(Error::invalid("blk must be at least 1"));
        }
        Ok(())
    }
}

/// One sampling chunk: the sampled query rows and the query region whose
/// mask the chunk's selection governs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampledRange {
    /// 1-based chunk index.
    pub index: usize,
    pub sampled: Range<usize>,
    pub region: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub seq_len: usize,
    pub itv: usize,
    pub blk: usize,
    pub requested_chunks: usize,
    pub chunks: Vec<SampledRange>,
}

impl ChunkPlan {
    /// Effective number of chunks after clamping.
    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn sampled_rows(&self) -> usize {
        self.chunks.iter().map(|c| c.sampled.len()).sum()
    }

    /// Fraction of query rows attended exactly during sampling.
    pub fn sampling_ratio(&self) -> f64 {
        self.sampled_rows() as f64 / self.seq_len as f64
    }

    pub fn n_blocks(&self) -> usize {
        self.seq_len.div_ceil(self.blk)
    }
}

/// Lays out the sampling chunks for a sequence of `s` tokens.
///
/// When a chunk would be shorter than one block, `chunk_n` drops to
/// `max(1, s / blk)`; when `s < blk` the whole sequence is one chunk.
pub fn plan_chunks(s: usize, cfg: &SparseConfig) -> Result<ChunkPlan> {
    if s == 0 {
        return Err(Error::invalid("sequence length must be at least 1"));
    }
    let blk = cfg.blk.max(1);
    let requested = cfg.chunk_n.max(1);
    if s < blk {
        return Ok(ChunkPlan {
            seq_len: s,
            itv: s,
            blk,
            requested_chunks: requested,
            chunks: vec![SampledRange {
                index: 1,
                sampled: 0..s,
                region: 0..s,
            }],
        });
    }
    let mut n = requested;
    if s / n < blk {
        n = (s / blk).max(1);
    }
    let itv = s / n;
    let chunks = (1..=n)
        .map(|i| SampledRange {
            index: i,
            sampled: i * itv - blk..i * itv,
            region: (i - 1) * itv..if i == n { s } else { i * itv },
        })
        .collect();
    Ok(ChunkPlan {
        seq_len: s,
        itv,
        blk,
        requested_chunks: requested,
        chunks,
    })
}

/// Exact probability rows of one chunk's sampled queries.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkSample {
    /// Global query position of each row of `probs`.
    pub positions: Vec<usize>,
    /// `rows × S`, zero past each row's position.
    pub probs: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledScores {
    pub chunks: Vec<ChunkSample>,
}

pub fn sample_scores(head: &AttentionHead, plan: &ChunkPlan) -> Result<SampledScores> {
    let s = head.seq_len();
    if plan.seq_len != s {
        return Err(Error::shape(format!(
            "plan built for S={}, head has S={s}",
            plan.seq_len
        )));
    }
    let mut buf = Vec::with_capacity(s);
    let chunks = plan
        .chunks
        .iter()
        .map(|c| {
            let positions: Vec<usize> = c.sampled.clone().collect();
            let mut probs = Matrix::zeros(positions.len(), s);
            for (r, &q) in positions.iter().enumerate() {
                probability_row(head, q, &mut buf);
                probs.row_mut(r)[..=q].copy_from_slice(&buf);
            }
            ChunkSample { positions, probs }
        })
        .collect();
    Ok(SampledScores { chunks })
}

/// Block-granular sampled mass of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkScores {
    /// Mass per key block `floor(j / blk)`.
    pub col_scores: Vec<f64>,
    /// Mass per offset block `floor((q − j) / blk)`; block 0 holds the
    /// main diagonal.
    pub slash_scores: Vec<f64>,
    pub total_mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedScores {
    pub blk: usize,
    pub chunks: Vec<ChunkScores>,
}

pub fn block_reduce(samples: &SampledScores, blk: usize) -> Result<ReducedScores> {
    if blk == 0 {
        return Err(Error::invalid("blk must be at least 1"));
    }
    let chunks = samples
        .chunks
        .iter()
        .map(|c| {
            let n_blocks = c.probs.cols().div_ceil(blk);
            let mut col_scores = vec![0.0; n_blocks];
            let mut slash_scores = vec![0.0; n_blocks];
            for (r, &q) in c.positions.iter().enumerate() {
                let row = &c.probs.row(r)[..=q];
                for (j, &p) in row.iter().enumerate() {
                    col_scores[j / blk] += p;
                    slash_scores[(q - j) / blk] += p;
                }
            }
            let total_mass = col_scores.iter().sum();
            ChunkScores {
                col_scores,
                slash_scores,
                total_mass,
            }
        })
        .collect();
    Ok(ReducedScores { blk, chunks })
}
