//! Adaptive structured sparse attention for long-context prefill.
//!
//! The pipeline estimates attention mass from a few exactly attended query
//! blocks, keeps the fewest column and slash block strips that reach the
//! configured cumulative residual attention (CRA) thresholds, and runs
//! block-sparse causal attention over the resulting mask:
//!
//! 1. [`sampler::plan_chunks`] / [`sampler::sample_scores`] /
//!    [`sampler::block_reduce`]
//! 2. [`filtering::select_and_merge`]
//! 3. [`sparse_exec::sparse_attention`]
//!
//! [`attention::dense_causal_attention`] and the [`cra`] metrics are the
//! 64-bit ground truth the sparse path is measured against. [`harness`]
//! adds the end-to-end driver, synthetic heads, tensor files, heatmaps and
//! the threshold tuner used by the `sample-attention` binary.

pub mod attention;
pub mod cra;
pub mod error;
pub mod filtering;
pub mod harness;
pub mod matrix;
pub mod sampler;
pub mod sparse_exec;

pub use attention::{
    causal_row_softmax, causal_row_softmax_at, dense_causal_attention, scaled_scores,
    AttentionHead, HeadSet,
};
pub use cra::{
    cra_of_mask, minimal_mass_fraction, output_error, sparsity_ratio, AttentionMask, EntryMask,
    RetainedMass,
};
pub use error::{Error, Result};
pub use filtering::{arg_topk, find_k, merge_index, select_and_merge, BlockMask, SelectedIndices};
pub use matrix::Matrix;
pub use sampler::{block_reduce, plan_chunks, sample_scores, ChunkPlan, ReducedScores, SparseConfig};
pub use sparse_exec::{flop_accounting, masked_dense_attention, sparse_attention, FlopReport};
pub use harness::pipeline::{bench, run_pipeline, sample_attention, BenchReport, MetricsReport};
pub use harness::synthetic::{generate_synthetic, SyntheticSpec};
pub use harness::tensor_io::{load_tensors, save_tensors};
pub use harness::tune::{tune, TuneGrid, TuneReport};
