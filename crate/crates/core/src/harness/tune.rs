//! Offline threshold search over `(α_c, α_s, chunk_n)` per sequence-length
//! range, on synthetic tasks.
//!
//! Each range is evaluated at its upper bound. Sampling and reduction are
//! shared by all α cells of one `chunk_n`, and the dense probabilities are
//! computed once per head for all cells together.

use serde::{Deserialize, Serialize};

use crate::attention::HeadSet;
use crate::cra::retained_mass_many;
use crate::error::{check_alpha, Error, Result};
use crate::filtering::{merge_index, select_indices, BlockMask};
use crate::harness::pipeline::{sampled_retained_min, ORACLE_CAP};
use crate::harness::synthetic::{generate_synthetic, SyntheticSpec};
use crate::sampler::{block_reduce, plan_chunks, sample_scores, SparseConfig, DEFAULT_BLOCK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneGrid {
    pub alphas_c: Vec<f64>,
    pub alphas_s: Vec<f64>,
    pub chunk_ns: Vec<usize>,
    /// `(lo, hi]` sequence-length intervals.
    #[serde(default)]
    pub length_ranges: Vec<(usize, usize)>,
    #[serde(default = "default_recall")]
    pub recall_target: f64,
    #[serde(default = "one")]
    pub trials_per_cell: usize,
    #[serde(default = "default_block")]
    pub blk: usize,
    /// Task family; trial `t` uses seed `task.seed + t`.
    #[serde(default)]
    pub task: Option<SyntheticSpec>,
}

fn default_recall() -> f64 {
    0.9
}

fn one() -> usize {
    1
}

fn default_block() -> usize {
    DEFAULT_BLOCK
}

/// Turns cut points `L1 < L2 < ...` into ranges `(0, L1], (L1, L2], ...`.
pub fn ranges_from_lengths(lengths: &[usize]) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut lo = 0;
    for &hi in lengths {
        if hi <= lo {
            return Err(Error::invalid(format!(
                "lengths must be strictly increasing and positive, got {lengths:?}"
            )));
        }
        out.push((lo, hi));
        lo = hi;
    }
    Ok(out)
}

impl TuneGrid {
    pub fn validate(&self) -> Result<()> {
        if self.alphas_c.is_empty()
            || self.alphas_s.is_empty()
            || self.chunk_ns.is_empty()
            || self.length_ranges.is_empty()
        {
            return Err(Error::invalid("tuning grid lists must be nonempty"));
        }
        for &a in self.alphas_c.iter().chain(&self.alphas_s) {
            check_alpha(a)?;
        }
        if !(0.0..=1.0).contains(&self.recall_target) {
            return Err(Error::invalid(format!(
                "recall target {} outside [0, 1]",
                self.recall_target
            )));
        }
        if self.chunk_ns.contains(&0) || self.blk == 0 || self.trials_per_cell == 0 {
            return Err(Error::invalid("chunk_n, blk and trials must be at least 1"));
        }
        if let Some(&(lo, hi)) = self.length_ranges.iter().find(|&&(lo, hi)| hi <= lo) {
            return Err(Error::invalid(format!("empty length range ({lo}, {hi}]")));
        }
        Ok(())
    }
}

/// One evaluated grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneCell {
    pub alpha_c: f64,
    pub alpha_s: f64,
    pub chunk_n: usize,
    /// Chunk count after clamping at the evaluation length.
    pub effective_chunk_n: usize,
    /// Mean over trials of the worst head's CRA.
    pub mean_cra: f64,
    pub min_cra: f64,
    pub mean_density: f64,
    pub feasible: bool,
}

impl TuneCell {
    pub fn config(&self, blk: usize) -> SparseConfig {
        SparseConfig {
            alpha_c: self.alpha_c,
            alpha_s: self.alpha_s,
            chunk_n: self.chunk_n,
            blk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeResult {
    pub lo: usize,
    pub hi: usize,
    pub eval_len: usize,
    /// `cra_full` when the evaluation length is within the oracle cap,
    /// `cra_sampled` otherwise.
    pub metric: String,
    pub cells: Vec<TuneCell>,
    pub best: Option<SparseConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub recall_target: f64,
    pub trials_per_cell: usize,
    pub blk: usize,
    pub ranges: Vec<RangeResult>,
}

impl TuneReport {
    /// Tuned config for a sequence length `s`: the range with
    /// `lo < s <= hi`, or the last range for longer inputs.
    pub fn config_for(&self, s: usize) -> Option<SparseConfig> {
        self.ranges
            .iter()
            .find(|r| r.lo < s && s <= r.hi)
            .or_else(|| self.ranges.last().filter(|r| s > r.hi))
            .and_then(|r| r.best)
    }

    pub fn infeasible_ranges(&self) -> Vec<(usize, usize)> {
        self.ranges
            .iter()
            .filter(|r| r.best.is_none())
            .map(|r| (r.lo, r.hi))
            .collect()
    }
}

/// Cheapest cell reaching `recall_target`: minimal mean density, then
/// smaller `chunk_n`, then smaller `α_c + α_s`, then smaller `α_c`.
pub fn select_best(cells: &[TuneCell], recall_target: f64) -> Option<&TuneCell> {
    cells
        .iter()
        .filter(|c| c.mean_cra >= recall_target)
        .min_by(|a, b| {
            a.mean_density
                .total_cmp(&b.mean_density)
                .then(a.chunk_n.cmp(&b.chunk_n))
                .then((a.alpha_c + a.alpha_s).total_cmp(&(b.alpha_c + b.alpha_s)))
                .then(a.alpha_c.total_cmp(&b.alpha_c))
        })
}

struct Acc {
    cra_sum: f64,
    cra_min: f64,
    density_sum: f64,
    effective: usize,
}

/// Evaluates every cell of one range on `trials` head sets of length `s`.
fn evaluate(grid: &TuneGrid, tasks: &[HeadSet], s: usize) -> Result<Vec<TuneCell>> {
    let oracle = s <= ORACLE_CAP;
    let per_chunk = grid.alphas_c.len() * grid.alphas_s.len();
    let n_cells = grid.chunk_ns.len() * per_chunk;
    let mut acc: Vec<Acc> = (0..n_cells)
        .map(|_| Acc {
            cra_sum: 0.0,
            cra_min: f64::INFINITY,
            density_sum: 0.0,
            effective: 0,
        })
        .collect();
    for heads in tasks {
        let mut worst = vec![f64::INFINITY; n_cells];
        let mut density = vec![0.0; n_cells];
        for head in heads.heads() {
            let mut masks: Vec<BlockMask> = Vec::with_capacity(n_cells);
            let mut sampled = Vec::with_capacity(n_cells);
            for (ci, &chunk_n) in grid.chunk_ns.iter().enumerate() {
                let base = SparseConfig::new(1.0, 1.0, chunk_n, grid.blk)?;
                let plan = plan_chunks(s, &base)?;
                let samples = sample_scores(head, &plan)?;
                let reduced = block_reduce(&samples, grid.blk)?;
                for &alpha_c in &grid.alphas_c {
                    for &alpha_s in &grid.alphas_s {
                        let cfg = SparseConfig { alpha_c, alpha_s, ..base };
                        let mask = merge_index(&select_indices(&reduced, &cfg)?, &plan, grid.blk, s)?;
                        if !oracle {
                            sampled.push(sampled_retained_min(&samples, &mask));
                        }
                        masks.push(mask);
                    }
                }
                for a in &mut acc[ci * per_chunk..(ci + 1) * per_chunk] {
                    a.effective = plan.chunk_count();
                }
            }
            let cras = if oracle {
                let refs: Vec<&BlockMask> = masks.iter().collect();
                retained_mass_many(head, &refs)?.into_iter().map(|r| r.min).collect()
            } else {
                sampled
            };
            for (i, (m, c)) in masks.iter().zip(cras).enumerate() {
                worst[i] = worst[i].min(c);
                density[i] += m.block_density() / heads.len() as f64;
            }
        }
        for (a, (w, d)) in acc.iter_mut().zip(worst.into_iter().zip(density)) {
            a.cra_sum += w;
            a.cra_min = a.cra_min.min(w);
            a.density_sum += d;
        }
    }
    let trials = tasks.len() as f64;
    let mut cells = Vec::with_capacity(n_cells);
    let mut it = acc.into_iter();
    for &chunk_n in &grid.chunk_ns {
        for &alpha_c in &grid.alphas_c {
            for &alpha_s in &grid.alphas_s {
                let a = it.next().expect("one accumulator per cell");
                let mean_cra = a.cra_sum / trials;
                cells.push(TuneCell {
                    alpha_c,
                    alpha_s,
                    chunk_n,
                    effective_chunk_n: a.effective,
                    mean_cra,
                    min_cra: a.cra_min,
                    mean_density: a.density_sum / trials,
                    feasible: mean_cra >= grid.recall_target,
                });
            }
        }
    }
    Ok(cells)
}

/// Runs the grid search. `template` overrides `grid.task`; with neither,
/// the composed synthetic family at `d = 64` is used.
pub fn tune(grid: &TuneGrid, template: Option<&SyntheticSpec>) -> Result<TuneReport> {
    grid.validate()?;
    let template = template
        .cloned()
        .or_else(|| grid.task.clone())
        .unwrap_or_else(|| SyntheticSpec::composed(4096, 64, 0));
    let mut ranges = Vec::with_capacity(grid.length_ranges.len());
    for &(lo, hi) in &grid.length_ranges {
        let tasks = (0..grid.trials_per_cell)
            .map(|t| {
                let spec = scale_task(&template, hi).with_seed(template.seed.wrapping_add(t as u64));
                generate_synthetic(&spec)
            })
            .collect::<Result<Vec<_>>>()?;
        let cells = evaluate(grid, &tasks, hi)?;
        let best = select_best(&cells, grid.recall_target).map(|c| c.config(grid.blk));
        ranges.push(RangeResult {
            lo,
            hi,
            eval_len: hi,
            metric: if hi <= ORACLE_CAP { "cra_full" } else { "cra_sampled" }.to_string(),
            cells,
            best,
        });
    }
    Ok(TuneReport {
        recall_target: grid.recall_target,
        trials_per_cell: grid.trials_per_cell,
        blk: grid.blk,
        ranges,
    })
}

/// Moves a task template to length `s`, keeping planted positions and
/// offsets at the same relative place.
pub fn scale_task(template: &SyntheticSpec, s: usize) -> SyntheticSpec {
    let from = template.seq_len;
    let rescale = |x: usize| -> usize {
        if from == s {
            x
        } else {
            ((x as u128 * s as u128) / from as u128) as usize
        }
    };
    let mut spec = template.with_seq_len(s);
    for (p, _) in &mut spec.sink_columns {
        *p = rescale(*p).min(s - 1);
    }
    for (o, _) in &mut spec.slash_offsets {
        *o = rescale(*o).min(s - 1);
    }
    spec
}
