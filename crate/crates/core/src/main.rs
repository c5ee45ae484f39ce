use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sample_attention::cra::minimal_mass_fraction_head;
use sample_attention::harness::heatmap::{head_probability_image, mask_image};
use sample_attention::harness::pipeline::{bench, run_pipeline_detailed};
use sample_attention::harness::synthetic::{generate_synthetic, SyntheticSpec};
use sample_attention::harness::tensor_io::load_tensors;
use sample_attention::harness::tune::{ranges_from_lengths, scale_task, tune, TuneGrid, TuneReport};
use sample_attention::{Error, HeadSet, SparseConfig};

const EXIT_INPUT: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

#[derive(Parser)]
#[command(name = "sample-attention", version, about = "Adaptive structured sparse attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sparse pipeline on a tensor file or a synthetic spec.
    Run(RunArgs),
    /// Grid-search thresholds per sequence-length range.
    Tune(TuneArgs),
    /// Minimal per-row entry fraction reaching a mass threshold, per length.
    Sparsity(SparsityArgs),
    /// Dense versus sparse wall time.
    Bench(BenchArgs),
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Q/K/V tensor file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Synthetic spec (JSON).
    #[arg(long)]
    synthetic: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value_t = 0.95)]
    alpha_c: f64,
    #[arg(long, default_value_t = 0.95)]
    alpha_s: f64,
    #[arg(long, default_value_t = 1)]
    chunks: usize,
    #[arg(long, default_value_t = 128)]
    block: usize,
    /// Also compute dense-oracle metrics (skipped above the oracle cap).
    #[arg(long)]
    oracle: bool,
    /// Metrics JSON path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// PGM of head 0's block mask.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// PGM of head 0's dense attention probabilities.
    #[arg(long)]
    prob_heatmap: Option<PathBuf>,
    /// Max-pool factor for heatmaps; defaults to fit within 1024 pixels.
    #[arg(long)]
    downsample: Option<usize>,
    /// Serialised block masks, one per head.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Leave wall-clock timings out of the metrics.
    #[arg(long)]
    no_timings: bool,
}

#[derive(Args)]
struct TuneArgs {
    /// Grid JSON.
    #[arg(long)]
    grid: PathBuf,
    #[arg(long)]
    recall_target: Option<f64>,
    /// Range cut points, e.g. `1024,4096,16384` for (0,1024], (1024,4096], ...
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Synthetic task family; overrides the grid's task.
    #[arg(long)]
    synthetic: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SparsityArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    lengths: Vec<usize>,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    synthetic: PathBuf,
    /// Tuning output or a plain config JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    repeat: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Error(Error),
    Infeasible(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Error(e.into())
    }
}

type CliResult = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

fn load_source(src: &Source) -> Result<(HeadSet, Option<u64>), Error> {
    if let Some(path) = &src.input {
        return Ok((load_tensors(path)?, None));
    }
    let path = src.synthetic.as_ref().expect("clap enforces one source");
    let spec: SyntheticSpec = read_json(path)?;
    Ok((generate_synthetic(&spec)?, Some(spec.seed)))
}

fn cmd_run(a: RunArgs) -> CliResult {
    let cfg = SparseConfig::new(a.alpha_c, a.alpha_s, a.chunks, a.block)?;
    let (heads, seed) = load_source(&a.source)?;
    let mut run = run_pipeline_detailed(&heads, &cfg, a.oracle)?;
    run.report.seed = seed;
    if a.oracle && !run.report.oracle_computed {
        eprintln!(
            "note: S={} is above the oracle cap; reporting sampled-row CRA only",
            heads.seq_len()
        );
    }
    let ds = a
        .downsample
        .unwrap_or_else(|| heads.seq_len().div_ceil(1024).max(1));
    if let Some(p) = &a.heatmap {
        mask_image(&run.masks[0], ds)?.write_pgm(p)?;
    }
    if let Some(p) = &a.prob_heatmap {
        head_probability_image(&heads.heads()[0], ds)?.write_pgm(p)?;
    }
    if let Some(p) = &a.mask {
        let text: String = run.masks.iter().map(|m| m.to_text()).collect();
        fs::write(p, text)?;
    }
    emit(a.out.as_deref(), &run.report.to_json(!a.no_timings))?;
    Ok(())
}

fn cmd_tune(a: TuneArgs) -> CliResult {
    let mut grid: TuneGrid = read_json(&a.grid)?;
    if let Some(r) = a.recall_target {
        grid.recall_target = r;
    }
    if let Some(l) = &a.lengths {
        grid.length_ranges = ranges_from_lengths(l)?;
    }
    if let Some(t) = a.trials {
        grid.trials_per_cell = t;
    }
    let template = a
        .synthetic
        .as_deref()
        .map(read_json::<SyntheticSpec>)
        .transpose()?;
    let report = tune(&grid, template.as_ref())?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    emit(a.out.as_deref(), &text)?;
    let bad = report.infeasible_ranges();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Failure::Infeasible(format!(
            "no cell reaches recall target {} for length ranges {bad:?}",
            report.recall_target
        )))
    }
}

fn cmd_sparsity(a: SparsityArgs) -> CliResult {
    let spec: SyntheticSpec = read_json(&a.synthetic)?;
    let mut csv = String::from("S,head,minimal_mass_fraction,sparsity\n");
    for &s in &a.lengths {
        let heads = generate_synthetic(&scale_task(&spec, s))?;
        for h in heads.heads() {
            let f = minimal_mass_fraction_head(h, a.alpha)?;
            csv.push_str(&format!("{s},{},{f},{}\n", h.head_id, 1.0 - f));
        }
    }
    emit(a.out.as_deref(), csv.trim_end())?;
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult {
    let spec: SyntheticSpec = read_json(&a.synthetic)?;
    let text = fs::read_to_string(&a.config)?;
    let cfg = match serde_json::from_str::<TuneReport>(&text) {
        Ok(report) => report.config_for(spec.seq_len).ok_or_else(|| {
            Failure::Infeasible(format!("tuning table has no config for S={}", spec.seq_len))
        })?,
        Err(_) => serde_json::from_str::<SparseConfig>(&text).map_err(Error::from)?,
    };
    let heads = generate_synthetic(&spec)?;
    let report = bench(&heads, &cfg, a.repeat)?;
    let text = serde_json::to_string_pretty(&report).map_err(Error::from)?;
    emit(a.out.as_deref(), &text)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Sparsity(a) => cmd_sparsity(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Infeasible(msg)) => {
            eprintln!("infeasible: {msg}");
            ExitCode::from(EXIT_INFEASIBLE)
        }
        Err(Failure::Error(e @ Error::Invariant(_))) => {
            eprintln!("internal error: {e}");
            ExitCode::from(EXIT_INVARIANT)
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
    }
}
