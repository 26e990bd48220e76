//! The `nabla` command-line tool. Results go to stdout as JSON lines,
//! diagnostics to stderr.

mod commands;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use nabla_core::harness::AttentionMode;
use nabla_core::NablaError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

/// Adaptive block-sparse attention toolkit.
///
/// Every subcommand prints machine-readable JSON lines on stdout.
/// Set NABLA_THREADS to bound the worker pool.
#[derive(Debug, Parser)]
#[command(name = "nabla", version, max_term_width = 100)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reorder the token axis of a tensor between raster and block order.
    Reorder(ReorderArgs),
    /// Build an adaptive block mask from queries and keys.
    MaskNabla(MaskNablaArgs),
    /// Build a sliding-tile block mask for a token grid.
    MaskSta(MaskStaArgs),
    /// Union of two block masks.
    MaskJoin(MaskJoinArgs),
    /// Report popcount and sparsity of a block mask.
    MaskStats(MaskStatsArgs),
    /// Write one head of a block mask as a binary PGM image.
    MaskExportPgm(MaskExportPgmArgs),
    /// Run dense, masked or block-sparse attention.
    Attn(AttnArgs),
    /// Train the toy denoiser and log its loss curve.
    TrainToy(TrainArgs),
    /// Distill a trained toy denoiser into a student with another attention mode.
    DistillToy(DistillArgs),
}

#[derive(Debug, Args)]
pub struct ReorderArgs {
    /// Input tensor (.ntsr).
    #[arg(long)]
    pub input: PathBuf,
    /// Output tensor (.ntsr).
    #[arg(long)]
    pub output: PathBuf,
    /// Token grid as T,H,W,P.
    #[arg(long, value_parser = parse_grid)]
    pub grid: [usize; 4],
    /// Map block order back to raster order.
    #[arg(long)]
    pub inverse: bool,
}

#[derive(Debug, Args)]
pub struct MaskNablaArgs {
    /// Queries [h, S, D] or [S, D] in block order (.ntsr).
    #[arg(long)]
    pub q: PathBuf,
    /// Keys, same shape as the queries (.ntsr).
    #[arg(long)]
    pub k: PathBuf,
    /// Cumulative probability mass each row must retain, in [0, 1].
    #[arg(long)]
    pub thr: f64,
    /// Tokens per block.
    #[arg(long)]
    pub block_n: usize,
    /// Score scale; defaults to 1/sqrt(D).
    #[arg(long)]
    pub scale: Option<f64>,
    /// Output mask (.nmsk).
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskStaArgs {
    /// Window extents in blocks as t,h,w (odd).
    #[arg(long, value_parser = parse_triple)]
    pub window: [usize; 3],
    /// Token grid as T,H,W,P.
    #[arg(long, value_parser = parse_grid)]
    pub grid: [usize; 4],
    /// Output mask (.nmsk).
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskJoinArgs {
    /// Masks to combine (.nmsk).
    #[arg(required = true, num_args = 2)]
    pub inputs: Vec<PathBuf>,
    /// Output mask (.nmsk).
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct MaskStatsArgs {
    /// Mask to inspect (.nmsk).
    pub mask: PathBuf,
    /// Sliding-tile window as t,h,w; adds the closed-form dense block count.
    #[arg(long, value_parser = parse_triple, requires = "grid")]
    pub window: Option<[usize; 3]>,
    /// Token grid as T,H,W,P for --window.
    #[arg(long, value_parser = parse_grid, requires = "window")]
    pub grid: Option<[usize; 4]>,
}

#[derive(Debug, Args)]
pub struct MaskExportPgmArgs {
    /// Mask to draw (.nmsk).
    pub mask: PathBuf,
    /// Head to draw.
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Output image (.pgm).
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AttnMode {
    Dense,
    Masked,
    Sparse,
}

#[derive(Debug, Args)]
pub struct AttnArgs {
    /// Kernel to run.
    #[arg(long, value_enum)]
    pub mode: AttnMode,
    /// Queries [h, S, D] (.ntsr).
    #[arg(long)]
    pub q: PathBuf,
    /// Keys [h, S, D] (.ntsr).
    #[arg(long)]
    pub k: PathBuf,
    /// Values [h, S, D] (.ntsr).
    #[arg(long)]
    pub v: PathBuf,
    /// Block mask (.nmsk); required for masked and sparse modes.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Tokens per block; defaults to S divided by the mask size.
    #[arg(long)]
    pub block_n: Option<usize>,
    /// Score scale; defaults to 1/sqrt(D).
    #[arg(long)]
    pub scale: Option<f64>,
    /// Output tensor (.ntsr).
    #[arg(long)]
    pub output: PathBuf,
    /// Also run dense attention and report the max absolute difference.
    #[arg(long)]
    pub compare_dense: bool,
}

#[derive(Debug, Args)]
pub struct TrainingFlags {
    /// Flat key = value config file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. --set depth=3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    pub overrides: Vec<(String, String)>,
    /// Number of optimisation steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Random seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Samples per step.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Write the loss curve as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the trained weights to this checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Attention mode: full, nabla(THR) or nabla(THR)+sta(T,H,W).
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<AttentionMode>,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

#[derive(Debug, Args)]
pub struct DistillArgs {
    /// Teacher checkpoint directory written by train-toy.
    #[arg(long)]
    pub teacher: PathBuf,
    /// Student attention mode.
    #[arg(long, value_parser = parse_mode)]
    pub student_mode: AttentionMode,
    /// Teacher attention mode.
    #[arg(long, value_parser = parse_mode, default_value = "full")]
    pub teacher_mode: AttentionMode,
    #[command(flatten)]
    pub flags: TrainingFlags,
}

fn parse_list<const K: usize>(s: &str) -> Result<[usize; K], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("'{p}' is not a non-negative integer"))
        })
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|_| format!("expected {K} comma-separated integers, got '{s}'"))
}

fn parse_grid(s: &str) -> Result<[usize; 4], String> {
    parse_list::<4>(s)
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    parse_list::<3>(s)
}

fn parse_mode(s: &str) -> Result<AttentionMode, String> {
    s.parse().map_err(|e: NablaError| e.to_string())
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got '{s}'"))
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("NABLA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("NABLA_THREADS must be a positive integer, got '{raw}'"))?;
    // A second call in the same process (tests) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return EXIT_USAGE;
    }
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match commands::dispatch(cli.command, &mut out) {
        Ok(()) => {
            let _ = out.flush();
            EXIT_OK
        }
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            EXIT_FAILURE
        }
    }
}
