use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "depthforge",
    version,
    about = "Latency-constrained depth compression planner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the latency CSV (a skeleton, or filled by a provider) and the
    /// feasible kernel sizes of every admissible segment.
    GenTables(GenTablesArgs),
    /// Solve for the plan with the highest importance within the budget.
    Plan(PlanArgs),
    /// Merge every planned segment into one convolution.
    Merge(MergeArgs),
    /// Re-check a plan against its tables and, optionally, its merged kernels.
    Verify(VerifyArgs),
    /// Plan over a list of budgets and write objective against budget.
    Sweep(SweepArgs),
}

#[derive(Args, Debug, Clone)]
#[group(required = false, multiple = false)]
pub struct LatencySource {
    /// Measured latency CSV (`i,j,k,depthwise,latency_ms`).
    #[arg(long, value_name = "PATH")]
    pub latency: Option<PathBuf>,
    /// Analytic provider config (`device_constant_ns_per_mac`, `depthwise_multiplier`).
    #[arg(long, value_name = "CONFIG")]
    pub analytic: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[group(required = true, multiple = false)]
pub struct BudgetArgs {
    /// Absolute latency budget in milliseconds.
    #[arg(long, value_name = "F")]
    pub budget_ms: Option<f64>,
    /// Budget as a percentage of the original network's latency.
    #[arg(long, value_name = "F")]
    pub budget_pct: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SolveArgs {
    #[arg(long, value_name = "PATH")]
    pub net: PathBuf,
    #[command(flatten)]
    pub source: LatencySource,
    /// Raw performance measurements (merge mode) or per-layer importances
    /// (layer-only mode), JSON.
    #[arg(long, value_name = "PATH")]
    pub importance: PathBuf,
    /// Discretization level P; defaults to ten levels per millisecond.
    #[arg(long, value_name = "P")]
    pub disc: Option<u64>,
    #[arg(long, value_enum, default_value_t = Sense::Strict)]
    pub sense: Sense,
    #[arg(long, value_enum, default_value_t = Mode::Merge)]
    pub mode: Mode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sense {
    Strict,
    Inclusive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Merge,
    LayerOnly,
}

#[derive(Args, Debug)]
pub struct GenTablesArgs {
    #[arg(long, value_name = "PATH")]
    pub net: PathBuf,
    #[command(flatten)]
    pub source: LatencySource,
    /// Output directory for `latency.csv` and `kernel_sizes.json`.
    #[arg(long, value_name = "PATH")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Plan JSON destination; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write the replaced-network specification used for fine-tuning.
    #[arg(long, value_name = "PATH")]
    pub replaced: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MergeArgs {
    #[arg(long, value_name = "PATH")]
    pub net: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub plan: PathBuf,
    /// Directory with `layer_<l>.bin/.json` blobs and optional
    /// `layer_<l>.bn.json` batch-norm parameters.
    #[arg(long, value_name = "DIR")]
    pub weights: PathBuf,
    /// Output directory for `segment_<start>_<end>.bin/.json`.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, value_name = "PATH")]
    pub plan: PathBuf,
    /// Original weights; enables the merge-equivalence check.
    #[arg(long, value_name = "DIR")]
    pub weights: Option<PathBuf>,
    /// Merged blobs to check instead of merging `--weights` afresh.
    #[arg(long, value_name = "DIR", requires = "weights")]
    pub merged: Option<PathBuf>,
    /// Seed of the random inputs used by the equivalence check.
    #[arg(long, value_name = "N", default_value_t = 0)]
    pub seed: u64,
    /// Compare the objective against exhaustive search (small networks only).
    #[arg(long, hide = true)]
    pub oracle: bool,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub solve: SolveArgs,
    /// Comma-separated budgets in milliseconds.
    #[arg(long, value_name = "LIST", value_delimiter = ',', num_args = 1.., conflicts_with = "budgets_pct")]
    pub budgets_ms: Vec<f64>,
    /// Comma-separated budgets as percentages of the original latency.
    #[arg(long, value_name = "LIST", value_delimiter = ',', num_args = 1..)]
    pub budgets_pct: Vec<f64>,
    /// CSV destination; stdout when omitted.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("DEPTHFORGE_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("DEPTHFORGE_THREADS must be a positive integer, got {value:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<depthforge::Error>())
        .map_or("cli", depthforge::Error::kind)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenTables(args) => commands::gen_tables(&args),
        Command::Plan(args) => commands::plan(&args),
        Command::Merge(args) => commands::merge(&args),
        Command::Verify(args) => commands::verify(&args),
        Command::Sweep(args) => commands::sweep(&args),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(err) => {
            let doc = json!({
                "error": error_kind(&err),
                "message": format!("{err:#}"),
            });
            eprintln!("{doc}");
            ExitCode::from(2)
        }
    }
}
