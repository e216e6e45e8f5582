//! The `spx` command line: synthetic model generation, neuron analysis,
//! pruning, sparse expansion, evaluation sweeps and a latency bench.
//!
//! Settings resolve as defaults, then `--config FILE`, then flags. The
//! merged [`RunConfig`] is echoed into every `summary.json`.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use spx_core::evalreport::AblationSelector;
use spx_core::expansion::LayerScope;
use spx_core::synth::PlantedShape;

pub use config::RunConfig;
pub use error::{CliError, ErrorKind};

use bench::BenchFormat;
use config::{EvalMode, PruneMethod};

#[derive(Debug, Parser)]
#[command(name = "spx", version, about = "Neuron entanglement analysis, pruning and sparse expansion")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Default, Args)]
pub struct Common {
    /// JSON file with any subset of the run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "SPX_THREADS")]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short = 'o', long = "out", global = true)]
    pub out: Option<PathBuf>,
    /// Dense model directory.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Calibration tensor.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[arg(long, global = true)]
    pub sparsity: Option<f64>,
    /// `unstructured` or `kept:group`, e.g. `2:4`.
    #[arg(long, global = true)]
    pub pattern: Option<String>,
    #[arg(long, global = true)]
    pub bits: Option<u8>,
    #[arg(long, global = true)]
    pub quant_group: Option<usize>,
    #[arg(long, global = true)]
    pub block_size: Option<usize>,
    #[arg(long, global = true)]
    pub clusters: Option<usize>,
    #[arg(long, global = true)]
    pub pca_dims: Option<usize>,
    #[arg(long, global = true)]
    pub damping: Option<f64>,
    #[arg(long, global = true)]
    pub pair_budget: Option<usize>,
    #[arg(long, global = true)]
    pub bins: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted model and its calibration set.
    Synth(SynthArgs),
    /// Per-neuron WD, MD and input/output pair reports.
    Analyze(AnalyzeArgs),
    /// Prune every in-scope layer of a dense model.
    Prune(PruneArgs),
    /// Replace every layer by a router and per-cluster sparse experts.
    Expand,
    /// Parameter sweeps and targeted ablation on held-out data.
    Eval(EvalArgs),
    /// Single-threaded matrix-vector latency.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ShapeArg {
    Bimodal,
    HeavyTail,
    Trimodal,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub true_clusters: Option<usize>,
    #[arg(long)]
    pub planted: Option<usize>,
    #[arg(long, value_enum)]
    pub shape: Option<ShapeArg>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Single layer such as `b0.up`.
    #[arg(long)]
    pub layer: Option<String>,
    /// Fraction of neurons reported as selected by WD.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub variance_threshold: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum MethodArg {
    Sparsegpt,
    Magnitude,
    Wanda,
    KeepDense,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    All,
    Up,
    Down,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub keep_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Sweep,
    Ablation,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// `sparsity`, `clusters`, `bits` or `keep_dense`.
    #[arg(long)]
    pub axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub record_layer: Option<String>,
    #[arg(long)]
    pub holdout: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub selectors: Option<Vec<String>>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ablation_sparsities: Option<Vec<f64>>,
    #[arg(long)]
    pub random_draws: Option<usize>,
    #[arg(long, value_enum)]
    pub scope: Option<ScopeArg>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated `ROWSxCOLS` list.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub formats: Option<Vec<String>>,
    #[arg(long)]
    pub bench_sparsity: Option<f64>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    #[arg(long)]
    pub min_round_ms: Option<f64>,
}

fn scope(s: ScopeArg) -> LayerScope {
    match s {
        ScopeArg::All => LayerScope::All,
        ScopeArg::Up => LayerScope::Up,
        ScopeArg::Down => LayerScope::Down,
    }
}

fn parse_size(s: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Config(format!("size {s:?} is not ROWSxCOLS"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

/// Applies defaults, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let c = &cli.common;
    let mut cfg = match &c.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(c.threads => cfg.thread_count);
    set!(c.seed => cfg.seed);
    set!(c.out => cfg.output_dir);
    set!(c.sparsity => cfg.sparsity);
    set!(c.pattern => cfg.pattern);
    set!(c.quant_group => cfg.quant_group);
    set!(c.block_size => cfg.block_size);
    set!(c.clusters => cfg.clusters);
    set!(c.damping => cfg.damping);
    set!(c.pair_budget => cfg.pair_budget);
    set!(c.bins => cfg.histogram_bins);
    if c.model.is_some() {
        cfg.model_dir = c.model.clone();
    }
    if c.data.is_some() {
        cfg.data_path = c.data.clone();
    }
    if c.bits.is_some() {
        cfg.bits = c.bits;
    }
    if c.pca_dims.is_some() {
        cfg.pca_dims = c.pca_dims;
    }

    cfg.command = match &cli.command {
        Command::Synth(a) => {
            set!(a.d => cfg.synth.d);
            set!(a.d_ff => cfg.synth.d_ff);
            set!(a.depth => cfg.synth.depth);
            set!(a.samples => cfg.synth.samples);
            set!(a.true_clusters => cfg.synth.n_clusters_true);
            set!(a.planted => cfg.synth.planted_count);
            if let Some(s) = a.shape {
                cfg.synth.planted_shape = match s {
                    ShapeArg::Bimodal => PlantedShape::Bimodal,
                    ShapeArg::HeavyTail => PlantedShape::HeavyTail,
                    ShapeArg::Trimodal => PlantedShape::Trimodal,
                };
            }
            "synth"
        }
        Command::Analyze(a) => {
            if a.layer.is_some() {
                cfg.layer = a.layer.clone();
            }
            set!(a.fraction => cfg.fraction);
            set!(a.variance_threshold => cfg.variance_threshold);
            "analyze"
        }
        Command::Prune(a) => {
            if let Some(m) = a.method {
                cfg.method = match m {
                    MethodArg::Sparsegpt => PruneMethod::Sparsegpt,
                    MethodArg::Magnitude => PruneMethod::Magnitude,
                    MethodArg::Wanda => PruneMethod::Wanda,
                    MethodArg::KeepDense => PruneMethod::KeepDense,
                };
            }
            set!(a.keep_fraction => cfg.keep_fraction);
            if let Some(s) = a.scope {
                cfg.scope = scope(s);
            }
            "prune"
        }
        Command::Expand => "expand",
        Command::Eval(a) => {
            if let Some(m) = a.mode {
                cfg.eval_mode = match m {
                    ModeArg::Sweep => EvalMode::Sweep,
                    ModeArg::Ablation => EvalMode::Ablation,
                };
            }
            set!(a.axis => cfg.axis);
            if a.grid.is_some() {
                cfg.grid = a.grid.clone();
            }
            set!(a.record_layer => cfg.record_layer);
            set!(a.holdout => cfg.holdout_fraction);
            if let Some(s) = &a.selectors {
                cfg.selectors = s
                    .iter()
                    .map(|n| n.parse::<AblationSelector>().map_err(CliError::Config))
                    .collect::<Result<_, _>>()?;
            }
            set!(a.fraction => cfg.fraction);
            set!(a.ablation_sparsities => cfg.ablation_sparsities);
            set!(a.random_draws => cfg.random_draws);
            if let Some(s) = a.scope {
                cfg.scope = scope(s);
            }
            "eval"
        }
        Command::Bench(a) => {
            if let Some(s) = &a.sizes {
                cfg.bench.sizes = s.iter().map(|v| parse_size(v)).collect::<Result<_, _>>()?;
            }
            if let Some(f) = &a.formats {
                cfg.bench.formats = f
                    .iter()
                    .map(|v| v.parse::<BenchFormat>().map_err(CliError::Config))
                    .collect::<Result<_, _>>()?;
            }
            set!(a.bench_sparsity => cfg.bench.sparsity);
            set!(a.reps => cfg.bench.reps);
            set!(a.warmup => cfg.bench.warmup);
            set!(a.repetitions => cfg.bench.repetitions);
            set!(a.min_round_ms => cfg.bench.min_round_ms);
            "bench"
        }
    }
    .into();
    Ok(cfg)
}

/// Validates and runs one resolved command inside a pool of
/// `thread_count` workers, then writes its summary. Once the output
/// directory is known every failure leaves an error summary behind.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    let outcome = cfg.validate().and_then(|()| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.thread_count)
            .build()
            .map_err(|e| CliError::Compute(format!("thread pool: {e}")))?;
        pool.install(|| match cfg.command.as_str() {
            "synth" => commands::synth(cfg),
            "analyze" => commands::analyze(cfg),
            "prune" => commands::prune(cfg),
            "expand" => commands::expand(cfg),
            "eval" => commands::eval(cfg),
            "bench" => commands::bench(cfg),
            other => Err(CliError::Usage(format!("unknown command {other:?}"))),
        })
    });
    match outcome {
        Ok(o) => commands::write_summary(&o.summary_dir, cfg, Ok(&o.result)),
        Err(e) => {
            // best effort: the original error matters more than this write
            let _ = commands::write_summary(&cfg.output_dir, cfg, Err(&e));
            Err(e)
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print one JSON object on stderr.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code == 0 {
                return 0;
            }
            let err = CliError::Usage(e.kind().to_string());
            eprintln!("{}", err.to_json());
            return err.kind().exit_code();
        }
    };
    let result = resolve(&cli).and_then(|cfg| execute(&cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("{}", e.to_json());
            e.kind().exit_code()
        }
    }
}

pub fn run() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run_from(std::env::args_os())
}
