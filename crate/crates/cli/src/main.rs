use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use volseg_core::harness::{
    cmd_eval, cmd_gen_data, cmd_report, cmd_sweep, cmd_train, format_evaluation, load_experiment, load_sweep,
    load_synthetic, EvalRequest, EvalSplit, GlobalOptions, HarnessError,
};
use volseg_core::{Shape3, SyntheticSpec};

/// Boundary-aware volumetric segmentation experiments.
#[derive(Debug, Parser)]
#[command(name = "volseg", version)]
struct Cli {
    /// TOML file: an experiment (train, eval), a sweep (sweep) or a
    /// synthetic corpus spec (gen-data).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Reproducibility mode: refuse options that reorder work.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train every configured seed and write result.json.
    Train {
        /// Continue into an existing output directory, skipping finished seeds.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on manifest volumes.
    Eval(EvalArgs),
    /// Run one experiment per value of a kernel_r or lambda_boundary sweep.
    Sweep {
        /// Run sweep values concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Write a synthetic corpus in both sample formats plus manifests.
    GenData,
    /// Tabulate and plot every result.json under a directory.
    Report {
        /// Directory to scan; defaults to --out.
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Test,
    Train,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Defaults to the config's manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Inference patch as H W D; defaults to the config's patch.
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"])]
    patch: Option<Vec<usize>>,
    /// Window stride as H W D; defaults to half the patch.
    #[arg(long, num_args = 3, value_names = ["H", "W", "D"])]
    stride: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Skip z-score normalization of the images.
    #[arg(long)]
    raw_intensities: bool,
}

fn shape(v: &[usize]) -> Shape3 {
    Shape3::new(v[0], v[1], v[2])
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, HarnessError> {
    path.as_deref()
        .ok_or_else(|| HarnessError::Invalid(format!("{what} requires --config")))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let globals = GlobalOptions {
        out: cli.out.clone(),
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Train { resume } => {
            let cfg = load_experiment(required(&cli.config, "train")?)?.with_globals(&globals);
            let result = cmd_train(&cfg, resume)?;
            println!(
                "{}: dice {:.4} (std {:.4}) over {} seeds -> {}",
                result.run_id,
                result.mean.dice,
                result.std.dice,
                result.per_seed.len(),
                cfg.out_dir.display()
            );
            if !result.failures.is_empty() {
                let seeds: Vec<String> = result.failures.iter().map(|f| f.seed.to_string()).collect();
                return Err(HarnessError::Partial(format!(
                    "seeds {} failed; partial results written",
                    seeds.join(", ")
                )));
            }
        }
        Command::Sweep { parallel } => {
            let mut spec = load_sweep(required(&cli.config, "sweep")?)?;
            spec.base = spec.base.with_globals(&globals);
            let summary = cmd_sweep(&spec, &globals, parallel)?;
            for row in &summary.rows {
                match (&row.error, row.dice) {
                    (None, Some(d)) => println!("{} = {}: dice {d:.4}", spec.axis.name(), row.value),
                    (err, _) => println!(
                        "{} = {}: failed ({})",
                        spec.axis.name(),
                        row.value,
                        err.as_deref().unwrap_or("")
                    ),
                }
            }
            println!("wrote {}", summary.csv.display());
            if summary.failed() > 0 {
                return Err(HarnessError::Partial(format!(
                    "{} of {} sweep values failed",
                    summary.failed(),
                    summary.rows.len()
                )));
            }
        }
        Command::GenData => {
            let spec = match &cli.config {
                Some(p) => load_synthetic(p, cli.seed)?,
                None => SyntheticSpec {
                    seed: cli.seed.unwrap_or_default(),
                    ..SyntheticSpec::default()
                },
            };
            let out = cli
                .out
                .ok_or_else(|| HarnessError::Invalid("gen-data requires --out".into()))?;
            let summary = cmd_gen_data(&spec, &out)?;
            println!(
                "{} train / {} test volumes in {}",
                summary.train,
                summary.test,
                out.display()
            );
        }
        Command::Eval(args) => {
            let mut req = match &cli.config {
                Some(p) => EvalRequest::from_experiment(&load_experiment(p)?, args.checkpoint.clone()),
                None => EvalRequest {
                    checkpoint: args.checkpoint.clone(),
                    manifest: PathBuf::new(),
                    split: EvalSplit::Test,
                    patch: Shape3::from_dims(volseg_core::TrainConfig::default().patch_size),
                    stride: None,
                    normalize: true,
                    metrics: Default::default(),
                    threshold: 0.5,
                    out: None,
                },
            };
            if let Some(m) = args.manifest {
                req.manifest = m;
            }
            if req.manifest.as_os_str().is_empty() {
                return Err(HarnessError::Invalid("eval needs --manifest or --config".into()));
            }
            if let Some(p) = &args.patch {
                req.patch = shape(p);
                req.stride = None;
            }
            if let Some(s) = &args.stride {
                req.stride = Some(shape(s));
            }
            req.split = match args.split {
                Split::Test => EvalSplit::Test,
                Split::Train => EvalSplit::Train,
            };
            req.threshold = args.threshold;
            req.normalize &= !args.raw_intensities;
            req.out = cli.out;
            print!("{}", format_evaluation(&cmd_eval(&req)?));
        }
        Command::Report { dir } => {
            let dir = dir
                .or_else(|| cli.out.clone())
                .ok_or_else(|| HarnessError::Invalid("report needs a directory".into()))?;
            let report = cmd_report(&dir, cli.out.as_deref())?;
            for (path, reason) in &report.skipped {
                eprintln!("warning: skipped {}: {reason}", path.display());
            }
            println!("{} runs; wrote {} files", report.rows.len(), report.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), single_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn single_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}
