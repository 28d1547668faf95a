//! `bsrnn`: train, separate, evaluate and report.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use config::PipelineConfig;

/// Marks an error caused by the user's input rather than a fault during the run.
#[derive(Debug)]
pub struct UserError(pub String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

pub const DATASET_ENV: &str = "BSRNN_DATASET_ROOT";

#[derive(Debug, Parser)]
#[command(name = "bsrnn", version, about = "Band-split recurrent music source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML pipeline configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Dataset root with train/, test/ and optionally valid/.
    #[arg(long, env = DATASET_ENV)]
    dataset_root: Option<PathBuf>,

    /// Dotted override, e.g. `--set train.batch_size=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per source.
    Train(TrainArgs),
    /// Separate songs with trained checkpoints.
    Separate(SeparateArgs),
    /// Score estimates against a dataset split.
    Evaluate(EvaluateArgs),
    /// Merge run reports into a performance/energy table with the Pareto front.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    common: Common,

    /// vocals, bass, drums, other or all.
    #[arg(long, short)]
    pub source: String,

    #[arg(long)]
    pub patience: Option<usize>,

    #[arg(long)]
    pub max_epochs: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Number of consecutive seeds to train, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,

    /// Run directory; defaults to `<output_dir>/<label>-<source>-seed<seed>`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct SeparateArgs {
    #[command(flatten)]
    common: Common,

    /// Checkpoint file; the source comes from its header. Repeatable.
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,

    /// Input audio files.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,

    #[arg(long, short)]
    pub out_dir: PathBuf,

    /// ola or fader.
    #[arg(long)]
    pub method: Option<String>,

    /// OLA hop in seconds.
    #[arg(long)]
    pub hop: Option<f64>,

    /// Segment length in seconds for the chosen method.
    #[arg(long)]
    pub segment: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    common: Common,

    /// train, valid or test.
    #[arg(long, default_value = "test")]
    pub split: String,

    /// Directory of `<song>/<source>.wav` estimates.
    #[arg(long, conflicts_with = "checkpoints")]
    pub estimates: Option<PathBuf>,

    /// Separate the split with these checkpoints instead of reading estimates.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<PathBuf>,

    /// Report file (JSON); the text table goes next to it and to stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run report files (`run_report.json` or JSON-lines) or run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,

    /// Write the table here as well as to stdout.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

impl Common {
    /// Config file, then `--set` overrides, then the command's own flags.
    fn resolve(&self, flags: Vec<(&str, toml::Value)>) -> anyhow::Result<PipelineConfig> {
        let mut ov = self
            .overrides
            .iter()
            .map(|s| config::parse_override(s))
            .collect::<anyhow::Result<Vec<_>>>()?;
        ov.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
        let mut cfg = PipelineConfig::resolve(self.config.as_deref(), &ov)?;
        if let Some(root) = &self.dataset_root {
            cfg.dataset_root = Some(root.clone());
        }
        Ok(cfg)
    }
}

fn int(v: impl TryInto<i64>) -> toml::Value {
    toml::Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train(a) => {
            let mut flags = Vec::new();
            if let Some(p) = a.patience {
                flags.push(("train.patience", int(p)));
            }
            if let Some(m) = a.max_epochs {
                flags.push(("train.max_epochs", int(m)));
            }
            if let Some(s) = a.seed {
                flags.push(("seed", int(s)));
            }
            commands::train(a.common.resolve(flags)?, &a)
        }
        Command::Separate(a) => {
            let mut flags = Vec::new();
            if let Some(m) = &a.method {
                let method: bsrnn::inference::Method = m.parse().map_err(|e: bsrnn::Error| UserError(e.to_string()))?;
                flags.push(("inference.method", toml::Value::String(m.clone())));
                if let Some(s) = a.segment {
                    let key = match method {
                        bsrnn::inference::Method::Ola => "inference.ola.segment_s",
                        bsrnn::inference::Method::Fader => "inference.fader.segment_s",
                    };
                    flags.push((key, toml::Value::Float(s)));
                }
            } else if a.segment.is_some() {
                anyhow::bail!(UserError("--segment needs --method".into()));
            }
            if let Some(h) = a.hop {
                flags.push(("inference.ola.hop_s", toml::Value::Float(h)));
            }
            commands::separate(&a.common.resolve(flags)?, &a)
        }
        Command::Evaluate(a) => commands::evaluate(&a.common.resolve(Vec::new())?, &a),
        Command::Report(a) => commands::report(&a),
    }
}

fn io_code(e: &std::io::Error) -> u8 {
    use std::io::ErrorKind;
    match e.kind() {
        ErrorKind::NotFound | ErrorKind::PermissionDenied => 1,
        _ => 2,
    }
}

/// 1 for user errors, 2 for faults during the run.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UserError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<bsrnn::Error>() {
            use bsrnn::Error as E;
            return match e {
                E::Config(_)
                | E::UnknownSource(_)
                | E::FrameParams(_)
                | E::Scheme(_)
                | E::Data(_)
                | E::Checkpoint(_)
                | E::Audio { .. }
                | E::TomlDe(_) => 1,
                E::Io { source, .. } => io_code(source),
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return io_code(io);
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
