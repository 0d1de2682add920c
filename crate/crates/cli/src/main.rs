//! `think3d` command-line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use think3d::config::RunConfig;
use think3d::pipeline;

#[derive(Parser)]
#[command(name = "think3d", version, about = "Latent 3D reasoning tokens on a procedural multi-view task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed` in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    resume: bool,
    /// Dataset directory with train.jsonl and test.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config override, e.g. `--set sft.lr=3e-4`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test splits.
    Datagen(Common),
    /// Stage 1: supervised training with latent alignment.
    TrainSft(Common),
    /// Stage 2: GRPO from a stage-1 checkpoint (--checkpoint).
    TrainRl(Common),
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Report printed to stdout; both are always written to --out.
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Dump latents, projections and cosine maps.
    ExportLatents(Common),
    /// Run an ablation sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// latent-size, token-position or reward-removal.
        #[arg(long)]
        axis: String,
    },
}

fn load(c: &Common) -> think3d::Result<RunConfig> {
    let mut overrides = c.overrides.clone();
    if let Some(s) = c.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(d) = &c.data {
        overrides.push(format!("paths.data={:?}", d.display().to_string()));
    }
    if let Some(p) = &c.checkpoint {
        overrides.push(format!("paths.checkpoint={:?}", p.display().to_string()));
    }
    RunConfig::load(c.config.as_deref(), &overrides)
}

fn run(cmd: Command) -> think3d::Result<()> {
    match cmd {
        Command::Datagen(c) => {
            let cfg = load(&c)?;
            print!("{}", pipeline::cmd_datagen(&cfg, &c.out)?);
        }
        Command::TrainSft(c) => {
            let r = pipeline::cmd_train_sft(&load(&c)?, &c.out, c.resume)?;
            println!("stage 1 finished at step {} (config {}); latest: {}", r.step, r.config_hash, r.latest.display());
        }
        Command::TrainRl(c) => {
            let r = pipeline::cmd_train_rl(&load(&c)?, &c.out, c.resume)?;
            println!("stage 2 finished at step {} (config {}); latest: {}", r.step, r.config_hash, r.latest.display());
        }
        Command::Eval { common, format } => {
            let report = pipeline::cmd_eval(&load(&common)?, &common.out)?;
            match format {
                ReportFormat::Table => print!("{}", report.to_table()),
                ReportFormat::Json => println!("{}", report.to_json()),
            }
        }
        Command::ExportLatents(c) => {
            let dumps = pipeline::cmd_export(&load(&c)?, &c.out)?;
            for d in &dumps {
                match d.mean_cosine() {
                    Some(m) => println!("{:06}: mean patch cosine {m:.4}", d.question_id),
                    None => println!("{:06}: no latent block", d.question_id),
                }
            }
        }
        Command::Ablate { common, axis } => {
            let report = pipeline::cmd_ablate(&load(&common)?, &axis, &common.out)?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
