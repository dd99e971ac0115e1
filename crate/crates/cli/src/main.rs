//! `graddrop`: run distributed training experiments with gradient dropping.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use graddrop::compress::{QuantMode, ThresholdScope};
use graddrop::harness::{report_skewness, run_experiment, sweep, DataSource, RunConfig, SweepAxis};
use graddrop::model::{load_checkpoint, Mlp, MlpSpec};
use graddrop::net::ScheduleMode;

#[derive(Parser)]
#[command(name = "graddrop", version, about = "Data-parallel SGD with gradient dropping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics.csv, summary.json and checkpoint.bin.
    Train(TrainArgs),
    /// Train once per value along one axis.
    Sweep {
        #[command(flatten)]
        train: TrainArgs,
        /// drop-ratio, threshold-scope or quantization.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0,90,99,99.9 or local/ln-on,global/ln-off.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
    },
    /// Skewness of one minibatch gradient at a checkpoint.
    Skewness {
        #[arg(long)]
        checkpoint: PathBuf,
        /// mnist:<dir> or synth.
        #[arg(long, default_value = "synth")]
        data: String,
        #[arg(long, default_value_t = 40)]
        batch_size: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 99.0)]
    drop_ratio: f64,
    /// Drop ratio for pull deltas, if different from pushes.
    #[arg(long)]
    pull_drop_ratio: Option<f64>,
    /// local or global.
    #[arg(long, default_value = "global")]
    threshold_scope: String,
    #[arg(long, value_enum, default_value = "on")]
    layer_norm: OnOff,
    /// none, threshold, column-avg, global-avg or two-bit.
    #[arg(long, default_value = "none")]
    quantize: String,
    #[arg(long, default_value_t = 40)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.005)]
    lr: f32,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// sync, async or free.
    #[arg(long, default_value = "async")]
    mode: String,
    /// mnist:<dir> or synth.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Three hidden layers of 4096 units instead of 256.
    #[arg(long)]
    paper_scale: bool,
    /// Use exact threshold selection instead of sampling.
    #[arg(long)]
    exact: bool,
    /// Worker steps between evaluations.
    #[arg(long, default_value_t = 500)]
    eval_interval: u64,
    /// Stop each worker after this many steps.
    #[arg(long)]
    max_steps: Option<u64>,
    /// Also write trace.csv with one row per message.
    #[arg(long)]
    trace: bool,
}

impl TrainArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut config = RunConfig {
            workers: self.workers,
            pull_drop_ratio: self.pull_drop_ratio,
            layer_norm: matches!(self.layer_norm, OnOff::On),
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.lr,
            seed: self.seed,
            mode: self.mode.parse::<ScheduleMode>()?,
            data: self.data.parse::<DataSource>()?,
            eval_interval: self.eval_interval,
            max_worker_steps: self.max_steps,
            out: Some(self.out.clone()),
            trace: self.trace,
            ..RunConfig::default()
        };
        config.drop.drop_ratio = self.drop_ratio;
        config.drop.scope = self.threshold_scope.parse::<ThresholdScope>()?;
        config.drop.exact_selection = self.exact;
        config.drop.quantization = match self.quantize.as_str() {
            "none" => None,
            mode => Some(mode.parse::<QuantMode>()?),
        };
        if self.paper_scale {
            config = config.paper_scale();
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => {
            let config = args.config()?;
            let report = run_experiment(&config)?;
            let s = &report.summary;
            info!("wrote {}", args.out.display());
            println!(
                "final accuracy {:.4}  payload bytes {}  compression ratio {}",
                s.final_accuracy,
                s.total_payload_bytes,
                s.compression_ratio.map_or("n/a".to_string(), |r| format!("{r:.2}"))
            );
        }
        Command::Sweep { train, axis, values } => {
            if values.is_empty() {
                bail!("--values needs at least one value");
            }
            let config = train.config()?;
            let axis: SweepAxis = axis.parse()?;
            let (train_set, test_set) = config.data.load(config.seed)?;
            let report = sweep(&config, axis, &values, &train_set, &test_set)?;
            for entry in &report.entries {
                match &entry.outcome {
                    Ok((summary, _)) => println!(
                        "{:>16}  accuracy {:.4}  compression ratio {}",
                        entry.value,
                        summary.final_accuracy,
                        summary
                            .compression_ratio
                            .map_or("n/a".to_string(), |r| format!("{r:.2}"))
                    ),
                    Err(e) => println!("{:>16}  failed: {e}", entry.value),
                }
            }
        }
        Command::Skewness {
            checkpoint,
            data,
            batch_size,
            seed,
        } => {
            let params = load_checkpoint(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let mlp = Mlp::new(MlpSpec::from_layout(params.layout())?)?;
            let (train, _) = data.parse::<DataSource>()?.load(seed)?;
            let report = report_skewness(&mlp, &params, &train, batch_size, seed)?;
            let show = |g: Option<f64>| g.map_or("undefined".to_string(), |g| format!("{g:.4}"));
            for t in &report.tensors {
                println!("{:<12} {}", t.name, show(t.g1));
            }
            println!("{:<12} {}", "pooled", show(report.pooled));
        }
    }
    Ok(())
}
