use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protoreg::Execution;
use protoreg_cli::{
    cmd_eval, cmd_gen_data, cmd_run, cmd_sweep, CliError, ExperimentManifest, Result,
};

#[derive(Parser)]
#[command(
    name = "protoreg",
    version,
    about = "Incremental few-shot segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the manifest's world as OIFG feature files plus a schedule index.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Defaults to the manifest's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the base model and every incremental step for each trial.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on a feature file and print the report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value = "parallel")]
        execution: ExecArg,
    },
    /// One run per value of a manifest field.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Field name, e.g. `k`, `mu`, `lambda1` or `world.shots`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

#[derive(Args)]
struct Common {
    /// TOML manifest; defaults apply when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Any manifest field as KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(flatten)]
    train: TrainFlags,
}

/// One flag per training field.
#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    base_epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    incremental_iters: Option<String>,
    #[arg(long)]
    lr_init: Option<String>,
    #[arg(long)]
    lr_incremental: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    mu: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    lambda2: Option<String>,
    #[arg(long)]
    lambda3: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    mask_threshold: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    inheritance: Option<String>,
    #[arg(long)]
    distillation: Option<String>,
    #[arg(long)]
    unfreeze: Option<String>,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    scale: Option<String>,
    #[arg(long)]
    execution: Option<String>,
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, &String)> {
        let fields = [
            ("train.base_epochs", &self.base_epochs),
            ("train.batch_size", &self.batch_size),
            ("train.incremental_iters", &self.incremental_iters),
            ("train.lr_init", &self.lr_init),
            ("train.lr_incremental", &self.lr_incremental),
            ("train.momentum", &self.momentum),
            ("train.weight_decay", &self.weight_decay),
            ("train.mu", &self.mu),
            ("train.k", &self.k),
            ("train.n", &self.n),
            ("train.loss_weights.lambda1", &self.lambda1),
            ("train.loss_weights.lambda2", &self.lambda2),
            ("train.loss_weights.lambda3", &self.lambda3),
            ("train.loss_weights.tau", &self.tau),
            ("train.mask_threshold", &self.mask_threshold),
            ("train.seed", &self.seed),
            ("train.inheritance", &self.inheritance),
            ("train.distillation", &self.distillation),
            ("train.unfreeze", &self.unfreeze),
            ("train.extractor", &self.extractor),
            ("train.scale", &self.scale),
            ("train.execution", &self.execution),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
            .collect()
    }
}

impl Common {
    fn manifest(&self) -> Result<ExperimentManifest> {
        let mut m = match &self.manifest {
            Some(p) => ExperimentManifest::load(p)?,
            None => ExperimentManifest::default(),
        };
        if let Some(d) = &self.output_dir {
            m.output_dir = d.clone();
        }
        if let Some(t) = self.trials {
            m.trials = t;
        }
        if let Some(d) = &self.data_dir {
            m.data_dir = Some(d.clone());
        }
        for (k, v) in self.train.pairs() {
            m.set(k, v)?;
        }
        for kv in &self.sets {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            m.set(k.trim(), v.trim())?;
        }
        m.validate()?;
        Ok(m)
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let m = common.manifest()?;
            let dir = out.unwrap_or_else(|| m.output_dir.clone());
            let files = cmd_gen_data(&m, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Command::Run { common } => {
            let m = common.manifest()?;
            let out = cmd_run(&m)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&out.mean).expect("serializable")
            );
        }
        Command::Eval {
            checkpoint,
            features,
            execution,
        } => {
            let exec = match execution {
                ExecArg::Sequential => Execution::Sequential,
                ExecArg::Parallel => Execution::Parallel,
            };
            let report = cmd_eval(&checkpoint, &features, exec)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report.to_percent()).expect("serializable")
            );
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let m = common.manifest()?;
            for row in cmd_sweep(&m, &param, &values)? {
                println!(
                    "{},{:.4},{:.4},{:.4}",
                    row.setting, row.miou_base, row.miou_novel, row.hm
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
