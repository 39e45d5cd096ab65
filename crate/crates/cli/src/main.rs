use std::path::{Path, PathBuf};
use std::process::ExitCode;

use branchtune::data::{gen_synthetic, SyntheticSpec};
use branchtune::experiment::{
    cka_between, output_dir, probe_checkpoint, report_summary, run_experiment, write_cifar_layout, ExperimentConfig,
};
use branchtune::Error;
use clap::{ArgAction, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "branchtune", version, about = "Continual self-supervised learning with branch expansion and compression")]
struct Cli {
    /// Reproducible mode. Every kernel already reduces in a fixed order, so
    /// turning this off only skips the thread-count notice.
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic grating dataset as CIFAR-100 style train.bin/eval.bin.
    GenData {
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        eval_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a continual experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override every run seed (the dataset seed is kept).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Linear-probe a checkpoint on every task of the configured stream.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Layer-wise CKA between two checkpoints.
    Cka {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Restrict to one task's eval split (1-based).
        #[arg(long)]
        task: Option<usize>,
    },
    /// Summarise a finished run directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> branchtune::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.reseed(s);
    }
    Ok(cfg)
}

fn configure_threads(deterministic: bool) -> branchtune::Result<()> {
    let threads = match std::env::var("BRANCHTUNE_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("BRANCHTUNE_THREADS must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    if !deterministic {
        log::info!("kernels use fixed reduction order; results do not depend on the thread count");
    }
    Ok(())
}

fn execute(cli: Cli) -> branchtune::Result<()> {
    configure_threads(cli.deterministic)?;
    match cli.command {
        Command::GenData { classes, per_class, eval_per_class, seed, noise, out } => {
            let spec = SyntheticSpec { num_classes: classes, train_per_class: per_class, eval_per_class, image_size: 32, seed, noise };
            let splits = gen_synthetic(&spec).map_err(|e| Error::Config(e.to_string()))?;
            write_cifar_layout(&splits, &out)?;
            println!("wrote {} train and {} eval images to {}", splits.train.len(), splits.eval.len(), out.display());
        }
        Command::Run { config, out, seed } => {
            let cfg = load(&config, seed)?;
            let dir = output_dir(&cfg, out.as_deref());
            let report = run_experiment(&cfg, &dir)?;
            let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
            println!(
                "{}: A {} F {} FT {} -> {}",
                report.strategy,
                fmt(report.a),
                fmt(report.f),
                fmt(report.ft),
                dir.display()
            );
        }
        Command::Probe { config, checkpoint, seed } => {
            let cfg = load(&config, seed)?;
            println!("task,accuracy");
            for (task, acc) in probe_checkpoint(&cfg, &checkpoint)? {
                println!("{task},{acc}");
            }
        }
        Command::Cka { config, a, b, task } => {
            let cfg = load(&config, None)?;
            println!("layer_index,layer_name,cka");
            for (i, (name, v)) in cka_between(&cfg, &a, &b, task)?.into_iter().enumerate() {
                println!("{i},{name},{v}");
            }
        }
        Command::Report { out } => print!("{}", report_summary(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}
