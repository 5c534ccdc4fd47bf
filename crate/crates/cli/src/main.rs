use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lgd::commands::{error_record, run, Command};
use lgd::config::ExperimentConfig;
use lgd::Result;

#[derive(Parser)]
#[command(name = "lgd", version, about = "Latent graph diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the graph autoencoder.
    PretrainAe(Common),
    /// Train the latent denoiser on a frozen autoencoder.
    TrainDiffusion(Common),
    /// Generate graphs and score them.
    Sample(Common),
    /// Predict masked graph attributes.
    Predict(Common),
    /// Score a graphs file against the training set.
    Evaluate(Common),
    /// Error-decomposition report.
    Theory(Common),
    /// Write the configured dataset as JSON lines.
    GenData(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
    #[arg(long)]
    device: Option<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse().expect("validated by clap");
        }
        if let Some(d) = &self.device {
            cfg.device = d.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, common) = match &cli.command {
        Cmd::PretrainAe(c) => (Command::PretrainAe, c),
        Cmd::TrainDiffusion(c) => (Command::TrainDiffusion, c),
        Cmd::Sample(c) => (Command::Sample, c),
        Cmd::Predict(c) => (Command::Predict, c),
        Cmd::Evaluate(c) => (Command::Evaluate, c),
        Cmd::Theory(c) => (Command::Theory, c),
        Cmd::GenData(c) => (Command::GenData, c),
    };
    match common.load().and_then(|cfg| run(cmd, &cfg)) {
        Ok(out) => {
            println!("{}", out.metrics_path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(2)
        }
    }
}
