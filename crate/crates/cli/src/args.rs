use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "conmamba", version, about = "Contrastive selective state-space encoder: data, pretraining, probing, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the configured synthetic dataset (PNGs and manifest) to the output directory.
    Synth(Common),
    /// Contrastive pretraining; resumes if the run directory already holds a checkpoint.
    Pretrain(Common),
    /// Fit a linear probe on frozen features of the pretrained encoder.
    Probe(Common),
    /// Evaluate encoder and probe on the test split.
    Eval(Common),
    /// Export pre-projection embeddings of every sample to CSV.
    Embed(Common),
    /// Finite-difference check of every differentiable operation and the micro model.
    Gradcheck(GradcheckArgs),
    /// Time sequential against prefix-scan evaluation of the recurrence.
    BenchScan(BenchArgs),
}

/// Flags shared by the pipeline commands; each overrides the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration (every section required); built-in defaults when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Global seed (training streams and the synthetic generator).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory (dataset directory for `synth`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset directory written by `synth` or laid out as one folder per class.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// NT-Xent temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Inter-class hinge margin.
    #[arg(long)]
    pub margin: Option<f64>,
    /// Train with the intra-class loss only.
    #[arg(long)]
    pub no_inter_loss: bool,
    /// Worker threads for data-parallel work.
    #[arg(long, env = "CONMAMBA_THREADS")]
    pub device_threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random inputs per operation.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Skip the full micro-model check.
    #[arg(long)]
    pub ops_only: bool,
    /// Add an operation with a deliberately wrong backward rule.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
    #[arg(long, env = "CONMAMBA_THREADS")]
    pub device_threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384, 32768])]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 31)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "CONMAMBA_THREADS")]
    pub device_threads: Option<usize>,
}
