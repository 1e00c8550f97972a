mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dac_core::datagen::DataKind;
use dac_core::density::DensityKind;
use dac_core::engine::{ModelKind, Removal};
use dac_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dac", version, about = "Amortized clustering with filtering networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate labelled benchmark datasets as CSV.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Cluster every set in a CSV file with a trained model.
    Cluster(ClusterArgs),
    /// Benchmark a checkpoint on freshly generated datasets.
    Eval(EvalArgs),
    /// Draw one set as an SVG scatter plot.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KindArg {
    Mog,
    Warped,
}

impl From<KindArg> for DataKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Mog => DataKind::Mog,
            KindArg::Warped => DataKind::Warped,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelArg {
    Mlf,
    Af,
    ActSt,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Mlf => ModelKind::Mlf,
            ModelArg::Af => ModelKind::Af,
            ModelArg::ActSt => ModelKind::ActSt,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DensityArg {
    Gaussian,
    Maf,
    None,
}

impl From<DensityArg> for DensityKind {
    fn from(d: DensityArg) -> Self {
        match d {
            DensityArg::Gaussian => DensityKind::Gaussian,
            DensityArg::Maf => DensityKind::Maf,
            DensityArg::None => DensityKind::None,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum RemovalArg {
    Mask,
    Delete,
}

impl From<RemovalArg> for Removal {
    fn from(r: RemovalArg) -> Self {
        match r {
            RemovalArg::Mask => Removal::Mask,
            RemovalArg::Delete => Removal::Delete,
        }
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 1000)]
    n_max: usize,
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum, default_value = "mlf")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "mog")]
    kind: KindArg,
    #[arg(long, value_enum, default_value = "gaussian")]
    density: DensityArg,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long, default_value_t = 5e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_max: usize,
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    /// Datasets per forward pass; gradients are accumulated over the batch.
    #[arg(long, default_value_t = 10)]
    micro_batch: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    inducing: usize,
    #[arg(long, default_value_t = 4)]
    encoder_depth: usize,
    #[arg(long, default_value_t = 2)]
    decoder_depth: usize,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Also write the checkpoint every this many steps (0 disables).
    #[arg(long, default_value_t = 0)]
    save_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ClusterArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "delete")]
    removal: RemovalArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long, default_value_t = 1000)]
    n_max: usize,
    #[arg(long, default_value_t = 4)]
    k_max: usize,
    #[arg(long, default_value_t = 1000)]
    num_datasets: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = 50)]
    max_iters: usize,
    /// Key-value report path; the JSON report goes next to it with `.json` appended.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    data: PathBuf,
    /// CSV whose label column colours the points; defaults to the labels in `--data`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Which set to draw; defaults to the first one in the file.
    #[arg(long)]
    set_id: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Eval(a) => commands::eval(a),
        Command::Plot(a) => commands::plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
