use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mrmf_core::config::{ConfigError, ExperimentConfig};
use mrmf_core::data::format::{read_dataset, write_dataset, FormatError};
use mrmf_core::data::synthetic::generate_synthetic;
use mrmf_core::data::{DataError, ResolutionFactors};
use mrmf_core::experiment::{run_experiment, ExperimentError, RunMode};
use mrmf_core::fusion::{fuse, fusion_plan, load_checkpoint, save_checkpoint, split_layer_groups, FusionError, Source};
use mrmf_core::report::{loss_curve_svg, phase_totals, write_phase_totals};
use mrmf_core::train::{read_metrics_file, PipelineError, TrainError};

/// Multi-resolution model fusion experiments.
#[derive(Debug, Parser)]
#[command(name = "mrmf", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a config file.
    GenData {
        /// Experiment config whose `data.synthetic` table describes the task.
        #[arg(long)]
        config: PathBuf,
        /// Output `.mrd` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Block-average every sample of a dataset.
    Downsample {
        /// Input `.mrd` file.
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated block size per spatial axis, e.g. 2,2,2.
        #[arg(long)]
        factors: ResolutionFactors,
        /// Output `.mrd` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a config file; artifacts go to `<output_dir>/<mode>/`.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Plain training on the original data, or the fusion schedule.
        #[arg(long, value_enum, default_value_t = ModeArg::Mrmf)]
        mode: ModeArg,
        /// Replace the model seed with this value and derive every phase
        /// seed from it (phase k gets 1000 * seed + k); the data seed is kept.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fuse the bottom layers of one checkpoint with the head of another.
    Fuse {
        /// Checkpoint providing the layers up to and including Flatten.
        #[arg(long)]
        coarse: PathBuf,
        /// Checkpoint providing the fully connected head.
        #[arg(long)]
        dense: PathBuf,
        /// Output `.mrc` file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a run's metrics as per-phase totals and a loss plot.
    Report {
        /// Directory containing `metrics.csv`.
        #[arg(long)]
        metrics_dir: PathBuf,
        /// Writes `<prefix>_phases.csv` and `<prefix>_loss.svg`.
        #[arg(long)]
        out_prefix: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Mrmf,
}

/// Process exit statuses. Usage errors exit with 2 from the argument parser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Io = 1,
    Config = 3,
    Data = 4,
    Aborted = 5,
    Fusion = 6,
}

struct Failure {
    status: Status,
    message: String,
}

impl Failure {
    fn new(status: Status, message: impl ToString) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        let status = match e {
            ConfigError::Io { .. } => Status::Io,
            _ => Status::Config,
        };
        Failure::new(status, e)
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        let status = match e {
            FormatError::Io(_) => Status::Io,
            _ => Status::Data,
        };
        Failure::new(status, e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::new(Status::Data, e)
    }
}

impl From<FusionError> for Failure {
    fn from(e: FusionError) -> Self {
        Failure::new(Status::Fusion, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(Status::Io, e)
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let status = match &e {
            ExperimentError::Config(ConfigError::Io { .. }) | ExperimentError::Io(_) => Status::Io,
            ExperimentError::Config(_) | ExperimentError::Model(_) => Status::Config,
            ExperimentError::Data(_) => Status::Data,
            ExperimentError::Format(FormatError::Io(_)) => Status::Io,
            ExperimentError::Format(_) => Status::Data,
            ExperimentError::Aborted { .. } => Status::Aborted,
            ExperimentError::Csv(_) => Status::Io,
            ExperimentError::Pipeline(p) => match p {
                PipelineError::Fusion(_) | PipelineError::Probe { .. } => Status::Fusion,
                PipelineError::Data(_) => Status::Data,
                PipelineError::Checkpoint(_) => Status::Io,
                PipelineError::Finetune(TrainError::Aborted(_)) => Status::Aborted,
                _ => Status::Config,
            },
        };
        Failure::new(status, e)
    }
}

fn gen_data(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg
        .data
        .synthetic
        .as_ref()
        .ok_or_else(|| Failure::new(Status::Config, "config has no data.synthetic table"))?;
    let data = generate_synthetic(spec)?;
    write_dataset(&data, out)?;
    println!(
        "wrote {}: {} samples of shape {:?}, label length {}",
        out.display(),
        data.len(),
        data.sample_shape(),
        data.label_len()
    );
    Ok(())
}

fn downsample(input: &Path, factors: &ResolutionFactors, out: &Path) -> Result<(), Failure> {
    let data = read_dataset(input)?;
    let reduced = data.downsample(factors)?;
    write_dataset(&reduced, out)?;
    println!(
        "wrote {}: {} samples, shape {:?} -> {:?}",
        out.display(),
        reduced.len(),
        data.sample_shape(),
        reduced.sample_shape()
    );
    Ok(())
}

fn train(config: &Path, mode: ModeArg, seed: Option<u64>) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg = cfg.with_seed(seed);
    }
    let mode = match mode {
        ModeArg::Baseline => RunMode::Baseline,
        ModeArg::Mrmf => RunMode::Mrmf,
    };
    let out = run_experiment(&cfg, mode)?;
    print!("{}", out.summary.to_toml());
    println!("# artifacts in {}", out.dir.display());
    Ok(())
}

fn fuse_cmd(coarse: &Path, dense: &Path, out: &Path) -> Result<(), Failure> {
    let c = load_checkpoint(coarse)?;
    let d = load_checkpoint(dense)?;
    let plan = fusion_plan(&c, &d)?;
    let fused = fuse(&c, &d)?;
    save_checkpoint(&fused, out)?;
    let groups = split_layer_groups(&fused);
    let span = |v: &[usize]| format!("{}-{}", v[0], v[v.len() - 1]);
    println!("bottom layers {}: coarse", span(&groups.bottom));
    println!("top layers {}: dense", span(&groups.top));
    for (i, (layer, src)) in fused.layers().iter().zip(&plan).enumerate() {
        let src = match src {
            Source::Coarse => "coarse",
            Source::Dense => "dense",
            Source::None => "-",
        };
        println!("  {i:>3} {:<12} {src}", layer.kind_name());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn report(dir: &Path, prefix: &Path) -> Result<(), Failure> {
    let path = dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Failure::new(Status::Io, format!("{} not found", path.display())));
    }
    let records =
        read_metrics_file(&path).map_err(|e| Failure::new(Status::Data, format!("{}: {e}", path.display())))?;
    if records.is_empty() {
        return Err(Failure::new(Status::Data, format!("{} has no records", path.display())));
    }
    let totals = phase_totals(&records);
    let with_suffix = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let (csv_path, svg_path) = (with_suffix("_phases.csv"), with_suffix("_loss.svg"));
    let mut buf = Vec::new();
    write_phase_totals(&mut buf, &totals).map_err(|e| Failure::new(Status::Io, e))?;
    fs::write(&csv_path, buf)?;
    fs::write(&svg_path, loss_curve_svg(&records))?;
    let total: f64 = totals.iter().map(|t| t.seconds).sum();
    println!(
        "{} phases, {} epochs, {total} s; wrote {} and {}",
        totals.len(),
        records.len(),
        csv_path.display(),
        svg_path.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { config, out } => gen_data(config, out),
        Command::Downsample { input, factors, out } => downsample(input, factors, out),
        Command::Train { config, mode, seed } => train(config, *mode, *seed),
        Command::Fuse { coarse, dense, out } => fuse_cmd(coarse, dense, out),
        Command::Report {
            metrics_dir,
            out_prefix,
        } => report(metrics_dir, out_prefix),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.status as u8)
        }
    }
}
