//! sonoqa: quality assessment for ultrasound standard planes.
//!
//! Subcommands: generate | train | eval | assess | selfcheck. Flags
//! override values from an optional `--config` JSON file; unknown config
//! keys are rejected before any compute. Exit codes: 0 success, 1 usage,
//! 2 data/IO, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use sonoqa_cli::checkpoint::Precision;
use sonoqa_cli::commands::{
    cmd_assess, cmd_eval, cmd_generate, cmd_selfcheck, cmd_train, counts_by_section,
    AssessOptions, EvalOptions, GenerateOptions, TrainOptions,
};
use sonoqa_cli::{CliError, CliResult};
use sonoqa_core::anatomy::Section;
use sonoqa_core::backbone::FenConfig;
use sonoqa_core::model::ModelConfig;
use sonoqa_core::phantom::{DatasetConfig, Split};
use sonoqa_core::trainer::TrainConfig;

#[derive(Parser)]
#[command(
    name = "sonoqa",
    version,
    about = "Standard-plane quality assessment: synthetic data, training, evaluation, reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with exact ground truth
    Generate(GenerateArgs),
    /// Train the multi-task model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Assess a single image and emit the quality report
    Assess(AssessArgs),
    /// Run the built-in verification battery
    Selfcheck(SelfcheckArgs),
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: &Option<PathBuf>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&raw)
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))
        }
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---- generate ------------------------------------------------------------

#[derive(Args)]
struct GenerateArgs {
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Samples per included section
    #[arg(long)]
    count: Option<usize>,
    /// Comma-separated sections (head,abdominal,heart)
    #[arg(long, value_delimiter = ',')]
    sections: Option<Vec<String>>,
    #[arg(long)]
    standard_ratio: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// png or pgm
    #[arg(long)]
    format: Option<String>,
    /// JSON config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct GenerateFileConfig {
    out: Option<PathBuf>,
    seed: Option<u64>,
    count: Option<usize>,
    sections: Option<Vec<String>>,
    standard_ratio: Option<f64>,
    image_size: Option<usize>,
    format: Option<String>,
    speckle: Option<f64>,
    shadow_opacity: Option<f64>,
    max_shadows: Option<u32>,
    max_rotation_deg: Option<f64>,
}

fn parse_sections(names: &[String]) -> CliResult<Vec<Section>> {
    names
        .iter()
        .map(|n| Section::parse(n).map_err(|e| CliError::Usage(e.to_string())))
        .collect()
}

fn resolve_generate(args: GenerateArgs) -> CliResult<GenerateOptions> {
    let file: GenerateFileConfig = read_config(&args.config)?;
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let section_names = pick(
        args.sections,
        file.sections,
        vec!["head".into(), "abdominal".into(), "heart".into()],
    );
    let sections = parse_sections(&section_names)?;
    let count = pick(args.count, file.count, 300);
    let (head, abdominal, heart) = counts_by_section(count, &sections);
    let defaults = DatasetConfig::default();
    let dataset = DatasetConfig {
        head,
        abdominal,
        heart,
        standard_ratio: pick(args.standard_ratio, file.standard_ratio, defaults.standard_ratio),
        image_size: pick(args.image_size, file.image_size, defaults.image_size),
        speckle: file.speckle.unwrap_or(defaults.speckle),
        shadow_opacity: file.shadow_opacity.unwrap_or(defaults.shadow_opacity),
        max_shadows: file.max_shadows.unwrap_or(defaults.max_shadows),
        max_rotation_deg: file.max_rotation_deg.unwrap_or(defaults.max_rotation_deg),
    };
    Ok(GenerateOptions {
        out,
        seed: pick(args.seed, file.seed, 42),
        format: pick(args.format, file.format, "png".into()),
        dataset,
    })
}

// ---- train ---------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (holds manifest.json)
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint and log
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    lr_decay_epochs: Option<usize>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    /// f32 (default) or f64
    #[arg(long)]
    precision: Option<String>,
    /// Divisor of the full stage widths (16 = desk scale)
    #[arg(long)]
    channel_scale: Option<usize>,
    /// Resume from an existing checkpoint
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct TrainFileConfig {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    lr_decay_epochs: Option<usize>,
    lr_decay_factor: Option<f64>,
    precision: Option<String>,
    channel_scale: Option<usize>,
    gamma: Option<f64>,
    grad_clip: Option<f64>,
    weights: Option<sonoqa_core::trainer::LossWeights>,
}

fn resolve_train(args: TrainArgs) -> CliResult<TrainOptions> {
    let file: TrainFileConfig = read_config(&args.config)?;
    let data = args
        .data
        .or(file.data)
        .ok_or_else(|| CliError::Usage("--data is required".into()))?;
    let out = args
        .out
        .or(file.out)
        .ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let seed = pick(args.seed, file.seed, 42);
    let defaults = TrainConfig::default();
    let train = TrainConfig {
        epochs: pick(args.epochs, file.epochs, defaults.epochs),
        batch_size: pick(args.batch_size, file.batch_size, defaults.batch_size),
        learning_rate: pick(args.learning_rate, file.learning_rate, defaults.learning_rate),
        momentum: pick(args.momentum, file.momentum, defaults.momentum),
        lr_decay_factor: pick(args.lr_decay_factor, file.lr_decay_factor, defaults.lr_decay_factor),
        lr_decay_epochs: args.lr_decay_epochs.or(file.lr_decay_epochs).or(defaults.lr_decay_epochs),
        gamma: file.gamma.unwrap_or(defaults.gamma),
        grad_clip: file.grad_clip.map(Some).unwrap_or(defaults.grad_clip),
        weights: file.weights.unwrap_or(defaults.weights),
        seed,
        ..defaults
    };
    let model = ModelConfig {
        fen: FenConfig {
            channel_scale: pick(args.channel_scale, file.channel_scale, 16),
            input_channels: 1,
        },
        ..ModelConfig::default()
    };
    Ok(TrainOptions {
        data,
        out,
        seed,
        precision: Precision::parse(&pick(args.precision, file.precision, "f32".into()))?,
        model,
        train,
        resume: args.resume,
    })
}

// ---- eval / assess ---------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// train | val | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_split(s: &str) -> CliResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split '{other}'"))),
    }
}

#[derive(Args)]
struct AssessArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// head | abdominal | heart
    #[arg(long)]
    section: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelfcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&resolve_generate(args)?),
        Command::Train(args) => cmd_train(&resolve_train(args)?),
        Command::Eval(args) => {
            let split = parse_split(&args.split)?;
            cmd_eval(&EvalOptions {
                checkpoint: args.checkpoint,
                data: args.data,
                split,
                out: args.out,
            })
        }
        Command::Assess(args) => {
            let section =
                Section::parse(&args.section).map_err(|e| CliError::Usage(e.to_string()))?;
            cmd_assess(&AssessOptions {
                checkpoint: args.checkpoint,
                image: args.image,
                section,
                out: args.out,
            })
            .map(|_| ())
        }
        Command::Selfcheck(args) => cmd_selfcheck(args.seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are successes, everything else is usage
            let code = if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
