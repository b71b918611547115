mod commands;
mod config;
mod dataset;

use clap::{Args, Parser, Subcommand};
use config::RunConfig;
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

/// Toy multimodal autoregressive generator: vocabulary, codebook, staged
/// training, constrained generation and reports.
///
/// All outputs land in `<root>/<config hash>/`, where the root is `runs` or
/// the `MGPT_OUTPUT_ROOT` environment variable.
#[derive(Debug, Parser)]
#[command(name = "mgpt", version)]
struct Cli {
    /// TOML run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the vocabulary manifest.
    VocabBuild(SeedArg),
    /// Build a patch codebook by k-means over PPM images, or the color palette.
    CodebookBuild(CodebookArgs),
    /// Format a dataset into masked token sequences.
    Tokenize(DataArgs),
    /// Run every stage of the progressive plan, checkpointing each stage.
    Train(DataArgs),
    /// Generate an image for a text prompt.
    Generate(GenerateArgs),
    /// Validate token sequences against the image-span grammar.
    Parse(ParseArgs),
    /// Sweep image decoding parameters over a grid of cells.
    Sweep(SweepArgs),
    /// Attention profile from the last image token of a sequence.
    Attn(AttnArgs),
}

#[derive(Debug, Args)]
struct SeedArg {
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct CodebookArgs {
    #[command(flatten)]
    seed: SeedArg,
    /// PPM files or directories of PPM files.
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,
    /// Use the eight-color palette instead of k-means.
    #[arg(long, conflicts_with = "images")]
    palette: bool,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[command(flatten)]
    seed: SeedArg,
    /// Dataset manifest (TOML list of task records).
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Built-in sets, comma separated: colors, stripes, captions.
    #[arg(long)]
    synthetic: Option<String>,
    /// Side in pixels of synthetic images.
    #[arg(long, default_value_t = 128)]
    side: u32,
    /// Stage whose buckets format the data (tokenize only; default: last).
    #[arg(long)]
    stage: Option<usize>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Checkpoint to load (default: the last stage checkpoint of the run).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    /// Requested pixel size; the matched bucket of the last stage is used.
    #[arg(long)]
    width: Option<u32>,
    #[arg(long)]
    height: Option<u32>,
    /// Sampling seed (default: the config seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Image-mode guidance scale.
    #[arg(long)]
    cfg: Option<f64>,
    /// Image-mode top-k.
    #[arg(long)]
    top_k: Option<usize>,
    /// Image-mode temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    unconstrained: bool,
}

#[derive(Debug, Args)]
struct ParseArgs {
    /// One sequence per line: whitespace-separated ids, or JSON with a
    /// `tokens` array.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    prompt: String,
    #[arg(long, value_delimiter = ',', default_value = "0.7,1.0")]
    temperatures: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,4,8")]
    top_ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,4")]
    cfgs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long)]
    unconstrained: bool,
}

#[derive(Debug, Args)]
struct AttnArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Generate the analysed sequence from this prompt.
    #[arg(long, required_unless_present = "tokens")]
    prompt: Option<String>,
    /// Or read it from the first line of this file.
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Sampling seed when generating (default: the config seed).
    #[arg(long)]
    seed: Option<u64>,
}

/// Machine-readable failure, printed to stderr as JSON.
#[derive(Debug, Serialize)]
pub struct CliError {
    pub error: &'static str,
    pub message: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl CliError {
    pub fn new(error: &'static str, message: impl Into<String>) -> Self {
        Self { error, message: message.into(), details: Vec::new() }
    }
}

fn load_config(cli: &Cli, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|m| CliError::new("config", m))?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(CliError { error: "config", message: format!("{} constraint(s) violated", violations.len()), details: violations });
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    use commands::*;
    match &cli.command {
        Command::VocabBuild(a) => vocab_build(&Run::open(load_config(cli, a.seed)?)?),
        Command::CodebookBuild(a) => codebook_build(&Run::open(load_config(cli, a.seed.seed)?)?, &a.images, a.palette),
        Command::Tokenize(a) => tokenize(&Run::open(load_config(cli, a.seed.seed)?)?, &data_source(a)?, a.stage),
        Command::Train(a) => train(&Run::open(load_config(cli, a.seed.seed)?)?, &data_source(a)?),
        Command::Generate(a) => {
            let run = Run::open(load_config(cli, None)?)?;
            let req = GenerateRequest {
                prompt: a.prompt.clone(),
                width: a.width,
                height: a.height,
                seed: a.seed.unwrap_or(run.cfg.seed),
                cfg: a.cfg,
                top_k: a.top_k,
                temperature: a.temperature,
                constrained: !a.unconstrained,
            };
            generate_cmd(&run, a.model.checkpoint.as_deref(), &req)
        }
        Command::Parse(a) => parse_cmd(&load_config(cli, None)?, &a.input),
        Command::Sweep(a) => {
            let run = Run::open(load_config(cli, None)?)?;
            let grid = SweepGrid {
                prompt: a.prompt.clone(),
                temperatures: a.temperatures.clone(),
                top_ks: a.top_ks.clone(),
                cfgs: a.cfgs.clone(),
                seeds: a.seeds.clone(),
                constrained: !a.unconstrained,
            };
            sweep_cmd(&run, a.model.checkpoint.as_deref(), &grid)
        }
        Command::Attn(a) => {
            let run = Run::open(load_config(cli, None)?)?;
            let seed = a.seed.unwrap_or(run.cfg.seed);
            attn_cmd(&run, a.model.checkpoint.as_deref(), a.prompt.as_deref(), a.tokens.as_deref(), seed)
        }
    }
}

fn data_source(a: &DataArgs) -> Result<commands::DataSource, CliError> {
    match (&a.dataset, &a.synthetic) {
        (Some(p), None) => Ok(commands::DataSource::Manifest(p.clone())),
        (None, Some(names)) => Ok(commands::DataSource::Synthetic { names: names.clone(), side: a.side }),
        _ => Err(CliError::new("usage", "give exactly one of --dataset or --synthetic")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e).expect("json"));
            ExitCode::FAILURE
        }
    }
}
