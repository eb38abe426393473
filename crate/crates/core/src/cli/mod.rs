//! Command-line front end. Commands communicate only through files under
//! their `--out` directory.

mod commands;
pub mod manifest;
pub mod runconfig;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use manifest::{timestamp, RunManifest, GIT_DESCRIBE};

pub use commands::{model_checks, parse_systems, MODEL_TOL};
pub use runconfig::{AblationSection, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) => EXIT_USAGE,
        Error::Numeric { .. } | Error::Diverged { .. } | Error::GradientCheck(_) | Error::ArmsFailed(_) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

#[derive(Parser, Debug)]
#[command(name = "ppgconv", version, about = "PPG-to-mel accent conversion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded toy corpus.
    Gen(GenArgs),
    /// Train a conversion model on a corpus.
    Train(TrainArgs),
    /// Continue training a checkpoint on a new corpus with a fresh optimizer.
    Finetune(FinetuneArgs),
    /// Convert a PPG sequence to a mel spectrogram with a trained checkpoint.
    Convert(ConvertArgs),
    /// Finite-difference check of every primitive and of an end-to-end model.
    Gradcheck(GradcheckArgs),
    /// Train and compare several systems on the same data.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct OutArgs {
    /// Output directory; nothing is written outside it.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SpeakerArg {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[arg(long)]
    pub seed: u64,
    /// Number of utterances.
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value = "a")]
    pub speaker: SpeakerArg,
    /// Seed of the toy phone set shared by both speakers.
    #[arg(long, default_value_t = 1)]
    pub language_seed: u64,
    #[arg(long, default_value_t = 4)]
    pub min_phones: usize,
    #[arg(long, default_value_t = 8)]
    pub max_phones: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint with optimizer state to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// Checkpoint directory to start from.
    #[arg(long)]
    pub from: PathBuf,
    /// Run configuration JSON. A model section, if present, must match the
    /// checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Args, Debug)]
pub struct ConvertArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `[T × D]` posteriorgram in TNSR format.
    #[arg(long)]
    pub ppg: PathBuf,
    /// Reference mel (TNSR), required by checkpoints with the mel reference
    /// encoder.
    #[arg(long)]
    pub ref_mel: Option<PathBuf>,
    /// Phoneme symbols such as `"p03 p11 p07"`, required by checkpoints with
    /// the phoneme reference encoder.
    #[arg(long)]
    pub phones: Option<String>,
    /// Decoder step limit; defaults to twice the expected length.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    Micro,
    Small,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "micro")]
    pub scale: ScaleArg,
    #[arg(long, default_value_t = 11)]
    pub seed: u64,
    /// Where to write the JSON report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, requires = "out")]
    pub force: bool,
    /// Adds a component with a deliberately wrong gradient.
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated subset of baseline,s1,s2,s3; overrides the config.
    #[arg(long)]
    pub systems: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Creates `dir`, refusing a non-empty existing one unless `force`.
pub fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Usage(format!(
                "{} is not empty; pass --force to write into it",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// What a command reports back for its manifest.
#[derive(Default)]
pub(crate) struct RunInfo {
    pub config_path: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Gen(_) => "gen",
            Command::Train(_) => "train",
            Command::Finetune(_) => "finetune",
            Command::Convert(_) => "convert",
            Command::Gradcheck(_) => "gradcheck",
            Command::Ablate(_) => "ablate",
        }
    }

    fn out(&self) -> Option<(&Path, bool)> {
        match self {
            Command::Gen(a) => Some((&a.out.out, a.out.force)),
            Command::Train(a) => Some((&a.out.out, a.out.force)),
            Command::Finetune(a) => Some((&a.out.out, a.out.force)),
            Command::Convert(a) => Some((&a.out.out, a.out.force)),
            Command::Ablate(a) => Some((&a.out.out, a.out.force)),
            Command::Gradcheck(a) => a.out.as_deref().map(|p| (p, a.force)),
        }
    }

    fn execute(&self, info: &mut RunInfo) -> Result<()> {
        match self {
            Command::Gen(a) => commands::gen(a, info),
            Command::Train(a) => commands::train(a, info),
            Command::Finetune(a) => commands::finetune(a, info),
            Command::Convert(a) => commands::convert(a, info),
            Command::Gradcheck(a) => commands::gradcheck(a, info),
            Command::Ablate(a) => commands::ablate(a, info),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let started = SystemTime::now();
    if let Some((dir, force)) = cli.command.out() {
        if let Err(e) = prepare_out(dir, force) {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    }
    let mut info = RunInfo::default();
    let (code, message) = match cli.command.execute(&mut info) {
        Ok(()) => (EXIT_OK, None),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), Some(e.to_string()))
        }
    };
    if let Some((dir, _)) = cli.command.out() {
        let manifest = RunManifest {
            command: cli.command.name().to_string(),
            args: args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect(),
            config_path: info.config_path,
            seed: info.seed,
            git_describe: GIT_DESCRIBE.to_string(),
            out_dir: dir.to_path_buf(),
            started_at: timestamp(started),
            finished_at: timestamp(SystemTime::now()),
            exit_code: code,
            error: message,
        };
        if let Err(e) = manifest.write(dir) {
            eprintln!("error: {e}");
            return if code == EXIT_OK { exit_code(&e) } else { code };
        }
    }
    code
}
