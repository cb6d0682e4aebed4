//! Command-line driver: dataset generation, training, evaluation and
//! statistical comparison of the model grid.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod report;

pub use config::{Config, RawConfig};

/// An error carrying its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn user(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<hbnet::Error> for CliError {
    fn from(e: hbnet::Error) -> Self {
        let code = match e {
            hbnet::Error::Shape { .. } | hbnet::Error::NotScalar(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hbnet",
    version,
    about = "Train and compare recurrent and hierarchically branched CNNs on cluttered glyphs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the train, validation and test splits and their normalization statistics.
    Gen(Common),
    /// Train one model; `--resume` continues from the saved state.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on every noise cell.
    Eval(Common),
    /// Paired tests and robustness comparisons over result files.
    Stats(Common),
    /// Run gen, train and eval for every model and seed, then stats.
    Grid(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the top-level `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, env = "HBNET_THREADS")]
    pub threads: Option<usize>,
}

impl Common {
    pub fn load(&self) -> Result<(RawConfig, Config), CliError> {
        let text = std::fs::read_to_string(&self.config)
            .map_err(|e| CliError::user(format!("cannot read config {}: {e}", self.config.display())))?;
        let mut raw = RawConfig::parse(&text)?;
        if let Some(seed) = self.seed {
            raw.set("seed", seed.to_string());
        }
        let cfg = raw.resolve()?;
        Ok((raw, cfg))
    }
}

fn init_threads(threads: Option<usize>) -> Result<(), CliError> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::user("--threads must be at least 1"));
        }
        // A second initialisation in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::user(format!("cannot create {}: {e}", dir.display())))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text)
        .and_then(|_| std::fs::rename(&tmp, path))
        .map_err(|e| CliError::user(format!("cannot write {}: {e}", path.display())))
}

/// Parse arguments and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let (common, resume) = match &cli.command {
        Command::Train { common, resume } => (common, *resume),
        Command::Gen(c) | Command::Eval(c) | Command::Stats(c) | Command::Grid(c) => (c, false),
    };
    init_threads(common.threads)?;
    let (raw, cfg) = common.load()?;
    let out = &common.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::user(format!("cannot create {}: {e}", out.display())))?;
    write_text(&out.join("resolved.cfg"), &raw.echo())?;
    match cli.command {
        Command::Gen(_) => commands::gen(&cfg, out),
        Command::Train { .. } => commands::train(&cfg, out, resume).map(|_| ()),
        Command::Eval(_) => commands::eval(&cfg, out).map(|_| ()),
        Command::Stats(_) => commands::stats(&cfg, out),
        Command::Grid(_) => commands::grid(&raw, &cfg, out),
    }
}
