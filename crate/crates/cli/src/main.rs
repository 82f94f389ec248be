mod commands;
mod run_config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use medseq::config::KeyValues;
use medseq::Error;

use run_config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "medseq", version, about = "ICD-10 coding of death certificates with a conditional Transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Global seed; falls back to the config file, then MEDSEQ_SEED, then 1.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Threads for training shards and decoding.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic certificate corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of certificates.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Split a corpus into train, validation and test files, stratified by year.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Learn source and target BPE models from a training corpus.
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        /// Directory written by `tokenize`.
        #[arg(long)]
        tokenizers: PathBuf,
    },
    /// Random hyperparameter search ranked by validation F-measure.
    Search {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        tokenizers: PathBuf,
    },
    /// Decode a corpus with one checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizers: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Greedily select ensemble members on validation data.
    EnsembleSelect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        tokenizers: PathBuf,
        /// Candidate checkpoints.
        #[arg(long, num_args = 1.., required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Decode a corpus with a selected ensemble.
    EnsemblePredict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tokenizers: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Micro precision, recall and F-measure with bootstrap intervals.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Extra strata: origin, bang, paper_bang. Repeatable.
        #[arg(long)]
        stratum: Vec<String>,
    },
    /// Rejection curve over score thresholds 0.00 to 1.00.
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
    /// Full plain-text report: strata, chapters and calibration.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        gold: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Split { .. } => "split",
            Command::Tokenize { .. } => "tokenize",
            Command::Train { .. } => "train",
            Command::Search { .. } => "search",
            Command::Predict { .. } => "predict",
            Command::EnsembleSelect { .. } => "ensemble-select",
            Command::EnsemblePredict { .. } => "ensemble-predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Calibrate { .. } => "calibrate",
            Command::Report { .. } => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Split { common, .. }
            | Command::Tokenize { common, .. }
            | Command::Train { common, .. }
            | Command::Search { common, .. }
            | Command::Predict { common, .. }
            | Command::EnsembleSelect { common, .. }
            | Command::EnsemblePredict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Calibrate { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

/// Writes log lines to stderr and to the run directory's log file.
struct Tee(Mutex<std::fs::File>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.lock().expect("log file lock").write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.lock().expect("log file lock").flush()
    }
}

fn init_logging(out: &std::path::Path) -> anyhow::Result<()> {
    let file = std::fs::File::create(out.join("run.log")).context("creating run.log")?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| writeln!(buf, "[{} {}] {}", record.level(), record.target(), record.args()))
        .target(env_logger::Target::Pipe(Box::new(Tee(Mutex::new(file)))))
        .init();
    Ok(())
}

fn overrides(cmd: &Command) -> Result<KeyValues, Error> {
    let common = cmd.common();
    let mut kv = KeyValues::new();
    for item in &common.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {item:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(s) = common.seed {
        kv.set("seed", s);
    }
    if let Some(w) = common.workers {
        kv.set("train.workers", w);
        kv.set("decode.workers", w);
    }
    if let Command::GenData { n: Some(n), .. } = cmd {
        kv.set("synth.n_records", n);
    }
    Ok(kv)
}

fn run(cmd: Command) -> anyhow::Result<()> {
    let common = cmd.common().clone();
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::load(common.config.as_deref(), &overrides(&cmd)?, env_seed.as_deref())?;
    std::fs::create_dir_all(&common.out)
        .with_context(|| format!("creating output directory {}", common.out.display()))?;
    init_logging(&common.out)?;
    let mut run = commands::Run::new(cmd.name(), &common.out, cfg)?;
    match cmd {
        Command::GenData { .. } => run.gen_data()?,
        Command::Split { corpus, .. } => run.split(&corpus)?,
        Command::Tokenize { train, .. } => run.tokenize(&train)?,
        Command::Train { train, val, tokenizers, .. } => run.train(&train, &val, &tokenizers)?,
        Command::Search { train, val, tokenizers, .. } => run.search(&train, &val, &tokenizers)?,
        Command::Predict { checkpoint, tokenizers, input, .. } => run.predict(&checkpoint, &tokenizers, &input)?,
        Command::EnsembleSelect { val, tokenizers, checkpoints, .. } => {
            run.ensemble_select(&val, &tokenizers, &checkpoints)?
        }
        Command::EnsemblePredict { manifest, tokenizers, input, .. } => {
            run.ensemble_predict(&manifest, &tokenizers, &input)?
        }
        Command::Evaluate { predictions, gold, stratum, .. } => run.evaluate(&predictions, &gold, &stratum)?,
        Command::Calibrate { predictions, gold, .. } => run.calibrate(&predictions, &gold)?,
        Command::Report { predictions, gold, .. } => run.report(&predictions, &gold)?,
    }
    run.finish()
}

/// 2 for invalid input or configuration, 3 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Io(_)) | Some(Error::Divergence { .. }) | None => 3,
        Some(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if log::max_level() == log::LevelFilter::Off {
                eprintln!("error: {e:#}");
            } else {
                log::error!("{e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
