//! Command-line entry point: `synth`, `train`, `encode`, `match`, `eval`,
//! `diag`. Failures print one line `error kind=<kind> exit=<code>: <msg>` to
//! stderr and remove whatever the failed command had written.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdfl::config::RunConfig;
use mdfl::pipeline::{self, FeatureKind};
use mdfl::Error;

#[derive(Parser)]
#[command(name = "mdfl", version, about = "Condition-robust place recognition with capsule features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its train/test split.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train encoder, decoder and discriminator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Encode the test split, one feature file per condition.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["caps", "vlad", "sad"])]
        features: String,
        /// Trained checkpoint (required for caps).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Sequence-match a query feature file against a reference file.
    Match {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        query: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// PR curves and AUC report over match files.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Match CSVs named `<method>_<pair>.csv`.
        #[arg(required = true)]
        matches: Vec<PathBuf>,
    },
    /// Held-out condition loss and MI per checkpoint.
    Diag {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// A checkpoint file or a directory of checkpoints.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Train { common, .. }
            | Command::Encode { common, .. }
            | Command::Match { common, .. }
            | Command::Eval { common, .. }
            | Command::Diag { common, .. } => common,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        "config" | "argument" => 2,
        "numeric" => 4,
        _ => 3,
    }
}

fn report(kind: &str, code: u8, msg: &str) -> ExitCode {
    let line = msg.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} exit={code}: {line}");
    ExitCode::from(code)
}

fn load_config(c: &Common) -> mdfl::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    cfg.apply_overrides(c.overrides.iter().map(String::as_str))?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() -> mdfl::Result<()> {
    let Ok(v) = std::env::var("MDFL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MDFL_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cmd: &Command, cfg: &RunConfig) -> mdfl::Result<Vec<PathBuf>> {
    let out = &cmd.common().out;
    match cmd {
        Command::Synth { .. } => pipeline::synth(cfg, out),
        Command::Train { data, checkpoint, .. } => pipeline::train(cfg, data, out, checkpoint.as_deref()),
        Command::Encode { data, features, checkpoint, .. } => {
            pipeline::encode(cfg, features.parse::<FeatureKind>()?, data, checkpoint.as_deref(), out)
        }
        Command::Match { query, reference, .. } => pipeline::match_files(cfg, query, reference, out),
        Command::Eval { matches, .. } => pipeline::eval(cfg, matches, out),
        Command::Diag { data, checkpoint, .. } => pipeline::diag(cfg, data, checkpoint, out),
    }
}

fn listing(dir: &Path) -> Option<BTreeSet<PathBuf>> {
    fs::read_dir(dir).ok().map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
}

/// Deletes entries of `dir` absent from `before`, or `dir` itself if it
/// did not exist.
fn remove_new(dir: &Path, before: &Option<BTreeSet<PathBuf>>, keep: impl Fn(&Path) -> bool) {
    let Some(now) = listing(dir) else { return };
    for p in now.iter().filter(|p| before.as_ref().is_none_or(|b| !b.contains(*p)) && !keep(p)) {
        let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
    }
    if before.is_none() && listing(dir).is_some_and(|l| l.is_empty()) {
        let _ = fs::remove_dir(dir);
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            return report("config", 2, first.trim_start_matches("error: "));
        }
    };
    if let Err(e) = configure_threads() {
        return report(e.kind(), exit_code(&e), &e.to_string());
    }
    let cfg = match load_config(cli.command.common()) {
        Ok(c) => c,
        Err(e) => return report(e.kind(), exit_code(&e), &e.to_string()),
    };
    let out = &cli.command.common().out;
    let before = listing(out);
    match run(&cli.command, &cfg) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            // a numeric abort during training keeps the checkpoints written so far
            let keep_training = matches!(cli.command, Command::Train { .. }) && matches!(e, Error::Numeric(_));
            remove_new(out, &before, |p| {
                keep_training && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_") || n == "train_log.csv" || n == pipeline::CONFIG_ECHO)
            });
            report(e.kind(), exit_code(&e), &e.to_string())
        }
    }
}
