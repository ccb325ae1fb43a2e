//! `vimco`: train and evaluate sigmoid belief networks with multi-sample
//! objectives, and check the estimators against exact enumeration.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "vimco", version, about = "Multi-sample variational training for sigmoid belief networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Estimate the negative log-likelihood of a split by importance sampling.
    EvalNll {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Average K-sample bound over a split.
    EvalBound {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Run the exact-enumeration suite on built-in toy models.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        max_latent_bits: Option<usize>,
        /// Comma-separated sample counts.
        #[arg(long)]
        k: Option<String>,
        #[arg(long)]
        max_tuples: Option<u64>,
        #[arg(long)]
        max_configs: Option<u64>,
    },
    /// Exact gradient variances and training signal RMS per estimator and K.
    ProbeVariance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        instances: Option<usize>,
        /// Comma-separated sample counts.
        #[arg(long = "ks", id = "ks")]
        k: Option<String>,
        /// Comma-separated estimator names.
        #[arg(long)]
        estimators: Option<String>,
        /// Training steps per RMS trace (0 skips training).
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Draw bottom-half completions from a structured-output checkpoint.
    Complete {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Number of test images (grid columns).
        #[arg(long)]
        cases: Option<usize>,
        /// Completions per image.
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output (run) directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// naive, nvil, vimco, rws-wake or rws-sleep
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// geometric, arithmetic or learned
    #[arg(long)]
    mean: Option<String>,
    /// generative, sop-prior or sop-learned
    #[arg(long)]
    mode: Option<String>,
    /// Latent layer sizes, top first, e.g. `200,200`.
    #[arg(long)]
    latent: Option<String>,
    /// Comma-separated learning rates; one run directory per rate.
    #[arg(long)]
    sweep: Option<String>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_draws: Option<usize>,
    #[arg(long)]
    log_every: Option<u64>,
    /// Add sleep updates to the proposal gradient.
    #[arg(long)]
    sleep: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, valid or test
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long = "eval-k")]
    eval_k: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// bars, idx or amat
    #[arg(long)]
    data: Option<String>,
    /// IDX image file (optionally gzipped).
    #[arg(long)]
    images: Option<PathBuf>,
    /// fixed, threshold or stochastic[:seed]
    #[arg(long)]
    binarize: Option<String>,
    /// Train, validation and test sizes, e.g. `5000,2500,2500`.
    #[arg(long)]
    split_sizes: Option<String>,
    #[arg(long)]
    train_file: Option<PathBuf>,
    #[arg(long)]
    valid_file: Option<PathBuf>,
    #[arg(long)]
    test_file: Option<PathBuf>,
}

fn put<T: std::fmt::Display>(s: &mut Settings, key: &str, v: Option<T>) -> Result<()> {
    match v {
        Some(v) => s.set(key, v),
        None => Ok(()),
    }
}

fn base(c: &Common) -> Result<Settings> {
    let mut s = match &c.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    put(&mut s, "out", c.out.as_ref().map(|p| p.display()))?;
    put(&mut s, "seed", c.seed)?;
    s.apply_pairs(&c.set)?;
    Ok(s)
}

fn apply_train(s: &mut Settings, t: &TrainArgs) -> Result<()> {
    put(s, "train.estimator", t.estimator.as_ref())?;
    put(s, "train.k", t.k)?;
    put(s, "train.lr", t.lr)?;
    put(s, "train.batch_size", t.batch_size)?;
    put(s, "train.epochs", t.epochs)?;
    put(s, "train.max_steps", t.max_steps)?;
    put(s, "train.mean", t.mean.as_ref())?;
    put(s, "train.mode", t.mode.as_ref())?;
    put(s, "train.latent", t.latent.as_ref())?;
    put(s, "train.sweep", t.sweep.as_ref())?;
    put(s, "train.eval_every", t.eval_every)?;
    put(s, "train.eval_draws", t.eval_draws)?;
    put(s, "train.log_every", t.log_every)?;
    put(s, "train.sleep", t.sleep.then_some(true))
}

fn apply_eval(s: &mut Settings, e: &EvalArgs) -> Result<()> {
    put(s, "eval.checkpoint", e.checkpoint.as_ref().map(|p| p.display()))?;
    put(s, "eval.split", e.split.as_ref())?;
    put(s, "eval.samples", e.samples)?;
    put(s, "eval.k", e.eval_k)?;
    put(s, "eval.draws", e.draws)
}

fn apply_data(s: &mut Settings, d: &DataArgs) -> Result<()> {
    put(s, "data.source", d.data.as_ref())?;
    put(s, "data.images", d.images.as_ref().map(|p| p.display()))?;
    put(s, "data.binarize", d.binarize.as_ref())?;
    put(s, "data.split", d.split_sizes.as_ref())?;
    put(s, "data.train", d.train_file.as_ref().map(|p| p.display()))?;
    put(s, "data.valid", d.valid_file.as_ref().map(|p| p.display()))?;
    put(s, "data.test", d.test_file.as_ref().map(|p| p.display()))
}

enum Failure {
    Error(anyhow::Error),
    Checks(anyhow::Error),
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let usage = Failure::Error;
    let (settings, action): (Settings, fn(&Settings) -> Result<()>) = match &cli.command {
        Command::Train { common, train, data } => {
            let mut s = base(common).map_err(usage)?;
            apply_train(&mut s, train).and_then(|_| apply_data(&mut s, data)).map_err(usage)?;
            commands::train_config(&s).map_err(usage)?;
            (s, commands::cmd_train)
        }
        Command::EvalNll { common, eval, data } | Command::EvalBound { common, eval, data } => {
            let mut s = base(common).map_err(usage)?;
            apply_eval(&mut s, eval).and_then(|_| apply_data(&mut s, data)).map_err(usage)?;
            let f: fn(&Settings) -> Result<()> = if matches!(cli.command, Command::EvalNll { .. }) {
                commands::cmd_eval_nll
            } else {
                commands::cmd_eval_bound
            };
            (s, f)
        }
        Command::OracleCheck {
            common,
            instances,
            max_latent_bits,
            k,
            max_tuples,
            max_configs,
        } => {
            let mut s = base(common).map_err(usage)?;
            (|| {
                put(&mut s, "oracle.instances", *instances)?;
                put(&mut s, "oracle.max_latent_bits", *max_latent_bits)?;
                put(&mut s, "oracle.k", k.as_ref())?;
                put(&mut s, "oracle.max_tuples", *max_tuples)?;
                put(&mut s, "oracle.max_configs", *max_configs)
            })()
            .map_err(usage)?;
            (s, commands::cmd_oracle_check)
        }
        Command::ProbeVariance {
            common,
            instances,
            k,
            estimators,
            steps,
            train,
            data,
        } => {
            let mut s = base(common).map_err(usage)?;
            (|| {
                put(&mut s, "probe.instances", *instances)?;
                put(&mut s, "probe.k", k.as_ref())?;
                put(&mut s, "probe.estimators", estimators.as_ref())?;
                put(&mut s, "probe.steps", *steps)?;
                apply_train(&mut s, train)?;
                apply_data(&mut s, data)
            })()
            .map_err(usage)?;
            (s, commands::cmd_probe_variance)
        }
        Command::Complete {
            common,
            eval,
            cases,
            n,
            data,
        } => {
            let mut s = base(common).map_err(usage)?;
            (|| {
                apply_eval(&mut s, eval)?;
                put(&mut s, "complete.cases", *cases)?;
                put(&mut s, "complete.n", *n)?;
                apply_data(&mut s, data)
            })()
            .map_err(usage)?;
            (s, commands::cmd_complete)
        }
    };
    action(&settings).map_err(|e| {
        if e.is::<commands::ChecksFailed>() {
            Failure::Checks(e)
        } else {
            Failure::Error(e)
        }
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Error(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Checks(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
