//! Command-line front end. Every command returns one of the stable exit codes
//! below; the binary only forwards them.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};

use crate::config::RunConfig;
use crate::error::{DacmError, Result};
use crate::gp::{fit, GpModel, GpTrainingSet};
use crate::gradcheck::run_gradcheck;
use crate::io::{
    hyperparams_to_text, load_checkpoint, parse_pairs, read_tensor, save_checkpoint, write_pgm, write_trace,
};
use crate::kernels::KernelHyperparams;
use crate::pipeline::{epochs_to_fraction, evaluate, train};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

pub const DUMP_FILE: &str = "numerical_failure.txt";

#[derive(Debug, Parser)]
#[command(name = "dacm", version, about = "Few-shot segmentation with learned-kernel cost volumes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key = value` run configuration; missing keys keep their defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// overrides the configured seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// output directory, created if missing
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// extra `key=value` overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of one module's gradients
    Gradcheck {
        /// kernels, gp, aggregation or pipeline
        target: String,
        #[command(flatten)]
        common: Common,
    },
    /// Fit GP hyperparameters by marginal-likelihood ascent
    GpFit {
        /// N×(D+1) tensor file; the last column holds the targets
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train on synthetic episodes; writes trace.csv and checkpoint/
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on held-out episodes
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// score the ground truth instead of the prediction
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Dump a 2D tensor as an 8-bit PGM image
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

pub fn exit_code(err: &DacmError) -> i32 {
    match err {
        DacmError::Config(_) | DacmError::Dimension(_) => EXIT_USAGE,
        DacmError::Format(_) | DacmError::Io(_) => EXIT_FORMAT,
        DacmError::Numerical(_) | DacmError::EmptySample => EXIT_NUMERICAL,
    }
}

fn overlay(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (k, v) in parse_pairs(text)? {
        cfg.set(&k, &v)?;
    }
    Ok(())
}

fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| DacmError::Config(format!("cannot read {}: {e}", path.display())))
}

/// Defaults, then the config file, then `--set`, then `--seed`.
fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = read_config_text(path)?;
        // full parse first so duplicate keys and malformed lines are caught
        RunConfig::parse(&text)?;
        overlay(&mut cfg, &text)?;
    }
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| DacmError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_dump(dir: &Path, command: &str, cfg: Option<&RunConfig>, err: &DacmError) -> Option<PathBuf> {
    let mut text = format!("command = {command}\nerror = {err}\n");
    if let Some(cfg) = cfg {
        text.push_str("\n# configuration\n");
        text.push_str(&cfg.to_text());
    }
    let path = dir.join(DUMP_FILE);
    std::fs::create_dir_all(dir).ok()?;
    std::fs::write(&path, text).ok()?;
    Some(path)
}

fn cmd_gradcheck(target: &str, common: &Common) -> Result<i32> {
    let cfg = resolve(common, RunConfig::default())?;
    let report = run_gradcheck(target, cfg.seed)?;
    let text = report.to_text();
    print!("{text}");
    prepare_out(&common.out)?;
    std::fs::write(common.out.join(format!("gradcheck_{target}.txt")), &text)?;
    Ok(if report.passed() { EXIT_OK } else { EXIT_NUMERICAL })
}

/// Splits an N×(D+1) tensor into inputs and targets.
pub fn split_gp_data(t: &crate::tensor::Tensor) -> Result<GpTrainingSet> {
    let s = t.shape();
    if s.len() != 2 || s[0] == 0 || s[1] < 2 {
        return Err(DacmError::Format(format!(
            "gp data must be an N×(D+1) matrix with D >= 1, got shape {s:?}"
        )));
    }
    let (n, cols) = (s[0], s[1]);
    let d = cols - 1;
    let x = DMatrix::from_fn(n, d, |i, j| t.data()[i * cols + j]);
    let y = DVector::from_fn(n, |i, _| t.data()[i * cols + d]);
    GpTrainingSet::new(x, y).map_err(|e| match e {
        DacmError::Dimension(m) => DacmError::Format(m),
        other => other,
    })
}

fn cmd_gp_fit(data: &Path, cfg: &RunConfig, out: &Path) -> Result<i32> {
    let set = split_gp_data(&read_tensor(data)?)?;
    let params = if cfg.shared_lengthscale {
        KernelHyperparams::new_shared()
    } else {
        KernelHyperparams::new(set.dim())
    };
    let model = GpModel::new(cfg.kernel, params, set)?;
    let result = fit(model, cfg.gp_steps, cfg.gp_lr)?;
    let initial = result.trace[0];
    let last = *result.trace.last().expect("trace holds the initial value");
    let mut text = String::new();
    let _ = writeln!(text, "kernel = {}", cfg.kernel);
    let _ = writeln!(text, "seed = {}", cfg.seed);
    let _ = writeln!(text, "gp_steps = {}", cfg.gp_steps);
    let _ = writeln!(text, "gp_lr = {:?}", cfg.gp_lr);
    let _ = writeln!(text, "initial_mll = {initial:?}");
    let _ = writeln!(text, "final_mll = {last:?}");
    text.push_str(&hyperparams_to_text("gp", result.model.params()));
    print!("{text}");
    prepare_out(out)?;
    std::fs::write(out.join("gp_fit.cfg"), &text)?;
    Ok(EXIT_OK)
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<i32> {
    prepare_out(out)?;
    let outcome = train(cfg)?;
    write_trace(&out.join("trace.csv"), &outcome.trace)?;
    save_checkpoint(&out.join("checkpoint"), cfg, &outcome.model)?;
    let mut text = String::new();
    let _ = writeln!(text, "seed = {}", cfg.seed);
    let _ = writeln!(text, "epochs = {}", cfg.epochs);
    let _ = writeln!(text, "initial_loss = {:.12}", outcome.initial_loss());
    let _ = writeln!(text, "final_loss = {:.12}", outcome.final_loss());
    match epochs_to_fraction(&outcome.trace, 0.5) {
        Some(e) => writeln!(text, "epochs_to_half_loss = {e}"),
        None => writeln!(text, "epochs_to_half_loss = none"),
    }
    .expect("writing to a String cannot fail");
    print!("{text}");
    std::fs::write(out.join("train_report.txt"), text)?;
    Ok(EXIT_OK)
}

fn cmd_eval(checkpoint: &Path, oracle: bool, common: &Common) -> Result<(i32, RunConfig)> {
    let (stored, model) = load_checkpoint(checkpoint)?;
    let mut cfg = resolve(common, stored)?;
    cfg.oracle |= oracle;
    let report = evaluate(&model, &cfg)?;
    let text = report.to_text();
    print!("{text}");
    prepare_out(&common.out)?;
    std::fs::write(common.out.join("eval_report.txt"), text)?;
    Ok((EXIT_OK, cfg))
}

fn cmd_viz(input: &Path, cfg: &RunConfig, out: &Path) -> Result<i32> {
    let t = read_tensor(input)?;
    if t.shape().len() != 2 {
        return Err(DacmError::dim(format!("viz needs a 2D tensor, got shape {:?}", t.shape())));
    }
    prepare_out(out)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
    let path = out.join(format!("{stem}.pgm"));
    write_pgm(&path, &t, cfg.epsilon)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

fn report_error(err: &DacmError, out: &Path, command: &str, cfg: Option<&RunConfig>) -> i32 {
    let code = exit_code(err);
    eprintln!("error: {err}");
    if code == EXIT_NUMERICAL {
        match write_dump(out, command, cfg, err) {
            Some(path) => eprintln!("diagnostic dump written to {}", path.display()),
            None => eprintln!("could not write a diagnostic dump"),
        }
    }
    code
}

/// Runs a parsed command and maps failures to exit codes.
pub fn execute(cli: &Cli) -> i32 {
    match &cli.command {
        Command::Gradcheck { target, common } => {
            cmd_gradcheck(target, common).unwrap_or_else(|e| report_error(&e, &common.out, "gradcheck", None))
        }
        Command::GpFit { data, common } => match resolve(common, RunConfig::default()) {
            Ok(cfg) => cmd_gp_fit(data, &cfg, &common.out)
                .unwrap_or_else(|e| report_error(&e, &common.out, "gp-fit", Some(&cfg))),
            Err(e) => report_error(&e, &common.out, "gp-fit", None),
        },
        Command::Train { common } => match resolve(common, RunConfig::default()) {
            Ok(cfg) => {
                cmd_train(&cfg, &common.out).unwrap_or_else(|e| report_error(&e, &common.out, "train", Some(&cfg)))
            }
            Err(e) => report_error(&e, &common.out, "train", None),
        },
        Command::Eval {
            checkpoint,
            oracle,
            common,
        } => match cmd_eval(checkpoint, *oracle, common) {
            Ok((code, _)) => code,
            Err(e) => report_error(&e, &common.out, "eval", None),
        },
        Command::Viz { input, common } => match resolve(common, RunConfig::default()) {
            Ok(cfg) => cmd_viz(input, &cfg, &common.out).unwrap_or_else(|e| report_error(&e, &common.out, "viz", None)),
            Err(e) => report_error(&e, &common.out, "viz", None),
        },
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            // clap reports 2 for usage errors and 0 for --help/--version
            e.exit_code()
        }
    }
}
