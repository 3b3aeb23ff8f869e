//! Command-line runner for the energy-based cross-attention experiments.
//!
//! Exit codes: 0 success, 1 check failure or runtime error, 2 invalid configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod commands;
pub mod config;
pub mod svg;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::Outcome;
use config::{parse_pairs, ConfigError, RunConfig};

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// Finite-difference gradient checks and exact identities
    Gradcheck,
    /// Train the toy denoiser
    Train,
    /// Paired baseline / updated sampling with per-layer energy traces
    EnergyTrace,
    /// Sample one grid per variant
    Sample,
    /// Weighted multi-context sampling
    Compose,
    /// Fill masked tokens of a known grid
    Inpaint,
    /// Hopfield fixed-point iteration with its energy trace
    HopfieldDemo,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Train => "train",
            Command::EnergyTrace => "energy-trace",
            Command::Sample => "sample",
            Command::Compose => "compose",
            Command::Inpaint => "inpaint",
            Command::HopfieldDemo => "hopfield-demo",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "ebca", version, about = "Energy-based cross-attention experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
    /// `key = value` config file; command-line flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    /// Number of seeds for multi-seed commands
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Training steps (train) or diffusion steps (sampling commands)
    #[arg(long, global = true)]
    steps: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<String>,
    /// Concept prompt such as `3` or `0+1`
    #[arg(long, global = true)]
    prompt: Option<String>,
    #[arg(long, global = true)]
    gamma_attn: Option<String>,
    #[arg(long, global = true)]
    gamma_reg: Option<String>,
    /// Comma-separated composition weights
    #[arg(long, global = true, allow_hyphen_values = true)]
    alpha_s: Option<String>,
    /// constant | step | exp
    #[arg(long, global = true)]
    schedule: Option<String>,
    #[arg(long, global = true)]
    tau: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<String>,
    /// File with 64 mask entries (0 keep, 1 generate)
    #[arg(long, global = true)]
    mask: Option<String>,
    /// baseline | ebcu | ebcq | both
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Any other key, as `key=value`; may be repeated
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, hide = true, global = true)]
    inject_sign_flip: bool,
}

impl Args {
    fn overrides(&self) -> Result<Vec<(String, String)>, ConfigError> {
        let mut out = Vec::new();
        for raw in &self.set {
            let (k, v) =
                raw.split_once('=').ok_or_else(|| ConfigError(format!("--set expects key=value, got `{raw}`")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("out", &self.out),
            ("seed", &self.seed),
            ("seeds", &self.seeds),
            ("steps", &self.steps),
            ("checkpoint", &self.checkpoint),
            ("prompt", &self.prompt),
            ("gamma_attn", &self.gamma_attn),
            ("gamma_reg", &self.gamma_reg),
            ("alpha_s", &self.alpha_s),
            ("schedule", &self.schedule),
            ("tau", &self.tau),
            ("lambda", &self.lambda),
            ("mask", &self.mask),
            ("variant", &self.variant),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.inject_sign_flip {
            out.push(("inject_fault".into(), "sign_flip".into()));
        }
        Ok(out)
    }
}

fn resolve(args: &Args) -> Result<RunConfig, ConfigError> {
    let command = args.command.name();
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read config `{}`: {e}", path.display())))?;
            parse_pairs(&text, &path.display().to_string())?
        }
        None => Vec::new(),
    };
    RunConfig::resolve(command, &file, &args.overrides()?)
}

/// Parses `argv` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match resolve(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match commands::run(&cfg) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::CheckFailed) => 1,
        Err(e) if e.downcast_ref::<ConfigError>().is_some() => {
            eprintln!("error: {e:#}");
            2
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
