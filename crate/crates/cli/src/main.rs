//! `geomotion`: data generation, training, evaluation, inference, runtime
//! benchmarks and gradient checks for the motion segmentation pipeline.

mod commands;
mod config;
mod schemas;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use geomotion_core::{Error, ErrorKind};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "geomotion", version, about = "Feed-forward motion segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON configuration file layered over the defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key (dotted path); repeatable. Values are
    /// parsed as JSON when possible, otherwise taken as strings.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<String> {
        let mut o = Vec::new();
        if let Some(s) = self.seed {
            o.push(format!("seed={s}"));
        }
        o.extend(self.overrides.iter().cloned());
        o
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (frames, flows, masks, meta.json per sequence).
    Gen(Common),
    /// Train a model; writes checkpoints, the final model and loss/eval CSVs.
    Train(Common),
    /// Score predicted masks (or a model's predictions) against ground truth.
    Eval(Common),
    /// Predict motion masks for every sequence of a dataset.
    Infer {
        #[command(flatten)]
        common: Common,
        /// External refinement program, called as
        /// `<cmd> FRAMES_DIR COARSE_DIR OUT_DIR`.
        #[arg(long, value_name = "CMD")]
        refine_cmd: Option<String>,
        /// Read geometry tokens from this directory (file provider).
        #[arg(long, value_name = "DIR")]
        tokens: Option<PathBuf>,
    },
    /// Measure inference seconds per frame.
    Bench(Common),
    /// Finite-difference check of every differentiable op and network part.
    Gradcheck {
        /// Also write the table as JSON into this directory.
        #[arg(long, short, value_name = "DIR")]
        out: Option<PathBuf>,
    },
}

fn cli_command() -> clap::Command {
    let mut cmd = Cli::command();
    for (name, schema) in schemas::all() {
        let help = schema.help();
        cmd = cmd.mut_subcommand(name, |c| c.after_long_help(help.clone()).after_help(help));
    }
    cmd
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Divergence => 4,
    }
}

fn report_error(err: &Error) -> ExitCode {
    let kind = match err.kind() {
        ErrorKind::Config => "config",
        ErrorKind::Data => "data",
        ErrorKind::Divergence => "divergence",
    };
    let mut body = json!({ "error": { "kind": kind, "message": err.to_string() } });
    if let Error::Divergence { step, .. } = err {
        body["error"]["step"] = json!(step);
    }
    eprintln!("{body}");
    ExitCode::from(exit_code(err))
}

fn main() -> ExitCode {
    let matches = match cli_command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            if !usage {
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", json!({ "error": { "kind": "config", "message": e.kind().to_string() } }));
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => return report_error(&Error::Config(e.to_string())),
    };
    let result = match cli.command {
        Command::Gen(c) => commands::gen(&c),
        Command::Train(c) => commands::train(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Infer { common, refine_cmd, tokens } => commands::infer(&common, refine_cmd, tokens),
        Command::Bench(c) => commands::bench(&c),
        Command::Gradcheck { out } => commands::gradcheck(out),
    };
    match result {
        Ok(code) => code,
        Err(e) => report_error(&e),
    }
}
