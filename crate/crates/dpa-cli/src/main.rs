//! Command-line workbench for dual-path attribution.

mod commands;
mod html;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{
    cmd_attribute, cmd_bench, cmd_evaluate, cmd_make_model, parse_f64_list, parse_usize_list,
    AttributeArgs, BenchArgs, CliError, EvaluateArgs, MakeModelArgs,
};

#[derive(Parser)]
#[command(name = "dpa", about = "Dual-path attribution workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model (planted circuit or random) and write a DPAW file.
    MakeModel {
        /// Model kind: induction, kv-neuron, or random.
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output DPAW path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        head_dim: Option<usize>,
        #[arg(long)]
        d_ffn: Option<usize>,
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long)]
        rope_base: Option<f64>,
        #[arg(long)]
        norm_eps: Option<f64>,
    },
    /// Run attribution on one prompt and write a JSON (optionally HTML) report.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated token ids, e.g. 1,2,3,1.
        #[arg(long)]
        tokens: String,
        /// Target token id whose logit is attributed.
        #[arg(long)]
        target: usize,
        /// Position at which the logit is attributed.
        #[arg(long)]
        position: usize,
        /// Which score sections to report: all, token, or component.
        #[arg(long, default_value = "all")]
        granularity: String,
        /// Path-weight family: control-content, attention, query-key, mlp.
        #[arg(long, default_value = "control-content")]
        mu: String,
        /// Sensitivity parameter in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        /// How many top heads/neurons to include.
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Include full score matrices in the report.
        #[arg(long)]
        full: bool,
        /// Report path, or - for stdout.
        #[arg(long)]
        out: PathBuf,
        /// Also write a self-contained HTML rendering.
        #[arg(long)]
        html: Option<PathBuf>,
    },
    /// Evaluate faithfulness curves over a JSONL instance file.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// JSONL file: {"tokens":[...], "target": id, "position": idx} per line.
        #[arg(long)]
        instances: PathBuf,
        /// dpa or a baseline (activation-patching, random, attn-last, ...).
        #[arg(long)]
        method: String,
        #[arg(long, default_value = "component")]
        granularity: String,
        /// Comma-separated fractions in (0, 1].
        #[arg(long)]
        k_grid: Option<String>,
        /// zero-embed or remove.
        #[arg(long, default_value = "zero-embed")]
        token_mode: String,
        #[arg(long, default_value = "control-content")]
        mu: String,
        #[arg(long, default_value_t = 0.5)]
        p: f64,
        /// Seed for the random baseline.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wall-clock comparison of attribution cost against patching.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tokens: String,
        /// Comma-separated component counts; "all" for every component.
        #[arg(long, default_value = "1,all")]
        components: String,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        position: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::MakeModel {
            kind,
            seed,
            out,
            layers,
            heads,
            d_model,
            head_dim,
            d_ffn,
            vocab,
            rope_base,
            norm_eps,
        } => cmd_make_model(MakeModelArgs {
            kind,
            seed,
            out,
            layers,
            heads,
            d_model,
            head_dim,
            d_ffn,
            vocab,
            rope_base,
            norm_eps,
        }),
        Command::Attribute {
            model,
            tokens,
            target,
            position,
            granularity,
            mu,
            p,
            top,
            full,
            out,
            html,
        } => cmd_attribute(AttributeArgs {
            model,
            tokens: parse_usize_list(&tokens)?,
            target,
            position,
            granularity,
            mu,
            p,
            top,
            full,
            out,
            html,
        }),
        Command::Evaluate {
            model,
            instances,
            method,
            granularity,
            k_grid,
            token_mode,
            mu,
            p,
            seed,
            out,
        } => cmd_evaluate(EvaluateArgs {
            model,
            instances,
            method,
            granularity,
            k_grid: match k_grid {
                Some(s) => parse_f64_list(&s)?,
                None => dpa_core::faithfulness::default_k_grid(),
            },
            token_mode,
            mu,
            p,
            seed,
            out,
        }),
        Command::Bench {
            model,
            tokens,
            components,
            repeats,
            target,
            position,
            out,
        } => cmd_bench(BenchArgs {
            model,
            tokens: parse_usize_list(&tokens)?,
            components,
            repeats,
            target,
            position,
            out,
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
