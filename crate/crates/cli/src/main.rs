mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use genrec_core::trainer::Variant;

use crate::config::Overrides;

/// Generative sequential recommendation with a jointly trained item tokenizer.
#[derive(Parser, Debug)]
#[command(name = "genrec", version)]
struct Cli {
    /// Root for relative output directories.
    #[arg(long, global = true, env = "GENREC_OUTPUT_ROOT", default_value = "runs")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter and split an interaction file and attach item embeddings.
    Prepare {
        #[command(flatten)]
        common: Common,
        /// Tab-separated `user, item, timestamp` file.
        #[arg(long)]
        interactions: Option<PathBuf>,
        /// Item embeddings (text, or binary with a .bin extension).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        /// Dimension of SVD-derived embeddings when none are given.
        #[arg(long)]
        svd_dim: Option<usize>,
        #[arg(long)]
        k_core: Option<usize>,
        /// Output directory (relative to the root).
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Pretrain the RQ-VAE tokenizer on the prepared embeddings.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "pretrain")]
        out: PathBuf,
    },
    /// Alternating training of tokenizer and recommender.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Directory holding the pretrained tokenizer.
        #[arg(long, default_value = "pretrain")]
        pretrained: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        /// Epochs per cycle: one tokenizer epoch plus C-1 recommender epochs.
        #[arg(long)]
        cycle_length: Option<usize>,
        #[arg(long)]
        max_cycles: Option<usize>,
        #[arg(long)]
        mu: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Finished run whose tokenizer `no_ete` freezes.
        #[arg(long)]
        frozen_from: Option<PathBuf>,
        /// Continue from the last saved cycle in the output directory.
        #[arg(long)]
        resume: bool,
        /// Output directory; defaults to `train-<variant>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Constrained beam search evaluation of a trained run.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "train-full")]
        run: PathBuf,
        /// Beam width [default: 20].
        #[arg(long)]
        beam: Option<usize>,
        /// Comma-separated cutoffs [default: 5,10].
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// `test` or `valid` [default: test].
        #[arg(long)]
        split: Option<String>,
    },
    /// Write the item identifiers of a tokenizer checkpoint.
    ExportIds {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Tokenizer checkpoint file, or a directory holding one.
        #[arg(long, default_value = "train-full")]
        tokenizer: PathBuf,
        #[arg(long, default_value = "ids.tsv")]
        out: PathBuf,
    },
    /// Render training curves from a metric log as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "train-full")]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a planted-structure synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2000)]
        users: usize,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.root;
    let at = |p: &PathBuf| if p.is_absolute() { p.clone() } else { root.join(p) };
    match cli.command {
        Command::Prepare { common, interactions, embeddings, svd_dim, k_core, out } => {
            let o = Overrides { interactions, embeddings, svd_dim, k_core, seed: common.seed, ..Default::default() };
            commands::prepare(&common, &o, &at(&out))
        }
        Command::Pretrain { common, data, epochs, out } => {
            let o = Overrides { pretrain_epochs: epochs, seed: common.seed, ..Default::default() };
            commands::pretrain(&common, &o, &at(&data), &at(&out))
        }
        Command::Train {
            common,
            data,
            pretrained,
            variant,
            cycle_length,
            max_cycles,
            mu,
            lambda,
            frozen_from,
            resume,
            out,
        } => {
            let o = Overrides { seed: common.seed, variant, cycle_length, max_cycles, mu, lambda, ..Default::default() };
            let out = out.unwrap_or_else(|| PathBuf::from(format!("train-{}", variant.unwrap_or_default())));
            let frozen = frozen_from.as_ref().map(at);
            commands::train(&common, &o, &at(&data), &at(&pretrained), frozen.as_deref(), resume, &at(&out))
        }
        Command::Evaluate { common, data, run, beam, ks, split } => {
            let o = Overrides { seed: common.seed, beam, ks, split, ..Default::default() };
            commands::evaluate(&common, &o, &at(&data), &at(&run))
        }
        Command::ExportIds { common, data, tokenizer, out } => {
            commands::export_ids(&common, &at(&data), &at(&tokenizer), &at(&out))
        }
        Command::Plot { common, run, out } => {
            let run = at(&run);
            let out = out.map(|p| at(&p)).unwrap_or_else(|| run.join("curves.svg"));
            plot::plot(&common, &run, &out)
        }
        Command::Synth { common, users, out } => commands::synth(&common, users, &at(&out)),
    }
}

/// Missing inputs exit with 2; every other failure with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(genrec_core::Error::NotFound(_)) = cause.downcast_ref::<genrec_core::Error>() {
            return 2;
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
