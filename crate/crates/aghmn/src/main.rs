use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aghmn::cli::{self, RunConfig};
use aghmn::error::Error;

#[derive(Parser)]
#[command(
    name = "aghmn",
    version,
    about = "Hierarchical memory networks for real-time emotion recognition in conversations"
)]
struct Cli {
    /// Path to a key=value run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Train with this many consecutive seeds and report mean metrics.
    #[arg(long, global = true)]
    repeat: Option<usize>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, then evaluate it on the test corpus if configured.
    Train,
    /// Evaluate a checkpoint on a corpus and print the metrics table.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Also write the report as JSON.
        #[arg(long)]
        out_file: Option<PathBuf>,
    },
    /// Export one attention-trace record per utterance.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out_file: PathBuf,
    },
    /// Train and evaluate once per context-window size.
    SweepK {
        /// Comma-separated window sizes, e.g. 1,5,10,20.
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Check analytic gradients against finite differences for every
    /// reader/fusion/summarizer combination.
    GradCheck {
        #[arg(long, default_value_t = aghmn::autodiff::DEFAULT_EPS)]
        eps: f64,
    },
    /// Generate a synthetic contextual-emotion corpus.
    GenSynthetic {
        /// Number of conversations.
        #[arg(long, default_value_t = 120)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Probability that an utterance carries its label from context.
        #[arg(long, default_value_t = 0.3)]
        carry: f64,
        #[arg(long, default_value_t = 4)]
        min_len: usize,
        #[arg(long, default_value_t = 10)]
        max_len: usize,
        #[arg(long)]
        out_file: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("config", "a --config file is required for this command".to_string()))?;
    let mut cfg = RunConfig::parse_file(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.print_config {
        let cfg = load_config(cli)?;
        print!("{}", cfg.to_key_values());
        return Ok(());
    }
    match &cli.command {
        Command::Train => {
            let cfg = load_config(cli)?;
            cli::cmd_train(&cfg, cli.repeat.unwrap_or(1))
        }
        Command::Eval { checkpoint, corpus, out_file } => {
            cli::cmd_eval(checkpoint, corpus, out_file.as_deref())
        }
        Command::ExportAttention { checkpoint, corpus, out_file } => {
            cli::cmd_export_attention(checkpoint, corpus, out_file)
        }
        Command::SweepK { k } => {
            let cfg = load_config(cli)?;
            cli::cmd_sweep_k(&cfg, k)
        }
        Command::GradCheck { eps } => cli::cmd_grad_check(*eps),
        Command::GenSynthetic { n, classes, carry, min_len, max_len, out_file } => {
            let seed = cli.seed.unwrap_or(7);
            cli::cmd_gen_synthetic(*n, *classes, *carry, (*min_len, *max_len), seed, out_file)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::Config { .. }) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
