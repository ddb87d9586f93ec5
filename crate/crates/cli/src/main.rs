use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tweetlinks_cli::{run_stage, CliError, Overrides, PipelineConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "tweetlinks", version, about = "Topic modeling of web pages linked from tweets")]
struct Cli {
    /// TOML configuration file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Training seed; also replaces the synth plan's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Serve fetches from the cache only.
    #[arg(long, global = true)]
    offline: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and filter the tweet stream.
    Ingest {
        /// Abort on the first malformed line.
        #[arg(long)]
        strict: bool,
        /// Tweet NDJSON file, replacing paths.input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Resolve and download linked pages into the cache.
    Fetch {
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        max_redirects: Option<usize>,
        #[arg(long)]
        timeout_ms: Option<u64>,
        /// Accepted media type; repeat for several.
        #[arg(long = "allow-type")]
        allow_type: Vec<String>,
    },
    /// Extract main text from cached pages.
    Extract {
        /// JSON tag policy with drop_subtree, unwrap and keep lists.
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Build the dictionary, bag-of-words documents and epochs.
    Corpus,
    /// Fit one HDP per epoch and write topic checkpoints.
    Train,
    /// Link topics across epochs and classify evolution events.
    Track,
    /// Export word clouds, tweet topic mixtures and URL statistics.
    Report,
    /// Write a synthetic corpus from a plan.
    Synth {
        /// JSON synth plan, replacing paths.synth_plan.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut o = Overrides {
        seed: cli.seed,
        offline: cli.offline,
        ..Overrides::default()
    };
    let stage = match cli.command {
        Command::Ingest { strict, input } => {
            o.strict = strict;
            o.input = input;
            Stage::Ingest
        }
        Command::Fetch {
            cache_dir,
            max_redirects,
            timeout_ms,
            allow_type,
        } => {
            o.cache_dir = cache_dir;
            o.max_redirects = max_redirects;
            o.timeout_ms = timeout_ms;
            o.allow_types = allow_type;
            Stage::Fetch
        }
        Command::Extract { policy } => {
            o.policy_file = policy;
            Stage::Extract
        }
        Command::Corpus => Stage::Corpus,
        Command::Train => Stage::Train,
        Command::Track => Stage::Track,
        Command::Report => Stage::Report,
        Command::Synth { plan } => {
            o.synth_plan = plan;
            Stage::Synth
        }
    };
    let mut cfg = PipelineConfig::load(cli.config.as_deref())?;
    cfg.apply(&o);
    let mut opts = RunOptions {
        synth_seed: cli.seed,
        ..RunOptions::default()
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Validation(vec!["--jobs must be >= 1".into()]));
        }
        opts.jobs = j;
    }
    run_stage(stage, &cfg, &opts)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
