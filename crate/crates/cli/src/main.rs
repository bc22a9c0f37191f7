//! `face`: prepare a working directory, train the three stages and inspect
//! the learned descriptors.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use face_core::data::EntityKind;

#[derive(Parser, Debug)]
#[command(name = "face", version, about = "Map collaborative-filtering embeddings onto vocabulary tokens")]
pub struct Cli {
    /// Working directory; every input and output path is relative to it.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,

    /// Config file (default: <workdir>/config.toml when present).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Keep summary anchors unnormalized when loading them.
    #[arg(long, global = true)]
    pub no_normalize_anchors: bool,

    /// Override any config key, e.g. `--set epochs_stage1=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic fixture (and a matching config.toml if absent).
    Fixture,
    /// Index and split interactions.tsv into prepared/.
    Prepare,
    /// Encode summaries.jsonl into anchors.bin with the stub text provider.
    EmbedSummaries,
    Train(TrainArgs),
    /// Test-split ranking metrics of the most advanced stage; writes metrics.json.
    Eval {
        #[arg(long, value_delimiter = ',', default_value = "5,20")]
        topk: Vec<usize>,
    },
    /// Export descriptors.jsonl.
    Descriptors {
        #[arg(long, value_enum, default_value_t = Kind::Item)]
        kind: Kind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a comma-separated token list into a CF embedding.
    Generate {
        #[arg(long)]
        tokens: String,
    },
    /// Nearest-anchor retrieval probe over descriptor embeddings.
    RetrievalProbe {
        #[arg(long, value_enum, default_value_t = Kind::Item)]
        kind: Kind,
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
    },
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, default_value = "all")]
    pub stage: StageArg,
    #[arg(long)]
    pub mu: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from the latest epoch checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub freeze_backbone: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageArg {
    One(u8),
    All,
}

impl std::str::FromStr for StageArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "all" => Ok(StageArg::All),
            "1" | "2" | "3" => Ok(StageArg::One(s.parse().unwrap())),
            _ => Err(format!("expected 1, 2, 3 or all, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Kind {
    User,
    Item,
}

impl From<Kind> for EntityKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::User => EntityKind::User,
            Kind::Item => EntityKind::Item,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !msg.contains(&c) {
                    msg = format!("{msg}: {c}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
