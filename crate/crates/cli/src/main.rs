//! `relqa`: dataset generation, benchmark construction, review and
//! evaluation over a scene-graph corpus.
//!
//! Exit codes: 0 ok, 1 stage failure, 2 usage or config error. Failures are
//! reported on stderr as one JSON object `{error, stage, message}`.

mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use relqa_core::dataset::ModelTemplateId;
use relqa_core::eval::ReportStyle;

#[derive(Debug, Parser)]
#[command(name = "relqa", version, about = "Relation-grounded QA dataset and hallucination benchmark pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Output directory; replaces `out_dir` from the config.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Run seed; replaces `seed` from the config.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GatewayArgs {
    /// Scripted replies (JSON lines); switches the gateway to the mock backend.
    #[arg(long, value_name = "PATH")]
    pub mock_script: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RenderTemplate {
    LlavaLlama2,
    MplugOwl,
    Instructblip,
}

impl From<RenderTemplate> for ModelTemplateId {
    fn from(t: RenderTemplate) -> Self {
        match t {
            RenderTemplate::LlavaLlama2 => Self::LlavaLlama2,
            RenderTemplate::MplugOwl => Self::MplugOwl,
            RenderTemplate::Instructblip => Self::Instructblip,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Markdown,
    Csv,
}

impl From<Format> for ReportStyle {
    fn from(f: Format) -> Self {
        match f {
            Format::Markdown => Self::Markdown,
            Format::Csv => Self::Csv,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate the corpus, then write a normalized copy to `<out>/corpus`.
    Ingest {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate one instruction sample per relation into `<out>/dataset.jsonl`.
    GenDataset {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        gw: GatewayArgs,
        /// Also write conversations rendered for this model template.
        #[arg(long, value_enum, value_name = "TEMPLATE")]
        render: Option<RenderTemplate>,
    },
    /// Draw yes/no benchmark candidates into `<out>/pool.jsonl`.
    GenBench {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        gw: GatewayArgs,
    },
    /// Assign a hallucination type to every negative candidate in the pool.
    Classify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        gw: GatewayArgs,
        /// Candidate pool; defaults to `<out>/pool.jsonl`.
        #[arg(long, value_name = "PATH")]
        pool: Option<PathBuf>,
    },
    /// Serve the review API over the candidate pool.
    ReviewServe {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Candidate pool; defaults to `<out>/pool.jsonl`.
        #[arg(long, value_name = "PATH")]
        pool: Option<PathBuf>,
        /// Directory of `{image_id}.{jpg,jpeg,png,webp}` files.
        #[arg(long, value_name = "DIR")]
        images_root: Option<PathBuf>,
        /// Address to bind; port 0 picks a free port.
        #[arg(long, env = "RELQA_LISTEN", default_value = "127.0.0.1:8080", value_name = "ADDR")]
        listen: String,
        /// Allowed CORS origin; any origin when omitted.
        #[arg(long, value_name = "ORIGIN")]
        cors_origin: Option<String>,
    },
    /// Apply review decisions and sample the final benchmark.
    Finalize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Candidate pool; its decision log is read from beside it.
        #[arg(long, value_name = "PATH")]
        pool: Option<PathBuf>,
        /// Items per negative subset; replaces `n_per_subset`.
        #[arg(long, value_name = "N")]
        n_per_subset: Option<usize>,
        /// Positive items; replaces `n_positive`.
        #[arg(long, value_name = "N")]
        n_positive: Option<usize>,
    },
    /// Query the evaluated model for every benchmark item.
    Collect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        gw: GatewayArgs,
        /// Benchmark file; defaults to `<out>/<bench_name>.jsonl`.
        #[arg(long, value_name = "PATH")]
        benchmark: Option<PathBuf>,
        /// Output responses file; defaults to `<out>/responses.jsonl`.
        #[arg(long, value_name = "PATH")]
        responses: Option<PathBuf>,
    },
    /// Score responses against a benchmark and print a report row.
    Eval {
        /// Benchmark file (JSON lines).
        #[arg(long, value_name = "PATH")]
        benchmark: PathBuf,
        /// Responses file with `{item_id, response_text}` lines.
        #[arg(long, value_name = "PATH")]
        responses: PathBuf,
        /// Read the benchmark as a POPE-style file (`question_id`, `image`, `text`, `label`).
        #[arg(long)]
        external: bool,
        /// Report format.
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        /// Model label for the report; defaults to `collect.model_label` or "model".
        #[arg(long, value_name = "LABEL")]
        model: Option<String>,
        /// Run configuration; places the run record under its `out_dir`.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Write the report here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
        /// Also write the full report as JSON, for `relqa report`.
        #[arg(long, value_name = "PATH")]
        json: Option<PathBuf>,
    },
    /// Combine saved reports (`.json` from `eval --json`, or `.csv`) into one table.
    Report {
        /// Report files.
        #[arg(required = true, value_name = "FILE")]
        inputs: Vec<PathBuf>,
        /// Report format.
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
        /// Run configuration; places the run record under its `out_dir`.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        /// Write the table here instead of stdout.
        #[arg(long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match stages::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
