use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ctxtrace_core::{Aggregation, OrderMode, SimMetric};

/// Build context-conflicting QA datasets and measure whether a reader
/// prefers generated or retrieved contexts.
#[derive(Debug, Parser)]
#[command(name = "ctxtrace", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override any config field by dotted name, e.g. `reader.temperature=0.7`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Questions JSONL (`id`, `question`, `answers`).
    #[arg(long, global = true, value_name = "PATH")]
    pub questions: Option<PathBuf>,

    /// Corpus for the BM25 retriever, or the passage file for golden/ingest.
    #[arg(long, global = true, value_name = "PATH")]
    pub corpus: Option<PathBuf>,

    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_parser = parse_order)]
    pub order: Option<OrderMode>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Number of Δsim slices.
    #[arg(long, global = true)]
    pub slices: Option<usize>,

    #[arg(long = "sim-metric", global = true, value_parser = parse_sim_metric)]
    pub sim_metric: Option<SimMetric>,

    #[arg(long, global = true, value_parser = parse_aggregation)]
    pub aggregation: Option<Aggregation>,

    /// Also ask closed-book and keep only samples whose three answers differ.
    #[arg(long, global = true)]
    pub parametric: bool,

    /// Comma-separated generation lengths, e.g. `80,100,120`.
    #[arg(long = "length-candidates", global = true, value_delimiter = ',')]
    pub length_candidates: Option<Vec<u32>>,

    #[arg(long = "match-threshold", global = true)]
    pub match_threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Retrieve and generate one context pair per question.
    Prepare,
    /// Answer from each context alone, filter for traceability and label AIG/AIR.
    Trace {
        #[arg(long, value_name = "PATH")]
        contexts: PathBuf,
    },
    /// Hybrid reads over conflicting samples, plus the per-subset report.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        traced: PathBuf,
        /// Defaults to `report.csv` next to `--out`.
        #[arg(long, value_name = "PATH")]
        report: Option<PathBuf>,
    },
    /// Similarity, slicing, completeness and order analyses.
    Analyze {
        #[command(subcommand)]
        analysis: Analysis,
    },
    /// Markdown tables from one or more `report.csv` files (`[LABEL=]PATH`).
    Report {
        #[arg(required = true)]
        reports: Vec<String>,
    },
    /// Re-check the invariants of written files; exit 3 on any violation.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum Analysis {
    /// Question similarity of both contexts and their Δsim.
    Sim {
        #[arg(long, value_name = "PATH")]
        traced: PathBuf,
    },
    /// DiffGR per Δsim quantile slice.
    Slices {
        #[arg(long, value_name = "PATH")]
        traced: PathBuf,
        #[arg(long, value_name = "PATH")]
        eval: PathBuf,
    },
    /// Nature, sentence-truncated and truncated generated contexts against retrieved ones.
    Completeness {
        #[arg(long, value_name = "PATH")]
        traced: PathBuf,
    },
    /// DiffGR under each context order.
    Order {
        #[arg(long, value_name = "PATH")]
        traced: PathBuf,
    },
}

fn parse_order(s: &str) -> Result<OrderMode, String> {
    s.parse().map_err(|e: ctxtrace_core::Error| e.to_string())
}

fn parse_sim_metric(s: &str) -> Result<SimMetric, String> {
    s.parse().map_err(|e: ctxtrace_core::Error| e.to_string())
}

fn parse_aggregation(s: &str) -> Result<Aggregation, String> {
    s.parse().map_err(|e: ctxtrace_core::Error| e.to_string())
}
