mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use semreward_core::embed::EmbeddingSource;

#[derive(Debug, Parser)]
#[command(name = "semreward", version, about = "Reward shaping and reward-collapse diagnostics for QA reinforcement learning")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed for every randomized step (mock embeddings, sampling, clustering).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// `key = value` settings file; see `print-config` for every key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Embedding source: mock, file:PATH or service:URL.
    #[arg(long, global = true, default_value = "mock")]
    pub embeddings: EmbeddingSource,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score {id, response, reference} lines into reward records.
    Score(commands::ScoreArgs),
    /// Replay raw score batches through the adaptive threshold controller.
    AdaptReplay(commands::ReplayArgs),
    /// Run the toy-policy GRPO simulation and write its telemetry.
    GrpoSim(commands::SimArgs),
    /// Pick representative QA exemplars per frequent answer.
    SelectKnowledge(commands::SelectArgs),
    /// HSS and multiple-choice accuracy over a predictions file.
    Eval(commands::EvalArgs),
    /// Mean, variance and histogram of a score column.
    DiagnoseCollapse(commands::DiagnoseArgs),
    /// Check reviewer refinement records, one JSON object per line.
    ValidateRefinements(commands::RefineArgs),
    /// Print the effective settings in config-file form.
    PrintConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let message: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let message = message.join(" ");
            eprintln!("{}", serde_json::json!({ "error": message.trim_start_matches("error: ") }));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Score(a) => commands::score(&cli.global, a),
        Command::AdaptReplay(a) => commands::adapt_replay(&cli.global, a),
        Command::GrpoSim(a) => commands::grpo_sim(&cli.global, a),
        Command::SelectKnowledge(a) => commands::select_knowledge(&cli.global, a),
        Command::Eval(a) => commands::eval(&cli.global, a),
        Command::DiagnoseCollapse(a) => commands::diagnose(&cli.global, a),
        Command::ValidateRefinements(a) => commands::validate_refinements(&cli.global, a),
        Command::PrintConfig => commands::print_config(&cli.global),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(ToString::to_string).collect();
            let line = serde_json::json!({ "error": chain.join(": ") });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
