use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guideopt::commands::{self, BackendSettings, CliError, Overrides, PromptSource, RunConfig};
use guideopt::optimizer::{SamplingStrategy, SelectionMode};
use guideopt::pool::PoolSource;

#[derive(Parser, Debug)]
#[command(version, about = "Optimize classification prompts with explanation-derived guidelines")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Backend: scripted:<path> or http:<model>@<base_url>
    #[arg(long, global = true)]
    backend: Option<String>,

    /// Directory for the LLM response cache
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,

    /// Root directory for all outputs
    #[arg(long, global = true)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate explanations for a dataset
    GenExplanations {
        /// Dataset to annotate (default: the config's train set)
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Keep existing explanations
        #[arg(long)]
        only_missing: bool,
    },
    /// Build the guideline pool from the training set
    BuildPool {
        /// Explanation source: human, llm or mixed
        #[arg(long)]
        source: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the guideline search
    Optimize {
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        /// no-control or label-control
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        /// Training subsample proportion in (0, 1]
        #[arg(long)]
        proportion: Option<f64>,
        /// argmax or sequential
        #[arg(long)]
        selection: Option<String>,
        /// Continue the run in this directory
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many iterations (the run stays resumable)
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Evaluate a prompt on a dataset
    Evaluate {
        /// vanilla, cot, random[:n], file:<path> or checkpoint:<run>[@iter]
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Summarize one or more runs
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn parse<T: std::str::FromStr<Err = String>>(value: Option<String>) -> Result<Option<T>, CliError> {
    value.map(|v| v.parse().map_err(CliError::Config)).transpose()
}

fn load_config(cli: &Cli, mut overrides: Overrides) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    overrides.seed = cli.seed;
    overrides.backend = cli.backend.as_deref().map(str::parse::<BackendSettings>).transpose()?;
    overrides.cache_dir = cli.cache_dir.clone();
    overrides.output_root = cli.output_root.clone();
    RunConfig::load(path, &overrides)
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GenExplanations {
            dataset,
            output,
            only_missing,
        } => {
            let cfg = load_config(&cli, Overrides::default())?;
            let summary = commands::gen_explanations(&cfg, dataset.as_deref(), output.as_deref(), *only_missing)?;
            print_json(&summary);
        }
        Command::BuildPool { source, output } => {
            let source = match source.as_deref() {
                None => None,
                Some("human") => Some(PoolSource::Human),
                Some("llm") => Some(PoolSource::Llm),
                Some("mixed") => Some(PoolSource::Mixed),
                Some(other) => return Err(CliError::Config(format!("unknown source `{other}`"))),
            };
            let cfg = load_config(
                &cli,
                Overrides {
                    source,
                    ..Overrides::default()
                },
            )?;
            print_json(&commands::build_pool(&cfg, output.as_deref())?);
        }
        Command::Optimize {
            rounds,
            iterations,
            strategy,
            k,
            proportion,
            selection,
            resume,
            stop_after,
        } => {
            if let Some(dir) = resume {
                print_json(&commands::resume(dir, *stop_after)?);
                return Ok(());
            }
            let overrides = Overrides {
                rounds: *rounds,
                iterations: *iterations,
                strategy: parse::<SamplingStrategy>(strategy.clone())?,
                k: *k,
                proportion: *proportion,
                selection: parse::<SelectionMode>(selection.clone())?,
                ..Overrides::default()
            };
            let cfg = load_config(&cli, overrides)?;
            for round in commands::optimize(&cfg, *stop_after)? {
                print_json(&round);
            }
        }
        Command::Evaluate {
            prompt,
            dataset,
            output,
        } => {
            let cfg = load_config(&cli, Overrides::default())?;
            let source: PromptSource = prompt.parse()?;
            let record = commands::evaluate(&cfg, &source, dataset.as_deref(), output.as_deref())?;
            print_json(&serde_json::json!({
                "source": record.source,
                "f1_macro": record.report.f1_macro,
                "n": record.report.n,
                "unparsed": record.report.unparsed_count,
            }));
        }
        Command::Report { runs, output } => {
            let bundle = commands::report(runs, output)?;
            print_json(&serde_json::json!({
                "runs": bundle.runs.len(),
                "best_run": bundle.best_run,
                "best_score": bundle.best_score,
                "best_by": bundle.best_by,
            }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
