use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use concord_cli::commands::{self, RunStats};
use concord_cli::{CliError, PipelineConfig};

#[derive(Parser)]
#[command(name = "concord", version, about = "Select policy networks by certified pairwise disagreement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Train the fixture policies.
    Train,
    /// Compute the pairwise PDT table.
    Pdt,
    /// Run model selection.
    Select,
    /// Roll out every model in and out of distribution.
    Eval,
    /// Compare the verifier with the configured attack on every pair.
    Compare,
}

fn resolve(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stats_line(stats: &RunStats) -> String {
    if stats.cache_hit {
        "pdt cache hit, 0 oracle calls".to_string()
    } else {
        format!("pdt computed with {} oracle calls", stats.oracle_calls)
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| CliError::Config(format!("--jobs: {e}")))?;
    }
    let cfg = resolve(cli)?;
    match cli.command {
        Command::Train => {
            let (m, hit) = commands::cmd_train(&cfg)?;
            println!(
                "{} models in {} ({}), {} good and {} bad missing",
                m.models.len(),
                cfg.output.join("models").display(),
                if hit { "cached" } else { "trained" },
                m.missing_good,
                m.missing_bad
            );
        }
        Command::Pdt => {
            let (report, stats) = commands::cmd_pdt(&cfg)?;
            println!("{}", stats_line(&stats));
            for (id, row) in report.table.model_ids.iter().zip(&report.table.values) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                println!("{id}: {}", cells.join(" "));
            }
        }
        Command::Select => {
            let report = commands::cmd_select(&cfg)?;
            print!("{}", report.trace.render());
        }
        Command::Eval => {
            let rows = commands::cmd_eval(&cfg)?;
            print!("{}", commands::rewards_csv(&rows));
        }
        Command::Compare => {
            let report = commands::cmd_compare(&cfg)?;
            let c = &report.counts;
            println!("ALIGNED {} UNTIGHTENED {} FAILED {}", c.aligned, c.untightened, c.failed);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("concord: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
