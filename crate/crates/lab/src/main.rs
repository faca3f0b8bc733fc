//! `icl-kd-lab`: run one verification suite from a JSON config and write its
//! report. Exit code 0 means every asserted check passed, 1 means at least
//! one `_violation` flag was raised, 2 means the run itself could not start
//! or finish (bad config, IO failure, usage error).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_kd_lab::config::{ExperimentConfig, Suite};
use icl_kd_lab::error::{LabError, Result};
use icl_kd_lab::rank_files::rank_prompt_files;
use icl_kd_lab::report::ReportFormat;
use icl_kd_lab::run_experiment;

/// Environment variable that overrides the config seed (itself overridden by
/// an explicit `--seed`).
const SEED_ENV_VAR: &str = "ICL_KD_LAB_SEED";

#[derive(Parser)]
#[command(
    name = "icl-kd-lab",
    version,
    about = "Numerical verification suites for in-context learning as implicit distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check attention/gradient-descent duality identities.
    VerifyDuality(RunArgs),
    /// Check the one-step distillation fixed point and KD gradients.
    VerifyKdInit(RunArgs),
    /// Check Rademacher estimates and the generalization bound.
    VerifyGenbound(RunArgs),
    /// Check distribution-shift offset bounds across a shift grid.
    VerifyOffset(RunArgs),
    /// Check the prompt-quality risk-gap bound.
    VerifyRiskgap(RunArgs),
    /// Rank candidate prompt sets by mean-embedding distance.
    RankPrompts(RankPromptArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Report destination path.
    #[arg(long)]
    out: PathBuf,
    /// Report serialization.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
    /// Master seed, overriding the environment variable and the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (defaults to all cores; never affects report bytes).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct RankPromptArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Target token matrix (CSV). Requires --candidates; switches from the
    /// synthetic rank suite to ranking these files.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Directory of candidate token matrices (CSV). Requires --target.
    #[arg(long)]
    candidates: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(1),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

/// Runs the chosen subcommand and returns the number of asserted violations.
fn dispatch(command: Command) -> Result<u64> {
    match command {
        Command::VerifyDuality(args) => run_suite(Suite::Duality, args),
        Command::VerifyKdInit(args) => run_suite(Suite::KdInit, args),
        Command::VerifyGenbound(args) => run_suite(Suite::Genbound, args),
        Command::VerifyOffset(args) => run_suite(Suite::Offset, args),
        Command::VerifyRiskgap(args) => run_suite(Suite::Riskgap, args),
        Command::RankPrompts(args) => {
            let RankPromptArgs {
                run,
                target,
                candidates,
            } = args;
            match (target, candidates) {
                (Some(target), Some(candidates)) => rank_files_mode(run, &target, &candidates),
                (None, None) => run_suite(Suite::Rank, run),
                _ => Err(LabError::InvalidConfig(
                    "--target and --candidates must be given together".into(),
                )),
            }
        }
    }
}

fn load_config(args: &RunArgs, suite: Suite) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config).map_err(|source| LabError::IoFailure {
        path: args.config.display().to_string(),
        source,
    })?;
    let mut cfg: ExperimentConfig =
        serde_json::from_str(&text).map_err(|e| LabError::ParseFailure {
            path: args.config.display().to_string(),
            detail: e.to_string(),
        })?;
    cfg.resolve_suite(suite)?;
    cfg.seed = resolve_seed(args.seed, cfg.seed)?;
    Ok(cfg)
}

/// Seed precedence: `--seed`, then `ICL_KD_LAB_SEED`, then the config value.
fn resolve_seed(cli_seed: Option<u64>, config_seed: u64) -> Result<u64> {
    if let Some(seed) = cli_seed {
        return Ok(seed);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(text) => text.trim().parse::<u64>().map_err(|e| {
            LabError::InvalidConfig(format!("{SEED_ENV_VAR}={text:?} is not a u64: {e}"))
        }),
        Err(std::env::VarError::NotPresent) => Ok(config_seed),
        Err(e) => Err(LabError::InvalidConfig(format!(
            "{SEED_ENV_VAR} is not valid unicode: {e}"
        ))),
    }
}

/// Runs `body` under a rayon pool capped at `jobs` threads, or the global
/// pool when no cap was requested.
fn with_jobs<T: Send>(jobs: Option<usize>, body: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        None => body(),
        Some(0) => Err(LabError::InvalidConfig("--jobs must be at least 1".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| LabError::InvalidConfig(format!("cannot build a {k}-thread pool: {e}")))?
            .install(body),
    }
}

fn run_suite(suite: Suite, args: RunArgs) -> Result<u64> {
    let cfg = load_config(&args, suite)?;
    let bundle = with_jobs(args.jobs, || run_experiment(&cfg))?;
    bundle.emit(&args.out, args.format)?;
    let summary = &bundle.summary;
    println!(
        "[{suite}] records={} asserted_checks={} violations={} trial_errors={} \
         wall_clock={:.3}s -> {}",
        bundle.records.len(),
        summary.asserted_checks,
        summary.violations,
        summary.trial_errors,
        bundle.wall_clock_seconds,
        args.out.display()
    );
    // Only asserted-bound violations drive the exit code; trial errors are
    // visible above and in the report's summary block.
    Ok(summary.violations)
}

/// File mode for `rank-prompts`: no synthetic data, no asserted bounds — the
/// report is the ranking itself, and the exit code is 0 whenever it is
/// produced.
fn rank_files_mode(args: RunArgs, target: &Path, candidates: &Path) -> Result<u64> {
    if args.format == ReportFormat::Csv {
        return Err(LabError::InvalidConfig(
            "rank-prompts file mode only emits JSON; drop --format csv".into(),
        ));
    }
    let cfg = load_config(&args, Suite::Rank)?;
    let output = with_jobs(args.jobs, || rank_prompt_files(&cfg, target, candidates))?;
    let text = output.to_json_string()?;
    std::fs::write(&args.out, text).map_err(|source| LabError::IoFailure {
        path: args.out.display().to_string(),
        source,
    })?;
    let best = output
        .entries
        .first()
        .map(|e| e.id.as_str())
        .unwrap_or("<none>");
    println!(
        "[rank] candidates={} best={best} -> {}",
        output.entries.len(),
        args.out.display()
    );
    Ok(0)
}
