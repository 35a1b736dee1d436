use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mfmc::allocation::aggregate_vector_stats;
use mfmc::estimators::EstimatorMode;
use mfmc::reference::monte_carlo_reference;
use mfmc::study::{thread_pool, PlanSummary, StudyStatistic};
use mfmc::{MfmcError, PilotStats, StatsKind, Study, StudyConfig};

#[derive(Parser)]
#[command(name = "mfmc", version, about = "Multifidelity Monte Carlo study runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON study configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field; the value is parsed as JSON, else taken as a string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for replicates.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the pilot of replicate 0 and write its statistics.
    Pilot(Common),
    /// Compute allocation plans from a fresh pilot or saved pilot statistics.
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Saved pilot statistics; may be repeated.
        #[arg(long)]
        pilot: Vec<PathBuf>,
    },
    /// Run every replicate and write tables, CSV and summary JSON.
    Estimate(Common),
    /// As `estimate`, and also write the MSE-versus-budget CSV.
    Sweep(Common),
    /// Plain Monte Carlo reference values of the high-fidelity model.
    MakeReference {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        /// Output file; defaults to reference.json in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Common {
    fn config(&self) -> Result<StudyConfig> {
        let mut config = match &self.config {
            Some(path) => StudyConfig::load(path)?,
            None => StudyConfig::default(),
        };
        for entry in &self.set {
            let (key, value) = entry
                .split_once('=')
                .ok_or_else(|| MfmcError::Config(format!("expected KEY=VALUE, got {entry:?}")))?;
            config.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(jobs) = self.jobs {
            config.jobs = Some(jobs);
        }
        if let Some(dir) = &self.out_dir {
            config.output_dir = Some(dir.clone());
        }
        Ok(config)
    }
}

fn out_dir(config: &StudyConfig) -> PathBuf {
    config
        .output_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("mfmc-out"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn pilot(common: &Common) -> Result<()> {
    let config = common.config()?;
    let study = Study::without_budget(config)?;
    let dir = out_dir(study.config());
    std::fs::create_dir_all(&dir)?;
    let data = study.pilot_data(0)?;
    let models = study.hierarchy().models();
    println!("{:<14} {:<10} {:<12} {:>14} {:>10}", "statistic", "mode", "model", "sigma_bar", "rho_bar");
    for stat in study.statistics() {
        for &mode in study.modes() {
            let stats = study.pilot_stats(&data, stat.statistic(), mode)?;
            let agg = aggregate_vector_stats(&stats, &vec![1.0; stats.num_components()])?;
            for (i, model) in models.iter().enumerate() {
                let sigma_bar = stats.sigma[i].iter().map(|s| s * s).sum::<f64>().sqrt();
                println!(
                    "{:<14} {:<10} {:<12} {:>14.6e} {:>10.4}",
                    stat.label(),
                    mode.label(),
                    model.label(),
                    sigma_bar,
                    agg.rho_bar_sq[i].sqrt()
                );
            }
            let path = dir.join(format!("pilot_{}_{}.json", stat.label(), mode.label()));
            write(&path, &(stats.to_json()? + "\n"))?;
        }
    }
    Ok(())
}

fn mode_of(kind: StatsKind) -> EstimatorMode {
    match kind {
        StatsKind::GTransformed => EstimatorMode::Nonlinear,
        StatsKind::Raw | StatsKind::QTransformed => EstimatorMode::Linear,
    }
}

fn allocate(common: &Common, pilot_files: &[PathBuf]) -> Result<()> {
    let config = common.config()?;
    let study = Study::new(config)?;
    let dir = out_dir(study.config());
    std::fs::create_dir_all(&dir)?;
    let budgets: Vec<Option<f64>> = match &study.config().budgets {
        Some(b) => b.iter().map(|&b| Some(b)).collect(),
        None => vec![None],
    };
    let mut plans: Vec<PlanSummary> = Vec::new();
    if pilot_files.is_empty() {
        plans.extend(study.replicate_plans(0)?.1.into_iter().map(|(_, p)| p));
    } else {
        for path in pilot_files {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let stats = PilotStats::from_json(&text)?;
            let stat = StudyStatistic::by_name(&stats.statistic)?;
            let mode = mode_of(stats.kind);
            for (b, budget) in budgets.iter().enumerate() {
                plans.push(study.plan(&stat, mode, &stats, b, *budget)?);
            }
        }
    }
    for p in &plans {
        let path = dir.join(format!("plan_{}_{}_{}.json", p.statistic, p.mode.label(), p.budget_index));
        write(&path, &(serde_json::to_string_pretty(p)? + "\n"))?;
    }
    let table = study.plan_table(&plans);
    print!("{table}");
    write(&dir.join("allocation.txt"), &table)
}

fn estimate(common: &Common, sweep: bool) -> Result<()> {
    let config = common.config()?;
    let study = Study::new(config)?;
    if sweep {
        study.require_reference()?;
    }
    let results = study.run()?;
    let dir = out_dir(study.config());
    let with_sweep = sweep || study.require_reference().is_ok();
    for path in study.write_reports(&results, &dir, with_sweep)? {
        eprintln!("wrote {}", path.display());
    }
    print!("{}", study.allocation_table(&study.summarize(&results)));
    Ok(())
}

fn make_reference(common: &Common, samples: Option<usize>, output: Option<&Path>) -> Result<()> {
    let config = common.config()?;
    let study = Study::without_budget(config)?;
    let samples = samples.unwrap_or(study.config().reference_samples);
    let run = || monte_carlo_reference(study.hierarchy(), samples, study.config().seed);
    let reference = match study.config().jobs {
        Some(n) => thread_pool(n)?.install(run)?,
        None => run()?,
    };
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => {
            let dir = out_dir(study.config());
            std::fs::create_dir_all(&dir)?;
            dir.join("reference.json")
        }
    };
    write(&path, &(serde_json::to_string_pretty(&reference)? + "\n"))
}

/// Exit status 2 for configuration mistakes, 1 for runtime failures.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<MfmcError>() {
        Some(MfmcError::Config(_) | MfmcError::UnknownStatistic(_) | MfmcError::UnknownHierarchy(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pilot(common) => pilot(common),
        Command::Allocate { common, pilot } => allocate(common, pilot),
        Command::Estimate(common) => estimate(common, false),
        Command::Sweep(common) => estimate(common, true),
        Command::MakeReference {
            common,
            samples,
            output,
        } => make_reference(common, *samples, output.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
