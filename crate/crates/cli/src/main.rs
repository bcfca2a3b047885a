use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use sltmpc::config::{Experiment, ExperimentConfig};
use sltmpc::ocp::MemoryEntry;
use sltmpc::runtime::MemoryEvent;
use sltmpc::sim::{self, RoaVariant};
use sltmpc::verify::{self, VerifyOptions};

/// Experiments for system level tube MPC with asynchronous tube updates.
#[derive(Parser, Debug)]
#[command(name = "sltmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (TOML). Defaults to the bundled example.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,

    /// Overrides `simulation.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides `memory.schedule`: a period K, `background` or `never`.
    #[arg(long, global = true)]
    schedule: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Closed-loop run, writes trajectory.csv and tube snapshots.
    Simulate,
    /// Feasibility grid, writes roa.csv.
    Roa {
        /// fixed_tube, primary_async, full_sltmpc or all.
        #[arg(long, default_value = "all")]
        variant: String,
    },
    /// Solve-time comparison, writes bench.csv.
    Bench,
    /// Tube polygons of the initial memory, writes tubes.csv.
    Tubes,
    /// Runs the invariant suite and prints one line per property.
    Verify {
        /// Overrides `simulation.runs`.
        #[arg(long)]
        runs: Option<usize>,
    },
}

/// Raised when `verify` finds a failing property.
#[derive(Debug)]
struct PropertiesFailed(usize);

impl std::fmt::Display for PropertiesFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} properties failed", self.0)
    }
}

impl std::error::Error for PropertiesFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use sltmpc::Error;
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidInput(_) | Error::Dimension(_)) => 2,
        Some(Error::Infeasible(_)) => 3,
        Some(Error::Solver(_)) => 4,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => ExperimentConfig::example(),
    };
    if let Some(seed) = cli.seed {
        config.simulation.seed = seed;
    }
    if let Some(s) = &cli.schedule {
        config.memory.schedule = s.clone();
    }
    // validates the overrides too
    config.schedule()?;
    Ok(config)
}

fn create(dir: &Path, name: &str) -> anyhow::Result<BufWriter<File>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_tubes(exp: &Experiment, entries: &[MemoryEntry], dir: &Path, name: &str) -> anyhow::Result<()> {
    let mut out = create(dir, name)?;
    sim::write_tubes_csv(&exp.data, entries, &exp.hash, &mut out)?;
    out.flush()?;
    Ok(())
}

fn simulate(exp: &Experiment, dir: &Path) -> anyhow::Result<()> {
    let seed = exp.config.simulation.seed;
    let wanted: BTreeSet<usize> = exp.config.simulation.tube_snapshots.iter().copied().collect();
    let mut snapshots: Vec<(usize, Vec<MemoryEntry>)> = Vec::new();
    let (run, state) = exp.run_observed(seed, exp.schedule, &mut |view| {
        if wanted.contains(&view.k) {
            snapshots.push((view.k, view.state.memory.entries().to_vec()));
        }
    })?;

    // the log is written even when the run stopped early
    let mut out = create(dir, "trajectory.csv")?;
    sim::write_trajectory_csv(&run.log, exp.data.n(), exp.data.m(), &mut out)?;
    out.flush()?;
    for (k, entries) in &snapshots {
        write_tubes(exp, entries, dir, &format!("tubes_k{k}.csv"))?;
    }
    write_tubes(exp, state.memory.entries(), dir, "tubes.csv")?;

    let updates = run
        .log
        .records
        .iter()
        .filter(|r| r.event != MemoryEvent::None)
        .map(|r| format!("{}@{}", r.event, r.k))
        .collect::<Vec<_>>();
    println!(
        "simulate: seed {seed}, {} of {} steps, memory events [{}], config {}",
        run.log.records.len(),
        exp.config.simulation.steps,
        updates.join(" "),
        exp.hash
    );
    match run.failure {
        Some(e) => {
            Err(anyhow::Error::new(e).context(format!("closed loop stopped after {} steps", run.log.records.len())))
        }
        None => Ok(()),
    }
}

fn roa(exp: &Experiment, dir: &Path, variant: &str) -> anyhow::Result<()> {
    let variants: Vec<RoaVariant> = if variant == "all" {
        RoaVariant::ALL.to_vec()
    } else {
        vec![variant.parse()?]
    };
    let grid = exp.grid()?;
    let mut grids = Vec::new();
    for v in variants {
        let g = sim::roa_grid(&exp.data, &exp.terminal, &exp.initial_memory, v, &grid, &exp.settings)?;
        println!(
            "roa: {} feasible cells {} of {}",
            v.as_str(),
            g.feasible_count(),
            g.points.len()
        );
        grids.push(g);
    }
    let mut out = create(dir, "roa.csv")?;
    sim::write_roa_csv(&grids, &exp.hash, &mut out)?;
    out.flush()?;
    Ok(())
}

fn bench(exp: &Experiment, dir: &Path) -> anyhow::Result<()> {
    let (run, _) = exp.run(exp.config.simulation.seed, exp.schedule)?;
    let states: Vec<_> = run
        .log
        .records
        .iter()
        .map(|r| r.x.clone())
        .take(exp.config.bench.states)
        .collect();
    if states.is_empty() {
        bail!(sltmpc::Error::Infeasible("no closed-loop states to benchmark".into()));
    }
    let rows = sim::bench_solve_times(
        &exp.data,
        &exp.terminal,
        &exp.initial_memory,
        &states,
        exp.config.bench.repeats,
        exp.config.memory.rho,
        &exp.settings,
    )?;
    for r in &rows {
        println!(
            "bench: {:<13} n={:<4} mean {:.3} ms, median {:.3} ms, p95 {:.3} ms",
            r.variant, r.samples, r.mean_ms, r.median_ms, r.p95_ms
        );
    }
    if let (Some(p), Some(f)) = (rows.first(), rows.last()) {
        println!("bench: primary / full mean ratio {:.3}", p.mean_ms / f.mean_ms);
    }
    let mut out = create(dir, "bench.csv")?;
    sim::write_bench_csv(&rows, &exp.hash, &mut out)?;
    out.flush()?;
    Ok(())
}

fn run_verify(exp: &Experiment, runs: Option<usize>) -> anyhow::Result<()> {
    let mut opts = VerifyOptions::from_experiment(exp);
    if let Some(r) = runs {
        opts.runs = r;
    }
    let outcomes = verify::verify(exp, &opts);
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    if failed > 0 {
        return Err(PropertiesFailed(failed).into());
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let config = load_config(cli)?;
    let exp = Experiment::from_config(config)?;
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match &cli.command {
        Command::Simulate => simulate(&exp, &cli.out),
        Command::Roa { variant } => roa(&exp, &cli.out, variant),
        Command::Bench => bench(&exp, &cli.out),
        Command::Tubes => write_tubes(&exp, &exp.initial_memory, &cli.out, "tubes.csv"),
        Command::Verify { runs } => run_verify(&exp, *runs),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
