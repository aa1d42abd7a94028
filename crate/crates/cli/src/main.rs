use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gridse::harness::{
    emit_csv, run_dynamic_sim, run_noise_sweep, run_static_sweep, run_toy_examples, sweep_complexity, Cell, Experiment,
    ExperimentConfig, Table,
};
use gridse::netmodel::{ieee14, ieee14_published_solution, load_case};
use gridse::powerflow::solve_power_flow;
use gridse::LoadTable;

#[derive(Debug, Parser)]
#[command(
    name = "gridse",
    version,
    about = "Bayesian state estimation experiments on AC power grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Update-only MSE against BCF mixture size and PF particle count.
    StaticSweep(Common),
    /// Static protocol repeated over the Gaussian/uniform mixing grid.
    NoiseSweep(Common),
    /// Time-stepped tracking of a load trajectory with Holt prediction.
    DynamicSim(Common),
    /// Scalar linear, bimodal and x² sin x examples.
    Toy(Common),
    /// Settings and cost needed to reach a fixed dimension-free error.
    Complexity {
        #[command(flatten)]
        common: Common,
        /// Also record single-threaded wall time per update.
        #[arg(long)]
        timing: bool,
    },
    /// Parse a case file and solve its nominal power flow.
    ValidateCase(Common),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Case file (MATPOWER `.m` or native CSV); defaults to the bundled IEEE 14-bus case.
    #[arg(long)]
    case: Option<PathBuf>,
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Output directory for CSV files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Full-scale trial counts: 1000 static/noise, 500 dynamic, 1000 complexity.
    #[arg(long)]
    full: bool,
}

impl Common {
    fn config(&self, experiment: Option<Experiment>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(exp) = experiment.filter(|_| self.full) {
            cfg = cfg.full_scale(exp);
        }
        if let Some(case) = &self.case {
            cfg.case = Some(case.clone());
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(trials) = self.trials {
            match experiment {
                Some(Experiment::Toy) => cfg.toy.trials = trials,
                Some(Experiment::Complexity) => cfg.complexity.trials = trials,
                _ => cfg.trials = trials,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write(cfg: &ExperimentConfig, name: &str, table: &Table) -> Result<()> {
    let path = cfg.out_dir.join(name);
    emit_csv(table, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_config(cfg: &ExperimentConfig, name: &str) -> Result<()> {
    let path = cfg.out_dir.join(name);
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    std::fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn validate_case(cfg: &ExperimentConfig, case: Option<&Path>) -> Result<()> {
    let model = match case {
        Some(p) => load_case(p)?,
        None => ieee14(),
    };
    let solved = solve_power_flow(&model, &LoadTable::nominal(&model), 1e-10, 30)
        .context("nominal power flow did not converge")?;
    println!(
        "{} buses, {} branches, state dimension {}",
        model.bus_count(),
        model.branches().len(),
        model.state_dim()
    );

    let mut table = Table::new(&["bus", "vm", "va_rad"]);
    let slack = model.slack_index();
    let mut rows = vec![None; model.bus_count()];
    for (idx, (vm, va)) in model
        .non_slack_indices()
        .into_iter()
        .zip(solved.vm().iter().zip(solved.va()))
    {
        rows[idx] = Some((*vm, *va));
    }
    let slack_bus = &model.buses()[slack];
    rows[slack] = Some((slack_bus.vm, slack_bus.va));
    for (bus, row) in model.buses().iter().zip(&rows) {
        let (vm, va) = row.expect("every bus is assigned");
        table.push(vec![Cell::Int(bus.id as i64), Cell::Float(vm), Cell::Float(va)]);
    }

    if case.is_none() {
        let worst = ieee14_published_solution()
            .into_iter()
            .map(|(id, vm, va)| {
                let idx = model.bus_index(id).expect("published bus exists");
                let (svm, sva) = rows[idx].expect("every bus is assigned");
                (svm - vm).abs().max((sva - va).abs())
            })
            .fold(0.0, f64::max);
        println!("max deviation from published solution: {worst:.3e} pu");
        if worst > 1e-4 {
            bail!("solution deviates from the published case by {worst:.3e} pu");
        }
    }
    write(cfg, "case_solution.csv", &table)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::StaticSweep(c) => {
            let cfg = c.config(Some(Experiment::StaticSweep))?;
            let r = run_static_sweep(&cfg)?;
            write_config(&cfg, "static_sweep.config")?;
            write(&cfg, "static_sweep.csv", &r.table())?;
        }
        Command::NoiseSweep(c) => {
            let cfg = c.config(Some(Experiment::NoiseSweep))?;
            let r = run_noise_sweep(&cfg)?;
            write_config(&cfg, "noise_sweep.config")?;
            write(&cfg, "noise_sweep.csv", &r.table())?;
            write(&cfg, "noise_ratios.csv", &r.ratio_table())?;
        }
        Command::DynamicSim(c) => {
            let cfg = c.config(Some(Experiment::DynamicSim))?;
            let r = run_dynamic_sim(&cfg)?;
            write_config(&cfg, "dynamic_sim.config")?;
            write(&cfg, "dynamic_summary.csv", &r.table())?;
            write(&cfg, "dynamic_trace.csv", &r.trace_table())?;
        }
        Command::Toy(c) => {
            let cfg = c.config(Some(Experiment::Toy))?;
            let r = run_toy_examples(&cfg)?;
            write_config(&cfg, "toy.config")?;
            write(&cfg, "toy_linear.csv", &r.linear_table())?;
            write(&cfg, "toy_nonlinear.csv", &r.nonlinear_table())?;
            write(&cfg, "toy_bimodal_density.csv", &r.density_table())?;
        }
        Command::Complexity { common, timing } => {
            let mut cfg = common.config(Some(Experiment::Complexity))?;
            cfg.complexity.timing |= timing;
            let sweep = sweep_complexity(&cfg)?;
            write_config(&cfg, "complexity.config")?;
            write(&cfg, "complexity_curves.csv", &sweep.curve_table())?;
            let r = sweep.select(&cfg)?;
            write(&cfg, "complexity.csv", &r.table())?;
            if cfg.complexity.timing {
                write(&cfg, "complexity_timing.csv", &r.timing_table())?;
            }
        }
        Command::ValidateCase(c) => {
            let cfg = c.config(None)?;
            validate_case(&cfg, cfg.case.as_deref())?;
        }
    }
    Ok(())
}
