use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use flowsamp_core::harness::synthetic::{generate_topology, TopologySpec};
use flowsamp_core::{harness, simulate, Error, ExperimentConfig, FlowModel};

/// Sampling-rate planning and Kalman flow-volume estimation experiments.
#[derive(Parser)]
#[command(name = "flowsamp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the optimized plan only.
    Run(RunArgs),
    /// Run the optimized plan and the naive even split on the same trace.
    Compare(RunArgs),
    /// Write a synthetic routing matrix as CSV.
    GenTopology {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        links: usize,
        #[arg(long)]
        flows: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Simulate a trace from a flow model (JSON) and write it as CSV.
    GenTrace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config, JSON or TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

enum Stage {
    Input,
    Output,
}

struct Failure {
    stage: Stage,
    error: Error,
}

fn input(error: Error) -> Failure {
    Failure {
        stage: Stage::Input,
        error,
    }
}

fn output(error: Error) -> Failure {
    Failure {
        stage: Stage::Output,
        error,
    }
}

fn exit_code(f: &Failure) -> u8 {
    match (&f.error, &f.stage) {
        (Error::SolverSize { .. }, _) => 3,
        (Error::Numerical { .. }, _) => 4,
        (Error::Io { .. } | Error::Csv { .. } | Error::Json(_), Stage::Output) => 1,
        (
            Error::Config(_)
            | Error::InvalidRouting(_)
            | Error::InvalidModel(_)
            | Error::InvalidPlan(_)
            | Error::InvalidBudget(_)
            | Error::Calibration(_)
            | Error::DimensionMismatch { .. }
            | Error::IndexOutOfRange { .. }
            | Error::Io { .. }
            | Error::Csv { .. }
            | Error::Json(_),
            _,
        ) => 2,
        _ => 1,
    }
}

fn experiment(args: &RunArgs, with_naive: bool) -> Result<(), Failure> {
    let start = Instant::now();
    let mut cfg = ExperimentConfig::load(&args.config).map_err(input)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let result = if with_naive {
        harness::compare(&cfg)
    } else {
        harness::run_experiment(&cfg)
    }
    .map_err(input)?;
    harness::write_outputs(&result, &args.out).map_err(output)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    eprint!(
        "rmse_time_average opt {:.3}",
        result.optimal.rmse_time_average
    );
    if let Some(c) = result.comparison {
        eprint!(
            " naive {:.3} reduction {:.2}%",
            c.naive_average, c.percent_reduction
        );
    }
    eprintln!(" ({:.2?})", start.elapsed());
    Ok(())
}

fn gen_topology(spec: TopologySpec, seed: u64, out: &Path) -> Result<(), Failure> {
    let topo = generate_topology(&spec, seed).map_err(input)?;
    topo.routing.save_csv(out).map_err(output)?;
    eprintln!(
        "{} links, {} flows -> {}",
        topo.routing.n_links(),
        topo.routing.n_flows(),
        out.display()
    );
    Ok(())
}

fn gen_trace(model: &Path, steps: usize, seed: u64, out: &Path) -> Result<(), Failure> {
    let model = FlowModel::load_json(model).map_err(input)?;
    let trace = simulate(&model, steps, seed).map_err(input)?;
    trace.save_csv(out).map_err(output)?;
    eprintln!(
        "{steps} slots, {} flows -> {}",
        model.n_flows(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => experiment(args, false),
        Command::Compare(args) => experiment(args, true),
        Command::GenTopology {
            nodes,
            links,
            flows,
            out,
            seed,
        } => gen_topology(
            TopologySpec {
                nodes: *nodes,
                links: *links,
                flows: *flows,
            },
            *seed,
            out,
        ),
        Command::GenTrace {
            model,
            steps,
            out,
            seed,
        } => gen_trace(model, *steps, *seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let code = exit_code(&f);
            let what = match code {
                2 => "invalid input",
                3 => "problem too large for the exact solver",
                4 => "numerical failure",
                _ => "failed",
            };
            eprintln!("error: {what}: {}", f.error);
            ExitCode::from(code)
        }
    }
}
