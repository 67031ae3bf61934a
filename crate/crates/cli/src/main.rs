//! `pipemorph`: plan, simulate and replay pipeline-parallel training jobs.

mod commands;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pipemorph::schedule::Policy;

#[derive(Debug, Parser)]
#[command(name = "pipemorph", version, about = "Plan, simulate and replay pipeline-parallel training jobs")]
struct Cli {
    /// Emit machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep pipeline depths and pick the fastest configuration.
    Plan(PlanArgs),
    /// Simulate one mini-batch of the configuration in `[parallel]`.
    Simulate(SimulateArgs),
    /// Compare the two schedules as inter-node bandwidth shrinks.
    Compare(CompareArgs),
    /// Replay a preemption trace through the cluster manager.
    Replay(ReplayArgs),
    /// Draw the per-stage timeline of one simulated mini-batch.
    Gantt(GanttArgs),
    /// Cut an operator profile into sections and group them into stages.
    Partition(PartitionArgs),
    /// Write a calibration file generated from the model and hardware.
    CalibrateSynth(CalibrateArgs),
}

#[derive(Debug, Args)]
struct PlanArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Plan for this many single-GPU VMs instead of the `[cluster]` table.
    #[arg(long)]
    gpus: Option<usize>,
    /// Write the configuration with the chosen `[parallel]` table here.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Jitter seed for every candidate simulation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Run configuration (TOML) with a `[parallel]` table.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Schedule policy; defaults to `planner.policy`.
    #[arg(long, value_name = "varuna|gpipe")]
    schedule: Option<Policy>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Follow the static schedule exactly.
    #[arg(long = "static")]
    static_order: bool,
    /// Simulate even if a stage does not fit in GPU memory.
    #[arg(long)]
    ignore_memory: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also write a Gantt chart (`.svg` or `.csv`).
    #[arg(long, value_name = "FILE")]
    gantt: Option<PathBuf>,
    /// Write the event log as CSV.
    #[arg(long, value_name = "FILE")]
    events: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Run configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Inter-node bandwidth multipliers, comma separated (0.5 = half).
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    bandwidth_scale: Vec<f64>,
    /// Pipeline depth; with `--replicas`, replaces `[parallel]` and lets
    /// each policy partition the model its own way.
    #[arg(long, requires = "replicas")]
    depth: Option<usize>,
    #[arg(long, requires = "depth")]
    replicas: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// Run configuration (TOML); its `[cluster]` table is ignored.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Preemption trace: `time_s kind vm_id gpus node_id` per line.
    #[arg(long, value_name = "FILE")]
    trace: PathBuf,
    /// Write the timeline CSV here instead of standard output.
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// Write the throughput plot here.
    #[arg(long, value_name = "FILE")]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GanttArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output file; `.csv` writes rows, anything else SVG.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    replica: usize,
}

#[derive(Debug, Args)]
struct PartitionArgs {
    /// Operator profile (TOML, one `[[op]]` table per operation).
    #[arg(long, value_name = "FILE")]
    ops: PathBuf,
    /// Number of cut-point sections.
    #[arg(short = 'K', value_name = "K")]
    cutpoints: usize,
    /// Number of pipeline stages.
    #[arg(short = 'P', value_name = "P")]
    stages: usize,
    /// Allowed excess of a section over the balanced share, traded for
    /// smaller activations at the cuts.
    #[arg(long, default_value_t = 0.0)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Run configuration (TOML) naming the model and hardware.
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = commands::Output::new(cli.json);
    let result = match cli.command {
        Command::Plan(a) => commands::plan(&out, &a.spec, a.gpus, a.out.as_deref(), a.seed),
        Command::Simulate(a) => commands::simulate(&out, &a.run.into(), a.gantt.as_deref(), a.events.as_deref()),
        Command::Compare(a) => {
            let shape = a.depth.zip(a.replicas);
            commands::compare(&out, &a.config, &a.bandwidth_scale, shape, a.seed)
        }
        Command::Replay(a) => commands::replay(&out, &a.config, &a.trace, a.csv.as_deref(), a.svg.as_deref(), a.seed),
        Command::Gantt(a) => commands::gantt(&out, &a.run.into(), &a.out, a.replica),
        Command::Partition(a) => commands::partition(&out, &a.ops, a.cutpoints, a.stages, a.tolerance),
        Command::CalibrateSynth(a) => commands::calibrate_synth(&out, &a.config, &a.out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

impl From<RunArgs> for commands::RunRequest {
    fn from(a: RunArgs) -> Self {
        commands::RunRequest {
            config: a.config,
            policy: a.schedule,
            seed: a.seed,
            static_order: a.static_order,
            ignore_memory: a.ignore_memory,
        }
    }
}
