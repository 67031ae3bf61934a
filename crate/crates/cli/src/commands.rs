use std::collections::BTreeSet;
use std::io::IsTerminal;
use std::path::{Path, PathBuf};

use pipemorph::calibration::{save_profile, synthesize_profile, CalibrationProfile};
use pipemorph::config::{write_toml, ClusterSection, ClusterState, ParallelConfig, RunConfig};
use pipemorph::gantt::{render_gantt, GanttFormat};
use pipemorph::morphing::{replay as replay_trace, MorphEventKind, PreemptionTrace};
use pipemorph::partitioner::{assign_stages, identify_cutpoints, MemoryReport, OpProfile};
use pipemorph::planner::{self, evaluate, prepare, prepare_config, select_microbatch, CandidateStatus, PlannerOptions, Prepared};
use pipemorph::schedule::Policy;
use pipemorph::sim::{simulate_minibatch, Placement, SimOptions, SimulationResult};
use pipemorph::Micros;
use serde::Serialize;

use crate::table::Table;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] pipemorph::Error),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 1 when the request cannot be satisfied, 2 when the input is wrong.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_infeasibility() => 1,
            CliError::Infeasible(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub struct Output {
    json: bool,
    color: bool,
}

impl Output {
    pub fn new(json: bool) -> Self {
        let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
        Output { json, color: !json && !no_color && std::io::stdout().is_terminal() }
    }

    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce(bool) -> String) -> Result<()> {
        if self.json {
            let s = serde_json::to_string_pretty(value).expect("output types serialize");
            println!("{s}");
        } else {
            print!("{}", text(self.color));
        }
        Ok(())
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn secs(t: Micros) -> String {
    format!("{:.3}", t.as_secs_f64())
}

fn ms(t: Micros) -> String {
    format!("{:.2}", t.0 as f64 / 1000.0)
}

fn gib(bytes: i128) -> String {
    format!("{:.2}", bytes as f64 / (1u64 << 30) as f64)
}

/// Largest overrun among stages that do not fit, as text.
fn overrun(memory: &MemoryReport) -> String {
    format!("over GPU memory by {} GiB", gib(-memory.headroom()))
}

// ---------------------------------------------------------------- plan

#[derive(Serialize)]
struct PlanOutput<'a> {
    #[serde(flatten)]
    result: &'a planner::PlanResult,
    written: Option<&'a Path>,
}

pub fn plan(out: &Output, spec: &Path, gpus: Option<usize>, write: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = RunConfig::load(spec)?;
    let (model, job, hw, profile) = (cfg.model()?, cfg.job()?, cfg.hardware()?, cfg.profile()?);
    let cluster = match gpus {
        Some(g) => ClusterState::uniform(g, 1),
        None => cfg.cluster()?,
    };
    let opts = PlannerOptions { seed, ..cfg.planner.clone() };
    let r = planner::plan(&model, &job, &profile, &hw, &cluster, &BTreeSet::new(), &opts)?;

    if let Some(path) = write {
        let mut chosen = cfg.clone();
        chosen.parallel = Some(r.chosen.clone());
        if let Some(g) = gpus {
            chosen.cluster = Some(ClusterSection { gpus: Some(g), vms: Vec::new() });
        }
        rebase_profile_path(&mut chosen, spec, path);
        write_toml(path, &chosen)?;
    }

    out.emit(&PlanOutput { result: &r, written: write }, |bold| {
        let mut t = Table::new(&["config", "m", "N_m", "status", "minibatch_s", "ex/s", "ex/s/GPU"]);
        for c in &r.candidates {
            let mark = if c.config.pipeline_depth == r.chosen.pipeline_depth { "*" } else { "" };
            let status = match &c.status {
                CandidateStatus::Simulated { .. } => "simulated".to_string(),
                CandidateStatus::MemoryInfeasible { headroom_bytes } => format!("over memory by {} GiB", gib(-headroom_bytes)),
                CandidateStatus::MissingRingSize { data_parallel } => format!("no allreduce entry for D={data_parallel}"),
            };
            let opt = |x: Option<f64>, digits: usize| x.map_or("-".to_string(), |v| format!("{v:.digits$}"));
            t.row(vec![
                format!("{}{mark}", c.config.label()),
                c.config.micro_batch.to_string(),
                c.config.num_micro_batches.to_string(),
                status,
                c.minibatch_time().map_or("-".to_string(), secs),
                opt(c.examples_per_s, 2),
                opt(c.examples_per_s_per_gpu, 3),
            ]);
        }
        let mut s = t.render(bold);
        s.push_str(&format!(
            "\nchosen {} (m={}, N_m={}) on {} GPUs: {:.2} ex/s, {} s per mini-batch, {} unused\n",
            r.chosen.label(),
            r.chosen.micro_batch,
            r.chosen.num_micro_batches,
            r.gpus,
            r.examples_per_s,
            secs(r.minibatch_time),
            r.unused_gpus
        ));
        if let Some(p) = write {
            s.push_str(&format!("wrote {}\n", p.display()));
        }
        s
    })
}

/// Keeps a relative calibration path valid when the configuration is
/// written to another directory.
fn rebase_profile_path(cfg: &mut RunConfig, from: &Path, to: &Path) {
    let Some(p) = cfg.calibration.profile.as_ref().filter(|p| p.is_relative()) else { return };
    let dir = |f: &Path| f.parent().map(Path::to_path_buf).unwrap_or_default();
    if dir(from) == dir(to) {
        return;
    }
    let joined = dir(from).join(p);
    cfg.calibration.profile = Some(std::fs::canonicalize(&joined).unwrap_or(joined));
}

// ---------------------------------------------------------------- simulate

pub struct RunRequest {
    pub config: PathBuf,
    pub policy: Option<Policy>,
    pub seed: u64,
    pub static_order: bool,
    pub ignore_memory: bool,
}

struct Run {
    prepared: Prepared,
    result: SimulationResult,
    policy: Policy,
    opportunistic: bool,
    mini_batch: u64,
}

fn placement_for(cfg: &RunConfig, p: usize, d: usize) -> Result<Placement> {
    Ok(match cfg.cluster {
        Some(_) => Placement::pack(&cfg.cluster()?, p, d, &BTreeSet::new())?,
        None => Placement::scattered(p, d),
    })
}

fn parallel_of(cfg: &RunConfig, path: &Path) -> Result<ParallelConfig> {
    cfg.parallel.clone().ok_or_else(|| {
        CliError::Input(format!(
            "{}: no `[parallel]` table; `pipemorph plan --out` writes a configuration with one",
            path.display()
        ))
    })
}

fn run(req: &RunRequest, record: bool, event_log: bool) -> Result<Run> {
    let cfg = RunConfig::load(&req.config)?;
    let (model, job, hw, profile) = (cfg.model()?, cfg.job()?, cfg.hardware()?, cfg.profile()?);
    let config = parallel_of(&cfg, &req.config)?;
    let opts = PlannerOptions {
        policy: req.policy.unwrap_or(cfg.planner.policy),
        opportunistic: cfg.planner.opportunistic && !req.static_order,
        seed: req.seed,
        ..cfg.planner.clone()
    };
    let prepared = prepare_config(&model, &job, &profile, &hw, &config, &opts)?;
    if !prepared.memory.feasible() && !req.ignore_memory {
        return Err(CliError::Infeasible(format!(
            "{} is {} (pass --ignore-memory to simulate anyway)",
            config.label(),
            overrun(&prepared.memory)
        )));
    }
    let placement = placement_for(&cfg, config.pipeline_depth, config.data_parallel)?;
    let sim = SimOptions {
        opportunistic: opts.opportunistic,
        links: opts.links,
        allreduce: opts.allreduce,
        overhead_us: opts.overhead_us,
        in_flight_cap: Some(prepared.in_flight_cap.clone()),
        record,
        event_log,
    };
    let result = simulate_minibatch(&prepared.schedule, &prepared.config, &model, &profile, &placement, req.seed, &sim)?;
    Ok(Run { prepared, result, policy: opts.policy, opportunistic: opts.opportunistic, mini_batch: job.mini_batch })
}

#[derive(Serialize)]
struct StageSummary {
    stage: usize,
    cutpoints: [usize; 2],
    forward_us: u64,
    backward_us: u64,
    recompute_us: u64,
    busy_us: u64,
    idle_us: u64,
    peak_in_flight: usize,
    memory_bytes: u64,
}

#[derive(Serialize)]
struct SimSummary {
    config: ParallelConfig,
    policy: Policy,
    opportunistic: bool,
    seed: u64,
    minibatch_time_us: u64,
    pipeline_time_us: u64,
    allreduce_time_us: u64,
    examples_per_s: f64,
    examples_per_s_per_gpu: f64,
    bubble_fraction: f64,
    stages: Vec<StageSummary>,
}

fn summarize(run: &Run) -> SimSummary {
    let r = &run.result;
    let prep = &run.prepared;
    let xput = r.throughput(run.mini_batch);
    let stages = (0..prep.config.pipeline_depth)
        .map(|k| {
            let t = &r.stage_times[k];
            let range = &prep.assignment.ranges[k];
            StageSummary {
                stage: k + 1,
                cutpoints: [range.start, range.end],
                forward_us: t.forward.0,
                backward_us: t.backward.0,
                recompute_us: t.recompute.0,
                busy_us: r.stage_busy[k].0,
                idle_us: r.stage_idle[k].0,
                peak_in_flight: r.peak_in_flight[k],
                memory_bytes: prep.memory.stages[k].total_bytes,
            }
        })
        .collect();
    SimSummary {
        config: prep.config.clone(),
        policy: run.policy,
        opportunistic: run.opportunistic,
        seed: r.seed,
        minibatch_time_us: r.minibatch_time.0,
        pipeline_time_us: r.pipeline_time.0,
        allreduce_time_us: r.allreduce_time.0,
        examples_per_s: xput,
        examples_per_s_per_gpu: xput / prep.config.gpus_used() as f64,
        bubble_fraction: r.bubble_fraction,
        stages,
    }
}

fn summary_text(s: &SimSummary, bold: bool) -> String {
    let c = &s.config;
    let mode = if s.opportunistic { "opportunistic" } else { "static order" };
    let mut out = format!(
        "config      {} m={} N_m={} ({}, {mode}, seed {})\n\
         mini-batch  {} s ({:.2} ex/s, {:.3} ex/s/GPU)\n\
         pipeline    {} s\n\
         allreduce   {} s\n\
         bubble      {:.1}%\n\n",
        c.label(),
        c.micro_batch,
        c.num_micro_batches,
        s.policy,
        s.seed,
        secs(Micros(s.minibatch_time_us)),
        s.examples_per_s,
        s.examples_per_s_per_gpu,
        secs(Micros(s.pipeline_time_us)),
        secs(Micros(s.allreduce_time_us)),
        100.0 * s.bubble_fraction
    );
    let mut t = Table::new(&["stage", "cut-points", "F_ms", "B_ms", "R_ms", "busy_s", "idle_s", "peak_stash", "mem_GiB"]);
    for st in &s.stages {
        t.row(vec![
            st.stage.to_string(),
            format!("{}..{}", st.cutpoints[0], st.cutpoints[1]),
            ms(Micros(st.forward_us)),
            ms(Micros(st.backward_us)),
            ms(Micros(st.recompute_us)),
            secs(Micros(st.busy_us)),
            secs(Micros(st.idle_us)),
            st.peak_in_flight.to_string(),
            gib(st.memory_bytes as i128),
        ]);
    }
    out.push_str(&t.render(bold));
    out
}

pub fn simulate(out: &Output, req: &RunRequest, gantt: Option<&Path>, events: Option<&Path>) -> Result<()> {
    let run = run(req, gantt.is_some(), events.is_some())?;
    if let Some(path) = gantt {
        render_gantt(&run.result, path, GanttFormat::from_path(path), 0)?;
    }
    if let Some(path) = events {
        write_file(path, &run.result.event_log_lines())?;
    }
    let summary = summarize(&run);
    out.emit(&summary, |bold| summary_text(&summary, bold))
}

// ---------------------------------------------------------------- gantt

#[derive(Serialize)]
struct GanttOutput<'a> {
    path: &'a Path,
    format: GanttFormat,
    replica: usize,
    intervals: usize,
    minibatch_time_us: u64,
}

pub fn gantt(out: &Output, req: &RunRequest, path: &Path, replica: usize) -> Result<()> {
    let run = run(req, true, false)?;
    let d = run.prepared.config.data_parallel;
    if replica >= d {
        return Err(CliError::Input(format!("--replica {replica} is out of range; the configuration has {d} replicas")));
    }
    let format = GanttFormat::from_path(path);
    render_gantt(&run.result, path, format, replica)?;
    let intervals = run.result.tasks.iter().filter(|t| t.replica == replica).count();
    let o = GanttOutput { path, format, replica, intervals, minibatch_time_us: run.result.minibatch_time.0 };
    out.emit(&o, |_| format!("wrote {} ({intervals} intervals, replica {replica})\n", path.display()))
}

// ---------------------------------------------------------------- compare

#[derive(Serialize)]
struct CompareRow {
    bandwidth_scale: f64,
    varuna: PolicyRun,
    gpipe: PolicyRun,
    /// Throughput change against the row with the fastest network.
    varuna_change: f64,
    gpipe_change: f64,
    /// Relative advantage of Varuna over GPipe in throughput.
    gap: f64,
}

#[derive(Serialize)]
struct PolicyRun {
    config: ParallelConfig,
    minibatch_time_us: u64,
    examples_per_s_per_gpu: f64,
    memory_headroom_bytes: i128,
}

pub fn compare(out: &Output, path: &Path, scales: &[f64], shape: Option<(usize, usize)>, seed: u64) -> Result<()> {
    let cfg = RunConfig::load(path)?;
    let (model, job, hw) = (cfg.model()?, cfg.job()?, cfg.hardware()?);
    if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(CliError::Input(format!("--bandwidth-scale {s}: scales must be positive")));
    }
    let fixed = match shape {
        Some(_) => None,
        None => Some(parallel_of(&cfg, path)?),
    };
    let base = cfg.profile()?;
    let mut rows = Vec::new();
    for &scale in scales {
        let profile = scaled_profile(&cfg, &base, scale)?;
        let scaled_hw = hw.with_inter_node_bandwidth_scale(scale);
        let one = |policy: Policy| -> Result<PolicyRun> {
            let opts = PlannerOptions {
                policy,
                opportunistic: policy == Policy::Varuna && cfg.planner.opportunistic,
                seed,
                parallel: false,
                ..cfg.planner.clone()
            };
            let prep = match (&fixed, shape) {
                (Some(config), _) => prepare_config(&model, &job, &profile, &scaled_hw, config, &opts)?,
                (None, Some((p, d))) => {
                    let m = match opts.micro_batch {
                        Some(m) => m,
                        None => select_microbatch(&profile, opts.improvement_threshold)?,
                    };
                    prepare(&model, &job, &profile, &scaled_hw, p, d, m, &opts)?
                }
                (None, None) => unreachable!(),
            };
            let c = &prep.config;
            let placement = placement_for(&cfg, c.pipeline_depth, c.data_parallel)?;
            let r = evaluate(&prep, &model, &profile, &placement, &opts)?;
            Ok(PolicyRun {
                minibatch_time_us: r.minibatch_time.0,
                examples_per_s_per_gpu: r.throughput(job.mini_batch) / c.gpus_used() as f64,
                memory_headroom_bytes: prep.memory.headroom(),
                config: prep.config,
            })
        };
        let varuna = one(Policy::Varuna)?;
        let gpipe = one(Policy::GPipe)?;
        let gap = varuna.examples_per_s_per_gpu / gpipe.examples_per_s_per_gpu - 1.0;
        rows.push(CompareRow { bandwidth_scale: scale, varuna, gpipe, varuna_change: 0.0, gpipe_change: 0.0, gap });
    }
    let fastest = rows.iter().max_by(|a, b| a.bandwidth_scale.total_cmp(&b.bandwidth_scale)).map(|r| {
        (r.varuna.examples_per_s_per_gpu, r.gpipe.examples_per_s_per_gpu)
    });
    if let Some((v0, g0)) = fastest {
        for r in &mut rows {
            r.varuna_change = r.varuna.examples_per_s_per_gpu / v0 - 1.0;
            r.gpipe_change = r.gpipe.examples_per_s_per_gpu / g0 - 1.0;
        }
    }
    out.emit(&rows, |bold| {
        let mut t = Table::new(&["bandwidth", "config", "varuna ex/s/GPU", "change", "gpipe ex/s/GPU", "change", "gap", "gpipe memory"]);
        for r in &rows {
            let mem = if r.gpipe.memory_headroom_bytes >= 0 {
                "fits".to_string()
            } else {
                format!("over by {} GiB", gib(-r.gpipe.memory_headroom_bytes))
            };
            t.row(vec![
                format!("{}x", r.bandwidth_scale),
                r.varuna.config.label(),
                format!("{:.3}", r.varuna.examples_per_s_per_gpu),
                format!("{:+.1}%", 100.0 * r.varuna_change),
                format!("{:.3}", r.gpipe.examples_per_s_per_gpu),
                format!("{:+.1}%", 100.0 * r.gpipe_change),
                format!("{:+.1}%", 100.0 * r.gap),
                mem,
            ]);
        }
        t.render(bold)
    })
}

/// The profile under a network `scale` times as fast: regenerated from the
/// scaled hardware when the profile is synthetic, otherwise the measured
/// cross-node times stretched by `1 / scale`.
fn scaled_profile(cfg: &RunConfig, base: &CalibrationProfile, scale: f64) -> Result<CalibrationProfile> {
    if cfg.calibration.profile.is_some() {
        return Ok(base.with_inter_node_slowdown(1.0 / scale));
    }
    let hw = cfg.hardware()?.with_inter_node_bandwidth_scale(scale);
    let cal = &cfg.calibration;
    Ok(synthesize_profile(&cfg.model()?, &hw, &cal.micro_batches, &cal.ring_sizes, &cal.synthetic)?)
}

// ---------------------------------------------------------------- replay

#[derive(Serialize)]
struct ReplaySummary<'a> {
    #[serde(flatten)]
    timeline: &'a pipemorph::morphing::MorphTimeline,
    reconfigurations: usize,
}

pub fn replay(out: &Output, config: &Path, trace: &Path, csv: Option<&Path>, svg: Option<&Path>, seed: u64) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (model, job, hw, profile) = (cfg.model()?, cfg.job()?, cfg.hardware()?, cfg.profile()?);
    let trace = PreemptionTrace::load(trace)?;
    let mut policy = cfg.morph_policy();
    policy.planner.seed = seed;
    let timeline = replay_trace(&trace, &model, &job, &profile, &hw, &policy)?;
    let body = timeline.to_csv();
    if let Some(p) = csv {
        write_file(p, &body)?;
    }
    if let Some(p) = svg {
        write_file(p, &timeline.to_svg())?;
    }
    let reconfigurations = timeline
        .events
        .iter()
        .filter(|e| e.kind == MorphEventKind::Reconfigure)
        .count();
    let summary = ReplaySummary { timeline: &timeline, reconfigurations };
    out.emit(&summary, |_| {
        if csv.is_none() {
            return body.clone();
        }
        let end = timeline.segments.last().map_or(Micros::ZERO, |s| s.end);
        let lost: u64 = timeline.lost_per_preemption.iter().sum();
        format!(
            "{} segments over {} s, {reconfigurations} reconfigurations, {} checkpoints\n\
             {} examples processed, {} mini-batches committed, {lost} lost to preemptions\n",
            timeline.segments.len(),
            secs(end),
            timeline.checkpoints,
            timeline.cumulative_examples,
            timeline.committed_iterations,
        )
    })
}

// ---------------------------------------------------------------- partition

#[derive(Serialize)]
struct PartitionOutput<'a> {
    section_ends: &'a [usize],
    section_compute_us: Vec<u64>,
    shared_crossings: &'a [(String, usize)],
    stages: Vec<PartitionStage>,
}

#[derive(Serialize)]
struct PartitionStage {
    stage: usize,
    cutpoints: [usize; 2],
    ops: [usize; 2],
    params: u64,
    forward_us: u64,
    input_activation_bytes: u64,
}

pub fn partition(out: &Output, ops: &Path, k: usize, p: usize, tolerance: f64) -> Result<()> {
    let profile = OpProfile::load(ops)?;
    let sel = identify_cutpoints(&profile, k, tolerance)?;
    let a = assign_stages(&sel.model, p, 1, &sel.compute_profile(), 1.0)?;
    let stages: Vec<PartitionStage> = a
        .ranges
        .iter()
        .enumerate()
        .map(|(s, r)| {
            let first_op = if r.start == 0 { 0 } else { sel.section_ends[r.start - 1] + 1 };
            PartitionStage {
                stage: s + 1,
                cutpoints: [r.start, r.end],
                ops: [first_op, sel.section_ends[r.end - 1] + 1],
                params: a.params[s],
                forward_us: a.forward[s].0,
                input_activation_bytes: a.input_activation_bytes[s],
            }
        })
        .collect();
    let o = PartitionOutput {
        section_ends: &sel.section_ends,
        section_compute_us: sel.section_compute.iter().map(|t| t.0).collect(),
        shared_crossings: &sel.shared_crossings,
        stages,
    };
    out.emit(&o, |bold| {
        let ends: Vec<String> = sel.section_ends.iter().map(|e| e.to_string()).collect();
        let mut s = format!("{k} sections ending at ops {}\n", ends.join(", "));
        let mut crossings: std::collections::BTreeMap<&str, Vec<String>> = Default::default();
        for (g, b) in &sel.shared_crossings {
            crossings.entry(g).or_default().push(b.to_string());
        }
        for (g, bs) in crossings {
            s.push_str(&format!("shared group `{g}` spans boundaries {}\n", bs.join(", ")));
        }
        s.push('\n');
        let mut t = Table::new(&["stage", "cut-points", "ops", "params", "forward_us", "input_bytes"]);
        for st in &o.stages {
            t.row(vec![
                st.stage.to_string(),
                format!("{}..{}", st.cutpoints[0], st.cutpoints[1]),
                format!("{}..{}", st.ops[0], st.ops[1]),
                st.params.to_string(),
                st.forward_us.to_string(),
                st.input_activation_bytes.to_string(),
            ]);
        }
        s.push_str(&t.render(bold));
        s
    })
}

// ---------------------------------------------------------------- calibrate-synth

#[derive(Serialize)]
struct CalibrateOutput<'a> {
    path: &'a Path,
    cutpoints: usize,
    micro_batches: &'a [u32],
    ring_sizes: &'a [u32],
}

pub fn calibrate_synth(out: &Output, config: &Path, path: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let cal = &cfg.calibration;
    let profile = synthesize_profile(&cfg.model()?, &cfg.hardware()?, &cal.micro_batches, &cal.ring_sizes, &cal.synthetic)?;
    save_profile(&profile, path)?;
    let o = CalibrateOutput {
        path,
        cutpoints: profile.num_cutpoints(),
        micro_batches: &profile.micro_batches,
        ring_sizes: &profile.ring_sizes,
    };
    out.emit(&o, |_| {
        format!(
            "wrote {} ({} cut-points, {} micro-batch sizes, {} ring sizes)\n",
            path.display(),
            o.cutpoints,
            o.micro_batches.len(),
            o.ring_sizes.len()
        )
    })
}
