//! Replays a preemption trace through a cluster manager that re-plans the
//! job whenever its GPU set changes.
//!
//! The trace stands in for the cloud: `add` lines are VMs the manager managed
//! to acquire, `remove` lines are preemptions. `slow` and `heal` mark a VM
//! that keeps running at reduced speed and its recovery.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProfile;
use crate::config::{ClusterState, HardwareSpec, JobSpec, ModelSpec, ParallelConfig, Vm, VmId};
use crate::error::{Error, Result};
use crate::planner::{plan, PlanResult, PlannerOptions};
use crate::sim::Placement;
use crate::units::Micros;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum TraceKind {
    Add,
    Remove,
    /// The VM keeps running with compute times multiplied by the factor.
    Slow(f64),
    Heal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TraceEvent {
    pub time: Micros,
    pub kind: TraceKind,
    pub vm: VmId,
    pub gpus: u32,
    pub node: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PreemptionTrace {
    pub events: Vec<TraceEvent>,
}

pub const DEFAULT_SLOW_FACTOR: f64 = 1.3;

impl PreemptionTrace {
    /// Parses `time_s kind vm_id gpus node_id [factor]` lines. Blank lines
    /// and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut events = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |what: &str| format!("line {}: {what}", i + 1);
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 5 || cols.len() > 6 {
                return Err(Error::invalid(at("record"), "expected `time_s kind vm_id gpus node_id [factor]`"));
            }
            let time_s: f64 = cols[0]
                .parse()
                .ok()
                .filter(|t: &f64| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| Error::invalid(at("time_s"), format!("`{}` is not a non-negative number", cols[0])))?;
            let int = |idx: usize, name: &str| -> Result<u64> {
                cols[idx].parse().map_err(|_| Error::invalid(at(name), format!("`{}` is not an integer", cols[idx])))
            };
            let factor = match cols.get(5) {
                Some(f) => Some(
                    f.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite() && *x >= 1.0)
                        .ok_or_else(|| Error::invalid(at("factor"), format!("`{f}` is not a factor >= 1")))?,
                ),
                None => None,
            };
            let kind = match cols[1] {
                "add" => TraceKind::Add,
                "remove" => TraceKind::Remove,
                "slow" => TraceKind::Slow(factor.unwrap_or(DEFAULT_SLOW_FACTOR)),
                "heal" => TraceKind::Heal,
                other => return Err(Error::invalid(at("kind"), format!("unknown kind `{other}`"))),
            };
            if factor.is_some() && !matches!(kind, TraceKind::Slow(_)) {
                return Err(Error::invalid(at("factor"), "only `slow` records take a factor"));
            }
            let gpus = u32::try_from(int(3, "gpus")?).map_err(|_| Error::invalid(at("gpus"), "too large"))?;
            events.push(TraceEvent { time: Micros::from_secs_f64(time_s), kind, vm: int(2, "vm_id")?, gpus, node: int(4, "node_id")? });
        }
        let trace = PreemptionTrace { events };
        trace.validate()?;
        Ok(trace)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        PreemptionTrace::parse(&text).map_err(|e| match e {
            Error::Invalid { field, message } => Error::Parse { path: path.to_path_buf(), field, message },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut present = BTreeSet::new();
        let mut last = Micros::ZERO;
        for (i, e) in self.events.iter().enumerate() {
            let at = format!("event {}", i + 1);
            if e.time < last {
                return Err(Error::invalid(at, "times must be non-decreasing"));
            }
            last = e.time;
            match e.kind {
                TraceKind::Add => {
                    if e.gpus == 0 {
                        return Err(Error::invalid(at, format!("vm {} has no GPUs", e.vm)));
                    }
                    if !present.insert(e.vm) {
                        return Err(Error::invalid(at, format!("vm {} added twice", e.vm)));
                    }
                }
                TraceKind::Remove => {
                    if !present.remove(&e.vm) {
                        return Err(Error::invalid(at, format!("vm {} removed while absent", e.vm)));
                    }
                }
                TraceKind::Slow(_) | TraceKind::Heal => {
                    if !present.contains(&e.vm) {
                        return Err(Error::invalid(at, format!("vm {} is not present", e.vm)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let (kind, factor) = match e.kind {
                TraceKind::Add => ("add", None),
                TraceKind::Remove => ("remove", None),
                TraceKind::Slow(f) => ("slow", Some(f)),
                TraceKind::Heal => ("heal", None),
            };
            let _ = write!(out, "{} {kind} {} {} {}", e.time.as_secs_f64(), e.vm, e.gpus, e.node);
            if let Some(f) = factor {
                let _ = write!(out, " {f}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per-micro-batch compute times reported by one worker.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Heartbeat {
    pub vm: VmId,
    pub stage: usize,
    pub forward: Micros,
    pub backward: Micros,
}

fn median(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

/// Flags VMs whose forward plus backward time exceeds `outlier_factor`
/// times the median of their stage. Stages with fewer than three reports
/// are not judged.
pub fn detect_fail_stutter(heartbeats: &[Heartbeat], outlier_factor: f64) -> BTreeSet<VmId> {
    let mut by_stage: BTreeMap<usize, Vec<&Heartbeat>> = BTreeMap::new();
    for h in heartbeats {
        by_stage.entry(h.stage).or_default().push(h);
    }
    let mut flagged = BTreeSet::new();
    for group in by_stage.values().filter(|g| g.len() >= 3) {
        let mut times: Vec<u64> = group.iter().map(|h| (h.forward + h.backward).0).collect();
        times.sort_unstable();
        let limit = outlier_factor * median(&times);
        flagged.extend(group.iter().filter(|h| (h.forward + h.backward).0 as f64 > limit).map(|h| h.vm));
    }
    flagged
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckpointCost {
    /// Time the slowest shard writer blocks training per checkpoint.
    pub foreground: Micros,
    /// Share of wall-clock time spent writing checkpoints.
    pub overhead_fraction: f64,
}

/// Each stage's state is sharded over its `D` replicas and written to local
/// disk at a mini-batch boundary; upload to remote storage runs in the
/// background and is not charged.
pub fn checkpoint_cost(
    config: &ParallelConfig,
    model: &ModelSpec,
    interval: u64,
    minibatch_time: Micros,
    write_bytes_per_s: f64,
    bytes_per_param: u64,
) -> Result<CheckpointCost> {
    let ranges = config
        .stage_ranges()
        .ok_or_else(|| Error::invalid("stage_map", "not a contiguous cover of the cut-points"))?;
    if interval == 0 || !(write_bytes_per_s > 0.0) {
        return Err(Error::invalid("checkpoint", "interval and write bandwidth must be positive"));
    }
    let largest: u64 = ranges.iter().map(|r| model.cutpoints[r.clone()].iter().map(|c| c.params).sum()).max().unwrap_or(0);
    let shard = (bytes_per_param * largest) as f64 / config.data_parallel as f64;
    let foreground = Micros::from_secs_f64(shard / write_bytes_per_s);
    let cycle = minibatch_time.as_secs_f64() * interval as f64 + foreground.as_secs_f64();
    let overhead_fraction = if cycle > 0.0 { foreground.as_secs_f64() / cycle } else { 0.0 };
    Ok(CheckpointCost { foreground, overhead_fraction })
}

/// Manager parameters. Restart and planning costs are illustrative defaults,
/// not measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphPolicy {
    pub heartbeat_period_s: f64,
    /// Missed heartbeats before a VM is declared gone.
    pub missed_heartbeats: u32,
    pub restart_overhead_s: f64,
    /// Modelled planner run time per simulated candidate.
    pub planner_s_per_simulation: f64,
    pub checkpoint_write_bytes_per_s: f64,
    pub outlier_factor: f64,
    /// Replay stops here; defaults to one hour after the last trace event.
    pub horizon_s: Option<f64>,
    /// Set from the `[planner]` table when read from a run configuration.
    #[serde(skip)]
    pub planner: PlannerOptions,
}

impl Default for MorphPolicy {
    fn default() -> Self {
        MorphPolicy {
            heartbeat_period_s: 10.0,
            missed_heartbeats: 3,
            restart_overhead_s: 60.0,
            planner_s_per_simulation: 0.05,
            checkpoint_write_bytes_per_s: 1e9,
            outlier_factor: 1.25,
            horizon_s: None,
            planner: PlannerOptions::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    Training,
    Down,
    Paused,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Segment {
    pub start: Micros,
    pub end: Micros,
    pub kind: SegmentKind,
    pub config: Option<ParallelConfig>,
    /// GPUs the manager could use (present and not flagged).
    pub gpus: usize,
    pub mini_batch: u64,
    pub minibatch_time: Option<Micros>,
    pub examples_per_s: f64,
    pub examples_per_s_per_gpu: f64,
    /// Mini-batches finished in this segment, including ones later lost.
    pub iterations: u64,
    pub vms: BTreeSet<VmId>,
    /// Label of the event that opened the segment.
    pub event: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MorphEventKind {
    Start,
    Preemption,
    Reconfigure,
    PassThrough,
    Pause,
    Resume,
    Flag,
    Unflag,
    Slowdown,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MorphEvent {
    pub time: Micros,
    pub kind: MorphEventKind,
    pub from: Option<(usize, usize)>,
    pub to: Option<(usize, usize)>,
    pub restart: Micros,
    pub planning: Micros,
    pub checkpoint: Micros,
    pub lost_iterations: u64,
    /// Time to redo the lost mini-batches with the new configuration.
    pub replay: Micros,
    pub vms: Vec<VmId>,
}

impl MorphEvent {
    pub fn downtime(&self) -> Micros {
        self.restart + self.planning + self.checkpoint + self.replay
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MorphTimeline {
    pub segments: Vec<Segment>,
    pub events: Vec<MorphEvent>,
    pub checkpoints: u64,
    /// Lost mini-batches for each preemption that hit a running worker.
    pub lost_per_preemption: Vec<u64>,
    pub cumulative_examples: u64,
    /// Mini-batches that survive to the end.
    pub committed_iterations: u64,
    pub flagged_history: Vec<(Micros, BTreeSet<VmId>)>,
}

impl MorphTimeline {
    /// `start,end,P,D,ex_per_s,ex_per_s_per_gpu,event` with times in seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("start,end,P,D,ex_per_s,ex_per_s_per_gpu,event\n");
        for s in &self.segments {
            let (p, d) = s.config.as_ref().map_or((0, 0), |c| (c.pipeline_depth, c.data_parallel));
            let _ = writeln!(
                out,
                "{:.3},{:.3},{p},{d},{:.4},{:.5},{}",
                s.start.as_secs_f64(),
                s.end.as_secs_f64(),
                s.examples_per_s,
                s.examples_per_s_per_gpu,
                s.event
            );
        }
        out
    }

    /// Step plot of total and per-GPU throughput over time.
    pub fn to_svg(&self) -> String {
        let (left, top, width, height) = (70.0, 30.0, 900.0, 300.0);
        let t_end = self.segments.last().map_or(1, |s| s.end.0).max(1) as f64;
        let max_total = self.segments.iter().map(|s| s.examples_per_s).fold(0.0, f64::max).max(1e-9);
        let max_gpu = self.segments.iter().map(|s| s.examples_per_s_per_gpu).fold(0.0, f64::max).max(1e-9);
        let x = |us: u64| left + width * us as f64 / t_end;
        let y = |v: f64, max: f64| top + height - height * v / (max * 1.1);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
            left * 2.0 + width,
            top + height + 50.0
        );
        let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{width}" height="{height}" fill="none" stroke="black"/>"#);
        for (series, max, colour, name) in [
            (0usize, max_total, "#1f77b4", "examples/s"),
            (1, max_gpu, "#d62728", "examples/s/GPU"),
        ] {
            let mut path = String::new();
            for seg in &self.segments {
                let v = if series == 0 { seg.examples_per_s } else { seg.examples_per_s_per_gpu };
                let cmd = if path.is_empty() { 'M' } else { 'L' };
                let _ = write!(path, "{cmd}{:.1},{:.1} L{:.1},{:.1} ", x(seg.start.0), y(v, max), x(seg.end.0), y(v, max));
            }
            let _ = writeln!(s, r#"<path class="series" d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#, path.trim_end());
            let lx = if series == 0 { left - 6.0 } else { left + width + 6.0 };
            let anchor = if series == 0 { "end" } else { "start" };
            let _ = writeln!(s, r#"<text x="{lx}" y="{}" fill="{colour}" text-anchor="{anchor}">{max:.2}</text>"#, y(max, max) + 4.0);
            let _ = writeln!(s, r#"<text x="{lx}" y="{}" fill="{colour}" text-anchor="{anchor}">{name}</text>"#, top - 8.0);
        }
        for seg in self.segments.iter().filter(|s| s.kind == SegmentKind::Training) {
            if let Some(c) = &seg.config {
                let label = if seg.event == "p" { "p".to_string() } else { c.label() };
                let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="9">{label}</text>"#, x(seg.start.0) + 2.0, top + height + 14.0);
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.1} h</text>"#, left + width, top + height + 34.0, t_end / 3.6e9);
        s.push_str("</svg>\n");
        s
    }
}

/// Mini-batches completed after running for `elapsed`, starting with
/// `since` mini-batches past the last checkpoint. Returns the count and the
/// new position within the checkpoint interval.
fn progress(elapsed: Micros, t_mb: Micros, ckpt: Micros, interval: u64, since: u64) -> (u64, u64) {
    let t = elapsed.0;
    let mb = t_mb.0.max(1);
    let head = interval - since;
    if t < head * mb {
        let n = t / mb;
        return (n, since + n);
    }
    let first = head * mb + ckpt.0;
    if t < first {
        return (head, interval);
    }
    let cycle = interval * mb + ckpt.0;
    let rest = t - first;
    let q = rest / cycle;
    let e = ((rest - q * cycle) / mb).min(interval);
    (head + q * interval + e, e)
}

struct Running {
    plan: PlanResult,
    vms: BTreeSet<VmId>,
    start: Micros,
    since: u64,
    event: String,
}

enum Mode {
    Training(Running),
    /// Waiting out a restart or a failure detection.
    Down,
    Paused,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Action {
    Physical(usize),
    DetectLoss,
    DetectHealth,
    Resume,
}

struct Replayer<'a> {
    model: &'a ModelSpec,
    job: &'a JobSpec,
    profile: &'a CalibrationProfile,
    hw: &'a HardwareSpec,
    policy: &'a MorphPolicy,
    trace: &'a PreemptionTrace,
    cache: BTreeMap<Vec<(u64, u32)>, Option<PlanResult>>,
    vms: BTreeMap<VmId, Vm>,
    slow: BTreeMap<VmId, f64>,
    flagged: BTreeSet<VmId>,
    mode: Mode,
    mode_since: Micros,
    down_event: String,
    pending: Option<(Running, Micros)>,
    queue: BinaryHeap<Reverse<(Micros, u64, Action)>>,
    seq: u64,
    out: MorphTimeline,
}

impl Replayer<'_> {
    fn push(&mut self, at: Micros, action: Action) {
        self.seq += 1;
        self.queue.push(Reverse((at, self.seq, action)));
    }

    fn usable(&self) -> ClusterState {
        ClusterState { vms: self.vms.values().filter(|v| !self.flagged.contains(&v.id)).cloned().collect() }
    }

    fn plan_for(&mut self, cluster: &ClusterState) -> Result<Option<PlanResult>> {
        let mut key: Vec<(u64, u32)> = cluster.vms.iter().map(|v| (v.node, v.gpus)).collect();
        key.sort_unstable();
        // Nodes only matter through which GPUs share them.
        let mut renumber = BTreeMap::new();
        for (node, _) in key.iter_mut() {
            let next = renumber.len() as u64;
            *node = *renumber.entry(*node).or_insert(next);
        }
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let r = match plan(self.model, self.job, self.profile, self.hw, cluster, &BTreeSet::new(), &self.policy.planner) {
            Ok(r) => Some(r),
            Err(e) if e.is_infeasibility() => None,
            Err(e) => return Err(e),
        };
        self.cache.insert(key, r.clone());
        Ok(r)
    }

    fn gpus(&self) -> usize {
        self.usable().total_gpus()
    }

    fn slowdown(&self, vms: &BTreeSet<VmId>) -> f64 {
        vms.iter().filter_map(|v| self.slow.get(v)).copied().fold(1.0, f64::max)
    }

    fn effective_minibatch(&self, r: &Running) -> Micros {
        r.plan.minibatch_time.scale(self.slowdown(&r.vms))
    }

    fn checkpoint_foreground(&self, plan: &PlanResult, t_mb: Micros) -> Micros {
        checkpoint_cost(
            &plan.chosen,
            self.model,
            self.job.checkpoint_interval,
            t_mb,
            self.policy.checkpoint_write_bytes_per_s,
            self.profile.bytes_per_param,
        )
        .map(|c| c.foreground)
        .unwrap_or(Micros::ZERO)
    }

    fn training_segment(&mut self, r: &mut Running, end: Micros) {
        let t_mb = self.effective_minibatch(r);
        let ckpt = self.checkpoint_foreground(&r.plan, t_mb);
        let interval = self.job.checkpoint_interval;
        let elapsed = end.saturating_sub(r.start);
        let (n, since) = progress(elapsed, t_mb, ckpt, interval, r.since);
        self.out.checkpoints += (r.since + n) / interval;
        r.since = since;
        let xput = self.job.mini_batch as f64 / t_mb.as_secs_f64();
        let gpus = self.gpus_at_segment(r);
        self.out.segments.push(Segment {
            start: r.start,
            end,
            kind: SegmentKind::Training,
            config: Some(r.plan.chosen.clone()),
            gpus,
            mini_batch: self.job.mini_batch,
            minibatch_time: Some(t_mb),
            examples_per_s: xput,
            examples_per_s_per_gpu: xput / gpus.max(1) as f64,
            iterations: n,
            vms: r.vms.clone(),
            event: std::mem::take(&mut r.event),
        });
        self.out.cumulative_examples += n * self.job.mini_batch;
        self.out.committed_iterations += n;
        r.start = end;
    }

    fn gpus_at_segment(&self, r: &Running) -> usize {
        r.plan.gpus
    }

    fn idle_segment(&mut self, kind: SegmentKind, start: Micros, end: Micros, event: String) {
        if end <= start {
            return;
        }
        self.out.segments.push(Segment {
            start,
            end,
            kind,
            config: None,
            gpus: self.gpus(),
            mini_batch: self.job.mini_batch,
            minibatch_time: None,
            examples_per_s: 0.0,
            examples_per_s_per_gpu: 0.0,
            iterations: 0,
            vms: BTreeSet::new(),
            event,
        });
    }

    /// Ends whatever is running at `t`, returning the interrupted job.
    fn interrupt(&mut self, t: Micros) -> Option<Running> {
        match std::mem::replace(&mut self.mode, Mode::Down) {
            Mode::Training(mut r) => {
                if t > r.start {
                    self.training_segment(&mut r, t);
                }
                self.mode_since = t;
                self.down_event = "down".into();
                Some(r)
            }
            Mode::Down => {
                // A pending restart is abandoned; the outage continues.
                self.pending = None;
                None
            }
            Mode::Paused => {
                self.mode = Mode::Paused;
                None
            }
        }
    }

    fn event(&mut self, time: Micros, kind: MorphEventKind, from: Option<&ParallelConfig>, to: Option<&ParallelConfig>) -> &mut MorphEvent {
        self.out.events.push(MorphEvent {
            time,
            kind,
            from: from.map(|c| (c.pipeline_depth, c.data_parallel)),
            to: to.map(|c| (c.pipeline_depth, c.data_parallel)),
            restart: Micros::ZERO,
            planning: Micros::ZERO,
            checkpoint: Micros::ZERO,
            lost_iterations: 0,
            replay: Micros::ZERO,
            vms: Vec::new(),
        });
        self.out.events.last_mut().unwrap()
    }

    fn placement_vms(&self, plan: &PlanResult, cluster: &ClusterState) -> BTreeSet<VmId> {
        Placement::pack(cluster, plan.chosen.pipeline_depth, plan.chosen.data_parallel, &BTreeSet::new())
            .map(|p| p.vms())
            .unwrap_or_default()
    }

    /// Re-plans at `t`. `lost_worker` is set when the running job already
    /// died, so no checkpoint can be taken first.
    fn replan(&mut self, t: Micros, lost_worker: bool) -> Result<()> {
        let cluster = self.usable();
        let next = self.plan_for(&cluster)?;
        let previous = match &self.mode {
            Mode::Training(r) => Some(r.plan.chosen.clone()),
            _ => self.pending.as_ref().map(|(r, _)| r.plan.chosen.clone()),
        };
        let Some(next) = next else {
            let was_paused = matches!(self.mode, Mode::Paused);
            self.interrupt(t);
            self.pending = None;
            if !was_paused {
                self.close_idle(t);
                self.mode = Mode::Paused;
                self.mode_since = t;
                self.event(t, MorphEventKind::Pause, previous.as_ref(), None);
            }
            return Ok(());
        };
        let vms = self.placement_vms(&next, &cluster);
        let planning = Micros::from_secs_f64(self.policy.planner_s_per_simulation * next.simulations as f64);
        let restart = Micros::from_secs_f64(self.policy.restart_overhead_s);

        if let Mode::Training(r) = &self.mode {
            let same = r.plan.chosen == next.chosen && r.vms.is_subset(&vms) && vms.is_subset(&r.vms);
            if same && !lost_worker {
                // Only the spare capacity changed.
                let Mode::Training(mut r) = std::mem::replace(&mut self.mode, Mode::Down) else { unreachable!() };
                if t > r.start {
                    self.training_segment(&mut r, t);
                }
                r.plan = next;
                r.event = "p".into();
                self.mode = Mode::Training(r);
                let c = previous.clone();
                self.event(t, MorphEventKind::PassThrough, c.as_ref(), c.as_ref());
                return Ok(());
            }
        }

        let was_paused = matches!(self.mode, Mode::Paused);
        let interrupted = self.interrupt(t);
        let checkpoint = match (&interrupted, lost_worker) {
            (Some(r), false) => self.checkpoint_foreground(&r.plan, self.effective_minibatch(r)),
            _ => Micros::ZERO,
        };
        if !was_paused && interrupted.is_none() && !matches!(self.mode, Mode::Down) {
            self.mode_since = t;
        }
        if was_paused {
            self.close_idle(t);
            self.mode = Mode::Down;
            self.mode_since = t;
            self.down_event = "down".into();
        }
        let unchanged = previous.as_ref() == Some(&next.chosen);
        let kind = if was_paused {
            MorphEventKind::Resume
        } else if unchanged {
            MorphEventKind::PassThrough
        } else {
            MorphEventKind::Reconfigure
        };
        let resume_at = t + checkpoint + restart + planning;
        let label = if unchanged { "p".to_string() } else { next.chosen.label() };
        let ev = self.event(t, kind, previous.as_ref(), Some(&next.chosen));
        ev.restart = restart;
        ev.planning = planning;
        ev.checkpoint = checkpoint;
        ev.vms = vms.iter().copied().collect();
        let running = Running { plan: next, vms, start: resume_at, since: 0, event: label };
        self.pending = Some((running, resume_at));
        self.push(resume_at, Action::Resume);
        Ok(())
    }

    fn close_idle(&mut self, t: Micros) {
        let kind = match self.mode {
            Mode::Paused => SegmentKind::Paused,
            _ => SegmentKind::Down,
        };
        let since = self.mode_since;
        let label = if kind == SegmentKind::Paused { "paused".to_string() } else { std::mem::take(&mut self.down_event) };
        self.idle_segment(kind, since, t, if label.is_empty() { "down".into() } else { label });
        self.mode_since = t;
    }

    fn resume(&mut self, t: Micros) {
        let Some((running, at)) = self.pending.take() else { return };
        if at != t || !matches!(self.mode, Mode::Down) {
            self.pending = Some((running, at));
            return;
        }
        self.close_idle(t);
        self.mode = Mode::Training(running);
    }

    fn heartbeats(&self) -> Vec<Heartbeat> {
        let Mode::Training(r) = &self.mode else { return Vec::new() };
        // Heartbeats are normalised by each stage's nominal time so that all
        // workers form one comparison group.
        r.vms
            .iter()
            .map(|&vm| {
                let factor = self.slow.get(&vm).copied().unwrap_or(1.0);
                Heartbeat {
                    vm,
                    stage: 0,
                    forward: Micros::from_secs(1).scale(factor),
                    backward: Micros::from_secs(2).scale(factor),
                }
            })
            .collect()
    }

    fn run(mut self, horizon: Micros) -> Result<MorphTimeline> {
        for (i, e) in self.trace.events.iter().enumerate() {
            if e.time <= horizon {
                self.seq += 1;
                self.queue.push(Reverse((e.time, self.seq, Action::Physical(i))));
            }
        }
        let timeout = Micros::from_secs_f64(self.policy.heartbeat_period_s * self.policy.missed_heartbeats as f64);
        let period = Micros::from_secs_f64(self.policy.heartbeat_period_s);
        let mut started = false;
        while let Some(Reverse((t, _, action))) = self.queue.pop() {
            if t > horizon {
                break;
            }
            match action {
                Action::Physical(i) => {
                    let e = self.trace.events[i];
                    match e.kind {
                        TraceKind::Add => {
                            self.vms.insert(e.vm, Vm { id: e.vm, gpus: e.gpus, node: e.node });
                            // Initial VMs arrive together at the first instant.
                            let more_now = self.queue.peek().is_some_and(|Reverse((t2, _, a))| *t2 == t && matches!(a, Action::Physical(_)));
                            if more_now {
                                continue;
                            }
                            if !started {
                                started = true;
                                self.start(t)?;
                            } else {
                                self.replan(t, false)?;
                            }
                        }
                        TraceKind::Remove => {
                            self.vms.remove(&e.vm);
                            let hit = match &self.mode {
                                Mode::Training(r) => r.vms.contains(&e.vm),
                                _ => false,
                            };
                            if hit {
                                let interrupted = self.interrupt(t).expect("was training");
                                let lost = interrupted.since;
                                self.out.committed_iterations -= lost;
                                self.out.lost_per_preemption.push(lost);
                                self.down_event = "down".into();
                                let cfg = interrupted.plan.chosen.clone();
                                let ev = self.event(t, MorphEventKind::Preemption, Some(&cfg), None);
                                ev.lost_iterations = lost;
                                ev.vms = vec![e.vm];
                            }
                            self.slow.remove(&e.vm);
                            self.push(t + timeout, Action::DetectLoss);
                        }
                        TraceKind::Slow(f) => {
                            // Close the running segment at its old speed first.
                            self.split_for_speed(t, MorphEventKind::Slowdown, e.vm);
                            self.slow.insert(e.vm, f);
                            self.push(t + period, Action::DetectHealth);
                        }
                        TraceKind::Heal => {
                            self.split_for_speed(t, MorphEventKind::Slowdown, e.vm);
                            self.slow.remove(&e.vm);
                            self.push(t + period, Action::DetectHealth);
                        }
                    }
                }
                Action::DetectLoss => {
                    if started {
                        let dead = matches!(self.mode, Mode::Down) && self.pending.is_none();
                        self.replan(t, dead)?;
                        self.patch_replay();
                    }
                }
                Action::DetectHealth => {
                    let newly = detect_fail_stutter(&self.heartbeats(), self.policy.outlier_factor);
                    let healed: BTreeSet<VmId> = self.flagged.iter().filter(|v| !self.slow.contains_key(v)).copied().collect();
                    if !newly.is_subset(&self.flagged) || !healed.is_empty() {
                        for v in &newly {
                            if self.flagged.insert(*v) {
                                let ev = self.event(t, MorphEventKind::Flag, None, None);
                                ev.vms = vec![*v];
                            }
                        }
                        for v in healed {
                            self.flagged.remove(&v);
                            let ev = self.event(t, MorphEventKind::Unflag, None, None);
                            ev.vms = vec![v];
                        }
                        self.out.flagged_history.push((t, self.flagged.clone()));
                        self.replan(t, false)?;
                    }
                }
                Action::Resume => self.resume(t),
            }
        }
        match std::mem::replace(&mut self.mode, Mode::Down) {
            Mode::Training(mut r) => {
                if horizon > r.start {
                    self.training_segment(&mut r, horizon);
                }
            }
            Mode::Down => {
                self.mode = Mode::Down;
                self.close_idle(horizon);
            }
            Mode::Paused => {
                self.mode = Mode::Paused;
                self.close_idle(horizon);
            }
        }
        Ok(self.out)
    }

    /// The lost mini-batches of the last preemption get redone at the new
    /// configuration's speed; record that time on the event.
    fn patch_replay(&mut self) {
        let Some((r, _)) = &self.pending else { return };
        let t_mb = r.plan.minibatch_time;
        let lost = self
            .out
            .events
            .iter()
            .rev()
            .find(|e| e.kind == MorphEventKind::Preemption)
            .map_or(0, |e| e.lost_iterations);
        if let Some(ev) = self.out.events.last_mut() {
            if matches!(ev.kind, MorphEventKind::Reconfigure | MorphEventKind::PassThrough) && ev.lost_iterations == 0 {
                ev.lost_iterations = lost;
                ev.replay = t_mb * lost;
            }
        }
    }

    fn split_for_speed(&mut self, t: Micros, kind: MorphEventKind, vm: VmId) {
        if let Mode::Training(r) = &mut self.mode {
            if !r.vms.contains(&vm) {
                return;
            }
            let mut r = std::mem::replace(r, Running { plan: r.plan.clone(), vms: BTreeSet::new(), start: t, since: 0, event: String::new() });
            if t > r.start {
                self.training_segment(&mut r, t);
            }
            r.event = "slow".into();
            let cfg = r.plan.chosen.clone();
            self.mode = Mode::Training(r);
            let ev = self.event(t, kind, Some(&cfg), Some(&cfg));
            ev.vms = vec![vm];
        }
    }

    fn start(&mut self, t: Micros) -> Result<()> {
        let cluster = self.usable();
        match self.plan_for(&cluster)? {
            Some(plan) => {
                let vms = self.placement_vms(&plan, &cluster);
                let cfg = plan.chosen.clone();
                let label = cfg.label();
                self.mode = Mode::Training(Running { plan, vms, start: t, since: 0, event: label });
                self.event(t, MorphEventKind::Start, None, Some(&cfg));
            }
            None => {
                self.mode = Mode::Paused;
                self.mode_since = t;
                self.event(t, MorphEventKind::Pause, None, None);
            }
        }
        Ok(())
    }
}

/// Replays `trace` and returns the resulting throughput timeline.
pub fn replay(
    trace: &PreemptionTrace,
    model: &ModelSpec,
    job: &JobSpec,
    profile: &CalibrationProfile,
    hw: &HardwareSpec,
    policy: &MorphPolicy,
) -> Result<MorphTimeline> {
    trace.validate()?;
    let first = trace.events.first().ok_or_else(|| Error::invalid("trace", "trace is empty"))?;
    if first.kind != TraceKind::Add {
        return Err(Error::invalid("trace", "the trace must begin by adding VMs"));
    }
    let last = trace.events.last().unwrap().time;
    let horizon = match policy.horizon_s {
        Some(h) => Micros::from_secs_f64(h),
        None => last + Micros::from_secs(3600),
    };
    let r = Replayer {
        model,
        job,
        profile,
        hw,
        policy,
        trace,
        cache: BTreeMap::new(),
        vms: BTreeMap::new(),
        slow: BTreeMap::new(),
        flagged: BTreeSet::new(),
        mode: Mode::Paused,
        mode_since: first.time,
        down_event: String::new(),
        pending: None,
        queue: BinaryHeap::new(),
        seq: 0,
        out: MorphTimeline::default(),
    };
    r.run(horizon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hb(vm: VmId, total_ms: u64) -> Heartbeat {
        Heartbeat { vm, stage: 0, forward: Micros::from_millis(total_ms / 3), backward: Micros::from_millis(total_ms - total_ms / 3) }
    }

    #[test]
    fn single_slow_vm_flagged() {
        let hbs = [hb(1, 1000), hb(2, 1000), hb(3, 1000), hb(4, 1300)];
        assert_eq!(detect_fail_stutter(&hbs, 1.25), BTreeSet::from([4]));
        let even = [hb(1, 1000), hb(2, 1000), hb(3, 1000)];
        assert!(detect_fail_stutter(&even, 1.25).is_empty());
    }

    #[test]
    fn two_of_six_slow_are_both_flagged() {
        let hbs = [hb(1, 1000), hb(2, 1000), hb(3, 1000), hb(4, 1000), hb(5, 1400), hb(6, 1500)];
        assert_eq!(detect_fail_stutter(&hbs, 1.25), BTreeSet::from([5, 6]));
    }

    #[test]
    fn small_groups_are_not_judged() {
        assert!(detect_fail_stutter(&[hb(1, 1000), hb(2, 5000)], 1.25).is_empty());
    }

    #[test]
    fn progress_counts_checkpoints() {
        let mb = Micros(10);
        let c = Micros(5);
        assert_eq!(progress(Micros(25), mb, c, 3, 0), (2, 2));
        assert_eq!(progress(Micros(32), mb, c, 3, 0), (3, 3));
        assert_eq!(progress(Micros(35), mb, c, 3, 0), (3, 0));
        assert_eq!(progress(Micros(35 + 35), mb, c, 3, 0), (6, 0));
        assert_eq!(progress(Micros(15), mb, c, 3, 2), (1, 0));
        assert_eq!(progress(Micros(25), mb, c, 3, 2), (2, 1));
    }

    #[test]
    fn trace_parsing_checks_presence() {
        let t = PreemptionTrace::parse("0 add 1 1 1\n0 add 2 1 2 # spare\n\n10.5 remove 1 1 1\n20 slow 2 1 2 1.5\n").unwrap();
        assert_eq!(t.events.len(), 4);
        assert_eq!(t.events[3].kind, TraceKind::Slow(1.5));
        assert!(PreemptionTrace::parse("0 remove 1 1 1").is_err());
        assert!(PreemptionTrace::parse("5 add 1 1 1\n4 add 2 1 1").is_err());
        let err = PreemptionTrace::parse("0 add x 1 1").unwrap_err().to_string();
        assert!(err.contains("line 1: vm_id"), "{err}");
        assert!(PreemptionTrace::parse("0 add 1 1 1 2.0").is_err());
    }
}
