//! Discrete-event simulation of one mini-batch.
//!
//! Each replica's pipeline runs in its own event loop; replicas only meet at
//! the gradient allreduce that closes the mini-batch. Transfer times on
//! cross-node links are drawn per message from a seeded truncated normal.

mod engine;
mod jitter;
mod placement;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use placement::{GpuSlot, LinkClass, Placement};

use crate::calibration::{CalibrationProfile, StageTimes, TransferTime};
use crate::config::{ModelSpec, ParallelConfig};
use crate::error::{Error, Result};
use crate::schedule::{Schedule, Task, TaskKind};
use crate::units::Micros;
use engine::{ReplicaInput, ReplicaOutput, ReplicaSim, StageSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkModel {
    /// One message at a time per directed link; later sends queue.
    #[default]
    Serialized,
    /// Messages never wait for each other.
    Unbounded,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AllreduceMode {
    /// A stage reduces as soon as all its replicas finish their backwards.
    #[default]
    PerStage,
    /// All stages wait for the whole pipeline to drain.
    Barrier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimOptions {
    pub opportunistic: bool,
    pub links: LinkModel,
    pub allreduce: AllreduceMode,
    /// Fixed cost added to every mini-batch, such as an optimizer step on CPU.
    pub overhead_us: u64,
    /// Per-stage limit on stashed micro-batches when deviating from the
    /// schedule. `None` leaves deviations unbounded.
    pub in_flight_cap: Option<Vec<usize>>,
    /// Keep per-task and per-message records.
    pub record: bool,
    /// Keep a line-per-event debug log.
    pub event_log: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            opportunistic: false,
            links: LinkModel::Serialized,
            allreduce: AllreduceMode::PerStage,
            overhead_us: 0,
            in_flight_cap: None,
            record: false,
            event_log: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum RecordKind {
    Forward,
    Backward,
    Recompute,
    Allreduce,
}

impl RecordKind {
    pub fn letter(self) -> &'static str {
        match self {
            RecordKind::Forward => "F",
            RecordKind::Backward => "B",
            RecordKind::Recompute => "R",
            RecordKind::Allreduce => "AR",
        }
    }
}

impl From<TaskKind> for RecordKind {
    fn from(k: TaskKind) -> Self {
        match k {
            TaskKind::Forward => RecordKind::Forward,
            TaskKind::Backward => RecordKind::Backward,
            TaskKind::Recompute => RecordKind::Recompute,
        }
    }
}

/// One executed interval. Allreduce rows have no micro-batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct TaskRecord {
    pub stage: usize,
    pub replica: usize,
    pub kind: RecordKind,
    pub micro_batch: Option<usize>,
    pub start: Micros,
    pub end: Micros,
}

/// One activation or gradient transfer. `departed` is later than `sent` when
/// the message queued behind another on a serialized link.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct MessageRecord {
    pub replica: usize,
    pub from_stage: usize,
    pub to_stage: usize,
    pub gradient: bool,
    pub micro_batch: usize,
    pub sent: Micros,
    pub departed: Micros,
    pub delivered: Micros,
}

/// An opportunistic stage left idle while its next listed task was not ready.
/// `ready_bound` is the earliest time that task could become ready, as known
/// at `at`; no other ready work short enough to end by then was available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WaitRecord {
    pub replica: usize,
    pub stage: usize,
    pub at: Micros,
    pub task: Task,
    pub ready_bound: Micros,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EventRecord {
    pub time: Micros,
    pub stage: usize,
    pub replica: usize,
    pub event: &'static str,
    pub detail: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct AllreduceSpan {
    pub stage: usize,
    pub start: Micros,
    pub end: Micros,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationResult {
    pub minibatch_time: Micros,
    /// Last backward across all stages and replicas.
    pub pipeline_time: Micros,
    pub num_stages: usize,
    pub num_replicas: usize,
    /// Busy time per stage, averaged over replicas.
    pub stage_busy: Vec<Micros>,
    /// `pipeline_time` minus busy time, averaged over replicas.
    pub stage_idle: Vec<Micros>,
    pub bubble_fraction: f64,
    pub allreduce: Vec<AllreduceSpan>,
    /// Longest allreduce interval.
    pub allreduce_time: Micros,
    /// Most micro-batches stashed at once on each stage, over replicas.
    pub peak_in_flight: Vec<usize>,
    pub peak_activation_bytes: Vec<u64>,
    pub seed: u64,
    pub stage_times: Vec<StageTimes>,
    pub tasks: Vec<TaskRecord>,
    pub messages: Vec<MessageRecord>,
    pub events: Vec<EventRecord>,
    /// Idle decisions of opportunistic stages, when recording.
    pub waits: Vec<WaitRecord>,
}

impl SimulationResult {
    /// Examples per second for a mini-batch of `mini_batch` examples.
    pub fn throughput(&self, mini_batch: u64) -> f64 {
        mini_batch as f64 / self.minibatch_time.as_secs_f64()
    }

    /// Bounds every schedule must respect: the busiest stage's total work,
    /// and one micro-batch's forward and backward through every stage.
    pub fn lower_bounds(&self, num_micro_batches: usize) -> (Micros, Micros) {
        let n = num_micro_batches as u64;
        let p = self.stage_times.len();
        let work = self
            .stage_times
            .iter()
            .enumerate()
            .map(|(k, t)| (t.forward + t.backward) * n + if k + 1 < p { t.recompute * n } else { Micros::ZERO })
            .max()
            .unwrap_or(Micros::ZERO);
        let path = self.stage_times.iter().map(|t| t.forward + t.backward).sum();
        (work, path)
    }

    /// `time_us,stage,replica,event,detail` lines, 1-based stage.
    pub fn event_log_lines(&self) -> String {
        let mut out = String::from("time_us,stage,replica,event,detail\n");
        for e in &self.events {
            out.push_str(&format!("{},{},{},{},{}\n", e.time.0, e.stage + 1, e.replica, e.event, e.detail));
        }
        out
    }
}

/// Stage timings for `config` plus a check that every needed grid point
/// exists.
pub fn stage_times(config: &ParallelConfig, profile: &CalibrationProfile) -> Result<Vec<StageTimes>> {
    let ranges = config
        .stage_ranges()
        .ok_or_else(|| Error::ScheduleMismatch("stage_map is not a contiguous cover of the cut-points".into()))?;
    if profile.num_cutpoints() != config.stage_map.len() {
        return Err(Error::ScheduleMismatch(format!(
            "profile has {} cut-points, stage_map covers {}",
            profile.num_cutpoints(),
            config.stage_map.len()
        )));
    }
    ranges
        .into_iter()
        .map(|r| profile.stage_times(r, config.micro_batch, config.data_parallel as u32))
        .collect()
}

/// Runs one mini-batch: `N_m` micro-batches through every replica's
/// pipeline, then each stage's gradient allreduce.
pub fn simulate_minibatch(
    schedule: &Schedule,
    config: &ParallelConfig,
    model: &ModelSpec,
    profile: &CalibrationProfile,
    placement: &Placement,
    seed: u64,
    opts: &SimOptions,
) -> Result<SimulationResult> {
    let p = config.pipeline_depth;
    let d = config.data_parallel;
    if schedule.num_stages() != p || schedule.num_micro_batches != config.num_micro_batches {
        return Err(Error::ScheduleMismatch(format!(
            "schedule is {}x{} (stages x micro-batches), configuration is {}x{}",
            schedule.num_stages(),
            schedule.num_micro_batches,
            p,
            config.num_micro_batches
        )));
    }
    if placement.num_stages() != p || placement.num_replicas() != d {
        return Err(Error::ScheduleMismatch(format!(
            "placement is {}x{}, configuration is {}",
            placement.num_stages(),
            placement.num_replicas(),
            config.label()
        )));
    }
    if let Some(cap) = &opts.in_flight_cap {
        if cap.len() != p || cap.contains(&0) {
            return Err(Error::invalid("simulation.in_flight_cap", format!("need {p} positive entries")));
        }
    }
    schedule.check_structure()?;
    let times = stage_times(config, profile)?;
    let ranges = config.stage_ranges().expect("checked by stage_times");

    let specs_for = |replica: usize| -> Vec<StageSpec> {
        times
            .iter()
            .enumerate()
            .map(|(k, t)| {
                let (act_link, grad_link) = if k + 1 == p {
                    (TransferTime::ZERO, TransferTime::ZERO)
                } else {
                    match placement.link(replica, k, k + 1) {
                        LinkClass::IntraNode => (TransferTime::fixed(t.act_intra), TransferTime::fixed(t.grad_intra)),
                        LinkClass::InterNode => (t.act_inter, t.grad_inter),
                    }
                };
                StageSpec { forward: t.forward, backward: t.backward, recompute: t.recompute, act_link, grad_link }
            })
            .collect()
    };

    // Without jitter, replicas with the same link classes behave identically.
    let deterministic = !opts.event_log
        && times.iter().all(|t| t.act_inter.stddev.is_zero() && t.grad_inter.stddev.is_zero());
    let mut shared: BTreeMap<Vec<LinkClass>, usize> = BTreeMap::new();
    let mut outputs: Vec<ReplicaOutput> = Vec::with_capacity(d);
    for r in 0..d {
        if deterministic {
            if let Some(&src) = shared.get(&placement.signature(r)) {
                let o = &outputs[src];
                let relabel_tasks = o.tasks.iter().map(|t| TaskRecord { replica: r, ..*t }).collect();
                let relabel_msgs = o.messages.iter().map(|m| MessageRecord { replica: r, ..*m }).collect();
                outputs.push(ReplicaOutput {
                    last_backward: o.last_backward.clone(),
                    busy: o.busy.clone(),
                    end: o.end,
                    peak_in_flight: o.peak_in_flight.clone(),
                    tasks: relabel_tasks,
                    messages: relabel_msgs,
                    events: Vec::new(),
                    waits: o.waits.iter().map(|w| WaitRecord { replica: r, ..*w }).collect(),
                });
                continue;
            }
            shared.insert(placement.signature(r), r);
        }
        let specs = specs_for(r);
        let sim = ReplicaSim::new(ReplicaInput {
            replica: r,
            seed,
            stages: &specs,
            lists: &schedule.stages,
            num_micro_batches: config.num_micro_batches,
            opportunistic: opts.opportunistic,
            links: opts.links,
            in_flight_cap: opts.in_flight_cap.as_deref(),
            record: opts.record,
            log: opts.event_log,
        });
        outputs.push(sim.run());
    }

    let pipeline_time = outputs.iter().map(|o| o.end).max().unwrap_or(Micros::ZERO);
    let barrier = pipeline_time;
    let mut allreduce = Vec::with_capacity(p);
    for (k, t) in times.iter().enumerate() {
        let start = match opts.allreduce {
            AllreduceMode::PerStage => outputs.iter().map(|o| o.last_backward[k]).max().unwrap_or(Micros::ZERO),
            AllreduceMode::Barrier => barrier,
        };
        allreduce.push(AllreduceSpan { stage: k, start, end: start + t.allreduce });
    }
    let last_end = allreduce.iter().map(|a| a.end).max().unwrap_or(Micros::ZERO).max(pipeline_time);
    let minibatch_time = last_end + Micros(opts.overhead_us);

    let dd = d as u64;
    let stage_busy: Vec<Micros> =
        (0..p).map(|k| Micros(outputs.iter().map(|o| o.busy[k].0).sum::<u64>() / dd)).collect();
    let total_idle: u64 = outputs.iter().flat_map(|o| o.busy.iter()).map(|b| pipeline_time.0 - b.0).sum();
    let stage_idle = stage_busy.iter().map(|&b| pipeline_time - b).collect();
    let bubble_fraction = if pipeline_time.is_zero() {
        0.0
    } else {
        total_idle as f64 / (pipeline_time.0 as f64 * (p * d) as f64)
    };
    let peak_in_flight: Vec<usize> =
        (0..p).map(|k| outputs.iter().map(|o| o.peak_in_flight[k]).max().unwrap_or(0)).collect();
    let m = config.micro_batch as u64;
    let peak_activation_bytes = (0..p)
        .map(|k| {
            let r = &ranges[k];
            let input = model.cutpoints[r.start.saturating_sub(1)].activation_bytes;
            let working: u64 = model.cutpoints[r.clone()].iter().map(|c| c.activation_bytes).sum();
            peak_in_flight[k] as u64 * m * input + m * working
        })
        .collect();

    let mut tasks = Vec::new();
    let mut messages = Vec::new();
    let mut events = Vec::new();
    let mut waits = Vec::new();
    for o in outputs {
        waits.extend(o.waits);
        tasks.extend(o.tasks);
        messages.extend(o.messages);
        events.extend(o.events);
    }
    if opts.record {
        for a in &allreduce {
            for r in 0..d {
                tasks.push(TaskRecord {
                    stage: a.stage,
                    replica: r,
                    kind: RecordKind::Allreduce,
                    micro_batch: None,
                    start: a.start,
                    end: a.end,
                });
            }
        }
    }
    if opts.event_log {
        for a in &allreduce {
            for (time, event) in [(a.start, "allreduce-start"), (a.end, "allreduce-end")] {
                events.push(EventRecord { time, stage: a.stage, replica: 0, event, detail: format!("stage{}", a.stage + 1) });
            }
        }
        events.sort_by_key(|e| (e.time, e.replica));
    }

    Ok(SimulationResult {
        minibatch_time,
        pipeline_time,
        num_stages: p,
        num_replicas: d,
        stage_busy,
        stage_idle,
        bubble_fraction,
        allreduce_time: allreduce.iter().map(|a| a.end - a.start).max().unwrap_or(Micros::ZERO),
        allreduce,
        peak_in_flight,
        peak_activation_bytes,
        seed,
        stage_times: times,
        tasks,
        messages,
        events,
        waits,
    })
}
