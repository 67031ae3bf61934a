//! Configuration search: choose `m`, sweep pipeline depths, simulate each
//! candidate and keep the fastest.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationProfile;
use crate::config::{micro_batches_for, validate_config, ClusterState, HardwareSpec, JobSpec, ModelSpec, ParallelConfig, VmId};
use crate::error::{Error, Result};
use crate::partitioner::{assign_stages, memory_check, MemoryReport, StageAssignment};
use crate::schedule::{generate_schedule, Policy, Schedule, UniformTimes};
use crate::sim::{simulate_minibatch, stage_times, AllreduceMode, LinkModel, Placement, SimOptions, SimulationResult};
use crate::units::Micros;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerOptions {
    /// `m` stops growing once per-example forward time improves by less
    /// than this fraction.
    pub improvement_threshold: f64,
    /// Skip the selection and use this micro-batch size.
    pub micro_batch: Option<u32>,
    pub policy: Policy,
    pub opportunistic: bool,
    pub links: LinkModel,
    pub allreduce: AllreduceMode,
    pub seed: u64,
    /// Extra stashed micro-batches allowed beyond the static schedule's peak.
    pub in_flight_slack: usize,
    /// Weight of the last stage's forward time when balancing. `None`
    /// derives it from the policy and profile: under Varuna the last stage
    /// runs no recompute, so it costs `F + B` per micro-batch where the
    /// others cost `2F + B`.
    pub last_stage_weight: Option<f64>,
    pub overhead_us: u64,
    /// Simulate candidates on worker threads.
    pub parallel: bool,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            improvement_threshold: 0.02,
            micro_batch: None,
            policy: Policy::Varuna,
            opportunistic: true,
            links: LinkModel::Serialized,
            allreduce: AllreduceMode::PerStage,
            seed: 0,
            in_flight_slack: 2,
            last_stage_weight: None,
            overhead_us: 0,
            parallel: true,
        }
    }
}

/// Smallest grid `m` after which the mean per-example forward time stops
/// improving by more than `threshold`; the largest grid `m` if it never
/// stops.
pub fn select_microbatch(profile: &CalibrationProfile, threshold: f64) -> Result<u32> {
    let grid = &profile.micro_batches;
    if grid.is_empty() {
        return Err(Error::invalid("micro_batches", "grid is empty"));
    }
    let per_example = |idx: usize| -> f64 {
        let m = grid[idx] as f64;
        let k = profile.num_cutpoints() as f64;
        profile.cutpoints.iter().map(|c| c.forward[idx].0 as f64 / m).sum::<f64>() / k
    };
    for i in 0..grid.len() - 1 {
        let (cur, next) = (per_example(i), per_example(i + 1));
        if next >= cur * (1.0 - threshold) {
            return Ok(grid[i]);
        }
    }
    Ok(*grid.last().unwrap())
}

/// Static schedule for `config` using the slowest stage's times.
pub fn build_schedule(policy: Policy, config: &ParallelConfig, profile: &CalibrationProfile) -> Result<Schedule> {
    let times = stage_times(config, profile)?;
    let f = times.iter().map(|t| t.forward).max().unwrap_or(Micros::ZERO).max(Micros(1));
    let b = times.iter().map(|t| t.backward).max().unwrap_or(Micros::ZERO).max(Micros(1));
    generate_schedule(policy, config.pipeline_depth, config.num_micro_batches, UniformTimes::new(f, b))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum CandidateStatus {
    Simulated { minibatch_time: Micros },
    MemoryInfeasible { headroom_bytes: i128 },
    MissingRingSize { data_parallel: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Candidate {
    pub config: ParallelConfig,
    pub status: CandidateStatus,
    pub examples_per_s: Option<f64>,
    /// Throughput over every available GPU.
    pub examples_per_s_per_gpu: Option<f64>,
    /// Throughput over the `P * D` GPUs the candidate uses.
    pub examples_per_s_per_used_gpu: Option<f64>,
    pub unused_gpus: usize,
}

impl Candidate {
    pub fn minibatch_time(&self) -> Option<Micros> {
        match self.status {
            CandidateStatus::Simulated { minibatch_time } => Some(minibatch_time),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanResult {
    pub gpus: usize,
    pub micro_batch: u32,
    pub chosen: ParallelConfig,
    pub assignment: StageAssignment,
    pub memory: MemoryReport,
    pub minibatch_time: Micros,
    pub examples_per_s: f64,
    pub examples_per_s_per_gpu: f64,
    pub examples_per_s_per_used_gpu: f64,
    pub unused_gpus: usize,
    pub in_flight_cap: Vec<usize>,
    /// One entry per pipeline depth from the first that fits up to
    /// `min(K, G)`, ordered by depth.
    pub candidates: Vec<Candidate>,
    pub simulations: usize,
}

/// A configuration ready to simulate.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub config: ParallelConfig,
    pub assignment: StageAssignment,
    pub schedule: Schedule,
    pub in_flight_cap: Vec<usize>,
    pub memory: MemoryReport,
}

/// Cost of a last-stage micro-batch relative to the other stages, for the
/// same forward time.
pub fn last_stage_weight(policy: Policy, profile: &CalibrationProfile, m: u32) -> Result<f64> {
    if policy == Policy::GPipe {
        return Ok(1.0);
    }
    let (mut f, mut b) = (0u64, 0u64);
    for i in 0..profile.num_cutpoints() {
        f += profile.forward(i, m)?.0;
        b += profile.backward(i, m)?.0;
    }
    if f + b == 0 {
        return Ok(1.0);
    }
    Ok((f + b) as f64 / (2 * f + b) as f64)
}

/// Balances stages, builds the schedule and checks memory for one `(P, D, m)`.
pub fn prepare(
    model: &ModelSpec,
    job: &JobSpec,
    profile: &CalibrationProfile,
    hw: &HardwareSpec,
    p: usize,
    d: usize,
    m: u32,
    opts: &PlannerOptions,
) -> Result<Prepared> {
    let weight = match opts.last_stage_weight {
        Some(w) => w,
        None => last_stage_weight(opts.policy, profile, m)?,
    };
    let assignment = assign_stages(model, p, m, profile, weight)?;
    prepare_with(job, profile, hw, assignment, d, m, opts)
}

/// As [`prepare`] with a given stage assignment.
#[allow(clippy::too_many_arguments)]
pub fn prepare_with(
    job: &JobSpec,
    profile: &CalibrationProfile,
    hw: &HardwareSpec,
    assignment: StageAssignment,
    d: usize,
    m: u32,
    opts: &PlannerOptions,
) -> Result<Prepared> {
    let config = ParallelConfig {
        pipeline_depth: assignment.num_stages(),
        data_parallel: d,
        micro_batch: m,
        num_micro_batches: micro_batches_for(job.mini_batch, m, d),
        stage_map: assignment.stage_map.clone(),
    };
    let schedule = build_schedule(opts.policy, &config, profile)?;
    let in_flight_cap: Vec<usize> = schedule
        .peak_in_flight()
        .into_iter()
        .map(|x| (x + opts.in_flight_slack).min(config.num_micro_batches))
        .collect();
    let memory = memory_check(&assignment, m, &in_flight_cap, hw, profile.bytes_per_param);
    Ok(Prepared { config, assignment, schedule, in_flight_cap, memory })
}

/// As [`prepare`] for a configuration fixed in advance, such as one read
/// from a file.
pub fn prepare_config(
    model: &ModelSpec,
    job: &JobSpec,
    profile: &CalibrationProfile,
    hw: &HardwareSpec,
    config: &ParallelConfig,
    opts: &PlannerOptions,
) -> Result<Prepared> {
    let k = model.num_cutpoints();
    if config.stage_map.len() != k {
        return Err(Error::invalid("parallel.stage_map", format!("has {} entries, model has {k} cut-points", config.stage_map.len())));
    }
    let ranges = config
        .stage_ranges()
        .filter(|r| r.len() == config.pipeline_depth)
        .ok_or_else(|| Error::invalid("parallel.stage_map", format!("is not {} contiguous stages", config.pipeline_depth)))?;
    let expected = micro_batches_for(job.mini_batch, config.micro_batch, config.data_parallel);
    if config.num_micro_batches != expected {
        return Err(Error::invalid(
            "parallel.num_micro_batches",
            format!("is {}, but {} examples at m={} over D={} need {expected}", config.num_micro_batches, job.mini_batch, config.micro_batch, config.data_parallel),
        ));
    }
    let forward = ranges
        .iter()
        .map(|r| profile.stage_times(r.clone(), config.micro_batch, config.data_parallel as u32).map(|t| t.forward))
        .collect::<Result<Vec<_>>>()?;
    let assignment = StageAssignment::from_ranges(model, ranges, forward);
    prepare_with(job, profile, hw, assignment, config.data_parallel, config.micro_batch, opts)
}

/// Simulates a prepared configuration.
pub fn evaluate(
    prepared: &Prepared,
    model: &ModelSpec,
    profile: &CalibrationProfile,
    placement: &Placement,
    opts: &PlannerOptions,
) -> Result<SimulationResult> {
    let sim_opts = SimOptions {
        opportunistic: opts.opportunistic,
        links: opts.links,
        allreduce: opts.allreduce,
        overhead_us: opts.overhead_us,
        in_flight_cap: Some(prepared.in_flight_cap.clone()),
        ..SimOptions::default()
    };
    simulate_minibatch(&prepared.schedule, &prepared.config, model, profile, placement, opts.seed, &sim_opts)
}

struct Swept {
    candidate: Candidate,
    prepared: Option<Prepared>,
}

/// Picks the fastest configuration for the GPUs in `cluster` not in
/// `excluded`.
pub fn plan(
    model: &ModelSpec,
    job: &JobSpec,
    profile: &CalibrationProfile,
    hw: &HardwareSpec,
    cluster: &ClusterState,
    excluded: &BTreeSet<VmId>,
    opts: &PlannerOptions,
) -> Result<PlanResult> {
    let usable = ClusterState {
        vms: cluster.vms.iter().filter(|v| !excluded.contains(&v.id)).cloned().collect(),
    };
    let g = usable.total_gpus();
    let k = model.num_cutpoints();
    if g == 0 {
        return Err(Error::NoFeasibleConfig("no GPUs available".into()));
    }
    if profile.num_cutpoints() != k {
        return Err(Error::invalid(
            "calibration",
            format!("profile has {} cut-points, model has {k}", profile.num_cutpoints()),
        ));
    }
    let selected = match opts.micro_batch {
        Some(m) => m,
        None => select_microbatch(profile, opts.improvement_threshold)?,
    };
    // Fall back to smaller grid sizes if nothing fits at the selected one.
    let mut tried = Vec::new();
    let fallbacks: Vec<u32> = std::iter::once(selected)
        .chain(profile.micro_batches.iter().rev().copied().filter(|&m| m < selected))
        .collect();
    for m in fallbacks {
        match plan_at(model, job, profile, hw, &usable, g, m, opts) {
            Ok(result) => return Ok(result),
            Err(Error::NoFeasibleConfig(why)) => tried.push(format!("m={m}: {why}")),
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoFeasibleConfig(tried.join("; ")))
}

#[allow(clippy::too_many_arguments)]
fn plan_at(
    model: &ModelSpec,
    job: &JobSpec,
    profile: &CalibrationProfile,
    hw: &HardwareSpec,
    cluster: &ClusterState,
    g: usize,
    m: u32,
    opts: &PlannerOptions,
) -> Result<PlanResult> {
    let k = model.num_cutpoints();
    let p_max = k.min(g);
    let no_excluded = BTreeSet::new();

    let sweep_one = |p: usize| -> Result<Swept> {
        let d = g / p;
        let blank = |status| Candidate {
            config: ParallelConfig {
                pipeline_depth: p,
                data_parallel: d,
                micro_batch: m,
                num_micro_batches: micro_batches_for(job.mini_batch, m, d),
                stage_map: Vec::new(),
            },
            status,
            examples_per_s: None,
            examples_per_s_per_gpu: None,
            examples_per_s_per_used_gpu: None,
            unused_gpus: g - p * d,
        };
        if !profile.has_ring_size(d as u32) {
            return Ok(Swept { candidate: blank(CandidateStatus::MissingRingSize { data_parallel: d }), prepared: None });
        }
        let prepared = prepare(model, job, profile, hw, p, d, m, opts)?;
        if !prepared.memory.feasible() {
            let mut c = blank(CandidateStatus::MemoryInfeasible { headroom_bytes: prepared.memory.headroom() });
            c.config = prepared.config;
            return Ok(Swept { candidate: c, prepared: None });
        }
        let mut c = blank(CandidateStatus::MemoryInfeasible { headroom_bytes: 0 });
        c.config = prepared.config.clone();
        Ok(Swept { candidate: c, prepared: Some(prepared) })
    };

    // Memory feasibility does not depend on simulation, so find the first
    // depth that fits before simulating anything.
    let mut swept: Vec<Swept> = if opts.parallel {
        (1..=p_max).into_par_iter().map(sweep_one).collect::<Result<_>>()?
    } else {
        (1..=p_max).map(sweep_one).collect::<Result<_>>()?
    };
    let Some(first) = swept.iter().position(|s| s.prepared.is_some()) else {
        return Err(Error::NoFeasibleConfig(format!("the model fits at no pipeline depth up to {p_max} on {g} GPUs")));
    };
    swept.drain(..first);

    let simulate = |s: &mut Swept| -> Result<()> {
        let Some(prep) = &s.prepared else { return Ok(()) };
        let placement = Placement::pack(cluster, prep.config.pipeline_depth, prep.config.data_parallel, &no_excluded)?;
        let r = evaluate(prep, model, profile, &placement, opts)?;
        let t = r.minibatch_time;
        let xput = job.mini_batch as f64 / t.as_secs_f64();
        s.candidate.status = CandidateStatus::Simulated { minibatch_time: t };
        s.candidate.examples_per_s = Some(xput);
        s.candidate.examples_per_s_per_gpu = Some(xput / g as f64);
        s.candidate.examples_per_s_per_used_gpu = Some(xput / prep.config.gpus_used() as f64);
        Ok(())
    };
    if opts.parallel {
        swept.par_iter_mut().map(simulate).collect::<Result<Vec<()>>>()?;
    } else {
        swept.iter_mut().map(simulate).collect::<Result<Vec<()>>>()?;
    }

    let best = swept
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.candidate.minibatch_time().map(|t| (t, s.candidate.config.pipeline_depth, std::cmp::Reverse(s.candidate.config.data_parallel), i)))
        .min()
        .map(|x| x.3)
        .ok_or_else(|| Error::NoFeasibleConfig("no candidate could be simulated".into()))?;
    let simulations = swept.iter().filter(|s| s.candidate.minibatch_time().is_some()).count();
    let chosen = swept[best].prepared.clone().expect("simulated candidates are prepared");
    let cand = &swept[best].candidate;
    debug_assert!(validate_config(&chosen.config, model, job, cluster).is_empty());
    Ok(PlanResult {
        gpus: g,
        micro_batch: m,
        minibatch_time: cand.minibatch_time().unwrap(),
        examples_per_s: cand.examples_per_s.unwrap(),
        examples_per_s_per_gpu: cand.examples_per_s_per_gpu.unwrap(),
        examples_per_s_per_used_gpu: cand.examples_per_s_per_used_gpu.unwrap(),
        unused_gpus: cand.unused_gpus,
        chosen: chosen.config,
        assignment: chosen.assignment,
        memory: chosen.memory,
        in_flight_cap: chosen.in_flight_cap,
        candidates: swept.into_iter().map(|s| s.candidate).collect(),
        simulations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CutPointTimes;
    use crate::config::RepeatedBlock;

    fn grid_profile(per_example: &[u64], grid: &[u32]) -> CalibrationProfile {
        let mut p = CalibrationProfile::uniform(2, Micros(1), Micros(2));
        p.micro_batches = grid.to_vec();
        for c in &mut p.cutpoints {
            let fwd: Vec<Micros> = per_example.iter().zip(grid).map(|(&t, &m)| Micros(t * m as u64)).collect();
            *c = CutPointTimes {
                backward: fwd.iter().map(|&f| f * 2).collect(),
                forward: fwd,
                act_intra: vec![Micros::ZERO; grid.len()],
                grad_intra: vec![Micros::ZERO; grid.len()],
                act_inter: vec![Default::default(); grid.len()],
                grad_inter: vec![Default::default(); grid.len()],
                allreduce: c.allreduce.clone(),
            };
        }
        p
    }

    #[test]
    fn first_plateau_is_selected() {
        // Per-example times 10, 6, 5.9, 5.9 scaled by ten.
        let p = grid_profile(&[100, 60, 59, 59], &[1, 2, 4, 8]);
        assert_eq!(select_microbatch(&p, 0.02).unwrap(), 2);
        let p = grid_profile(&[100, 80, 60, 40], &[1, 2, 4, 8]);
        assert_eq!(select_microbatch(&p, 0.02).unwrap(), 8);
    }

    fn hw() -> HardwareSpec {
        HardwareSpec {
            gpu_memory_bytes: 1 << 40,
            gpus_per_node: 1,
            intra_node_bandwidth: 1e10,
            inter_node_bandwidth: 1e9,
            inter_node_latency_s: 1e-4,
            inter_node_jitter_s: 0.0,
            intra_node_latency_s: 1e-5,
        }
    }

    #[test]
    fn one_gpu_plans_one_stage() {
        let model = ModelSpec::repeated("m", 1, RepeatedBlock { params: 100, activation_bytes: 8, flops: None, repeat: 3 }).unwrap();
        let profile = CalibrationProfile::uniform(3, Micros(1000), Micros(2000));
        let job = JobSpec { mini_batch: 4, target_iterations: 1, checkpoint_interval: 1 };
        let r = plan(&model, &job, &profile, &hw(), &ClusterState::uniform(1, 1), &BTreeSet::new(), &PlannerOptions::default()).unwrap();
        assert_eq!((r.chosen.pipeline_depth, r.chosen.data_parallel), (1, 1));
        assert_eq!(r.minibatch_time, Micros(4 * 9000));
    }

    #[test]
    fn zero_gpus_is_infeasible() {
        let model = ModelSpec::repeated("m", 1, RepeatedBlock { params: 1, activation_bytes: 1, flops: None, repeat: 1 }).unwrap();
        let profile = CalibrationProfile::uniform(1, Micros(1), Micros(2));
        let job = JobSpec { mini_batch: 1, target_iterations: 1, checkpoint_interval: 1 };
        let err = plan(&model, &job, &profile, &hw(), &ClusterState::default(), &BTreeSet::new(), &PlannerOptions::default()).unwrap_err();
        assert!(err.to_string().contains("no feasible configuration"));
    }
}
