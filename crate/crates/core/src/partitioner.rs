//! Cut-point selection and stage grouping.
//!
//! Both searches are exact dynamic programs over contiguous partitions. They
//! minimise the heaviest section first, then the total activation crossing
//! the chosen boundaries, then prefer earlier boundaries.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{CalibrationProfile, CutPointTimes, TransferTime};
use crate::config::{read_toml, CutPoint, HardwareSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::units::Micros;

/// One operation of a profiled model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Op {
    #[serde(default)]
    pub name: String,
    pub compute_us: u64,
    /// Output activation in bytes per example.
    pub activation_bytes: u64,
    #[serde(default)]
    pub params: u64,
    /// Parameter groups this op reads.
    #[serde(default)]
    pub groups: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpProfile {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_tokens")]
    pub tokens_per_example: u64,
    /// Groups allowed to span a boundary (for example tied embeddings).
    #[serde(default)]
    pub shared_groups: BTreeSet<String>,
    #[serde(rename = "op")]
    pub ops: Vec<Op>,
}

fn default_name() -> String {
    "profiled".into()
}

fn default_tokens() -> u64 {
    1
}

impl OpProfile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p: OpProfile = read_toml(path.as_ref())?;
        if p.ops.is_empty() {
            return Err(Error::Parse {
                path: path.as_ref().to_path_buf(),
                field: "op".into(),
                message: "profile has no operations".into(),
            });
        }
        Ok(p)
    }

    /// `breakable[b]` is true if a cut after op `b` splits no unshared
    /// parameter group.
    fn breakable(&self) -> Vec<bool> {
        let mut span: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            for g in &op.groups {
                let e = span.entry(g.as_str()).or_insert((i, i));
                e.1 = i;
            }
        }
        let mut ok = vec![true; self.ops.len().saturating_sub(1)];
        for (g, (first, last)) in span {
            if self.shared_groups.contains(g) {
                continue;
            }
            for b in first..last {
                ok[b] = false;
            }
        }
        ok
    }
}

/// Result of [`identify_cutpoints`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CutpointSelection {
    pub model: ModelSpec,
    /// Index of the last op in each section.
    pub section_ends: Vec<usize>,
    pub section_compute: Vec<Micros>,
    /// Shared groups whose ops fall on both sides of a chosen boundary, with
    /// the 0-based index of that boundary.
    pub shared_crossings: Vec<(String, usize)>,
}

impl CutpointSelection {
    /// Compute-only profile at `m = 1` using the measured section times.
    /// Backward is taken as twice the forward.
    pub fn compute_profile(&self) -> CalibrationProfile {
        CalibrationProfile {
            micro_batches: vec![1],
            ring_sizes: vec![1],
            bytes_per_param: 16,
            cutpoints: self
                .section_compute
                .iter()
                .map(|&f| CutPointTimes {
                    forward: vec![f],
                    backward: vec![f * 2],
                    act_intra: vec![Micros::ZERO],
                    grad_intra: vec![Micros::ZERO],
                    act_inter: vec![TransferTime::ZERO],
                    grad_inter: vec![TransferTime::ZERO],
                    allreduce: vec![Micros::ZERO],
                })
                .collect(),
        }
    }
}

/// Exact lexicographic partition search shared by both entry points.
///
/// `weights[i]` is the cost of item `i`, `boundary_cost[b]` the cost of a cut
/// after item `b`, `allowed[b]` whether that cut is permitted. The last
/// section's cost is multiplied by `last_weight`.
struct Partition<'a> {
    weights: &'a [u64],
    boundary_cost: &'a [u64],
    allowed: &'a [bool],
    last_weight: f64,
}

impl Partition<'_> {
    fn section_cost(&self, prefix: &[u64], start: usize, end: usize, is_last: bool) -> u64 {
        let raw = prefix[end] - prefix[start];
        if is_last && self.last_weight != 1.0 {
            (raw as f64 * self.last_weight).round() as u64
        } else {
            raw
        }
    }

    /// Smallest achievable maximum section cost with `parts` sections.
    fn min_bottleneck(&self, prefix: &[u64], parts: usize) -> Option<u64> {
        let n = self.weights.len();
        // best[c][i]: min bottleneck covering items i.. with c sections.
        let mut best = vec![vec![None::<u64>; n + 1]; parts + 1];
        best[0][n] = Some(0);
        for c in 1..=parts {
            for i in (0..n).rev() {
                let mut acc: Option<u64> = None;
                for e in i + 1..=n {
                    let is_last = e == n;
                    if is_last != (c == 1) {
                        continue;
                    }
                    if !is_last && !self.allowed[e - 1] {
                        continue;
                    }
                    if let Some(rest) = best[c - 1][e] {
                        let v = self.section_cost(prefix, i, e, is_last).max(rest);
                        acc = Some(acc.map_or(v, |a: u64| a.min(v)));
                    }
                }
                best[c][i] = acc;
            }
        }
        best[parts][0]
    }

    /// Section end indices (exclusive) minimising total boundary cost with
    /// every section at most `cap`, earliest boundaries among ties.
    fn min_boundary_cost(&self, prefix: &[u64], parts: usize, cap: u64) -> Option<Vec<usize>> {
        let n = self.weights.len();
        let mut best = vec![vec![None::<u64>; n + 1]; parts + 1];
        best[0][n] = Some(0);
        let feasible = |c: usize, i: usize, e: usize| -> bool {
            let is_last = e == n;
            is_last == (c == 1) && (is_last || self.allowed[e - 1]) && self.section_cost(prefix, i, e, is_last) <= cap
        };
        for c in 1..=parts {
            for i in (0..n).rev() {
                let mut acc: Option<u64> = None;
                for e in i + 1..=n {
                    if !feasible(c, i, e) {
                        continue;
                    }
                    if let Some(rest) = best[c - 1][e] {
                        let v = rest + if e < n { self.boundary_cost[e - 1] } else { 0 };
                        acc = Some(acc.map_or(v, |a: u64| a.min(v)));
                    }
                }
                best[c][i] = acc;
            }
        }
        let mut ends = Vec::with_capacity(parts);
        let mut i = 0;
        let mut target = best[parts][0]?;
        for c in (1..=parts).rev() {
            let e = (i + 1..=n).find(|&e| {
                feasible(c, i, e)
                    && best[c - 1][e].is_some_and(|rest| rest + if e < n { self.boundary_cost[e - 1] } else { 0 } == target)
            })?;
            target -= if e < n { self.boundary_cost[e - 1] } else { 0 };
            ends.push(e);
            i = e;
        }
        Some(ends)
    }
}

fn prefix_sums(w: &[u64]) -> Vec<u64> {
    let mut p = Vec::with_capacity(w.len() + 1);
    p.push(0);
    for &x in w {
        p.push(p.last().unwrap() + x);
    }
    p
}

/// Picks `k` sections of an op profile.
///
/// A section may weigh up to `max(B*, (1 + tolerance) * total / k)`, where
/// `B*` is the best achievable heaviest section; within that allowance the
/// cuts with the least total activation win. With `tolerance = 0` this is
/// the lexicographic optimum of (heaviest section, total activation).
pub fn identify_cutpoints(profile: &OpProfile, k: usize, tolerance: f64) -> Result<CutpointSelection> {
    let n = profile.ops.len();
    if k == 0 || k > n {
        return Err(Error::Infeasible(format!("cannot cut {n} operations into {k} sections")));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::invalid("tolerance", "must be a non-negative number"));
    }
    let weights: Vec<u64> = profile.ops.iter().map(|o| o.compute_us).collect();
    let act: Vec<u64> = profile.ops.iter().map(|o| o.activation_bytes).collect();
    let allowed = profile.breakable();
    let part = Partition { weights: &weights, boundary_cost: &act, allowed: &allowed, last_weight: 1.0 };
    let prefix = prefix_sums(&weights);
    let bottleneck = part.min_bottleneck(&prefix, k).ok_or_else(|| {
        Error::Infeasible(format!(
            "no {k} sections avoid splitting an unshared parameter group ({} of {} boundaries are breakable)",
            allowed.iter().filter(|&&b| b).count(),
            allowed.len()
        ))
    })?;
    let total = prefix[n] as f64;
    let cap = bottleneck.max(((1.0 + tolerance) * total / k as f64).floor() as u64);
    let ends = part.min_boundary_cost(&prefix, k, cap).expect("cap admits the bottleneck partition");

    let mut cutpoints = Vec::with_capacity(k);
    let mut section_compute = Vec::with_capacity(k);
    let mut start = 0;
    for &e in &ends {
        let ops = &profile.ops[start..e];
        let params: u64 = ops.iter().map(|o| o.params).sum();
        cutpoints.push(CutPoint {
            params,
            activation_bytes: ops.last().unwrap().activation_bytes,
            flops: None,
        });
        section_compute.push(Micros(prefix[e] - prefix[start]));
        start = e;
    }
    let model = ModelSpec::new(profile.name.clone(), profile.tokens_per_example, cutpoints)?;

    let section_of = |op: usize| ends.iter().position(|&e| op < e).unwrap();
    let mut shared_crossings = Vec::new();
    for g in &profile.shared_groups {
        let sections: BTreeSet<usize> = profile
            .ops
            .iter()
            .enumerate()
            .filter(|(_, o)| o.groups.contains(g))
            .map(|(i, _)| section_of(i))
            .collect();
        if let (Some(&lo), Some(&hi)) = (sections.first(), sections.last()) {
            for b in lo..hi {
                shared_crossings.push((g.clone(), b));
            }
        }
    }

    Ok(CutpointSelection {
        model,
        section_ends: ends.iter().map(|e| e - 1).collect(),
        section_compute,
        shared_crossings,
    })
}

/// Cut-points grouped into pipeline stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StageAssignment {
    pub stage_map: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
    pub params: Vec<u64>,
    pub forward: Vec<Micros>,
    /// Bytes per example received by each stage. Stage 0 uses the first
    /// cut-point's activation as a stand-in for the embedded input.
    pub input_activation_bytes: Vec<u64>,
    /// Sum of the cut-point activations inside each stage, per example.
    pub working_activation_bytes: Vec<u64>,
}

impl StageAssignment {
    /// Builds the per-stage summaries for explicit ranges.
    pub fn from_ranges(model: &ModelSpec, ranges: Vec<Range<usize>>, forward: Vec<Micros>) -> Self {
        let mut stage_map = vec![0; model.num_cutpoints()];
        for (s, r) in ranges.iter().enumerate() {
            stage_map[r.clone()].iter_mut().for_each(|x| *x = s);
        }
        let params = ranges.iter().map(|r| model.cutpoints[r.clone()].iter().map(|c| c.params).sum()).collect();
        let input_activation_bytes = ranges
            .iter()
            .map(|r| model.cutpoints[r.start.saturating_sub(1)].activation_bytes)
            .collect();
        let working_activation_bytes = ranges
            .iter()
            .map(|r| model.cutpoints[r.clone()].iter().map(|c| c.activation_bytes).sum())
            .collect();
        StageAssignment { stage_map, ranges, params, forward, input_activation_bytes, working_activation_bytes }
    }

    pub fn num_stages(&self) -> usize {
        self.ranges.len()
    }

    pub fn bottleneck(&self) -> Micros {
        self.forward.iter().copied().max().unwrap_or(Micros::ZERO)
    }

    /// Total activation bytes per example crossing stage boundaries.
    pub fn boundary_activation(&self, model: &ModelSpec) -> u64 {
        self.ranges[..self.ranges.len().saturating_sub(1)]
            .iter()
            .map(|r| model.cutpoints[r.end - 1].activation_bytes)
            .sum()
    }
}

/// Groups cut-points into `p` contiguous stages minimising the slowest
/// stage's forward time at micro-batch `m`. `last_stage_weight` scales the
/// last stage's time in the objective; values below 1 pack more work there
/// since it skips recompute.
pub fn assign_stages(
    model: &ModelSpec,
    p: usize,
    m: u32,
    profile: &CalibrationProfile,
    last_stage_weight: f64,
) -> Result<StageAssignment> {
    let k = model.num_cutpoints();
    if p == 0 || p > k {
        return Err(Error::Infeasible(format!("cannot split {k} cut-points into {p} stages")));
    }
    if profile.num_cutpoints() != k {
        return Err(Error::invalid(
            "calibration",
            format!("profile has {} cut-points, model has {k}", profile.num_cutpoints()),
        ));
    }
    if !(last_stage_weight.is_finite() && last_stage_weight > 0.0) {
        return Err(Error::invalid("last_stage_weight", "must be positive"));
    }
    let weights: Vec<u64> = (0..k).map(|i| profile.forward(i, m).map(|t| t.0)).collect::<Result<_>>()?;
    let act: Vec<u64> = model.cutpoints.iter().map(|c| c.activation_bytes).collect();
    let allowed = vec![true; k.saturating_sub(1)];
    let part = Partition { weights: &weights, boundary_cost: &act, allowed: &allowed, last_weight: last_stage_weight };
    let prefix = prefix_sums(&weights);
    let cap = part.min_bottleneck(&prefix, p).expect("every boundary is allowed");
    let ends = part.min_boundary_cost(&prefix, p, cap).expect("cap is achievable");
    let mut ranges = Vec::with_capacity(p);
    let mut start = 0;
    for e in ends {
        ranges.push(start..e);
        start = e;
    }
    let forward = ranges.iter().map(|r| Micros(prefix[r.end] - prefix[r.start])).collect();
    Ok(StageAssignment::from_ranges(model, ranges, forward))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct StageMemory {
    pub param_bytes: u64,
    pub stash_bytes: u64,
    pub working_bytes: u64,
    pub total_bytes: u64,
    pub feasible: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MemoryReport {
    pub stages: Vec<StageMemory>,
    pub gpu_memory_bytes: u64,
}

impl MemoryReport {
    pub fn feasible(&self) -> bool {
        self.stages.iter().all(|s| s.feasible)
    }

    /// Free bytes on the fullest GPU; negative when over budget.
    pub fn headroom(&self) -> i128 {
        let worst = self.stages.iter().map(|s| s.total_bytes).max().unwrap_or(0);
        self.gpu_memory_bytes as i128 - worst as i128
    }
}

/// Per-stage memory: parameter and optimizer state, stashed stage inputs for
/// `in_flight[s]` micro-batches, and one working set of activations.
pub fn memory_check(
    assignment: &StageAssignment,
    m: u32,
    in_flight: &[usize],
    hw: &HardwareSpec,
    bytes_per_param: u64,
) -> MemoryReport {
    let m = m as u64;
    let stages = (0..assignment.num_stages())
        .map(|s| {
            let param_bytes = bytes_per_param * assignment.params[s];
            let stash_bytes = in_flight.get(s).copied().unwrap_or(0) as u64 * m * assignment.input_activation_bytes[s];
            let working_bytes = m * assignment.working_activation_bytes[s];
            let total_bytes = param_bytes + stash_bytes + working_bytes;
            StageMemory { param_bytes, stash_bytes, working_bytes, total_bytes, feasible: total_bytes <= hw.gpu_memory_bytes }
        })
        .collect();
    MemoryReport { stages, gpu_memory_bytes: hw.gpu_memory_bytes }
}

/// Memory with every stage holding all `n_m` micro-batches at once.
pub fn memory_check_worst_case(
    assignment: &StageAssignment,
    m: u32,
    n_m: usize,
    hw: &HardwareSpec,
    bytes_per_param: u64,
) -> MemoryReport {
    memory_check(assignment, m, &vec![n_m; assignment.num_stages()], hw, bytes_per_param)
}
