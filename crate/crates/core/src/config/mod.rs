//! Shared domain types and the configuration constraint checker.

mod file;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use file::{read_toml, write_toml, CalibrationSource, ClusterSection, RunConfig};

/// One cut-point section of a model: the code between two safe partition
/// boundaries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutPoint {
    /// Scalar parameters owned by the section.
    pub params: u64,
    /// Bytes per input example of the activation leaving the section.
    pub activation_bytes: u64,
    /// Forward-pass FLOPs per example. Defaults to `2 * params * tokens`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<u64>,
}

/// A block of layers repeated `repeat` times, as in transformer stacks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepeatedBlock {
    pub params: u64,
    pub activation_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flops: Option<u64>,
    pub repeat: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpecRaw {
    name: String,
    #[serde(default = "one")]
    tokens_per_example: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    cutpoints: Vec<CutPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block: Option<RepeatedBlock>,
}

impl From<ModelSpec> for ModelSpecRaw {
    // Writes the block form back only while the cut-points still match it.
    fn from(m: ModelSpec) -> Self {
        let block = m.block.filter(|b| {
            m.cutpoints.len() == b.repeat
                && m.cutpoints.iter().all(|c| {
                    (c.params, c.activation_bytes, c.flops) == (b.params, b.activation_bytes, b.flops)
                })
        });
        ModelSpecRaw {
            name: m.name,
            tokens_per_example: m.tokens_per_example,
            cutpoints: if block.is_some() { Vec::new() } else { m.cutpoints },
            block,
        }
    }
}

fn one() -> u64 {
    1
}

/// The model being trained, described at cut-point granularity.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ModelSpecRaw", into = "ModelSpecRaw")]
pub struct ModelSpec {
    pub name: String,
    /// Tokens per input example (sequence length); scales default FLOPs.
    pub tokens_per_example: u64,
    pub cutpoints: Vec<CutPoint>,
    pub block: Option<RepeatedBlock>,
}

impl TryFrom<ModelSpecRaw> for ModelSpec {
    type Error = Error;

    fn try_from(raw: ModelSpecRaw) -> Result<Self> {
        let cutpoints = match (&raw.block, raw.cutpoints.is_empty()) {
            (Some(_), false) => {
                return Err(Error::invalid(
                    "model",
                    "give either `cutpoints` or `block`, not both",
                ))
            }
            (Some(b), true) => vec![
                CutPoint {
                    params: b.params,
                    activation_bytes: b.activation_bytes,
                    flops: b.flops,
                };
                b.repeat
            ],
            (None, _) => raw.cutpoints,
        };
        let spec = ModelSpec {
            name: raw.name,
            tokens_per_example: raw.tokens_per_example,
            cutpoints,
            block: raw.block,
        };
        spec.validate()?;
        Ok(spec)
    }
}

impl ModelSpec {
    pub fn new(name: impl Into<String>, tokens_per_example: u64, cutpoints: Vec<CutPoint>) -> Result<Self> {
        let spec = ModelSpec {
            name: name.into(),
            tokens_per_example,
            cutpoints,
            block: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A homogeneous model made of `block.repeat` identical cut-points.
    pub fn repeated(name: impl Into<String>, tokens_per_example: u64, block: RepeatedBlock) -> Result<Self> {
        let cutpoints = vec![
            CutPoint {
                params: block.params,
                activation_bytes: block.activation_bytes,
                flops: block.flops,
            };
            block.repeat
        ];
        let spec = ModelSpec {
            name: name.into(),
            tokens_per_example,
            cutpoints,
            block: Some(block),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cutpoints.is_empty() {
            return Err(Error::invalid("model.cutpoints", "a model needs at least one cut-point"));
        }
        if self.tokens_per_example == 0 {
            return Err(Error::invalid("model.tokens_per_example", "must be positive"));
        }
        for (i, c) in self.cutpoints.iter().enumerate() {
            if c.params == 0 {
                return Err(Error::invalid(format!("model.cutpoints[{i}].params"), "must be positive"));
            }
            if c.activation_bytes == 0 {
                return Err(Error::invalid(
                    format!("model.cutpoints[{i}].activation_bytes"),
                    "must be positive",
                ));
            }
            if c.flops == Some(0) {
                return Err(Error::invalid(format!("model.cutpoints[{i}].flops"), "must be positive"));
            }
        }
        Ok(())
    }

    /// Number of cut-points, `K`.
    pub fn num_cutpoints(&self) -> usize {
        self.cutpoints.len()
    }

    /// Total parameter count, `N`.
    pub fn total_params(&self) -> u64 {
        self.cutpoints.iter().map(|c| c.params).sum()
    }

    /// Forward FLOPs per example for cut-point `i`.
    pub fn flops(&self, i: usize) -> u64 {
        let c = &self.cutpoints[i];
        c.flops.unwrap_or(2 * c.params * self.tokens_per_example)
    }
}

/// Cluster hardware. Bandwidths are bytes per second; latencies are seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareSpec {
    pub gpu_memory_bytes: u64,
    pub gpus_per_node: u32,
    pub intra_node_bandwidth: f64,
    pub inter_node_bandwidth: f64,
    pub inter_node_latency_s: f64,
    pub inter_node_jitter_s: f64,
    pub intra_node_latency_s: f64,
}

impl HardwareSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hardware.intra_node_bandwidth", self.intra_node_bandwidth),
            ("hardware.inter_node_bandwidth", self.inter_node_bandwidth),
            ("hardware.inter_node_latency_s", self.inter_node_latency_s),
            ("hardware.intra_node_latency_s", self.intra_node_latency_s),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.inter_node_jitter_s.is_finite() && self.inter_node_jitter_s >= 0.0) {
            return Err(Error::invalid("hardware.inter_node_jitter_s", "must be non-negative"));
        }
        if self.gpu_memory_bytes == 0 {
            return Err(Error::invalid("hardware.gpu_memory_bytes", "must be positive"));
        }
        if self.gpus_per_node == 0 {
            return Err(Error::invalid("hardware.gpus_per_node", "must be positive"));
        }
        if self.intra_node_bandwidth < self.inter_node_bandwidth {
            return Err(Error::invalid(
                "hardware.intra_node_bandwidth",
                "must be at least the inter-node bandwidth",
            ));
        }
        Ok(())
    }

    /// Copy with inter-node bandwidth multiplied by `scale` (0.5 = twice as slow).
    pub fn with_inter_node_bandwidth_scale(&self, scale: f64) -> HardwareSpec {
        let mut hw = self.clone();
        hw.inter_node_bandwidth *= scale;
        hw
    }
}

/// One job configuration: pipeline depth, replicas, and micro-batching.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelConfig {
    /// `P`, the number of pipeline stages.
    pub pipeline_depth: usize,
    /// `D`, data-parallel replicas of every stage.
    pub data_parallel: usize,
    /// `m`, examples per micro-batch.
    pub micro_batch: u32,
    /// `N_m`, micro-batches per replica per mini-batch.
    pub num_micro_batches: usize,
    /// Stage index (0-based) of every cut-point.
    pub stage_map: Vec<usize>,
}

impl ParallelConfig {
    pub fn gpus_used(&self) -> usize {
        self.pipeline_depth * self.data_parallel
    }

    /// Cut-point index ranges per stage, if `stage_map` is well formed.
    pub fn stage_ranges(&self) -> Option<Vec<std::ops::Range<usize>>> {
        let mut ranges = Vec::with_capacity(self.pipeline_depth);
        let mut start = 0;
        for s in 0..self.pipeline_depth {
            let len = self.stage_map[start..].iter().take_while(|&&x| x == s).count();
            if len == 0 {
                return None;
            }
            ranges.push(start..start + len);
            start += len;
        }
        (start == self.stage_map.len()).then_some(ranges)
    }

    /// Short `PxD` label.
    pub fn label(&self) -> String {
        format!("{}x{}", self.pipeline_depth, self.data_parallel)
    }
}

/// `N_m` needed to cover `mini_batch` examples with `D` replicas at
/// micro-batch size `m`; the last micro-batch may be partially filled.
pub fn micro_batches_for(mini_batch: u64, micro_batch: u32, data_parallel: usize) -> usize {
    let per_round = micro_batch as u64 * data_parallel as u64;
    mini_batch.div_ceil(per_round) as usize
}

/// Training job parameters that stay fixed across reconfigurations.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    /// `M_Total`, examples per mini-batch.
    pub mini_batch: u64,
    pub target_iterations: u64,
    /// Mini-batches between checkpoints.
    pub checkpoint_interval: u64,
}

impl JobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.mini_batch == 0 {
            return Err(Error::invalid("job.mini_batch", "must be at least 1"));
        }
        if self.checkpoint_interval == 0 {
            return Err(Error::invalid("job.checkpoint_interval", "must be at least 1"));
        }
        Ok(())
    }
}

pub type VmId = u64;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vm {
    pub id: VmId,
    pub gpus: u32,
    pub node: u64,
}

/// GPUs currently available to the job.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterState {
    pub vms: Vec<Vm>,
}

impl ClusterState {
    pub fn new(vms: Vec<Vm>) -> Result<Self> {
        let c = ClusterState { vms };
        c.validate()?;
        Ok(c)
    }

    /// `count` single-VM nodes with `gpus` GPUs each, ids starting at 0.
    pub fn uniform(count: usize, gpus: u32) -> Self {
        ClusterState {
            vms: (0..count as u64).map(|i| Vm { id: i, gpus, node: i }).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for vm in &self.vms {
            if !seen.insert(vm.id) {
                return Err(Error::invalid("cluster.vms", format!("duplicate vm id {}", vm.id)));
            }
        }
        Ok(())
    }

    /// `G`, the total number of available GPUs.
    pub fn total_gpus(&self) -> usize {
        self.vms.iter().map(|v| v.gpus as usize).sum()
    }
}

/// A broken constraint reported by [`validate_config`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Violation {
    ZeroValue { field: &'static str },
    GpuBudget { used: usize, available: usize },
    DepthExceedsCutpoints { depth: usize, cutpoints: usize },
    MiniBatchMismatch { micro_batch: u32, num_micro_batches: usize, data_parallel: usize, mini_batch: u64 },
    StageMapLength { expected: usize, actual: usize },
    StageMapNotContiguous { cutpoint: usize },
    EmptyStage { stage: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroValue { field } => write!(f, "{field} must be at least 1"),
            Violation::GpuBudget { used, available } => {
                write!(f, "P*D = {used} exceeds the {available} available GPUs")
            }
            Violation::DepthExceedsCutpoints { depth, cutpoints } => {
                write!(f, "pipeline depth {depth} exceeds the {cutpoints} cut-points")
            }
            Violation::MiniBatchMismatch { micro_batch, num_micro_batches, data_parallel, mini_batch } => write!(
                f,
                "m={micro_batch}, N_m={num_micro_batches}, D={data_parallel} does not apportion M_Total={mini_batch}"
            ),
            Violation::StageMapLength { expected, actual } => {
                write!(f, "stage_map has {actual} entries but the model has {expected} cut-points")
            }
            Violation::StageMapNotContiguous { cutpoint } => {
                write!(f, "stage_map is not contiguous and non-decreasing at cut-point {cutpoint}")
            }
            Violation::EmptyStage { stage } => write!(f, "stage {stage} has no cut-points"),
        }
    }
}

/// Checks a configuration against the model, job and cluster. An empty list
/// means the configuration is valid.
///
/// The mini-batch constraint accepts a partially filled last micro-batch:
/// `N_m` must equal `ceil(M_Total / (m * D))`, which reduces to
/// `m * N_m * D == M_Total` whenever the division is exact.
pub fn validate_config(
    config: &ParallelConfig,
    model: &ModelSpec,
    job: &JobSpec,
    cluster: &ClusterState,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let zero_checks = [
        ("pipeline_depth", config.pipeline_depth == 0),
        ("data_parallel", config.data_parallel == 0),
        ("micro_batch", config.micro_batch == 0),
        ("num_micro_batches", config.num_micro_batches == 0),
    ];
    for (field, is_zero) in zero_checks {
        if is_zero {
            out.push(Violation::ZeroValue { field });
        }
    }

    let available = cluster.total_gpus();
    if config.gpus_used() > available {
        out.push(Violation::GpuBudget { used: config.gpus_used(), available });
    }

    let k = model.num_cutpoints();
    if config.pipeline_depth > k {
        out.push(Violation::DepthExceedsCutpoints { depth: config.pipeline_depth, cutpoints: k });
    }

    if config.micro_batch > 0
        && config.data_parallel > 0
        && config.num_micro_batches != micro_batches_for(job.mini_batch, config.micro_batch, config.data_parallel)
    {
        out.push(Violation::MiniBatchMismatch {
            micro_batch: config.micro_batch,
            num_micro_batches: config.num_micro_batches,
            data_parallel: config.data_parallel,
            mini_batch: job.mini_batch,
        });
    }

    if config.stage_map.len() != k {
        out.push(Violation::StageMapLength { expected: k, actual: config.stage_map.len() });
    } else {
        let mut expected_next = 0;
        for (i, &s) in config.stage_map.iter().enumerate() {
            let ok = if i == 0 {
                s == 0
            } else {
                let prev = config.stage_map[i - 1];
                s == prev || s == prev + 1
            };
            if !ok {
                out.push(Violation::StageMapNotContiguous { cutpoint: i });
                break;
            }
            expected_next = expected_next.max(s + 1);
        }
        if !out.iter().any(|v| matches!(v, Violation::StageMapNotContiguous { .. })) {
            for stage in expected_next..config.pipeline_depth {
                out.push(Violation::EmptyStage { stage });
            }
            if expected_next > config.pipeline_depth {
                out.push(Violation::StageMapNotContiguous {
                    cutpoint: config.stage_map.iter().position(|&s| s >= config.pipeline_depth).unwrap_or(0),
                });
            }
        }
    }
    out
}

/// Uniform `stage_map` for `k` cut-points over `p` stages (earlier stages get
/// the remainder).
pub fn uniform_stage_map(k: usize, p: usize) -> Vec<usize> {
    let base = k / p;
    let extra = k % p;
    (0..p).flat_map(|s| std::iter::repeat_n(s, base + usize::from(s < extra))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(k: usize) -> ModelSpec {
        ModelSpec::repeated(
            "m",
            1,
            RepeatedBlock { params: 10, activation_bytes: 4, flops: None, repeat: k },
        )
        .unwrap()
    }

    fn config(p: usize, d: usize, m: u32, nm: usize, k: usize) -> ParallelConfig {
        ParallelConfig {
            pipeline_depth: p,
            data_parallel: d,
            micro_batch: m,
            num_micro_batches: nm,
            stage_map: uniform_stage_map(k, p.min(k).max(1)),
        }
    }

    fn job(mini_batch: u64) -> JobSpec {
        JobSpec { mini_batch, target_iterations: 10, checkpoint_interval: 5 }
    }

    #[test]
    fn large_config_fits() {
        // 18x16 on 288 GPUs with 48 cut-points.
        let c = config(18, 16, 4, 128, 48);
        let v = validate_config(&c, &model(48), &job(4 * 128 * 16), &ClusterState::uniform(288, 1));
        assert!(v.is_empty(), "{v:?}");
    }

    #[test]
    fn single_gpu_degenerate_case() {
        let c = config(1, 1, 32, 1, 1);
        assert!(validate_config(&c, &model(1), &job(32), &ClusterState::uniform(1, 1)).is_empty());
    }

    #[test]
    fn unused_gpus_are_fine_but_depth_over_k_is_not() {
        let c = config(6, 16, 1, 4, 6);
        let cluster = ClusterState::uniform(100, 1);
        assert!(validate_config(&c, &model(6), &job(64), &cluster).is_empty());
        assert_eq!(cluster.total_gpus() - c.gpus_used(), 4);

        let mut c = config(7, 15, 1, 4, 6);
        c.stage_map = uniform_stage_map(6, 6);
        let v = validate_config(&c, &model(6), &job(60), &cluster);
        assert!(v.contains(&Violation::DepthExceedsCutpoints { depth: 7, cutpoints: 6 }));
        assert!(v.contains(&Violation::GpuBudget { used: 105, available: 100 }));
    }

    #[test]
    fn partial_last_micro_batch_is_accepted() {
        // 100 examples, m=4, D=3 -> 9 micro-batches, last one partially filled.
        let c = config(2, 3, 4, 9, 4);
        assert!(validate_config(&c, &model(4), &job(100), &ClusterState::uniform(6, 1)).is_empty());
        let c = config(2, 3, 4, 8, 4);
        let v = validate_config(&c, &model(4), &job(100), &ClusterState::uniform(6, 1));
        assert!(matches!(v[0], Violation::MiniBatchMismatch { .. }));
    }

    #[test]
    fn stage_map_errors_are_named() {
        let mut c = config(2, 1, 1, 1, 4);
        c.stage_map = vec![0, 1, 0, 1];
        let v = validate_config(&c, &model(4), &job(1), &ClusterState::uniform(2, 1));
        assert_eq!(v, vec![Violation::StageMapNotContiguous { cutpoint: 2 }]);

        c.stage_map = vec![0, 0, 0];
        let v = validate_config(&c, &model(4), &job(1), &ClusterState::uniform(2, 1));
        assert_eq!(v, vec![Violation::StageMapLength { expected: 4, actual: 3 }]);

        c.pipeline_depth = 3;
        c.stage_map = vec![0, 0, 1, 1];
        let v = validate_config(&c, &model(4), &job(1), &ClusterState::uniform(3, 1));
        assert_eq!(v, vec![Violation::EmptyStage { stage: 2 }]);
    }

    #[test]
    fn zero_fields_reported_without_panicking() {
        let c = ParallelConfig {
            pipeline_depth: 0,
            data_parallel: 0,
            micro_batch: 0,
            num_micro_batches: 0,
            stage_map: vec![],
        };
        let v = validate_config(&c, &model(2), &job(1), &ClusterState::default());
        assert!(v.iter().filter(|x| matches!(x, Violation::ZeroValue { .. })).count() == 4);
    }

    #[test]
    fn model_rejects_zero_sizes() {
        let bad = ModelSpec::new("x", 1, vec![CutPoint { params: 0, activation_bytes: 1, flops: None }]);
        assert!(bad.unwrap_err().to_string().contains("cutpoints[0].params"));
        assert!(ModelSpec::new("x", 1, vec![]).is_err());
    }

    #[test]
    fn duplicate_vm_ids_rejected() {
        let vms = vec![Vm { id: 1, gpus: 1, node: 0 }, Vm { id: 1, gpus: 4, node: 1 }];
        assert!(ClusterState::new(vms).is_err());
    }

    #[test]
    fn uniform_map_spreads_remainder() {
        assert_eq!(uniform_stage_map(5, 2), vec![0, 0, 0, 1, 1]);
        assert_eq!(uniform_stage_map(48, 4).iter().filter(|&&s| s == 3).count(), 12);
    }
}
