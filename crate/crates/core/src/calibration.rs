//! Per-cut-point primitive timings, their file format, and the analytic
//! generator used when no measurements exist.

use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{read_toml, write_toml, HardwareSpec, ModelSpec};
use crate::error::{Error, Result};
use crate::units::Micros;

pub const FORMAT_VERSION: u32 = 1;

/// Mean and standard deviation of a transfer time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferTime {
    pub mean: Micros,
    pub stddev: Micros,
}

impl TransferTime {
    pub const ZERO: TransferTime = TransferTime { mean: Micros::ZERO, stddev: Micros::ZERO };

    pub fn fixed(mean: Micros) -> Self {
        TransferTime { mean, stddev: Micros::ZERO }
    }
}

/// Timings for one cut-point. The vectors indexed by micro-batch follow
/// [`CalibrationProfile::micro_batches`]; `allreduce` follows
/// [`CalibrationProfile::ring_sizes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CutPointTimes {
    pub forward: Vec<Micros>,
    pub backward: Vec<Micros>,
    pub act_intra: Vec<Micros>,
    pub grad_intra: Vec<Micros>,
    pub act_inter: Vec<TransferTime>,
    pub grad_inter: Vec<TransferTime>,
    pub allreduce: Vec<Micros>,
}

/// Measured or synthesized primitive timings keyed by cut-point, micro-batch
/// size and ring size. There is no interpolation: queries off the grid fail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CalibrationProfile {
    pub micro_batches: Vec<u32>,
    pub ring_sizes: Vec<u32>,
    /// Bytes of parameter plus optimizer state per parameter.
    pub bytes_per_param: u64,
    pub cutpoints: Vec<CutPointTimes>,
}

/// Aggregated timings for a contiguous range of cut-points run as one stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageTimes {
    pub forward: Micros,
    pub backward: Micros,
    pub recompute: Micros,
    pub act_intra: Micros,
    pub grad_intra: Micros,
    pub act_inter: TransferTime,
    pub grad_inter: TransferTime,
    pub allreduce: Micros,
}

impl CalibrationProfile {
    /// A profile where every cut-point has the same compute times and no
    /// communication cost, with a single-point grid `m = 1`, `D = 1`.
    pub fn uniform(k: usize, forward: Micros, backward: Micros) -> Self {
        CalibrationProfile {
            micro_batches: vec![1],
            ring_sizes: vec![1],
            bytes_per_param: 16,
            cutpoints: vec![
                CutPointTimes {
                    forward: vec![forward],
                    backward: vec![backward],
                    act_intra: vec![Micros::ZERO],
                    grad_intra: vec![Micros::ZERO],
                    act_inter: vec![TransferTime::ZERO],
                    grad_inter: vec![TransferTime::ZERO],
                    allreduce: vec![Micros::ZERO],
                };
                k
            ],
        }
    }

    pub fn num_cutpoints(&self) -> usize {
        self.cutpoints.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_grid("micro_batches", &self.micro_batches)?;
        check_grid("ring_sizes", &self.ring_sizes)?;
        if self.bytes_per_param == 0 {
            return Err(Error::invalid("bytes_per_param", "must be positive"));
        }
        if self.cutpoints.is_empty() {
            return Err(Error::invalid("cutpoint", "profile has no cut-points"));
        }
        let nm = self.micro_batches.len();
        let nd = self.ring_sizes.len();
        for (i, c) in self.cutpoints.iter().enumerate() {
            let lens = [
                ("forward_us", c.forward.len(), nm),
                ("backward_us", c.backward.len(), nm),
                ("act_intra_us", c.act_intra.len(), nm),
                ("grad_intra_us", c.grad_intra.len(), nm),
                ("act_inter_mean_us", c.act_inter.len(), nm),
                ("grad_inter_mean_us", c.grad_inter.len(), nm),
                ("allreduce_us", c.allreduce.len(), nd),
            ];
            for (name, got, want) in lens {
                if got != want {
                    return Err(Error::invalid(
                        format!("cutpoint[{i}].{name}"),
                        format!("has {got} entries but the grid has {want}"),
                    ));
                }
            }
            for (name, v) in [("forward_us", &c.forward), ("backward_us", &c.backward)] {
                if let Some(j) = v.windows(2).position(|w| w[1] < w[0]) {
                    return Err(Error::invalid(
                        format!("cutpoint[{i}].{name}[{}]", j + 1),
                        format!("decreases from {} to {} as m grows", v[j], v[j + 1]),
                    ));
                }
            }
            if let Some(j) = self.ring_sizes.iter().position(|&d| d == 1) {
                if !c.allreduce[j].is_zero() {
                    return Err(Error::invalid(
                        format!("cutpoint[{i}].allreduce_us[{j}]"),
                        format!("allreduce over a ring of one must be 0, got {}", c.allreduce[j]),
                    ));
                }
            }
        }
        Ok(())
    }

    fn m_index(&self, quantity: &'static str, cutpoint: usize, m: u32) -> Result<usize> {
        self.micro_batches.iter().position(|&x| x == m).ok_or(Error::MissingGridPoint {
            quantity,
            cutpoint,
            axis: "m",
            value: m,
        })
    }

    fn d_index(&self, cutpoint: usize, d: u32) -> Result<usize> {
        self.ring_sizes.iter().position(|&x| x == d).ok_or(Error::MissingGridPoint {
            quantity: "allreduce",
            cutpoint,
            axis: "D",
            value: d,
        })
    }

    pub fn has_micro_batch(&self, m: u32) -> bool {
        self.micro_batches.contains(&m)
    }

    /// `D = 1` is always answerable since a ring of one costs nothing.
    pub fn has_ring_size(&self, d: u32) -> bool {
        d == 1 || self.ring_sizes.contains(&d)
    }

    pub fn forward(&self, i: usize, m: u32) -> Result<Micros> {
        Ok(self.cutpoints[i].forward[self.m_index("forward", i, m)?])
    }

    pub fn backward(&self, i: usize, m: u32) -> Result<Micros> {
        Ok(self.cutpoints[i].backward[self.m_index("backward", i, m)?])
    }

    pub fn allreduce(&self, i: usize, d: u32) -> Result<Micros> {
        if d == 1 && !self.ring_sizes.contains(&1) {
            return Ok(Micros::ZERO);
        }
        Ok(self.cutpoints[i].allreduce[self.d_index(i, d)?])
    }

    /// Sums cut-point timings over `range`. Transfers use the last cut-point's
    /// outgoing activation; allreduce costs add since each cut-point's
    /// gradients form their own bucket.
    pub fn stage_times(&self, range: Range<usize>, m: u32, d: u32) -> Result<StageTimes> {
        let last = range.end - 1;
        let mut st = StageTimes::default();
        for i in range.clone() {
            st.forward += self.forward(i, m)?;
            st.backward += self.backward(i, m)?;
            st.allreduce += self.allreduce(i, d)?;
        }
        st.recompute = st.forward;
        let j = self.m_index("transfer", last, m)?;
        let c = &self.cutpoints[last];
        st.act_intra = c.act_intra[j];
        st.grad_intra = c.grad_intra[j];
        st.act_inter = c.act_inter[j];
        st.grad_inter = c.grad_inter[j];
        Ok(st)
    }

    /// Copy with cross-node transfer and allreduce times multiplied by
    /// `factor` (2.0 models a network twice as slow).
    pub fn with_inter_node_slowdown(&self, factor: f64) -> CalibrationProfile {
        let mut p = self.clone();
        let scale_t = |t: &mut TransferTime| {
            t.mean = t.mean.scale(factor);
            t.stddev = t.stddev.scale(factor);
        };
        for c in &mut p.cutpoints {
            c.act_inter.iter_mut().for_each(scale_t);
            c.grad_inter.iter_mut().for_each(scale_t);
            for a in &mut c.allreduce {
                *a = a.scale(factor);
            }
        }
        p
    }

    /// Copy with every time multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> CalibrationProfile {
        let mut p = self.with_inter_node_slowdown(factor);
        for c in &mut p.cutpoints {
            for v in [&mut c.forward, &mut c.backward, &mut c.act_intra, &mut c.grad_intra] {
                v.iter_mut().for_each(|t| *t = t.scale(factor));
            }
        }
        p
    }
}

fn check_grid(field: &str, grid: &[u32]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid(field, "grid is empty"));
    }
    if grid.contains(&0) {
        return Err(Error::invalid(field, "grid values must be positive"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid(field, "grid must be strictly increasing"));
    }
    Ok(())
}

// File form. Times are integers so that a negative value can be reported
// with its path instead of a generic type error.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    format_version: u32,
    micro_batches: Vec<u32>,
    ring_sizes: Vec<u32>,
    #[serde(default = "default_bytes_per_param")]
    bytes_per_param: u64,
    cutpoint: Vec<CutPointFile>,
}

fn default_bytes_per_param() -> u64 {
    16
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CutPointFile {
    forward_us: Vec<i64>,
    backward_us: Vec<i64>,
    act_intra_us: Vec<i64>,
    grad_intra_us: Vec<i64>,
    act_inter_mean_us: Vec<i64>,
    act_inter_stddev_us: Vec<i64>,
    grad_inter_mean_us: Vec<i64>,
    grad_inter_stddev_us: Vec<i64>,
    allreduce_us: Vec<i64>,
}

fn to_micros(field: impl Fn() -> String, v: &[i64]) -> Result<Vec<Micros>> {
    v.iter()
        .enumerate()
        .map(|(j, &x)| {
            u64::try_from(x)
                .map(Micros)
                .map_err(|_| Error::invalid(format!("{}[{j}]", field()), format!("time must be non-negative, got {x}")))
        })
        .collect()
}

fn pair(field: impl Fn() -> String, mean: &[i64], stddev: &[i64]) -> Result<Vec<TransferTime>> {
    if mean.len() != stddev.len() {
        return Err(Error::invalid(field(), "mean and stddev lists differ in length"));
    }
    let mean = to_micros(|| format!("{}_mean_us", field()), mean)?;
    let stddev = to_micros(|| format!("{}_stddev_us", field()), stddev)?;
    Ok(mean.into_iter().zip(stddev).map(|(mean, stddev)| TransferTime { mean, stddev }).collect())
}

impl TryFrom<ProfileFile> for CalibrationProfile {
    type Error = Error;

    fn try_from(f: ProfileFile) -> Result<Self> {
        if f.format_version != FORMAT_VERSION {
            return Err(Error::invalid(
                "format_version",
                format!("unsupported version {}, expected {FORMAT_VERSION}", f.format_version),
            ));
        }
        let cutpoints = f
            .cutpoint
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = |name: &str| format!("cutpoint[{i}].{name}");
                Ok(CutPointTimes {
                    forward: to_micros(|| p("forward_us"), &c.forward_us)?,
                    backward: to_micros(|| p("backward_us"), &c.backward_us)?,
                    act_intra: to_micros(|| p("act_intra_us"), &c.act_intra_us)?,
                    grad_intra: to_micros(|| p("grad_intra_us"), &c.grad_intra_us)?,
                    act_inter: pair(|| p("act_inter"), &c.act_inter_mean_us, &c.act_inter_stddev_us)?,
                    grad_inter: pair(|| p("grad_inter"), &c.grad_inter_mean_us, &c.grad_inter_stddev_us)?,
                    allreduce: to_micros(|| p("allreduce_us"), &c.allreduce_us)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let profile = CalibrationProfile {
            micro_batches: f.micro_batches,
            ring_sizes: f.ring_sizes,
            bytes_per_param: f.bytes_per_param,
            cutpoints,
        };
        profile.validate()?;
        Ok(profile)
    }
}

impl From<&CalibrationProfile> for ProfileFile {
    fn from(p: &CalibrationProfile) -> Self {
        let us = |v: &[Micros]| v.iter().map(|t| t.0 as i64).collect::<Vec<_>>();
        let mean = |v: &[TransferTime]| v.iter().map(|t| t.mean.0 as i64).collect::<Vec<_>>();
        let sd = |v: &[TransferTime]| v.iter().map(|t| t.stddev.0 as i64).collect::<Vec<_>>();
        ProfileFile {
            format_version: FORMAT_VERSION,
            micro_batches: p.micro_batches.clone(),
            ring_sizes: p.ring_sizes.clone(),
            bytes_per_param: p.bytes_per_param,
            cutpoint: p
                .cutpoints
                .iter()
                .map(|c| CutPointFile {
                    forward_us: us(&c.forward),
                    backward_us: us(&c.backward),
                    act_intra_us: us(&c.act_intra),
                    grad_intra_us: us(&c.grad_intra),
                    act_inter_mean_us: mean(&c.act_inter),
                    act_inter_stddev_us: sd(&c.act_inter),
                    grad_inter_mean_us: mean(&c.grad_inter),
                    grad_inter_stddev_us: sd(&c.grad_inter),
                    allreduce_us: us(&c.allreduce),
                })
                .collect(),
        }
    }
}

/// Reads a calibration file, checking every profile invariant.
pub fn load_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let raw: ProfileFile = read_toml(path.as_ref())?;
    CalibrationProfile::try_from(raw).map_err(|e| match e {
        Error::Invalid { field, message } => Error::Parse {
            path: path.as_ref().to_path_buf(),
            field,
            message,
        },
        other => other,
    })
}

pub fn save_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    write_toml(path.as_ref(), &ProfileFile::from(profile))
}

/// Knobs of the analytic profile generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    /// Seconds of forward compute per FLOP.
    pub seconds_per_flop: f64,
    /// Fixed per-micro-batch overhead in example-equivalents; 0 makes
    /// `F(m) / m` flat.
    pub saturation_examples: f64,
    /// Multiplier on allreduce time for concurrent allreduces on a node.
    pub allreduce_contention: f64,
    /// Bytes per element of activations and gradients on the wire.
    pub grad_bytes_per_param: u64,
    pub bytes_per_param: u64,
}

/// Forward FLOPs of one 2.5B-class transformer block (hidden 1920, sequence
/// 1024) for a micro-batch of four; without saturation the default
/// constant makes this 10 ms.
const REFERENCE_BLOCK_FLOPS: f64 = 2.0 * (12.0 * 1920.0 * 1920.0 + 13.0 * 1920.0) * 1024.0 * 4.0;

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            seconds_per_flop: 0.010 / REFERENCE_BLOCK_FLOPS,
            saturation_examples: 0.1,
            allreduce_contention: 1.0,
            grad_bytes_per_param: 2,
            bytes_per_param: 16,
        }
    }
}

/// Ring allreduce of `bytes` over `d` members.
pub fn ring_allreduce_secs(bytes: f64, d: u32, bandwidth: f64, latency: f64) -> f64 {
    if d <= 1 {
        return 0.0;
    }
    let d = d as f64;
    2.0 * (d - 1.0) / d * bytes / bandwidth + 2.0 * (d - 1.0) * latency
}

/// Builds a profile from FLOP counts and link parameters.
///
/// `F_i(m) = c * flops_i * (m + m0)`, `B = 2F`; transfers cost
/// `bytes / bandwidth + latency`; allreduce uses the ring formula over the
/// inter-node link. The result is a pure function of the inputs.
pub fn synthesize_profile(
    model: &ModelSpec,
    hw: &HardwareSpec,
    m_grid: &[u32],
    d_grid: &[u32],
    opts: &SynthOptions,
) -> Result<CalibrationProfile> {
    check_grid("micro_batches", m_grid)?;
    check_grid("ring_sizes", d_grid)?;
    let cutpoints = (0..model.num_cutpoints())
        .map(|i| {
            let c = &model.cutpoints[i];
            let flops = model.flops(i) as f64;
            let fwd: Vec<Micros> = m_grid
                .iter()
                .map(|&m| Micros::from_secs_f64(opts.seconds_per_flop * flops * (m as f64 + opts.saturation_examples)))
                .collect();
            let bwd = fwd.iter().map(|&f| f * 2).collect();
            let bytes = |m: u32| (c.activation_bytes * m as u64) as f64;
            let intra: Vec<Micros> = m_grid
                .iter()
                .map(|&m| Micros::from_secs_f64(bytes(m) / hw.intra_node_bandwidth + hw.intra_node_latency_s))
                .collect();
            let inter: Vec<TransferTime> = m_grid
                .iter()
                .map(|&m| TransferTime {
                    mean: Micros::from_secs_f64(bytes(m) / hw.inter_node_bandwidth + hw.inter_node_latency_s),
                    stddev: Micros::from_secs_f64(hw.inter_node_jitter_s),
                })
                .collect();
            let grad_bytes = (c.params * opts.grad_bytes_per_param) as f64;
            let allreduce = d_grid
                .iter()
                .map(|&d| {
                    Micros::from_secs_f64(
                        opts.allreduce_contention
                            * ring_allreduce_secs(grad_bytes, d, hw.inter_node_bandwidth, hw.inter_node_latency_s),
                    )
                })
                .collect();
            CutPointTimes {
                forward: fwd,
                backward: bwd,
                act_intra: intra.clone(),
                grad_intra: intra,
                act_inter: inter.clone(),
                grad_inter: inter,
                allreduce,
            }
        })
        .collect();
    Ok(CalibrationProfile {
        micro_batches: m_grid.to_vec(),
        ring_sizes: d_grid.to_vec(),
        bytes_per_param: opts.bytes_per_param,
        cutpoints,
    })
}

/// Bytes moved per example by intra-layer versus pipeline parallelism.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CommVolumeReport {
    /// Activation plus gradient crossing one stage boundary.
    pub pipeline_bytes_per_example: u64,
    pub intralayer_bytes_per_example_per_gpu: u64,
    pub ratio: f64,
}

/// Intra-layer parallelism runs six allreduces per layer (two each in the
/// forward, backward and recompute passes), each moving `2 * hidden * seq`
/// elements per GPU; a pipeline boundary moves one activation forward and one
/// gradient back.
pub fn comm_volume(hidden: u64, seq: u64, layers: u64, bytes_per_elem: u64) -> Result<CommVolumeReport> {
    for (field, v) in [("hidden", hidden), ("seq", seq), ("layers", layers), ("bytes_per_elem", bytes_per_elem)] {
        if v == 0 {
            return Err(Error::invalid(field, "must be positive"));
        }
    }
    let tensor = hidden * seq * bytes_per_elem;
    let per_allreduce = 2 * tensor;
    let intralayer = 6 * layers * per_allreduce;
    let pipeline = 2 * tensor;
    Ok(CommVolumeReport {
        pipeline_bytes_per_example: pipeline,
        intralayer_bytes_per_example_per_gpu: intralayer,
        ratio: intralayer as f64 / pipeline as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CutPoint, RepeatedBlock};

    fn hw() -> HardwareSpec {
        HardwareSpec {
            gpu_memory_bytes: 16 << 30,
            gpus_per_node: 1,
            intra_node_bandwidth: 12e9,
            inter_node_bandwidth: 1e9,
            inter_node_latency_s: 1e-3,
            inter_node_jitter_s: 2e-4,
            intra_node_latency_s: 1e-5,
        }
    }

    fn model() -> ModelSpec {
        ModelSpec::repeated(
            "t",
            1024,
            RepeatedBlock { params: 44_260_000, activation_bytes: 1920 * 1024 * 2, flops: None, repeat: 4 },
        )
        .unwrap()
    }

    #[test]
    fn ring_of_one_is_free() {
        let p = synthesize_profile(&model(), &hw(), &[1, 2], &[1, 2, 4], &SynthOptions::default()).unwrap();
        for i in 0..4 {
            assert_eq!(p.allreduce(i, 1).unwrap(), Micros::ZERO);
            assert!(p.allreduce(i, 2).unwrap() <= p.allreduce(i, 4).unwrap());
        }
        p.validate().unwrap();
    }

    #[test]
    fn bandwidth_term_is_linear() {
        let mut fast = hw();
        fast.inter_node_bandwidth *= 2.0;
        let opts = SynthOptions::default();
        let a = synthesize_profile(&model(), &hw(), &[8], &[1], &opts).unwrap();
        let b = synthesize_profile(&model(), &fast, &[8], &[1], &opts).unwrap();
        let lat = Micros::from_secs_f64(hw().inter_node_latency_s);
        let slow_term = a.cutpoints[0].act_inter[0].mean - lat;
        let fast_term = b.cutpoints[0].act_inter[0].mean - lat;
        assert!((slow_term.0 as i64 - 2 * fast_term.0 as i64).abs() <= 1);
    }

    #[test]
    fn reference_block_forward_is_ten_ms() {
        let h = 1920u64;
        let block = CutPoint { params: 12 * h * h + 13 * h, activation_bytes: h * 1024 * 2, flops: None };
        let m = ModelSpec::new("b", 1024, vec![block]).unwrap();
        let opts = SynthOptions { saturation_examples: 0.0, ..SynthOptions::default() };
        let p = synthesize_profile(&m, &hw(), &[4], &[1], &opts).unwrap();
        assert_eq!(p.forward(0, 4).unwrap(), Micros::from_millis(10));
        assert_eq!(p.backward(0, 4).unwrap(), Micros::from_millis(20));
    }

    #[test]
    fn off_grid_queries_fail_with_name() {
        let p = CalibrationProfile::uniform(2, Micros(5), Micros(10));
        let err = p.forward(1, 4).unwrap_err().to_string();
        assert!(err.contains("cut-point 1") && err.contains("m=4"), "{err}");
        assert!(p.allreduce(0, 3).is_err());
    }

    #[test]
    fn stage_times_sum_compute_and_use_last_transfer() {
        let p = synthesize_profile(&model(), &hw(), &[2], &[1, 3], &SynthOptions::default()).unwrap();
        let st = p.stage_times(1..3, 2, 3).unwrap();
        assert_eq!(st.forward, p.forward(1, 2).unwrap() + p.forward(2, 2).unwrap());
        assert_eq!(st.recompute, st.forward);
        assert_eq!(st.allreduce, p.allreduce(1, 3).unwrap() + p.allreduce(2, 3).unwrap());
        assert_eq!(st.act_inter, p.cutpoints[2].act_inter[0]);
    }

    #[test]
    fn synthesis_is_pure() {
        let a = synthesize_profile(&model(), &hw(), &[1, 2, 4], &[1, 2], &SynthOptions::default()).unwrap();
        let b = synthesize_profile(&model(), &hw(), &[1, 2, 4], &[1, 2], &SynthOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn comm_volume_single_layer_is_six_times_pipeline() {
        let r = comm_volume(64, 32, 1, 2).unwrap();
        assert_eq!(r.intralayer_bytes_per_example_per_gpu, 6 * r.pipeline_bytes_per_example);
        assert!(comm_volume(0, 1, 1, 1).is_err());
    }
}
