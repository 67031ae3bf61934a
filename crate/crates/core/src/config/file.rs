//! TOML run configuration and the helpers every file format here uses.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ClusterState, HardwareSpec, JobSpec, ModelSpec, ParallelConfig};
use crate::calibration::{load_profile, synthesize_profile, CalibrationProfile, SynthOptions};
use crate::error::{Error, Result};
use crate::morphing::MorphPolicy;
use crate::planner::PlannerOptions;
use crate::presets;

/// Reads a TOML file, naming the offending field on failure.
pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let de = toml::Deserializer::parse(&text).map_err(|e| {
        let at = e.span().map(|r| {
            let before = &text[..r.start.min(text.len())];
            let line = before.matches('\n').count() + 1;
            let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
            format!("line {line}, column {col}: ")
        });
        Error::Parse {
            path: path.to_path_buf(),
            field: String::new(),
            message: format!("{}{}", at.unwrap_or_default(), e.message()),
        }
    })?;
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        let inner = e.into_inner();
        let message = inner.message().to_string();
        Error::Parse {
            path: path.to_path_buf(),
            field: if field == "." { String::new() } else { field },
            message,
        }
    })
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::invalid("toml", e.to_string()))?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Where per-cut-point timings come from: a measured profile file or the
/// analytic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSource {
    /// Profile file; relative paths resolve against the config file.
    pub profile: Option<PathBuf>,
    pub micro_batches: Vec<u32>,
    pub ring_sizes: Vec<u32>,
    pub synthetic: SynthOptions,
}

impl Default for CalibrationSource {
    fn default() -> Self {
        CalibrationSource {
            profile: None,
            micro_batches: vec![1, 2, 4, 8, 16],
            ring_sizes: (1..=128).collect(),
            synthetic: SynthOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    /// Single-GPU VMs on separate nodes.
    pub gpus: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub vms: Vec<super::Vm>,
}

/// Everything one `pipemorph` invocation needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_preset: Option<String>,
    pub model: Option<ModelSpec>,
    pub hardware_preset: Option<String>,
    pub hardware: Option<HardwareSpec>,
    pub job: Option<JobSpec>,
    #[serde(default)]
    pub calibration: CalibrationSource,
    pub parallel: Option<ParallelConfig>,
    #[serde(default)]
    pub planner: PlannerOptions,
    #[serde(default)]
    pub morphing: MorphPolicy,
    pub cluster: Option<ClusterSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_toml(path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelSpec> {
        match (&self.model, &self.model_preset) {
            (Some(_), Some(_)) => Err(Error::invalid("model", "give `model` or `model_preset`, not both")),
            (Some(m), None) => {
                m.validate()?;
                Ok(m.clone())
            }
            (None, Some(name)) => presets::model_preset(name),
            (None, None) => Err(Error::invalid("model", "missing `model` or `model_preset`")),
        }
    }

    pub fn hardware(&self) -> Result<HardwareSpec> {
        let hw = match (&self.hardware, &self.hardware_preset) {
            (Some(_), Some(_)) => {
                return Err(Error::invalid("hardware", "give `hardware` or `hardware_preset`, not both"))
            }
            (Some(h), None) => h.clone(),
            (None, Some(name)) => presets::hardware_preset(name)?,
            (None, None) => return Err(Error::invalid("hardware", "missing `hardware` or `hardware_preset`")),
        };
        hw.validate()?;
        Ok(hw)
    }

    pub fn job(&self) -> Result<JobSpec> {
        let job = self.job.clone().ok_or_else(|| Error::invalid("job", "missing `[job]` table"))?;
        job.validate()?;
        Ok(job)
    }

    pub fn profile(&self) -> Result<CalibrationProfile> {
        let cal = &self.calibration;
        let profile = match &cal.profile {
            Some(p) => load_profile(self.base_dir.join(p))?,
            None => synthesize_profile(
                &self.model()?,
                &self.hardware()?,
                &cal.micro_batches,
                &cal.ring_sizes,
                &cal.synthetic,
            )?,
        };
        let k = self.model()?.num_cutpoints();
        if profile.cutpoints.len() != k {
            return Err(Error::invalid(
                "calibration.profile",
                format!("profile has {} cut-points, model has {k}", profile.cutpoints.len()),
            ));
        }
        Ok(profile)
    }

    /// The `[morphing]` table with the `[planner]` options it re-plans with.
    pub fn morph_policy(&self) -> MorphPolicy {
        MorphPolicy { planner: self.planner.clone(), ..self.morphing.clone() }
    }

    pub fn cluster(&self) -> Result<ClusterState> {
        let section = self.cluster.as_ref().ok_or_else(|| Error::invalid("cluster", "missing `[cluster]` table"))?;
        match (section.gpus, section.vms.is_empty()) {
            (Some(g), true) => Ok(ClusterState::uniform(g, 1)),
            (None, false) => ClusterState::new(section.vms.clone()),
            _ => Err(Error::invalid("cluster", "give either `gpus` or `vms`")),
        }
    }
}
