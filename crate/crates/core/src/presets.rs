//! Built-in model and hardware descriptions.

use crate::config::{CutPoint, HardwareSpec, ModelSpec};
use crate::error::{Error, Result};

pub const GPT2_SEQ: u64 = 1024;
pub const GPT2_VOCAB: u64 = 50257;

/// A GPT-2 style decoder with one cut-point per transformer layer. Token
/// and position embeddings live in the first cut-point, the output head's
/// compute in the last.
pub fn gpt2(name: &str, layers: usize, hidden: u64) -> ModelSpec {
    let seq = GPT2_SEQ;
    let layer_params = 12 * hidden * hidden + 13 * hidden;
    let layer_flops = 2 * layer_params * seq;
    let activation = hidden * seq * 2;
    let mut cutpoints = vec![
        CutPoint {
            params: layer_params,
            activation_bytes: activation,
            flops: Some(layer_flops),
        };
        layers
    ];
    cutpoints[0].params += GPT2_VOCAB * hidden + seq * hidden;
    let last = cutpoints.last_mut().expect("at least one layer");
    last.flops = Some(layer_flops + 2 * GPT2_VOCAB * hidden * seq);
    ModelSpec {
        name: name.to_string(),
        tokens_per_example: seq,
        cutpoints,
        block: None,
    }
}

pub fn gpt2_2_5b() -> ModelSpec {
    gpt2("gpt2-2.5b", 54, 1920)
}

pub fn gpt2_8_3b() -> ModelSpec {
    gpt2("gpt2-8.3b", 72, 3072)
}

/// Single-GPU VMs with 16 GB cards behind a 2 Gbit/s shared network.
pub fn commodity() -> HardwareSpec {
    HardwareSpec {
        gpu_memory_bytes: 16 << 30,
        gpus_per_node: 1,
        intra_node_bandwidth: 12e9,
        inter_node_bandwidth: 225e6,
        inter_node_latency_s: 1e-3,
        inter_node_jitter_s: 2e-4,
        intra_node_latency_s: 10e-6,
    }
}

/// Four-GPU nodes, for experiments with mixed link classes.
pub fn commodity_4gpu() -> HardwareSpec {
    HardwareSpec {
        gpus_per_node: 4,
        ..commodity()
    }
}

pub const MODEL_PRESETS: &[&str] = &["gpt2-2.5b", "gpt2-8.3b"];
pub const HARDWARE_PRESETS: &[&str] = &["commodity", "commodity-4gpu"];

pub fn model_preset(name: &str) -> Result<ModelSpec> {
    match name {
        "gpt2-2.5b" => Ok(gpt2_2_5b()),
        "gpt2-8.3b" => Ok(gpt2_8_3b()),
        other => Err(Error::invalid(
            "model_preset",
            format!("unknown preset `{other}`; known: {}", MODEL_PRESETS.join(", ")),
        )),
    }
}

pub fn hardware_preset(name: &str) -> Result<HardwareSpec> {
    match name {
        "commodity" => Ok(commodity()),
        "commodity-4gpu" => Ok(commodity_4gpu()),
        other => Err(Error::invalid(
            "hardware_preset",
            format!("unknown preset `{other}`; known: {}", HARDWARE_PRESETS.join(", ")),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts() {
        let small = gpt2_2_5b().total_params() as f64 / 1e9;
        let large = gpt2_8_3b().total_params() as f64 / 1e9;
        assert!((2.4..2.6).contains(&small), "{small}");
        assert!((8.1..8.4).contains(&large), "{large}");
    }

    #[test]
    fn presets_validate() {
        for name in MODEL_PRESETS {
            model_preset(name).unwrap().validate().unwrap();
        }
        for name in HARDWARE_PRESETS {
            hardware_preset(name).unwrap().validate().unwrap();
        }
        assert!(model_preset("bert").is_err());
    }
}
