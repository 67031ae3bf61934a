use std::collections::BTreeSet;

use serde::Serialize;

use crate::config::{ClusterState, VmId};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum LinkClass {
    IntraNode,
    InterNode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct GpuSlot {
    pub vm: VmId,
    pub gpu: u32,
    pub node: u64,
}

/// Where each (stage, replica) runs. Slot `r * P + s` holds stage `s` of
/// replica `r`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Placement {
    stages: usize,
    replicas: usize,
    slots: Vec<GpuSlot>,
}

impl Placement {
    pub fn new(stages: usize, replicas: usize, slots: Vec<GpuSlot>) -> Result<Self> {
        if slots.len() != stages * replicas {
            return Err(Error::invalid(
                "placement",
                format!("{} slots for {stages} stages x {replicas} replicas", slots.len()),
            ));
        }
        let unique: BTreeSet<_> = slots.iter().map(|s| (s.vm, s.gpu)).collect();
        if unique.len() != slots.len() {
            return Err(Error::invalid("placement", "two workers share one GPU"));
        }
        Ok(Placement { stages, replicas, slots })
    }

    /// Fills GPUs in (node, vm, gpu) order so consecutive stages of a replica
    /// share a node when they can. VMs in `excluded` are skipped.
    pub fn pack(cluster: &ClusterState, stages: usize, replicas: usize, excluded: &BTreeSet<VmId>) -> Result<Self> {
        let mut gpus: Vec<GpuSlot> = cluster
            .vms
            .iter()
            .filter(|vm| !excluded.contains(&vm.id))
            .flat_map(|vm| (0..vm.gpus).map(move |gpu| GpuSlot { vm: vm.id, gpu, node: vm.node }))
            .collect();
        gpus.sort_by_key(|g| (g.node, g.vm, g.gpu));
        let need = stages * replicas;
        if gpus.len() < need {
            return Err(Error::Infeasible(format!("placement needs {need} GPUs, {} usable", gpus.len())));
        }
        gpus.truncate(need);
        Placement::new(stages, replicas, gpus)
    }

    /// Every worker on its own single-GPU node.
    pub fn scattered(stages: usize, replicas: usize) -> Self {
        let slots = (0..(stages * replicas) as u64).map(|i| GpuSlot { vm: i, gpu: 0, node: i }).collect();
        Placement { stages, replicas, slots }
    }

    /// Every worker of a replica on one node.
    pub fn colocated(stages: usize, replicas: usize) -> Self {
        let slots = (0..replicas as u64)
            .flat_map(|r| (0..stages as u32).map(move |s| GpuSlot { vm: r, gpu: s, node: r }))
            .collect();
        Placement { stages, replicas, slots }
    }

    pub fn num_stages(&self) -> usize {
        self.stages
    }

    pub fn num_replicas(&self) -> usize {
        self.replicas
    }

    pub fn slot(&self, stage: usize, replica: usize) -> GpuSlot {
        self.slots[replica * self.stages + stage]
    }

    pub fn slots(&self) -> &[GpuSlot] {
        &self.slots
    }

    pub fn link(&self, replica: usize, from_stage: usize, to_stage: usize) -> LinkClass {
        if self.slot(from_stage, replica).node == self.slot(to_stage, replica).node {
            LinkClass::IntraNode
        } else {
            LinkClass::InterNode
        }
    }

    /// Classes of the links between consecutive stages of `replica`.
    pub fn signature(&self, replica: usize) -> Vec<LinkClass> {
        (0..self.stages.saturating_sub(1)).map(|s| self.link(replica, s, s + 1)).collect()
    }

    pub fn vms(&self) -> BTreeSet<VmId> {
        self.slots.iter().map(|s| s.vm).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Vm;

    #[test]
    fn packing_keeps_replica_stages_together() {
        let cluster = ClusterState::new(vec![
            Vm { id: 7, gpus: 4, node: 1 },
            Vm { id: 3, gpus: 4, node: 0 },
        ])
        .unwrap();
        let p = Placement::pack(&cluster, 4, 2, &BTreeSet::new()).unwrap();
        assert_eq!(p.slot(0, 0).vm, 3);
        assert_eq!(p.slot(0, 1).vm, 7);
        assert_eq!(p.signature(0), vec![LinkClass::IntraNode; 3]);
    }

    #[test]
    fn excluded_vms_are_not_used() {
        let cluster = ClusterState::uniform(5, 1);
        let excluded = BTreeSet::from([2]);
        let p = Placement::pack(&cluster, 2, 2, &excluded).unwrap();
        assert!(!p.vms().contains(&2));
        assert!(Placement::pack(&cluster, 5, 1, &excluded).is_err());
    }

    #[test]
    fn duplicate_gpu_rejected() {
        let s = GpuSlot { vm: 0, gpu: 0, node: 0 };
        assert!(Placement::new(2, 1, vec![s, s]).is_err());
    }
}
