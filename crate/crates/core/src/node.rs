//! Vocabulary shared by machine configs, the simulator and the reconciler.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

pub type Labels = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeRole {
    ControlPlane,
    Worker,
    GpuWorker,
}

impl NodeRole {
    pub const ALL: [NodeRole; 3] = [NodeRole::ControlPlane, NodeRole::Worker, NodeRole::GpuWorker];

    /// Short token used in node names: `demo-cp-0`, `demo-w-1`, `demo-gpu-0`.
    pub fn abbrev(self) -> &'static str {
        match self {
            NodeRole::ControlPlane => "cp",
            NodeRole::Worker => "w",
            NodeRole::GpuWorker => "gpu",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeRole::ControlPlane => "control_plane",
            NodeRole::Worker => "worker",
            NodeRole::GpuWorker => "gpu_worker",
        }
    }

    pub fn parse(s: &str) -> Option<NodeRole> {
        NodeRole::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for NodeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn node_name(cluster: &str, role: NodeRole, index: u32) -> String {
    format!("{cluster}-{}-{index}", role.abbrev())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TaintEffect {
    NoSchedule,
    PreferNoSchedule,
    NoExecute,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Taint {
    pub key: String,
    #[serde(default)]
    pub value: String,
    pub effect: TaintEffect,
}

impl Taint {
    pub fn no_schedule(key: &str) -> Self {
        Self { key: key.to_string(), value: String::new(), effect: TaintEffect::NoSchedule }
    }
}

/// Boot phases of a simulated node. Phases only ever advance in this order;
/// a node that is lost re-enters at `Provisioned` when recreated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodePhase {
    Provisioned,
    Booted,
    ConfigApplied,
    Joined,
    Ready,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EtcdStatus {
    #[default]
    Absent,
    Bootstrapped,
}
