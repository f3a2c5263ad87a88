//! Target-environment abstraction.
//!
//! [`Provider`] is the infrastructure surface used by the stack engine:
//! networks, machines, DNS and secrets. [`ClusterRuntime`] is the
//! node-management and in-cluster surface used by the reconciler and the
//! GitOps controller. The simulator implements both; the cloud stubs expose
//! the same shape and answer `NotImplemented`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::node::{EtcdStatus, Labels, NodePhase, NodeRole, Taint};

pub mod conformance;
mod sim;
mod stubs;

pub use sim::{SimConfig, Simulator, TraceEntry};
pub use stubs::UnimplementedCloud;

/// Key-value document used for resource inputs and outputs.
pub type Document = BTreeMap<String, Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ResourceKind {
    Network,
    Subnet,
    PublicIp,
    LoadBalancer,
    SecurityGroup,
    Route,
    Machine,
    DnsRecord,
    SecretEntry,
    StorageClass,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 10] = [
        ResourceKind::Network,
        ResourceKind::Subnet,
        ResourceKind::PublicIp,
        ResourceKind::LoadBalancer,
        ResourceKind::SecurityGroup,
        ResourceKind::Route,
        ResourceKind::Machine,
        ResourceKind::DnsRecord,
        ResourceKind::SecretEntry,
        ResourceKind::StorageClass,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Network => "Network",
            ResourceKind::Subnet => "Subnet",
            ResourceKind::PublicIp => "PublicIp",
            ResourceKind::LoadBalancer => "LoadBalancer",
            ResourceKind::SecurityGroup => "SecurityGroup",
            ResourceKind::Route => "Route",
            ResourceKind::Machine => "Machine",
            ResourceKind::DnsRecord => "DnsRecord",
            ResourceKind::SecretEntry => "SecretEntry",
            ResourceKind::StorageClass => "StorageClass",
        }
    }

    fn slug(self) -> &'static str {
        match self {
            ResourceKind::Network => "net",
            ResourceKind::Subnet => "subnet",
            ResourceKind::PublicIp => "ip",
            ResourceKind::LoadBalancer => "lb",
            ResourceKind::SecurityGroup => "sg",
            ResourceKind::Route => "route",
            ResourceKind::Machine => "vm",
            ResourceKind::DnsRecord => "dns",
            ResourceKind::SecretEntry => "secret",
            ResourceKind::StorageClass => "sc",
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ResourceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ResourceKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown resource kind `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceState {
    Creating,
    Ready,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderResourceRecord {
    pub provider_id: String,
    pub kind: ResourceKind,
    pub inputs: Document,
    pub outputs: Document,
    pub state: ResourceState,
}

impl ProviderResourceRecord {
    pub fn output_str(&self, key: &str) -> Option<&str> {
        self.outputs.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DnsRecordType {
    #[serde(rename = "CNAME")]
    Cname,
    A,
}

impl DnsRecordType {
    pub fn as_str(self) -> &'static str {
        match self {
            DnsRecordType::Cname => "CNAME",
            DnsRecordType::A => "A",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "behavior")]
pub enum FaultBehavior {
    /// The matching create call fails with `InjectedFault`.
    FailCreate,
    /// The matching create call is held for `millis` before proceeding.
    Delay { millis: u64 },
    /// The matching read or node observation fails with `StaleUnavailable`.
    DropObservation,
}

/// One-shot fault: fires on the `ordinal`-th matching call (1-based) for
/// resources of `kind`. Node observations count as `Machine` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: ResourceKind,
    pub ordinal: u32,
    #[serde(flatten)]
    pub behavior: FaultBehavior,
}

impl FaultSpec {
    pub fn new(kind: ResourceKind, ordinal: u32, behavior: FaultBehavior) -> Self {
        assert!(ordinal >= 1, "fault ordinals are 1-based");
        Self { kind, ordinal, behavior }
    }
}

impl FromStr for FaultSpec {
    type Err = String;

    /// `KIND:ORDINAL:BEHAVIOR`, e.g. `Machine:2:fail_create` or
    /// `PublicIp:1:delay=250`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.splitn(3, ':');
        let kind: ResourceKind = parts.next().unwrap_or_default().parse()?;
        let ordinal: u32 = parts
            .next()
            .and_then(|o| o.parse().ok())
            .filter(|o| *o >= 1)
            .ok_or_else(|| format!("fault `{s}`: ordinal must be a positive integer"))?;
        let behavior = match parts.next().unwrap_or_default() {
            "fail_create" => FaultBehavior::FailCreate,
            "drop_observation" => FaultBehavior::DropObservation,
            other => match other.strip_prefix("delay=").and_then(|ms| ms.parse().ok()) {
                Some(millis) => FaultBehavior::Delay { millis },
                None => return Err(format!("fault `{s}`: unknown behavior `{other}`")),
            },
        };
        Ok(FaultSpec { kind, ordinal, behavior })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProviderError {
    #[error("quota exceeded: at most {limit} live resources")]
    QuotaExceeded { limit: usize },
    #[error("invalid inputs for {kind}: {reason}")]
    InvalidInputs { kind: ResourceKind, reason: String },
    #[error("injected fault on {kind} call #{ordinal}")]
    InjectedFault { kind: ResourceKind, ordinal: u32 },
    #[error("resource `{0}` not found")]
    NotFound(String),
    #[error("observation of `{0}` unavailable")]
    StaleUnavailable(String),
    #[error("DNS zone `{0}` not found")]
    ZoneNotFound(String),
    #[error("secret `{0}` not found")]
    SecretNotFound(String),
    #[error("{provider}: {operation} is not implemented")]
    NotImplemented { provider: String, operation: &'static str },
    #[error("{provider}: credentials missing, set {var}")]
    MissingCredentials { provider: String, var: String },
    #[error("node `{0}` not found")]
    NodeNotFound(String),
    #[error("node `{node}` is in phase {phase:?}, expected {expected}")]
    WrongPhase { node: String, phase: NodePhase, expected: &'static str },
    #[error("node `{0}` is not a control-plane node")]
    NotControlPlane(String),
    #[error("etcd already bootstrapped for cluster `{0}`")]
    AlreadyBootstrapped(String),
    #[error("cluster `{0}` has no running machines")]
    ClusterNotFound(String),
    #[error("simulator state: {0}")]
    Persistence(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservedNode {
    pub name: String,
    pub role: NodeRole,
    pub phase: NodePhase,
    pub labels: Labels,
    pub taints: Vec<Taint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeObservation {
    pub nodes: Vec<ObservedNode>,
    pub etcd: EtcdStatus,
}

/// An object applied to a cluster's application state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppObject {
    pub kind: String,
    pub name: String,
    /// Digest of the object's canonical content.
    pub digest: String,
    /// Value of the `managed-by` ownership label.
    pub owner: String,
    /// Repository-relative file the object came from, for synced objects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncRecord {
    pub repository: String,
    pub branch: String,
    pub path: String,
    pub interval_ticks: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revision: Option<String>,
}

/// Infrastructure operations.
pub trait Provider: Send + Sync {
    fn name(&self) -> &str;
    fn create(&self, kind: ResourceKind, inputs: &Document)
        -> Result<ProviderResourceRecord, ProviderError>;
    fn delete(&self, provider_id: &str) -> Result<(), ProviderError>;
    fn read(&self, provider_id: &str) -> Result<ProviderResourceRecord, ProviderError>;
    /// Canonical serialization of all live state, sorted by provider id.
    /// Secret values are never included.
    fn snapshot(&self) -> Result<String, ProviderError>;
    fn secret_put(&self, name: &str, value: &str) -> Result<(), ProviderError>;
    fn secret_get(&self, name: &str) -> Result<String, ProviderError>;
    /// Idempotent upsert keyed by `(zone, name, type)`; returns the record id.
    fn dns_upsert(
        &self,
        zone: &str,
        name: &str,
        rtype: DnsRecordType,
        value: &str,
    ) -> Result<String, ProviderError>;
}

/// Node management and in-cluster state.
pub trait ClusterRuntime: Send + Sync {
    fn observe_nodes(&self, cluster: &str) -> Result<NodeObservation, ProviderError>;
    fn apply_config(&self, node: &str) -> Result<(), ProviderError>;
    fn bootstrap_etcd(&self, node: &str) -> Result<(), ProviderError>;
    fn apply_labels_taints(&self, node: &str, labels: &Labels, taints: &[Taint])
        -> Result<(), ProviderError>;
    /// Re-provisions a node from its machine record; the node re-enters at
    /// `Provisioned`.
    fn recreate_node(&self, node: &str) -> Result<(), ProviderError>;
    /// Advances simulated time. Real targets ignore this.
    fn tick(&self, ticks: u32);

    fn app_objects(&self, cluster: &str) -> Result<BTreeMap<String, AppObject>, ProviderError>;
    fn app_apply(&self, cluster: &str, id: &str, object: AppObject) -> Result<(), ProviderError>;
    fn app_delete(&self, cluster: &str, id: &str) -> Result<(), ProviderError>;
    fn sync_state(&self, cluster: &str) -> Result<Option<SyncRecord>, ProviderError>;
    fn set_sync_state(&self, cluster: &str, state: SyncRecord) -> Result<(), ProviderError>;
}

/// Everything a lifecycle run needs from a target environment.
pub trait Target: Provider + ClusterRuntime {}

impl<T: Provider + ClusterRuntime> Target for T {}

/// Name of the environment variable carrying a provider's access token.
pub fn credential_var(provider: crate::manifest::ProviderKind) -> String {
    format!("SSKUBA_{}_TOKEN", provider.as_str().to_ascii_uppercase())
}
