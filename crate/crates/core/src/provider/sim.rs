//! Deterministic in-process target environment.
//!
//! All state sits behind one mutex, so concurrent callers are serialized
//! into a single mutation order. Identical call sequences (including fault
//! specs) produce identical snapshots. With a persistence path the world is
//! rewritten after every mutation, which lets separate CLI invocations and
//! crash tests share it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    AppObject, ClusterRuntime, DnsRecordType, Document, FaultBehavior, FaultSpec, NodeObservation,
    ObservedNode, Provider, ProviderError, ProviderResourceRecord, ResourceKind, ResourceState,
    SyncRecord,
};
use crate::canonical;
use crate::fsutil;
use crate::node::{EtcdStatus, Labels, NodePhase, NodeRole, Taint};

const WORLD_VERSION: u32 = 1;

#[derive(Debug, Clone, Default)]
pub struct SimConfig {
    /// Maximum number of live resources; `None` is unlimited.
    pub quota: Option<usize>,
    /// Per-kind simulated create latency.
    pub latency: BTreeMap<ResourceKind, Duration>,
    /// DNS zones that exist before anything is created.
    pub zones: Vec<String>,
}

impl SimConfig {
    pub fn with_zone(zone: &str) -> Self {
        Self { zones: vec![zone.to_string()], ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub op: String,
    pub kind: ResourceKind,
    pub provider_id: String,
    /// The `name` input of the resource, when it has one.
    pub name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DnsEntry {
    id: String,
    rtype: DnsRecordType,
    value: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SimNode {
    cluster: String,
    role: NodeRole,
    phase: NodePhase,
    machine_id: String,
    labels: Labels,
    taints: Vec<Taint>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct ClusterRt {
    etcd: EtcdStatus,
    etcd_bootstrap_count: u32,
    apps: BTreeMap<String, AppObject>,
    sync: Option<SyncRecord>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct World {
    version: u32,
    next_id: u64,
    next_public_ip: u32,
    next_private_ip: u32,
    quota: Option<usize>,
    latency_ms: BTreeMap<ResourceKind, u64>,
    records: BTreeMap<String, ProviderResourceRecord>,
    zones: BTreeMap<String, BTreeMap<String, DnsEntry>>,
    secrets: BTreeMap<String, String>,
    nodes: BTreeMap<String, SimNode>,
    clusters: BTreeMap<String, ClusterRt>,
}

#[derive(Debug, Default)]
struct FaultState {
    specs: Vec<FaultSpec>,
    creates: BTreeMap<ResourceKind, u32>,
    reads: BTreeMap<ResourceKind, u32>,
}

#[derive(Debug)]
struct Inner {
    world: World,
    faults: FaultState,
    trace: Vec<TraceEntry>,
}

#[derive(Debug)]
pub struct Simulator {
    inner: Mutex<Inner>,
    persist: Option<PathBuf>,
}

// What `snapshot()` exposes: live state without counters or secret values.
#[derive(Serialize)]
struct SnapshotView<'a> {
    records: &'a BTreeMap<String, ProviderResourceRecord>,
    dns: &'a BTreeMap<String, BTreeMap<String, DnsEntry>>,
    secrets: Vec<&'a String>,
    nodes: &'a BTreeMap<String, SimNode>,
    clusters: &'a BTreeMap<String, ClusterRt>,
}

impl Simulator {
    pub fn new(config: SimConfig) -> Self {
        Self { inner: Mutex::new(Inner::fresh(World::from_config(&config))), persist: None }
    }

    /// Opens the world persisted at `path`, or starts a fresh one from
    /// `config` if the file does not exist yet. Zones from `config` are
    /// added to a loaded world if missing.
    pub fn open(path: &Path, config: SimConfig) -> Result<Self, ProviderError> {
        let world = match std::fs::read(path) {
            Ok(bytes) => {
                let mut w: World = serde_json::from_slice(&bytes)
                    .map_err(|e| ProviderError::Persistence(format!("{}: {e}", path.display())))?;
                if w.version != WORLD_VERSION {
                    return Err(ProviderError::Persistence(format!(
                        "{}: unsupported world version {}",
                        path.display(),
                        w.version
                    )));
                }
                for z in &config.zones {
                    w.zones.entry(z.clone()).or_default();
                }
                w
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => World::from_config(&config),
            Err(e) => return Err(ProviderError::Persistence(format!("{}: {e}", path.display()))),
        };
        let sim = Self { inner: Mutex::new(Inner::fresh(world)), persist: Some(path.to_path_buf()) };
        sim.save(&sim.lock())?;
        Ok(sim)
    }

    /// Registers a one-shot fault. Ordinals count calls made after this
    /// simulator was constructed.
    pub fn inject(&self, fault: FaultSpec) {
        self.lock().faults.specs.push(fault);
    }

    pub fn clear_faults(&self) {
        self.lock().faults.specs.clear();
    }

    /// Removes a node from the registry as if its VM crashed. The machine
    /// record stays, so the node can be recreated.
    pub fn kill_node(&self, node: &str) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        inner.world.nodes.remove(node).ok_or_else(|| ProviderError::NodeNotFound(node.into()))?;
        self.save(&inner)
    }

    /// Successful etcd bootstraps for `cluster` during its lifetime.
    pub fn etcd_bootstrap_count(&self, cluster: &str) -> u32 {
        self.lock().world.clusters.get(cluster).map_or(0, |c| c.etcd_bootstrap_count)
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.lock().trace.clone()
    }

    pub fn dns_lookup(&self, zone: &str, name: &str, rtype: DnsRecordType) -> Option<String> {
        let inner = self.lock();
        inner.world.zones.get(zone)?.get(&dns_key(name, rtype)).map(|e| e.value.clone())
    }

    pub fn live_records(&self) -> Vec<ProviderResourceRecord> {
        self.lock().world.records.values().cloned().collect()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn save(&self, inner: &Inner) -> Result<(), ProviderError> {
        if let Some(path) = &self.persist {
            let bytes = canonical::to_canonical_pretty(&inner.world);
            fsutil::atomic_write(path, bytes.as_bytes())
                .map_err(|e| ProviderError::Persistence(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

impl World {
    fn from_config(config: &SimConfig) -> World {
        World {
            version: WORLD_VERSION,
            quota: config.quota,
            latency_ms: config.latency.iter().map(|(k, d)| (*k, d.as_millis() as u64)).collect(),
            zones: config.zones.iter().map(|z| (z.clone(), BTreeMap::new())).collect(),
            ..World::default()
        }
    }

    fn alloc_id(&mut self, kind: ResourceKind) -> String {
        self.next_id += 1;
        format!("sim-{}-{:06}", kind.slug(), self.next_id)
    }
}

impl Inner {
    fn fresh(world: World) -> Inner {
        Inner { world, faults: FaultState::default(), trace: Vec::new() }
    }

    /// Counts a create call for `kind` and returns the fault that fires on it.
    fn create_fault(&mut self, kind: ResourceKind) -> Option<(u32, FaultBehavior)> {
        let n = self.faults.creates.entry(kind).or_insert(0);
        *n += 1;
        let n = *n;
        self.faults
            .specs
            .iter()
            .find(|f| {
                f.kind == kind
                    && f.ordinal == n
                    && matches!(f.behavior, FaultBehavior::FailCreate | FaultBehavior::Delay { .. })
            })
            .map(|f| (n, f.behavior))
    }

    fn read_fault(&mut self, kind: ResourceKind) -> bool {
        let n = self.faults.reads.entry(kind).or_insert(0);
        *n += 1;
        let n = *n;
        self.faults.specs.iter().any(|f| {
            f.kind == kind && f.ordinal == n && f.behavior == FaultBehavior::DropObservation
        })
    }

    fn node_mut(&mut self, node: &str) -> Result<&mut SimNode, ProviderError> {
        self.world.nodes.get_mut(node).ok_or_else(|| ProviderError::NodeNotFound(node.into()))
    }

    fn cluster_mut(&mut self, cluster: &str) -> Result<&mut ClusterRt, ProviderError> {
        self.world
            .clusters
            .get_mut(cluster)
            .ok_or_else(|| ProviderError::ClusterNotFound(cluster.into()))
    }
}

fn dns_key(name: &str, rtype: DnsRecordType) -> String {
    format!("{name}/{}", rtype.as_str())
}

fn input_str<'a>(kind: ResourceKind, inputs: &'a Document, key: &str) -> Result<&'a str, ProviderError> {
    inputs
        .get(key)
        .and_then(Value::as_str)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ProviderError::InvalidInputs { kind, reason: format!("`{key}` is required") })
}

fn required_inputs(kind: ResourceKind) -> &'static [&'static str] {
    match kind {
        ResourceKind::Machine => {
            &["image", "machine_type", "config_ref", "cluster", "name", "role"]
        }
        ResourceKind::DnsRecord => &["zone", "name", "value"],
        ResourceKind::SecretEntry | ResourceKind::StorageClass => &["name"],
        _ => &[],
    }
}

fn doc(pairs: Value) -> Document {
    match pairs {
        Value::Object(m) => m.into_iter().collect(),
        _ => Document::new(),
    }
}

impl Provider for Simulator {
    fn name(&self) -> &str {
        "sim"
    }

    fn create(
        &self,
        kind: ResourceKind,
        inputs: &Document,
    ) -> Result<ProviderResourceRecord, ProviderError> {
        for key in required_inputs(kind) {
            input_str(kind, inputs, key)?;
        }
        let mut delay = None;
        {
            let mut inner = self.lock();
            match inner.create_fault(kind) {
                Some((ordinal, FaultBehavior::FailCreate)) => {
                    return Err(ProviderError::InjectedFault { kind, ordinal });
                }
                Some((_, FaultBehavior::Delay { millis })) => delay = Some(millis),
                _ => {}
            }
            if let Some(ms) = inner.world.latency_ms.get(&kind) {
                delay = Some(delay.unwrap_or(0) + ms);
            }
        }
        if let Some(ms) = delay {
            thread::sleep(Duration::from_millis(ms));
        }

        let mut inner = self.lock();
        let w = &mut inner.world;
        if let Some(limit) = w.quota {
            if w.records.len() >= limit {
                return Err(ProviderError::QuotaExceeded { limit });
            }
        }
        let region = inputs.get("region").and_then(Value::as_str).unwrap_or("local");

        // Validate everything that can fail before allocating ids, so a
        // rejected call leaves no trace in the world.
        match kind {
            ResourceKind::Machine => {
                let name = input_str(kind, inputs, "name")?;
                if w.nodes.contains_key(name)
                    || w.records.values().any(|r| {
                        r.kind == ResourceKind::Machine
                            && r.inputs.get("name").and_then(Value::as_str) == Some(name)
                    })
                {
                    return Err(ProviderError::InvalidInputs {
                        kind,
                        reason: format!("machine `{name}` already exists"),
                    });
                }
                let role = input_str(kind, inputs, "role")?;
                if NodeRole::parse(role).is_none() {
                    return Err(ProviderError::InvalidInputs {
                        kind,
                        reason: format!("unknown role `{role}`"),
                    });
                }
            }
            ResourceKind::DnsRecord => {
                let zone = input_str(kind, inputs, "zone")?;
                if !w.zones.contains_key(zone) {
                    return Err(ProviderError::ZoneNotFound(zone.into()));
                }
            }
            _ => {}
        }

        let id = w.alloc_id(kind);
        let outputs = match kind {
            ResourceKind::Network => doc(json!({
                "network_id": id,
                "cidr": inputs.get("cidr").cloned().unwrap_or(json!("10.0.0.0/16")),
            })),
            ResourceKind::Subnet => doc(json!({
                "subnet_id": id,
                "cidr": inputs.get("cidr").cloned().unwrap_or(json!("10.0.1.0/24")),
            })),
            ResourceKind::PublicIp => {
                w.next_public_ip += 1;
                let n = w.next_public_ip;
                doc(json!({ "address": format!("10.255.{}.{}", n / 256, n % 256) }))
            }
            ResourceKind::LoadBalancer => doc(json!({
                "hostname": format!("{id}.lb.{region}.sim.internal"),
                "address": inputs.get("public_ip").cloned().unwrap_or(Value::Null),
            })),
            ResourceKind::SecurityGroup => doc(json!({ "group_id": id })),
            ResourceKind::Route => doc(json!({ "route_id": id })),
            ResourceKind::Machine => {
                w.next_private_ip += 1;
                let n = w.next_private_ip + 9;
                let name = input_str(kind, inputs, "name")?.to_string();
                let cluster = input_str(kind, inputs, "cluster")?.to_string();
                let role = NodeRole::parse(input_str(kind, inputs, "role")?).expect("checked");
                w.nodes.insert(
                    name.clone(),
                    SimNode {
                        cluster: cluster.clone(),
                        role,
                        phase: NodePhase::Provisioned,
                        machine_id: id.clone(),
                        labels: Labels::new(),
                        taints: Vec::new(),
                    },
                );
                w.clusters.entry(cluster).or_default();
                doc(json!({
                    "node_name": name,
                    "image": inputs["image"],
                    "state": "running",
                    "private_ip": format!("10.0.{}.{}", 1 + n / 256, n % 256),
                }))
            }
            ResourceKind::DnsRecord => {
                let zone = input_str(kind, inputs, "zone")?.to_string();
                let name = input_str(kind, inputs, "name")?.to_string();
                let value = input_str(kind, inputs, "value")?.to_string();
                let rtype = match inputs.get("type").and_then(Value::as_str) {
                    Some("A") => DnsRecordType::A,
                    _ => DnsRecordType::Cname,
                };
                let entries = w.zones.get_mut(&zone).expect("checked");
                entries.insert(dns_key(&name, rtype), DnsEntry { id: id.clone(), rtype, value });
                doc(json!({ "record_id": id, "fqdn": name, "type": rtype.as_str() }))
            }
            ResourceKind::SecretEntry => {
                let name = input_str(kind, inputs, "name")?.to_string();
                let placeholder =
                    format!("placeholder-{}", &canonical::sha256_hex(format!("{name}/{id}").as_bytes())[..24]);
                w.secrets.insert(name.clone(), placeholder);
                doc(json!({ "name": name, "version": 1 }))
            }
            ResourceKind::StorageClass => doc(json!({
                "name": inputs["name"],
                "provisioner": inputs.get("provisioner").cloned().unwrap_or(json!("sim.csi")),
            })),
        };
        let record = ProviderResourceRecord {
            provider_id: id.clone(),
            kind,
            inputs: inputs.clone(),
            outputs,
            state: ResourceState::Ready,
        };
        w.records.insert(id.clone(), record.clone());
        let name = inputs.get("name").and_then(Value::as_str).map(str::to_string);
        inner.trace.push(TraceEntry { op: "create".into(), kind, provider_id: id, name });
        self.save(&inner)?;
        Ok(record)
    }

    fn delete(&self, provider_id: &str) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        let w = &mut inner.world;
        let record =
            w.records.remove(provider_id).ok_or_else(|| ProviderError::NotFound(provider_id.into()))?;
        match record.kind {
            ResourceKind::Machine => {
                let cluster = record.inputs.get("cluster").and_then(Value::as_str).unwrap_or_default();
                w.nodes.retain(|_, n| n.machine_id != provider_id);
                let machines_left = w.records.values().any(|r| {
                    r.kind == ResourceKind::Machine
                        && r.inputs.get("cluster").and_then(Value::as_str) == Some(cluster)
                });
                if !machines_left {
                    w.clusters.remove(cluster);
                }
            }
            ResourceKind::DnsRecord => {
                for entries in w.zones.values_mut() {
                    entries.retain(|_, e| e.id != provider_id);
                }
            }
            ResourceKind::SecretEntry => {
                if let Some(name) = record.inputs.get("name").and_then(Value::as_str) {
                    w.secrets.remove(name);
                }
            }
            _ => {}
        }
        let name = record.inputs.get("name").and_then(Value::as_str).map(str::to_string);
        inner.trace.push(TraceEntry {
            op: "delete".into(),
            kind: record.kind,
            provider_id: provider_id.into(),
            name,
        });
        self.save(&inner)
    }

    fn read(&self, provider_id: &str) -> Result<ProviderResourceRecord, ProviderError> {
        let mut inner = self.lock();
        let record = inner
            .world
            .records
            .get(provider_id)
            .cloned()
            .ok_or_else(|| ProviderError::NotFound(provider_id.into()))?;
        if inner.read_fault(record.kind) {
            return Err(ProviderError::StaleUnavailable(provider_id.into()));
        }
        Ok(record)
    }

    fn snapshot(&self) -> Result<String, ProviderError> {
        let inner = self.lock();
        let w = &inner.world;
        Ok(canonical::to_canonical_pretty(&SnapshotView {
            records: &w.records,
            dns: &w.zones,
            secrets: w.secrets.keys().collect(),
            nodes: &w.nodes,
            clusters: &w.clusters,
        }))
    }

    fn secret_put(&self, name: &str, value: &str) -> Result<(), ProviderError> {
        if name.is_empty() {
            return Err(ProviderError::InvalidInputs {
                kind: ResourceKind::SecretEntry,
                reason: "secret name must not be empty".into(),
            });
        }
        let mut inner = self.lock();
        inner.world.secrets.insert(name.into(), value.into());
        self.save(&inner)
    }

    fn secret_get(&self, name: &str) -> Result<String, ProviderError> {
        self.lock()
            .world
            .secrets
            .get(name)
            .cloned()
            .ok_or_else(|| ProviderError::SecretNotFound(name.into()))
    }

    fn dns_upsert(
        &self,
        zone: &str,
        name: &str,
        rtype: DnsRecordType,
        value: &str,
    ) -> Result<String, ProviderError> {
        let mut inner = self.lock();
        let w = &mut inner.world;
        if !w.zones.contains_key(zone) {
            return Err(ProviderError::ZoneNotFound(zone.into()));
        }
        let key = dns_key(name, rtype);
        let existing = w.zones[zone].get(&key).map(|e| e.id.clone());
        let id = match existing {
            Some(id) => id,
            None => w.alloc_id(ResourceKind::DnsRecord),
        };
        w.zones
            .get_mut(zone)
            .expect("checked")
            .insert(key, DnsEntry { id: id.clone(), rtype, value: value.into() });
        self.save(&inner)?;
        Ok(id)
    }
}

impl ClusterRuntime for Simulator {
    fn observe_nodes(&self, cluster: &str) -> Result<NodeObservation, ProviderError> {
        let mut inner = self.lock();
        if inner.read_fault(ResourceKind::Machine) {
            return Err(ProviderError::StaleUnavailable(cluster.into()));
        }
        let w = &inner.world;
        let nodes = w
            .nodes
            .iter()
            .filter(|(_, n)| n.cluster == cluster)
            .map(|(name, n)| ObservedNode {
                name: name.clone(),
                role: n.role,
                phase: n.phase,
                labels: n.labels.clone(),
                taints: n.taints.clone(),
            })
            .collect();
        let etcd = w.clusters.get(cluster).map_or(EtcdStatus::Absent, |c| c.etcd);
        Ok(NodeObservation { nodes, etcd })
    }

    fn apply_config(&self, node: &str) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        let n = inner.node_mut(node)?;
        if n.phase != NodePhase::Provisioned {
            return Err(ProviderError::WrongPhase {
                node: node.into(),
                phase: n.phase,
                expected: "Provisioned",
            });
        }
        n.phase = NodePhase::Booted;
        self.save(&inner)
    }

    fn bootstrap_etcd(&self, node: &str) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        let n = inner.node_mut(node)?;
        if n.role != NodeRole::ControlPlane {
            return Err(ProviderError::NotControlPlane(node.into()));
        }
        if n.phase != NodePhase::ConfigApplied {
            return Err(ProviderError::WrongPhase {
                node: node.into(),
                phase: n.phase,
                expected: "ConfigApplied",
            });
        }
        let cluster = n.cluster.clone();
        let c = inner.cluster_mut(&cluster)?;
        if c.etcd == EtcdStatus::Bootstrapped {
            return Err(ProviderError::AlreadyBootstrapped(cluster));
        }
        c.etcd = EtcdStatus::Bootstrapped;
        c.etcd_bootstrap_count += 1;
        self.save(&inner)
    }

    fn apply_labels_taints(
        &self,
        node: &str,
        labels: &Labels,
        taints: &[Taint],
    ) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        let n = inner.node_mut(node)?;
        if n.phase < NodePhase::Joined {
            return Err(ProviderError::WrongPhase {
                node: node.into(),
                phase: n.phase,
                expected: "Joined or Ready",
            });
        }
        n.labels = labels.clone();
        n.taints = taints.to_vec();
        self.save(&inner)
    }

    fn recreate_node(&self, node: &str) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        let w = &mut inner.world;
        let machine = w
            .records
            .values()
            .find(|r| {
                r.kind == ResourceKind::Machine
                    && r.inputs.get("name").and_then(Value::as_str) == Some(node)
            })
            .ok_or_else(|| ProviderError::NodeNotFound(node.into()))?;
        let cluster = machine.inputs["cluster"].as_str().unwrap_or_default().to_string();
        let role = machine.inputs["role"].as_str().and_then(NodeRole::parse).unwrap_or(NodeRole::Worker);
        let machine_id = machine.provider_id.clone();
        w.nodes.insert(
            node.into(),
            SimNode {
                cluster,
                role,
                phase: NodePhase::Provisioned,
                machine_id,
                labels: Labels::new(),
                taints: Vec::new(),
            },
        );
        self.save(&inner)
    }

    fn tick(&self, ticks: u32) {
        let mut inner = self.lock();
        for _ in 0..ticks {
            let w = &mut inner.world;
            for n in w.nodes.values_mut() {
                let etcd = w.clusters.get(&n.cluster).map_or(EtcdStatus::Absent, |c| c.etcd);
                n.phase = match n.phase {
                    NodePhase::Booted => NodePhase::ConfigApplied,
                    NodePhase::ConfigApplied if etcd == EtcdStatus::Bootstrapped => NodePhase::Joined,
                    NodePhase::Joined => NodePhase::Ready,
                    p => p,
                };
            }
        }
        // Ticks only move phases forward; a failed save is retried by the
        // next mutation.
        let _ = self.save(&inner);
    }

    fn app_objects(&self, cluster: &str) -> Result<BTreeMap<String, AppObject>, ProviderError> {
        let inner = self.lock();
        inner
            .world
            .clusters
            .get(cluster)
            .map(|c| c.apps.clone())
            .ok_or_else(|| ProviderError::ClusterNotFound(cluster.into()))
    }

    fn app_apply(&self, cluster: &str, id: &str, object: AppObject) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        inner.cluster_mut(cluster)?.apps.insert(id.into(), object);
        self.save(&inner)
    }

    fn app_delete(&self, cluster: &str, id: &str) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        inner
            .cluster_mut(cluster)?
            .apps
            .remove(id)
            .ok_or_else(|| ProviderError::NotFound(id.into()))?;
        self.save(&inner)
    }

    fn sync_state(&self, cluster: &str) -> Result<Option<SyncRecord>, ProviderError> {
        let inner = self.lock();
        inner
            .world
            .clusters
            .get(cluster)
            .map(|c| c.sync.clone())
            .ok_or_else(|| ProviderError::ClusterNotFound(cluster.into()))
    }

    fn set_sync_state(&self, cluster: &str, state: SyncRecord) -> Result<(), ProviderError> {
        let mut inner = self.lock();
        inner.cluster_mut(cluster)?.sync = Some(state);
        self.save(&inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn machine(name: &str) -> Document {
        doc(json!({
            "image": "talos-v1",
            "machine_type": "m.small",
            "config_ref": format!("{name}.machineconfig.sealed"),
            "cluster": "demo",
            "name": name,
            "role": "worker",
        }))
    }

    #[test]
    fn public_ips_allocate_sequentially() {
        let sim = Simulator::new(SimConfig::default());
        let a = sim.create(ResourceKind::PublicIp, &Document::new()).unwrap();
        let b = sim.create(ResourceKind::PublicIp, &Document::new()).unwrap();
        assert_eq!(a.output_str("address"), Some("10.255.0.1"));
        assert_eq!(b.output_str("address"), Some("10.255.0.2"));
        assert_eq!(a.state, ResourceState::Ready);
    }

    #[test]
    fn machine_registers_exactly_one_node() {
        let sim = Simulator::new(SimConfig::default());
        assert!(sim.observe_nodes("demo").unwrap().nodes.is_empty());
        let rec = sim.create(ResourceKind::Machine, &machine("demo-w-0")).unwrap();
        let obs = sim.observe_nodes("demo").unwrap();
        assert_eq!(obs.nodes.len(), 1);
        assert_eq!(obs.nodes[0].name, "demo-w-0");
        assert_eq!(obs.nodes[0].phase, NodePhase::Provisioned);

        sim.delete(&rec.provider_id).unwrap();
        assert!(sim.observe_nodes("demo").unwrap().nodes.is_empty());
    }

    #[test]
    fn machine_requires_inputs() {
        let sim = Simulator::new(SimConfig::default());
        let mut inputs = machine("demo-w-0");
        inputs.remove("config_ref");
        assert!(matches!(
            sim.create(ResourceKind::Machine, &inputs),
            Err(ProviderError::InvalidInputs { .. })
        ));
    }

    #[test]
    fn fail_create_fires_on_ordinal_only() {
        let sim = Simulator::new(SimConfig::default());
        sim.inject(FaultSpec::new(ResourceKind::Machine, 2, FaultBehavior::FailCreate));
        sim.create(ResourceKind::Machine, &machine("demo-w-0")).unwrap();
        assert_eq!(
            sim.create(ResourceKind::Machine, &machine("demo-w-1")),
            Err(ProviderError::InjectedFault { kind: ResourceKind::Machine, ordinal: 2 })
        );
        sim.create(ResourceKind::Machine, &machine("demo-w-1")).unwrap();
    }

    #[test]
    fn delete_and_read_not_found() {
        let sim = Simulator::new(SimConfig::default());
        let r = sim.create(ResourceKind::Network, &Document::new()).unwrap();
        assert_eq!(sim.read(&r.provider_id).unwrap(), r);
        sim.delete(&r.provider_id).unwrap();
        assert_eq!(sim.delete(&r.provider_id), Err(ProviderError::NotFound(r.provider_id.clone())));
        assert_eq!(sim.read(&r.provider_id), Err(ProviderError::NotFound(r.provider_id.clone())));
    }

    #[test]
    fn drop_observation_makes_read_stale() {
        let sim = Simulator::new(SimConfig::default());
        let r = sim.create(ResourceKind::Network, &Document::new()).unwrap();
        sim.inject(FaultSpec::new(ResourceKind::Network, 1, FaultBehavior::DropObservation));
        assert!(matches!(sim.read(&r.provider_id), Err(ProviderError::StaleUnavailable(_))));
        assert!(sim.read(&r.provider_id).is_ok());
    }

    #[test]
    fn fresh_snapshot_is_empty() {
        let sim = Simulator::new(SimConfig::default());
        let v: Value = serde_json::from_str(&sim.snapshot().unwrap()).unwrap();
        assert_eq!(v["records"], json!({}));
        assert_eq!(v["nodes"], json!({}));
    }

    #[test]
    fn secrets_round_trip_and_stay_out_of_snapshots() {
        let sim = Simulator::new(SimConfig::default());
        sim.secret_put("git-pat", "ghp_supersecretvalue").unwrap();
        assert_eq!(sim.secret_get("git-pat").unwrap(), "ghp_supersecretvalue");
        assert_eq!(sim.secret_get("nope"), Err(ProviderError::SecretNotFound("nope".into())));
        let snap = sim.snapshot().unwrap();
        assert!(snap.contains("git-pat"));
        assert!(!snap.contains("ghp_supersecretvalue"));
    }

    #[test]
    fn dns_upsert_is_keyed() {
        let sim = Simulator::new(SimConfig::with_zone("dev.example.org"));
        let a = sim.dns_upsert("dev.example.org", "demo.dev.example.org", DnsRecordType::Cname, "x").unwrap();
        let b = sim.dns_upsert("dev.example.org", "demo.dev.example.org", DnsRecordType::Cname, "x").unwrap();
        assert_eq!(a, b);
        let snap = sim.snapshot().unwrap();
        assert_eq!(snap.matches("demo.dev.example.org/CNAME").count(), 1);
        sim.dns_upsert("dev.example.org", "demo.dev.example.org", DnsRecordType::Cname, "y").unwrap();
        assert_eq!(
            sim.dns_lookup("dev.example.org", "demo.dev.example.org", DnsRecordType::Cname).as_deref(),
            Some("y")
        );
        assert_eq!(
            sim.dns_upsert("nope.org", "a.nope.org", DnsRecordType::Cname, "x"),
            Err(ProviderError::ZoneNotFound("nope.org".into()))
        );
    }

    #[test]
    fn quota_is_enforced() {
        let sim = Simulator::new(SimConfig { quota: Some(1), ..SimConfig::default() });
        sim.create(ResourceKind::Network, &Document::new()).unwrap();
        assert_eq!(
            sim.create(ResourceKind::Route, &Document::new()),
            Err(ProviderError::QuotaExceeded { limit: 1 })
        );
    }

    #[test]
    fn etcd_bootstrap_is_single_shot() {
        let sim = Simulator::new(SimConfig::default());
        let mut cp = machine("demo-cp-0");
        cp.insert("role".into(), json!("control_plane"));
        sim.create(ResourceKind::Machine, &cp).unwrap();
        sim.create(ResourceKind::Machine, &machine("demo-w-0")).unwrap();
        assert!(matches!(sim.bootstrap_etcd("demo-cp-0"), Err(ProviderError::WrongPhase { .. })));
        sim.apply_config("demo-cp-0").unwrap();
        sim.apply_config("demo-w-0").unwrap();
        sim.tick(1);
        assert_eq!(sim.bootstrap_etcd("demo-w-0"), Err(ProviderError::NotControlPlane("demo-w-0".into())));
        sim.bootstrap_etcd("demo-cp-0").unwrap();
        assert_eq!(sim.bootstrap_etcd("demo-cp-0"), Err(ProviderError::AlreadyBootstrapped("demo".into())));
        assert_eq!(sim.etcd_bootstrap_count("demo"), 1);
    }

    #[test]
    fn persisted_world_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("simworld.json");
        let sim = Simulator::open(&path, SimConfig::with_zone("z.org")).unwrap();
        sim.create(ResourceKind::PublicIp, &Document::new()).unwrap();
        let snap = sim.snapshot().unwrap();
        drop(sim);
        let again = Simulator::open(&path, SimConfig::default()).unwrap();
        assert_eq!(again.snapshot().unwrap(), snap);
        let next = again.create(ResourceKind::PublicIp, &Document::new()).unwrap();
        assert_eq!(next.output_str("address"), Some("10.255.0.2"));
    }
}
