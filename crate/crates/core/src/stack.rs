//! The infrastructure-as-code engine.
//!
//! A manifest expands into a resource graph ([`desired_resources`]). The
//! graph is diffed against the stack checkpoint ([`plan`]) and the resulting
//! steps run in dependency order against a provider ([`execute`]). The
//! checkpoint is persisted after every step, so an interrupted run resumes
//! by planning again.
//!
//! Resources are immutable: a change to anything that shapes the
//! infrastructure replaces the whole stack, while an unchanged manifest
//! plans nothing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use time::OffsetDateTime;

use crate::canonical;
use crate::clock::Clock;
use crate::fsutil;
use crate::manifest::{ClusterManifest, ProviderKind};
use crate::node::{node_name, NodeRole};
use crate::pki::TrustBundle;
use crate::provider::{Document, Provider, ProviderError, ResourceKind};

pub const CHECKPOINT_VERSION: u32 = 1;
const REF_PREFIX: &str = "ref:";

/// `urn:sskuba:<stack>:<kind>:<name>`
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Urn(String);

impl Urn {
    pub fn new(stack: &str, kind: ResourceKind, name: &str) -> Urn {
        Urn(format!("urn:sskuba:{stack}:{kind}:{name}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The resource name, i.e. the last URN segment.
    pub fn name(&self) -> &str {
        self.0.rsplit(':').next().unwrap_or_default()
    }
}

impl fmt::Display for Urn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An input value that resolves to `key` in the outputs of `urn` at
/// execution time.
pub fn output_ref(urn: &Urn, key: &str) -> Value {
    Value::String(format!("{REF_PREFIX}{urn}#{key}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub urn: Urn,
    pub kind: ResourceKind,
    pub inputs: Document,
    pub depends_on: Vec<Urn>,
}

impl ResourceSpec {
    /// Digest over kind, unresolved inputs and dependencies.
    pub fn input_hash(&self) -> String {
        canonical::digest_of(&json!({
            "kind": self.kind,
            "inputs": self.inputs,
            "depends_on": self.depends_on,
        }))
    }
}

/// The resource graph a manifest asks for.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredStack {
    pub stack_name: String,
    pub spec_hash: String,
    pub resources: Vec<ResourceSpec>,
}

impl DesiredStack {
    /// Digest over every `(urn, input_hash)` pair. Equal digests mean equal
    /// infrastructure.
    pub fn infra_hash(&self) -> String {
        let pairs: BTreeMap<&str, String> =
            self.resources.iter().map(|r| (r.urn.as_str(), r.input_hash())).collect();
        canonical::digest_of(&pairs)
    }

    pub fn get(&self, urn: &Urn) -> Option<&ResourceSpec> {
        self.resources.iter().find(|r| &r.urn == urn)
    }
}

/// OS image for a node role. GPU nodes boot a separate image carrying the
/// NVIDIA drivers.
pub fn image_for(role: NodeRole) -> &'static str {
    match role {
        NodeRole::GpuWorker => "talos-v1-nvidia",
        _ => "talos-v1",
    }
}

pub fn sealed_config_name(node: &str) -> String {
    format!("{node}.machineconfig.sealed")
}

/// Expands a manifest into its resource graph: core networking, a
/// registry-token secret, the CNAME record and one machine per node.
pub fn desired_resources(m: &ClusterManifest, bundle: &TrustBundle) -> DesiredStack {
    let stack = m.name.as_str();
    let provider = m.provider.as_str();
    let region = m.region.as_str();
    let urn = |kind, name: &str| Urn::new(stack, kind, name);
    let inputs = |v: Value| -> Document { v.as_object().unwrap().clone().into_iter().collect() };

    let vpc = urn(ResourceKind::Network, "vpc");
    let subnet = urn(ResourceKind::Subnet, "nodes");
    let sg = urn(ResourceKind::SecurityGroup, "nodes");
    let route = urn(ResourceKind::Route, "default");
    let ip = urn(ResourceKind::PublicIp, "ingress");
    let lb = urn(ResourceKind::LoadBalancer, "api");
    let secret = urn(ResourceKind::SecretEntry, "registry-token");
    let dns = urn(ResourceKind::DnsRecord, "cname");

    let mut resources = vec![
        ResourceSpec {
            urn: vpc.clone(),
            kind: ResourceKind::Network,
            inputs: inputs(json!({
                "name": format!("{stack}-vpc"), "cluster": stack, "provider": provider,
                "region": region, "cidr": "10.0.0.0/16",
            })),
            depends_on: vec![],
        },
        ResourceSpec {
            urn: subnet.clone(),
            kind: ResourceKind::Subnet,
            inputs: inputs(json!({
                "name": format!("{stack}-nodes"), "cluster": stack, "region": region,
                "network": output_ref(&vpc, "network_id"), "cidr": "10.0.1.0/24",
            })),
            depends_on: vec![vpc.clone()],
        },
        ResourceSpec {
            urn: sg.clone(),
            kind: ResourceKind::SecurityGroup,
            inputs: inputs(json!({
                "name": format!("{stack}-nodes"), "cluster": stack, "region": region,
                "network": output_ref(&vpc, "network_id"),
                "ingress_ports": [443, 6443, 50000],
            })),
            depends_on: vec![vpc.clone()],
        },
        ResourceSpec {
            urn: route.clone(),
            kind: ResourceKind::Route,
            inputs: inputs(json!({
                "name": format!("{stack}-default"), "cluster": stack, "region": region,
                "network": output_ref(&vpc, "network_id"), "destination": "0.0.0.0/0",
            })),
            depends_on: vec![vpc.clone()],
        },
        ResourceSpec {
            urn: ip.clone(),
            kind: ResourceKind::PublicIp,
            inputs: inputs(json!({
                "name": format!("{stack}-ingress"), "cluster": stack, "region": region,
            })),
            depends_on: vec![],
        },
        ResourceSpec {
            urn: lb.clone(),
            kind: ResourceKind::LoadBalancer,
            inputs: inputs(json!({
                "name": format!("{stack}-api"), "cluster": stack, "region": region,
                "public_ip": output_ref(&ip, "address"),
                "subnet": output_ref(&subnet, "subnet_id"),
                "listeners": [443, 6443],
                "big_ip": m.provider == ProviderKind::Vsphere,
            })),
            depends_on: vec![ip.clone(), subnet.clone()],
        },
        ResourceSpec {
            urn: secret,
            kind: ResourceKind::SecretEntry,
            inputs: inputs(json!({
                "name": format!("{stack}-registry-token"), "cluster": stack, "region": region,
            })),
            depends_on: vec![],
        },
        ResourceSpec {
            urn: dns,
            kind: ResourceKind::DnsRecord,
            inputs: inputs(json!({
                "zone": m.domain, "name": m.fqdn(), "type": "CNAME", "cluster": stack,
                "value": output_ref(&lb, "hostname"),
                "target_address": output_ref(&ip, "address"),
            })),
            depends_on: vec![ip.clone(), lb.clone()],
        },
    ];

    for (role, pool) in [
        (NodeRole::ControlPlane, &m.control_plane),
        (NodeRole::Worker, &m.workers),
        (NodeRole::GpuWorker, &m.gpu_workers),
    ] {
        for index in 0..pool.count {
            let name = node_name(stack, role, index);
            resources.push(ResourceSpec {
                urn: urn(ResourceKind::Machine, &name),
                kind: ResourceKind::Machine,
                inputs: inputs(json!({
                    "name": name, "cluster": stack, "role": role.as_str(),
                    "provider": provider, "region": region,
                    "image": image_for(role), "machine_type": pool.machine_type,
                    "config_ref": sealed_config_name(&name),
                    "seal_key_id": bundle.seal_key_id(),
                    "subnet": output_ref(&subnet, "subnet_id"),
                    "security_group": output_ref(&sg, "group_id"),
                })),
                depends_on: vec![subnet.clone(), sg.clone()],
            });
        }
    }

    DesiredStack { stack_name: stack.to_string(), spec_hash: m.spec_hash(), resources }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRecord {
    pub urn: Urn,
    pub kind: ResourceKind,
    pub provider_id: String,
    pub input_hash: String,
    pub depends_on: Vec<Urn>,
    pub outputs: Document,
    #[serde(with = "time::serde::rfc3339")]
    pub created_at: OffsetDateTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackCheckpoint {
    pub version: u32,
    pub stack_name: String,
    /// Manifest digest of the last plan that ran.
    pub spec_hash: Option<String>,
    /// Infrastructure digest of the last plan that ran.
    pub infra_hash: Option<String>,
    pub seal_public_key: Option<String>,
    pub resources: Vec<ResourceRecord>,
}

impl StackCheckpoint {
    pub fn new(stack_name: &str) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stack_name: stack_name.to_string(),
            spec_hash: None,
            infra_hash: None,
            seal_public_key: None,
            resources: Vec::new(),
        }
    }

    pub fn get(&self, urn: &Urn) -> Option<&ResourceRecord> {
        self.resources.iter().find(|r| &r.urn == urn)
    }

    pub fn is_empty(&self) -> bool {
        self.resources.is_empty()
    }

    /// Checks the structural invariants: known version, one record per URN
    /// and every dependency present.
    pub fn validate(&self) -> Result<(), StackError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(StackError::CheckpointCorrupt(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        let mut seen = BTreeSet::new();
        for r in &self.resources {
            if !seen.insert(&r.urn) {
                return Err(StackError::CheckpointCorrupt(format!("duplicate record for {}", r.urn)));
            }
        }
        for r in &self.resources {
            if let Some(d) = r.depends_on.iter().find(|d| !seen.contains(d)) {
                return Err(StackError::CheckpointCorrupt(format!(
                    "{} depends on missing {d}",
                    r.urn
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, StackError> {
        let cp: StackCheckpoint =
            serde_json::from_str(text).map_err(|e| StackError::CheckpointCorrupt(e.to_string()))?;
        cp.validate()?;
        Ok(cp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Create,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub action: StepAction,
    pub urn: Urn,
    pub kind: ResourceKind,
    pub reason: String,
    /// Spec to create, for create steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<ResourceSpec>,
    /// Resource to remove, for delete steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provider_id: Option<String>,
}

/// One-line rendering of a plan step: `+ urn (reason)` or `- urn (reason)`.
pub struct PlanStepView<'a>(pub &'a PlanStep);

impl fmt::Display for PlanStepView<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = match self.0.action {
            StepAction::Create => '+',
            StepAction::Delete => '-',
        };
        write!(f, "{sign} {} ({})", self.0.urn, self.0.reason)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlanSummary {
    pub create: usize,
    pub delete: usize,
    /// URNs that are deleted and created again.
    pub replace: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub stack_name: String,
    pub spec_hash: String,
    pub infra_hash: String,
    pub steps: Vec<PlanStep>,
    /// Infrastructure is unchanged but the manifest is not: only the
    /// in-cluster state needs to resync.
    pub resync_only: bool,
}

impl Plan {
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn summary(&self) -> PlanSummary {
        let creates: BTreeSet<&Urn> =
            self.steps.iter().filter(|s| s.action == StepAction::Create).map(|s| &s.urn).collect();
        let deletes: BTreeSet<&Urn> =
            self.steps.iter().filter(|s| s.action == StepAction::Delete).map(|s| &s.urn).collect();
        PlanSummary {
            create: creates.len(),
            delete: deletes.len(),
            replace: creates.intersection(&deletes).count(),
        }
    }

    /// Sub-plan keeping the steps that match, in order.
    pub fn filter(&self, keep: impl Fn(&PlanStep) -> bool) -> Plan {
        Plan { steps: self.steps.iter().filter(|s| keep(s)).cloned().collect(), ..self.clone() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StackError {
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("invalid resource graph: {0}")]
    InvalidGraph(String),
    #[error("{urn}: {cause}")]
    Provider { urn: Urn, cause: ProviderError },
    #[error("interrupted after {completed} step(s)")]
    Interrupted { completed: usize },
    #[error("{urn}: unresolved reference `{reference}`")]
    UnresolvedReference { urn: Urn, reference: String },
    #[error("checkpoint {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Orders `nodes` so every dependency precedes its dependents. Ready nodes
/// are taken in lexicographic URN order. Edges to nodes outside the set are
/// ignored.
fn topo_order(nodes: &BTreeMap<Urn, Vec<Urn>>) -> Result<Vec<Urn>, StackError> {
    let mut pending: BTreeMap<&Urn, usize> = BTreeMap::new();
    let mut dependents: BTreeMap<&Urn, Vec<&Urn>> = BTreeMap::new();
    for (urn, deps) in nodes {
        let inside: BTreeSet<&Urn> = deps.iter().filter(|d| nodes.contains_key(*d)).collect();
        pending.insert(urn, inside.len());
        for d in inside {
            dependents.entry(d).or_default().push(urn);
        }
    }
    let mut ready: BTreeSet<&Urn> = pending.iter().filter(|(_, n)| **n == 0).map(|(u, _)| *u).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.clone());
        for dep in dependents.get(next).into_iter().flatten() {
            let n = pending.get_mut(dep).expect("known node");
            *n -= 1;
            if *n == 0 {
                ready.insert(dep);
            }
        }
    }
    if order.len() != nodes.len() {
        return Err(StackError::InvalidGraph("dependency cycle".into()));
    }
    Ok(order)
}

/// Reverse dependency order: a node comes after everything in the set that
/// depends on it.
fn reverse_topo_order(nodes: &BTreeMap<Urn, Vec<Urn>>) -> Result<Vec<Urn>, StackError> {
    let mut reversed: BTreeMap<Urn, Vec<Urn>> = nodes.keys().map(|u| (u.clone(), vec![])).collect();
    for (urn, deps) in nodes {
        for d in deps {
            if let Some(v) = reversed.get_mut(d) {
                v.push(urn.clone());
            }
        }
    }
    topo_order(&reversed)
}

fn validate_desired(desired: &DesiredStack) -> Result<BTreeMap<Urn, Vec<Urn>>, StackError> {
    let mut graph = BTreeMap::new();
    for r in &desired.resources {
        if graph.insert(r.urn.clone(), r.depends_on.clone()).is_some() {
            return Err(StackError::InvalidGraph(format!("duplicate URN {}", r.urn)));
        }
    }
    for r in &desired.resources {
        if let Some(d) = r.depends_on.iter().find(|d| !graph.contains_key(*d)) {
            return Err(StackError::InvalidGraph(format!("{} depends on unknown {d}", r.urn)));
        }
    }
    topo_order(&graph)?;
    Ok(graph)
}

/// Diffs the desired graph against the checkpoint.
///
/// * empty checkpoint: create everything;
/// * infrastructure digest differs from the one last applied: replace the
///   whole stack (delete every record, then create every resource);
/// * otherwise: create what is missing, delete what is no longer wanted and
///   replace records whose inputs drifted. This is also how an interrupted
///   run resumes.
pub fn plan(desired: &DesiredStack, cp: &StackCheckpoint) -> Result<Plan, StackError> {
    cp.validate()?;
    let desired_graph = validate_desired(desired)?;
    let infra_hash = desired.infra_hash();

    let mut to_delete: BTreeMap<Urn, (String, &'static str)> = BTreeMap::new();
    let mut to_create: BTreeMap<Urn, &'static str> = BTreeMap::new();

    if cp.is_empty() {
        for r in &desired.resources {
            to_create.insert(r.urn.clone(), "new resource");
        }
    } else if cp.infra_hash.as_deref() != Some(infra_hash.as_str()) {
        for r in &cp.resources {
            to_delete.insert(r.urn.clone(), (r.provider_id.clone(), "replace: infrastructure changed"));
        }
        for r in &desired.resources {
            to_create.insert(r.urn.clone(), "replace: infrastructure changed");
        }
    } else {
        for r in &cp.resources {
            match desired.get(&r.urn) {
                None => {
                    to_delete.insert(r.urn.clone(), (r.provider_id.clone(), "no longer desired"));
                }
                Some(spec) if spec.input_hash() != r.input_hash => {
                    to_delete.insert(r.urn.clone(), (r.provider_id.clone(), "replace: inputs changed"));
                    to_create.insert(r.urn.clone(), "replace: inputs changed");
                }
                Some(_) => {}
            }
        }
        for r in &desired.resources {
            if cp.get(&r.urn).is_none() {
                to_create.insert(r.urn.clone(), "missing");
            }
        }
    }

    let mut steps = Vec::with_capacity(to_delete.len() + to_create.len());

    let delete_graph: BTreeMap<Urn, Vec<Urn>> = cp
        .resources
        .iter()
        .filter(|r| to_delete.contains_key(&r.urn))
        .map(|r| (r.urn.clone(), r.depends_on.clone()))
        .collect();
    for urn in reverse_topo_order(&delete_graph)? {
        let (provider_id, reason) = to_delete.remove(&urn).expect("planned delete");
        let kind = cp.get(&urn).expect("checkpoint record").kind;
        steps.push(PlanStep {
            action: StepAction::Delete,
            urn,
            kind,
            reason: reason.to_string(),
            spec: None,
            provider_id: Some(provider_id),
        });
    }

    let create_graph: BTreeMap<Urn, Vec<Urn>> = desired_graph
        .into_iter()
        .filter(|(urn, _)| to_create.contains_key(urn))
        .collect();
    for urn in topo_order(&create_graph)? {
        let spec = desired.get(&urn).expect("desired resource").clone();
        steps.push(PlanStep {
            action: StepAction::Create,
            kind: spec.kind,
            reason: to_create[&urn].to_string(),
            urn,
            spec: Some(spec),
            provider_id: None,
        });
    }

    let resync_only = steps.is_empty() && cp.spec_hash.as_deref() != Some(desired.spec_hash.as_str());
    Ok(Plan {
        stack_name: desired.stack_name.clone(),
        spec_hash: desired.spec_hash.clone(),
        infra_hash,
        steps,
        resync_only,
    })
}

/// Plan removing every record in reverse dependency order.
pub fn plan_destroy(cp: &StackCheckpoint) -> Result<Plan, StackError> {
    cp.validate()?;
    let graph: BTreeMap<Urn, Vec<Urn>> =
        cp.resources.iter().map(|r| (r.urn.clone(), r.depends_on.clone())).collect();
    let steps = reverse_topo_order(&graph)?
        .into_iter()
        .map(|urn| {
            let r = cp.get(&urn).expect("record");
            PlanStep {
                action: StepAction::Delete,
                kind: r.kind,
                provider_id: Some(r.provider_id.clone()),
                urn,
                reason: "destroy".into(),
                spec: None,
            }
        })
        .collect();
    Ok(Plan {
        stack_name: cp.stack_name.clone(),
        spec_hash: String::new(),
        infra_hash: String::new(),
        steps,
        resync_only: false,
    })
}

/// Receives the checkpoint after every completed step.
pub trait CheckpointSink {
    fn persist(&mut self, cp: &StackCheckpoint) -> Result<(), StackError>;
}

/// Keeps every persisted version in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub versions: Vec<StackCheckpoint>,
}

impl CheckpointSink for MemorySink {
    fn persist(&mut self, cp: &StackCheckpoint) -> Result<(), StackError> {
        self.versions.push(cp.clone());
        Ok(())
    }
}

/// `<stack-dir>/<name>.checkpoint.json`
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    path: PathBuf,
}

impl CheckpointStore {
    pub fn new(stack_dir: &Path, name: &str) -> Self {
        Self { path: stack_dir.join(format!("{name}.checkpoint.json")) }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn exists(&self) -> bool {
        self.path.exists()
    }

    pub fn load(&self) -> Result<Option<StackCheckpoint>, StackError> {
        match std::fs::read_to_string(&self.path) {
            Ok(text) => StackCheckpoint::from_json(&text).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(source) => Err(StackError::Io { path: self.path.clone(), source }),
        }
    }

    pub fn remove(&self) -> Result<(), StackError> {
        match std::fs::remove_file(&self.path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(source) => Err(StackError::Io { path: self.path.clone(), source }),
        }
    }
}

impl CheckpointSink for CheckpointStore {
    fn persist(&mut self, cp: &StackCheckpoint) -> Result<(), StackError> {
        fsutil::atomic_write(&self.path, cp.to_json().as_bytes())
            .map_err(|source| StackError::Io { path: self.path.clone(), source })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ExecOptions {
    /// Maximum number of independent steps in flight.
    pub parallelism: usize,
    /// Stop with `Interrupted` once this many steps have completed.
    pub interrupt_after: Option<usize>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self { parallelism: 1, interrupt_after: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExecReport {
    pub completed: usize,
    pub warnings: Vec<String>,
}

fn resolve_inputs(spec: &ResourceSpec, cp: &StackCheckpoint) -> Result<Document, StackError> {
    fn resolve(v: &Value, cp: &StackCheckpoint, urn: &Urn) -> Result<Value, StackError> {
        match v {
            Value::String(s) if s.starts_with(REF_PREFIX) => {
                let unresolved =
                    || StackError::UnresolvedReference { urn: urn.clone(), reference: s.clone() };
                let (target, key) = s[REF_PREFIX.len()..].rsplit_once('#').ok_or_else(unresolved)?;
                cp.resources
                    .iter()
                    .find(|r| r.urn.as_str() == target)
                    .and_then(|r| r.outputs.get(key))
                    .cloned()
                    .ok_or_else(unresolved)
            }
            Value::Array(items) => {
                items.iter().map(|i| resolve(i, cp, urn)).collect::<Result<_, _>>().map(Value::Array)
            }
            Value::Object(m) => m
                .iter()
                .map(|(k, i)| Ok((k.clone(), resolve(i, cp, urn)?)))
                .collect::<Result<_, _>>()
                .map(Value::Object),
            other => Ok(other.clone()),
        }
    }
    spec.inputs
        .iter()
        .map(|(k, v)| Ok((k.clone(), resolve(v, cp, &spec.urn)?)))
        .collect()
}

enum StepOutcome {
    Created(ResourceRecord),
    Deleted { warning: Option<String> },
}

fn run_step(
    step: &PlanStep,
    provider: &dyn Provider,
    cp: &StackCheckpoint,
    now: OffsetDateTime,
) -> Result<StepOutcome, StackError> {
    match step.action {
        StepAction::Create => {
            let spec = step.spec.as_ref().expect("create steps carry a spec");
            let inputs = resolve_inputs(spec, cp)?;
            let record = provider
                .create(spec.kind, &inputs)
                .map_err(|cause| StackError::Provider { urn: spec.urn.clone(), cause })?;
            Ok(StepOutcome::Created(ResourceRecord {
                urn: spec.urn.clone(),
                kind: spec.kind,
                provider_id: record.provider_id,
                input_hash: spec.input_hash(),
                depends_on: spec.depends_on.clone(),
                outputs: record.outputs,
                created_at: now,
            }))
        }
        StepAction::Delete => {
            let id = step.provider_id.as_deref().expect("delete steps carry a provider id");
            match provider.delete(id) {
                Ok(()) => Ok(StepOutcome::Deleted { warning: None }),
                Err(ProviderError::NotFound(_)) => Ok(StepOutcome::Deleted {
                    warning: Some(format!("{}: {id} already gone, treated as deleted", step.urn)),
                }),
                Err(cause) => Err(StackError::Provider { urn: step.urn.clone(), cause }),
            }
        }
    }
}

/// URNs a step must wait for among the steps of the same plan.
fn prerequisites(step: &PlanStep, plan: &Plan, cp: &StackCheckpoint) -> Vec<Urn> {
    match step.action {
        StepAction::Create => {
            let mut pre: Vec<Urn> = step.spec.as_ref().map(|s| s.depends_on.clone()).unwrap_or_default();
            // A replaced resource is deleted before it is created again.
            if plan.steps.iter().any(|s| s.action == StepAction::Delete && s.urn == step.urn) {
                pre.push(step.urn.clone());
            }
            pre
        }
        StepAction::Delete => cp
            .resources
            .iter()
            .filter(|r| r.depends_on.contains(&step.urn))
            .map(|r| r.urn.clone())
            .collect(),
    }
}

/// Runs `plan` against `provider`, updating `cp` in place and handing it to
/// `sink` after every completed step. On failure `cp` reflects exactly the
/// completed steps, and planning again resumes the run.
pub fn execute(
    plan: &Plan,
    provider: &dyn Provider,
    cp: &mut StackCheckpoint,
    sink: &mut dyn CheckpointSink,
    clock: &dyn Clock,
    opts: ExecOptions,
) -> Result<ExecReport, StackError> {
    let mut report = ExecReport::default();
    if plan.steps.is_empty() {
        return Ok(report);
    }
    if !plan.spec_hash.is_empty() {
        cp.spec_hash = Some(plan.spec_hash.clone());
        cp.infra_hash = Some(plan.infra_hash.clone());
        sink.persist(cp)?;
    }

    // Steps are tracked by (action, urn): a replacement has both.
    let key = |s: &PlanStep| (s.action == StepAction::Create, s.urn.clone());
    let mut pending: Vec<&PlanStep> = plan.steps.iter().collect();
    let width = opts.parallelism.max(1);

    while !pending.is_empty() {
        if opts.interrupt_after.is_some_and(|n| report.completed >= n) {
            return Err(StackError::Interrupted { completed: report.completed });
        }
        let in_flight: BTreeSet<(bool, Urn)> = pending.iter().map(|s| key(s)).collect();
        let mut batch: Vec<&PlanStep> = Vec::new();
        for step in &pending {
            if batch.len() == width {
                break;
            }
            let blocked = prerequisites(step, plan, cp).iter().any(|u| {
                let waiting_delete = in_flight.contains(&(false, u.clone()));
                let waiting_create = step.action == StepAction::Create
                    && u != &step.urn
                    && in_flight.contains(&(true, u.clone()));
                waiting_delete || waiting_create
            });
            if !blocked {
                batch.push(step);
            }
            if width == 1 {
                break;
            }
        }
        if let Some(limit) = opts.interrupt_after {
            batch.truncate(limit - report.completed);
        }
        if batch.is_empty() {
            return Err(StackError::InvalidGraph("no runnable step".into()));
        }

        let now = clock.now();
        let results: Vec<Result<StepOutcome, StackError>> = if batch.len() == 1 {
            vec![run_step(batch[0], provider, cp, now)]
        } else {
            let snapshot = &*cp;
            std::thread::scope(|scope| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|step| scope.spawn(move || run_step(step, provider, snapshot, now)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("step thread panicked")).collect()
            })
        };

        let mut first_error = None;
        for (step, result) in batch.iter().zip(results) {
            match result {
                Ok(StepOutcome::Created(record)) => {
                    cp.resources.push(record);
                }
                Ok(StepOutcome::Deleted { warning }) => {
                    cp.resources.retain(|r| r.urn != step.urn);
                    report.warnings.extend(warning);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                    continue;
                }
            }
            sink.persist(cp)?;
            report.completed += 1;
            let k = key(step);
            pending.retain(|s| key(s) != k);
        }
        if let Some(e) = first_error {
            return Err(e);
        }
    }
    Ok(report)
}

/// Deletes every resource in reverse dependency order. On success the
/// checkpoint has no records left.
pub fn destroy(
    cp: &mut StackCheckpoint,
    provider: &dyn Provider,
    sink: &mut dyn CheckpointSink,
    clock: &dyn Clock,
) -> Result<ExecReport, StackError> {
    let plan = plan_destroy(cp)?;
    let report = execute(&plan, provider, cp, sink, clock, ExecOptions::default())?;
    if cp.spec_hash.is_some() || cp.infra_hash.is_some() {
        cp.spec_hash = None;
        cp.infra_hash = None;
        sink.persist(cp)?;
    }
    Ok(report)
}
