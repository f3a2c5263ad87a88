//! The cluster manifest: a single declarative document holding the cluster's
//! metadata, its target environment and its GitOps source.
//!
//! ```yaml
//! apiVersion: sskuba/v1
//! kind: Cluster
//! metadata: { name: demo, domain: dev.example.org }
//! target:
//!   provider: sim
//!   region: local-1
//!   controlPlane: { count: 3, machineType: m.small }
//!   workers:      { count: 2, machineType: m.large }
//! gitops: { repository: ./fleet, branch: main, path: clusters/demo }
//! ```
//!
//! Parsing is strict: unknown keys are rejected and every required section
//! must be present. Semantic checks (DNS grammar, etcd quorum) live in
//! [`validate`], which reports violations as data.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_yaml::{Mapping, Value};

use crate::canonical;

pub const API_VERSION: &str = "sskuba/v1";
pub const KIND: &str = "Cluster";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Sim,
    Aws,
    Azure,
    Vsphere,
}

impl ProviderKind {
    pub const ALL: [ProviderKind; 4] =
        [ProviderKind::Sim, ProviderKind::Aws, ProviderKind::Azure, ProviderKind::Vsphere];

    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Sim => "sim",
            ProviderKind::Aws => "aws",
            ProviderKind::Azure => "azure",
            ProviderKind::Vsphere => "vsphere",
        }
    }
}

impl fmt::Display for ProviderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProviderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ProviderKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown provider `{s}` (expected sim, aws, azure or vsphere)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodePool {
    pub count: u32,
    pub machine_type: String,
}

impl NodePool {
    pub fn new(count: u32, machine_type: &str) -> Self {
        Self { count, machine_type: machine_type.to_string() }
    }

    pub fn empty() -> Self {
        Self { count: 0, machine_type: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GitOpsSpec {
    pub repository: String,
    pub branch: String,
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub credential_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClusterManifest {
    pub name: String,
    pub domain: String,
    pub provider: ProviderKind,
    pub region: String,
    pub control_plane: NodePool,
    pub workers: NodePool,
    pub gpu_workers: NodePool,
    pub gitops: GitOpsSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
}

impl ManifestError {
    fn schema(path: impl Into<String>, message: impl Into<String>) -> Self {
        ManifestError::Schema { path: path.into(), message: message.into() }
    }
}

// Serialized form. Field names and nesting mirror the document schema, so
// the canonical JSON of this struct is also what `spec_hash` digests.
#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Document<'a> {
    api_version: &'static str,
    kind: &'static str,
    metadata: MetadataDoc<'a>,
    target: TargetDoc<'a>,
    gitops: &'a GitOpsSpec,
}

#[derive(Serialize)]
struct MetadataDoc<'a> {
    name: &'a str,
    domain: &'a str,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct TargetDoc<'a> {
    provider: ProviderKind,
    region: &'a str,
    control_plane: &'a NodePool,
    workers: &'a NodePool,
    gpu_workers: &'a NodePool,
}

impl ClusterManifest {
    fn document(&self) -> Document<'_> {
        Document {
            api_version: API_VERSION,
            kind: KIND,
            metadata: MetadataDoc { name: &self.name, domain: &self.domain },
            target: TargetDoc {
                provider: self.provider,
                region: &self.region,
                control_plane: &self.control_plane,
                workers: &self.workers,
                gpu_workers: &self.gpu_workers,
            },
            gitops: &self.gitops,
        }
    }

    /// Renders the manifest back into the document format.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&self.document()).expect("manifest serializes")
    }

    /// Canonical JSON (sorted keys, compact).
    pub fn to_canonical_json(&self) -> Vec<u8> {
        canonical::to_canonical_bytes(&self.document())
    }

    pub fn fqdn(&self) -> String {
        fqdn(self)
    }

    pub fn spec_hash(&self) -> String {
        spec_hash(self)
    }

    /// Total nodes across all pools.
    pub fn node_count(&self) -> u32 {
        self.control_plane.count + self.workers.count + self.gpu_workers.count
    }
}

/// Parses a manifest document. Syntax errors carry the offending line;
/// schema errors carry the dotted path of the offending key.
pub fn parse_manifest(text: &str) -> Result<ClusterManifest, ManifestError> {
    let root: Value = serde_yaml::from_str(text).map_err(|e| ManifestError::Parse {
        line: e.location().map(|l| l.line()).unwrap_or(0),
        message: e.to_string(),
    })?;
    let root = as_mapping(&root, "")?;
    check_keys(root, "", &["apiVersion", "kind", "metadata", "target", "gitops"])?;

    let api_version = req_str(root, "", "apiVersion")?;
    if api_version != API_VERSION {
        return Err(ManifestError::schema("apiVersion", format!("expected `{API_VERSION}`")));
    }
    if req_str(root, "", "kind")? != KIND {
        return Err(ManifestError::schema("kind", format!("expected `{KIND}`")));
    }

    let metadata = as_mapping(req(root, "", "metadata")?, "metadata")?;
    check_keys(metadata, "metadata", &["name", "domain"])?;
    let name = req_str(metadata, "metadata", "name")?;
    let domain = req_str(metadata, "metadata", "domain")?;

    let target = as_mapping(req(root, "", "target")?, "target")?;
    check_keys(target, "target", &["provider", "region", "controlPlane", "workers", "gpuWorkers"])?;
    let provider = req_str(target, "target", "provider")?
        .parse::<ProviderKind>()
        .map_err(|m| ManifestError::schema("target.provider", m))?;
    let region = req_str(target, "target", "region")?;
    let control_plane = pool(req(target, "target", "controlPlane")?, "target.controlPlane")?;
    let workers = pool(req(target, "target", "workers")?, "target.workers")?;
    let gpu_workers = match target.get("gpuWorkers") {
        Some(v) => pool(v, "target.gpuWorkers")?,
        None => NodePool::empty(),
    };

    let gitops = as_mapping(req(root, "", "gitops")?, "gitops")?;
    check_keys(gitops, "gitops", &["repository", "branch", "path", "credentialRef"])?;
    let gitops = GitOpsSpec {
        repository: req_str(gitops, "gitops", "repository")?,
        branch: req_str(gitops, "gitops", "branch")?,
        path: req_str(gitops, "gitops", "path")?,
        credential_ref: opt_str(gitops, "gitops", "credentialRef")?,
    };

    Ok(ClusterManifest {
        name,
        domain,
        provider,
        region,
        control_plane,
        workers,
        gpu_workers,
        gitops,
    })
}

fn join(parent: &str, key: &str) -> String {
    if parent.is_empty() {
        key.to_string()
    } else {
        format!("{parent}.{key}")
    }
}

fn as_mapping<'a>(v: &'a Value, path: &str) -> Result<&'a Mapping, ManifestError> {
    v.as_mapping().ok_or_else(|| {
        ManifestError::schema(if path.is_empty() { "$" } else { path }, "expected a mapping")
    })
}

fn check_keys(m: &Mapping, path: &str, allowed: &[&str]) -> Result<(), ManifestError> {
    for key in m.keys() {
        let key = key
            .as_str()
            .ok_or_else(|| ManifestError::schema(path, "mapping keys must be strings"))?;
        if !allowed.contains(&key) {
            return Err(ManifestError::schema(join(path, key), "unknown field"));
        }
    }
    Ok(())
}

fn req<'a>(m: &'a Mapping, path: &str, key: &str) -> Result<&'a Value, ManifestError> {
    match m.get(key) {
        Some(Value::Null) | None => Err(ManifestError::schema(join(path, key), "required")),
        Some(v) => Ok(v),
    }
}

fn req_str(m: &Mapping, path: &str, key: &str) -> Result<String, ManifestError> {
    scalar_string(req(m, path, key)?, &join(path, key))
}

fn opt_str(m: &Mapping, path: &str, key: &str) -> Result<Option<String>, ManifestError> {
    match m.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => scalar_string(v, &join(path, key)).map(Some),
    }
}

fn scalar_string(v: &Value, path: &str) -> Result<String, ManifestError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        _ => Err(ManifestError::schema(path, "expected a string")),
    }
}

fn pool(v: &Value, path: &str) -> Result<NodePool, ManifestError> {
    let m = as_mapping(v, path)?;
    check_keys(m, path, &["count", "machineType"])?;
    let count_path = join(path, "count");
    let count = req(m, path, "count")?
        .as_u64()
        .and_then(|n| u32::try_from(n).ok())
        .ok_or_else(|| ManifestError::schema(&count_path, "expected a non-negative integer"))?;
    let machine_type = opt_str(m, path, "machineType")?.unwrap_or_default();
    Ok(NodePool { count, machine_type })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn messages(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.message.as_str()).collect()
    }

    fn push(&mut self, path: &str, message: &str) {
        self.violations.push(Violation { path: path.to_string(), message: message.to_string() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

/// Lowercase alphanumerics and hyphens, 1 to 63 characters, no hyphen at
/// either end.
pub fn is_dns_label(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 63
        && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
        && !s.starts_with('-')
        && !s.ends_with('-')
}

/// One or more DNS labels separated by dots, at most 253 characters.
pub fn is_dns_zone(s: &str) -> bool {
    s.len() <= 253 && s.split('.').all(is_dns_label)
}

/// Checks every manifest invariant. An empty report means the manifest is
/// valid.
pub fn validate(m: &ClusterManifest) -> ValidationReport {
    let mut report = ValidationReport::default();
    if !is_dns_label(&m.name) {
        report.push("metadata.name", "name is not a DNS label");
    }
    if !is_dns_zone(&m.domain) {
        report.push("metadata.domain", "domain is not a DNS zone");
    }
    if m.fqdn_len() > 253 {
        report.push("metadata", "fully qualified domain name exceeds 253 characters");
    }
    if m.region.trim().is_empty() {
        report.push("target.region", "region must not be empty");
    }
    if m.control_plane.count.is_multiple_of(2) {
        report.push("target.controlPlane.count", "control plane count must be odd");
    }
    for (path, p) in [
        ("target.controlPlane.machineType", &m.control_plane),
        ("target.workers.machineType", &m.workers),
        ("target.gpuWorkers.machineType", &m.gpu_workers),
    ] {
        if p.count > 0 && p.machine_type.trim().is_empty() {
            report.push(path, "machine type must be set when count is positive");
        }
    }
    if m.gitops.repository.trim().is_empty() {
        report.push("gitops.repository", "repository must not be empty");
    }
    if m.gitops.branch.trim().is_empty() {
        report.push("gitops.branch", "branch must not be empty");
    }
    if !is_confined_relative_path(&m.gitops.path) {
        report.push("gitops.path", "path must be relative without parent-directory traversal");
    }
    if let Some(cred) = &m.gitops.credential_ref {
        if cred.trim().is_empty() {
            report.push("gitops.credentialRef", "credential reference must not be empty");
        }
    }
    report
}

impl ClusterManifest {
    fn fqdn_len(&self) -> usize {
        self.name.len() + 1 + self.domain.len()
    }
}

/// True for relative paths that never climb above their root.
pub fn is_confined_relative_path(path: &str) -> bool {
    if path.starts_with('/') || path.starts_with('\\') || path.contains(':') {
        return false;
    }
    path.split(['/', '\\']).all(|seg| seg != "..")
}

pub fn fqdn(m: &ClusterManifest) -> String {
    format!("{}.{}", m.name, m.domain).to_ascii_lowercase()
}

/// SHA-256 of the manifest's canonical serialization, as 64 hex characters.
pub fn spec_hash(m: &ClusterManifest) -> String {
    canonical::sha256_hex(&m.to_canonical_json())
}
