//! GitOps sync: install the controllers, record a sync configuration and
//! keep the cluster's application state equal to a manifest tree.
//!
//! A repository snapshot is a directory of YAML or JSON manifests. Every
//! object applied by sync carries the `managed-by: sskuba-sync` ownership
//! label, and only objects with that label are ever pruned.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::access::{AccessError, AccessRegistry};
use crate::canonical;
use crate::clock::Clock;
use crate::manifest::{is_confined_relative_path, GitOpsSpec, ProviderKind};
use crate::provider::{AppObject, ProviderError, SyncRecord, Target};

pub const SYNC_OWNER: &str = "sskuba-sync";
pub const BOOTSTRAP_OWNER: &str = "sskuba-bootstrap";
pub const ACCESS_OWNER: &str = "sskuba-access";
pub const OWNER_LABEL: &str = "managed-by";
pub const ACCESS_AGENT_ID: &str = "Deployment/sskuba-access/access-agent";
pub const DEFAULT_INTERVAL_TICKS: u32 = 1;

const FLUX_CONTROLLERS: [&str; 2] = ["source-controller", "kustomize-controller"];

#[derive(Debug, thiserror::Error)]
pub enum GitOpsError {
    #[error("repository `{0}` unreachable")]
    RepoUnreachable(String),
    #[error("credential `{0}` missing or empty in the provider secret store")]
    AuthFailed(String),
    #[error("sync path `{0}` escapes the repository root")]
    PathEscapes(String),
    #[error("sync not bootstrapped for cluster `{0}`")]
    NotBootstrapped(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Access(#[from] AccessError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncConfig {
    pub repository: String,
    pub branch: String,
    pub path: String,
    pub interval_ticks: u32,
    pub credential_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileError {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SyncResult {
    pub revision: String,
    pub applied: Vec<String>,
    pub pruned: Vec<String>,
    pub errors: Vec<FileError>,
}

impl SyncResult {
    pub fn is_noop(&self) -> bool {
        self.applied.is_empty() && self.pruned.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoFile {
    /// Path relative to the sync root, `/`-separated.
    pub path: String,
    pub content: Vec<u8>,
}

/// The files under a repository's sync path at one point in time.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RepoSnapshot {
    pub files: Vec<RepoFile>,
}

fn is_manifest_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("yaml" | "yml" | "json"))
}

fn is_remote(repository: &str) -> bool {
    repository.contains("://") || repository.starts_with("git@")
}

/// Resolves a repository locator to a local directory. Relative paths are
/// taken against `base`.
pub fn resolve_repository(repository: &str, base: &Path) -> Result<PathBuf, GitOpsError> {
    if is_remote(repository) {
        // Remote fetching is out of reach offline; point at a local checkout.
        return Err(GitOpsError::RepoUnreachable(repository.to_string()));
    }
    let p = Path::new(repository);
    let dir = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    if !dir.is_dir() {
        return Err(GitOpsError::RepoUnreachable(repository.to_string()));
    }
    Ok(dir)
}

impl RepoSnapshot {
    /// Reads every manifest file under `root/path`, sorted by path.
    pub fn load(root: &Path, path: &str) -> Result<Self, GitOpsError> {
        if !is_confined_relative_path(path) {
            return Err(GitOpsError::PathEscapes(path.to_string()));
        }
        let dir = root.join(path);
        if !dir.is_dir() {
            return Err(GitOpsError::RepoUnreachable(dir.display().to_string()));
        }
        let mut files = Vec::new();
        for entry in walkdir::WalkDir::new(&dir).sort_by_file_name() {
            let entry = entry.map_err(|e| GitOpsError::RepoUnreachable(e.to_string()))?;
            if !entry.file_type().is_file() || !is_manifest_file(entry.path()) {
                continue;
            }
            let rel = entry.path().strip_prefix(&dir).expect("walk stays under root");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            let content = std::fs::read(entry.path())
                .map_err(|e| GitOpsError::RepoUnreachable(format!("{}: {e}", entry.path().display())))?;
            files.push(RepoFile { path: rel, content });
        }
        Ok(Self { files })
    }

    /// Content digest of the tree: SHA-256 over the sorted per-file
    /// digests. File names and order do not contribute.
    pub fn revision(&self) -> String {
        let mut digests: Vec<String> = self.files.iter().map(|f| canonical::sha256_hex(&f.content)).collect();
        digests.sort();
        canonical::sha256_hex(digests.join("\n").as_bytes())
    }

    /// Every document in the tree, parsed, plus one error per bad file.
    pub fn documents(&self) -> (Vec<(String, Value)>, Vec<FileError>) {
        let mut docs = Vec::new();
        let mut errors = Vec::new();
        for f in &self.files {
            match parse_file(f) {
                Ok(parsed) => docs.extend(parsed.into_iter().map(|d| (f.path.clone(), d))),
                Err(reason) => errors.push(FileError { file: f.path.clone(), reason }),
            }
        }
        (docs, errors)
    }
}

fn parse_file(f: &RepoFile) -> Result<Vec<Value>, String> {
    let text = std::str::from_utf8(&f.content).map_err(|e| format!("not UTF-8: {e}"))?;
    let docs: Vec<Value> = if f.path.ends_with(".json") {
        vec![serde_json::from_str(text).map_err(|e| e.to_string())?]
    } else {
        let mut out = Vec::new();
        for doc in serde_yaml::Deserializer::from_str(text) {
            let v = Value::deserialize(doc).map_err(|e| e.to_string())?;
            if !v.is_null() {
                out.push(v);
            }
        }
        out
    };
    if docs.is_empty() {
        return Err("no documents".into());
    }
    for d in &docs {
        object_id(d)?;
    }
    Ok(docs)
}

fn str_at<'a>(v: &'a Value, pointer: &str) -> Option<&'a str> {
    v.pointer(pointer).and_then(Value::as_str).filter(|s| !s.is_empty())
}

/// `kind/[namespace/]name`
pub fn object_id(doc: &Value) -> Result<String, String> {
    if !doc.is_object() {
        return Err("document is not a mapping".into());
    }
    str_at(doc, "/apiVersion").ok_or("missing apiVersion")?;
    let kind = str_at(doc, "/kind").ok_or("missing kind")?;
    let name = str_at(doc, "/metadata/name").ok_or("missing metadata.name")?;
    Ok(match str_at(doc, "/metadata/namespace") {
        Some(ns) => format!("{kind}/{ns}/{name}"),
        None => format!("{kind}/{name}"),
    })
}

fn owned_object(kind: &str, name: &str, owner: &str, content: &Value, source: Option<String>) -> AppObject {
    AppObject {
        kind: kind.to_string(),
        name: name.to_string(),
        digest: canonical::digest_of(content),
        owner: owner.to_string(),
        source,
    }
}

/// Installs the sync controllers and records the sync configuration.
/// Relative repository paths are resolved against `base`.
pub fn bootstrap_sync(
    target: &dyn Target,
    cluster: &str,
    spec: &GitOpsSpec,
    base: &Path,
) -> Result<SyncConfig, GitOpsError> {
    if let Some(cref) = &spec.credential_ref {
        match target.secret_get(cref) {
            Ok(v) if !v.is_empty() => {}
            Ok(_) | Err(ProviderError::SecretNotFound(_)) => {
                return Err(GitOpsError::AuthFailed(cref.clone()));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let root = resolve_repository(&spec.repository, base)?;
    if !is_confined_relative_path(&spec.path) {
        return Err(GitOpsError::PathEscapes(spec.path.clone()));
    }
    if !root.join(&spec.path).is_dir() {
        return Err(GitOpsError::RepoUnreachable(format!("{}/{}", spec.repository, spec.path)));
    }

    for controller in FLUX_CONTROLLERS {
        let id = format!("Deployment/flux-system/{controller}");
        let content = serde_json::json!({ "controller": controller, "namespace": "flux-system" });
        target.app_apply(cluster, &id, owned_object("Deployment", controller, BOOTSTRAP_OWNER, &content, None))?;
    }
    let config = SyncConfig {
        repository: spec.repository.clone(),
        branch: spec.branch.clone(),
        path: spec.path.clone(),
        interval_ticks: DEFAULT_INTERVAL_TICKS,
        credential_ref: spec.credential_ref.clone(),
    };
    let previous = target.sync_state(cluster)?.and_then(|s| s.revision);
    target.set_sync_state(
        cluster,
        SyncRecord {
            repository: config.repository.clone(),
            branch: config.branch.clone(),
            path: config.path.clone(),
            interval_ticks: config.interval_ticks,
            credential_ref: config.credential_ref.clone(),
            revision: previous,
        },
    )?;
    Ok(config)
}

/// Makes the cluster's sync-owned objects equal to `snapshot`.
pub fn sync_once(target: &dyn Target, cluster: &str, snapshot: &RepoSnapshot) -> Result<SyncResult, GitOpsError> {
    let mut record = target
        .sync_state(cluster)?
        .ok_or_else(|| GitOpsError::NotBootstrapped(cluster.to_string()))?;
    let current = target.app_objects(cluster)?;
    let (docs, mut errors) = snapshot.documents();
    let errored: BTreeSet<String> = errors.iter().map(|e| e.file.clone()).collect();

    let mut wanted: BTreeMap<String, AppObject> = BTreeMap::new();
    for (file, doc) in &docs {
        let id = object_id(doc).expect("validated while parsing");
        let kind = str_at(doc, "/kind").unwrap_or_default();
        let name = str_at(doc, "/metadata/name").unwrap_or_default();
        let mut labelled = doc.clone();
        labelled["metadata"]
            .as_object_mut()
            .expect("metadata is a mapping")
            .entry("labels")
            .or_insert_with(|| Value::Object(Default::default()));
        labelled["metadata"]["labels"][OWNER_LABEL] = Value::String(SYNC_OWNER.into());
        if wanted.contains_key(&id) {
            errors.push(FileError { file: file.clone(), reason: format!("duplicate object {id}") });
            continue;
        }
        wanted.insert(id, owned_object(kind, name, SYNC_OWNER, &labelled, Some(file.clone())));
    }

    let mut applied = Vec::new();
    for (id, obj) in &wanted {
        match current.get(id) {
            Some(existing) if existing.owner != SYNC_OWNER => {
                errors.push(FileError {
                    file: obj.source.clone().unwrap_or_default(),
                    reason: format!("{id} is owned by {}", existing.owner),
                });
            }
            Some(existing) if existing == obj => {}
            _ => {
                target.app_apply(cluster, id, obj.clone())?;
                applied.push(id.clone());
            }
        }
    }

    let mut pruned = Vec::new();
    for (id, obj) in &current {
        let from_errored = obj.source.as_ref().is_some_and(|s| errored.contains(s));
        if obj.owner == SYNC_OWNER && !wanted.contains_key(id) && !from_errored {
            target.app_delete(cluster, id)?;
            pruned.push(id.clone());
        }
    }

    let revision = snapshot.revision();
    record.revision = Some(revision.clone());
    target.set_sync_state(cluster, record)?;
    Ok(SyncResult { revision, applied, pruned, errors })
}

/// Installs the cluster's default storage class, parameterized by the
/// provider's volume driver.
pub fn install_storage_class(target: &dyn Target, cluster: &str, provider: ProviderKind) -> Result<String, GitOpsError> {
    let id = "StorageClass/standard".to_string();
    let driver = match provider {
        ProviderKind::Sim => "sim.sskuba.io/volume",
        ProviderKind::Aws => "ebs.csi.aws.com",
        ProviderKind::Azure => "disk.csi.azure.com",
        ProviderKind::Vsphere => "csi.vsphere.vmware.com",
    };
    let content = serde_json::json!({ "name": "standard", "provisioner": driver, "default": true });
    target.app_apply(cluster, &id, owned_object("StorageClass", "standard", BOOTSTRAP_OWNER, &content, None))?;
    Ok(id)
}

/// Redeems `token` for `cluster` and records the access agent in the
/// cluster's application state. Returns the agent id.
pub fn register_access_agent(
    target: &dyn Target,
    registry: &AccessRegistry,
    cluster: &str,
    endpoint_fqdn: &str,
    token: &str,
    clock: &dyn Clock,
) -> Result<String, GitOpsError> {
    let reg = registry.redeem(token, cluster, endpoint_fqdn, clock)?;
    let content = serde_json::json!({ "agent_id": reg.agent_id, "endpoint": endpoint_fqdn });
    target.app_apply(
        cluster,
        ACCESS_AGENT_ID,
        owned_object("Deployment", "access-agent", ACCESS_OWNER, &content, None),
    )?;
    Ok(reg.agent_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::provider::{ClusterRuntime, Document, Provider, ResourceKind, SimConfig, Simulator};
    use serde_json::json;
    use time::Duration;

    fn sim_with_cluster() -> Simulator {
        let sim = Simulator::new(SimConfig::default());
        let inputs: Document = json!({
            "image": "talos-v1", "machine_type": "m", "config_ref": "x", "cluster": "demo",
            "name": "demo-cp-0", "role": "control_plane",
        })
        .as_object()
        .unwrap()
        .clone()
        .into_iter()
        .collect();
        sim.create(ResourceKind::Machine, &inputs).unwrap();
        sim
    }

    fn spec(repo: &str) -> GitOpsSpec {
        GitOpsSpec { repository: repo.into(), branch: "main".into(), path: "apps".into(), credential_ref: None }
    }

    fn write(dir: &Path, rel: &str, body: &str) {
        let p = dir.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, body).unwrap();
    }

    fn manifest(kind: &str, name: &str) -> String {
        format!("apiVersion: v1\nkind: {kind}\nmetadata:\n  name: {name}\n  namespace: apps\n")
    }

    #[test]
    fn bootstrap_then_sync_two_files() {
        let repo = tempfile::tempdir().unwrap();
        write(repo.path(), "apps/a.yaml", &manifest("ConfigMap", "a"));
        write(repo.path(), "apps/b.yml", &manifest("Service", "b"));
        write(repo.path(), "apps/README.md", "ignored");
        let sim = sim_with_cluster();
        let cfg = bootstrap_sync(&sim, "demo", &spec("."), repo.path()).unwrap();
        assert_eq!(cfg.branch, "main");
        assert!(sim.sync_state("demo").unwrap().is_some());

        let snap = RepoSnapshot::load(repo.path(), "apps").unwrap();
        assert_eq!(snap.files.len(), 2);
        let r = sync_once(&sim, "demo", &snap).unwrap();
        assert_eq!(r.applied, vec!["ConfigMap/apps/a", "Service/apps/b"]);
        assert_eq!(sim.sync_state("demo").unwrap().unwrap().revision, Some(r.revision.clone()));

        let again = sync_once(&sim, "demo", &snap).unwrap();
        assert!(again.is_noop());
        assert_eq!(again.revision, r.revision);
    }

    #[test]
    fn bootstrap_errors() {
        let sim = sim_with_cluster();
        let repo = tempfile::tempdir().unwrap();
        assert!(matches!(
            bootstrap_sync(&sim, "demo", &spec("./missing"), repo.path()),
            Err(GitOpsError::RepoUnreachable(_))
        ));
        assert!(matches!(
            bootstrap_sync(&sim, "demo", &spec("https://git.example.org/fleet.git"), repo.path()),
            Err(GitOpsError::RepoUnreachable(_))
        ));
        write(repo.path(), "apps/a.yaml", &manifest("ConfigMap", "a"));
        let mut s = spec(".");
        s.credential_ref = Some("git-token".into());
        assert!(matches!(bootstrap_sync(&sim, "demo", &s, repo.path()), Err(GitOpsError::AuthFailed(_))));
        sim.secret_put("git-token", "t0ken").unwrap();
        bootstrap_sync(&sim, "demo", &s, repo.path()).unwrap();
    }

    #[test]
    fn removed_file_is_pruned_and_foreign_objects_survive() {
        let repo = tempfile::tempdir().unwrap();
        write(repo.path(), "apps/a.yaml", &manifest("ConfigMap", "a"));
        write(repo.path(), "apps/b.yaml", &manifest("ConfigMap", "b"));
        let sim = sim_with_cluster();
        bootstrap_sync(&sim, "demo", &spec("."), repo.path()).unwrap();
        let registry = AccessRegistry::in_memory();
        let clock = ManualClock::at_epoch();
        let token = registry.mint_join_token(Duration::minutes(5), &clock).unwrap();
        register_access_agent(&sim, &registry, "demo", "demo.x", token.value(), &clock).unwrap();

        sync_once(&sim, "demo", &RepoSnapshot::load(repo.path(), "apps").unwrap()).unwrap();
        std::fs::remove_file(repo.path().join("apps/b.yaml")).unwrap();
        let r = sync_once(&sim, "demo", &RepoSnapshot::load(repo.path(), "apps").unwrap()).unwrap();
        assert_eq!(r.pruned, vec!["ConfigMap/apps/b"]);
        assert!(r.applied.is_empty());
        let objects = sim.app_objects("demo").unwrap();
        assert!(objects.contains_key("Deployment/sskuba-access/access-agent"));
        assert!(objects.contains_key("Deployment/flux-system/source-controller"));

        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir(empty.path().join("apps")).unwrap();
        sync_once(&sim, "demo", &RepoSnapshot::load(empty.path(), "apps").unwrap()).unwrap();
        let objects = sim.app_objects("demo").unwrap();
        assert_eq!(objects.len(), 3, "bootstrap and access objects are never pruned");
    }

    #[test]
    fn malformed_file_is_reported_and_valid_ones_apply() {
        let repo = tempfile::tempdir().unwrap();
        write(repo.path(), "apps/good.yaml", &manifest("ConfigMap", "good"));
        write(repo.path(), "apps/bad.yaml", "kind: [unclosed\n");
        write(repo.path(), "apps/nameless.json", r#"{"apiVersion":"v1","kind":"ConfigMap","metadata":{}}"#);
        let sim = sim_with_cluster();
        bootstrap_sync(&sim, "demo", &spec("."), repo.path()).unwrap();
        let r = sync_once(&sim, "demo", &RepoSnapshot::load(repo.path(), "apps").unwrap()).unwrap();
        assert_eq!(r.applied, vec!["ConfigMap/apps/good"]);
        let files: Vec<&str> = r.errors.iter().map(|e| e.file.as_str()).collect();
        assert_eq!(files, vec!["bad.yaml", "nameless.json"]);
    }

    #[test]
    fn revision_ignores_names_and_order() {
        let a = RepoSnapshot {
            files: vec![
                RepoFile { path: "x.yaml".into(), content: b"one".to_vec() },
                RepoFile { path: "y.yaml".into(), content: b"two".to_vec() },
            ],
        };
        let b = RepoSnapshot {
            files: vec![
                RepoFile { path: "q.yaml".into(), content: b"two".to_vec() },
                RepoFile { path: "p.yaml".into(), content: b"one".to_vec() },
            ],
        };
        assert_eq!(a.revision(), b.revision());
    }

    #[test]
    fn sync_requires_bootstrap() {
        let sim = sim_with_cluster();
        assert!(matches!(
            sync_once(&sim, "demo", &RepoSnapshot::default()),
            Err(GitOpsError::NotBootstrapped(_))
        ));
    }

    #[test]
    fn escaping_paths_are_rejected() {
        let repo = tempfile::tempdir().unwrap();
        assert!(matches!(RepoSnapshot::load(repo.path(), "../etc"), Err(GitOpsError::PathEscapes(_))));
    }
}
