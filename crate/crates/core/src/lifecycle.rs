//! The end-to-end cluster lifecycle: apply, plan, destroy and status over
//! one stack directory.
//!
//! Files kept per stack in the stack directory:
//!
//! | file | content |
//! |------|---------|
//! | `<name>.checkpoint.json` | resource checkpoint |
//! | `<name>.trust.sealed` | trust bundle, sealed |
//! | `<name>.breakglass.kubeconfig.sealed` | admin kubeconfig, sealed |
//! | `<name>.manifest.json` | last applied manifest |
//! | `machineconfigs/<node>.machineconfig.sealed` | per-node config, sealed |
//! | `registry.json` | access registry (token digests only) |
//!
//! The operator key that opens the sealed files is written to the key
//! directory (the stack directory unless configured otherwise) as
//! `<name>.operator.key`, mode 0600.

use std::path::{Path, PathBuf};

use rand::rngs::{OsRng, StdRng};
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use time::Duration;

use crate::access::{AccessError, AccessRegistry, DEFAULT_JOIN_TOKEN_TTL};
use crate::clock::Clock;
use crate::cluster::{ClusterError, DesiredClusterState, ObservedState, Observer, ReconcileLoop, StalenessPolicy};
use crate::fsutil::{self, LockError, StackLock};
use crate::gitops::{self, GitOpsError, RepoSnapshot, SyncResult};
use crate::machineconfig::{self, MachineConfigError};
use crate::manifest::{self, ClusterManifest, ManifestError, ValidationReport};
use crate::node::EtcdStatus;
use crate::pki::{self, CertRole, PkiError, SealPrivateKey, SealedBlob, TrustBundle};
use crate::provider::{ProviderError, ResourceKind, Target};
use crate::stack::{
    self, CheckpointStore, ExecOptions, Plan, PlanStep, PlanSummary, StackCheckpoint, StackError, StepAction,
};

pub const BREAKGLASS_IDENTITY: &str = "breakglass-admin";

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid manifest: {0}")]
    Manifest(#[from] ManifestError),
    #[error("manifest failed validation:\n{0}")]
    Invalid(ValidationReport),
    #[error("no such stack `{0}`")]
    NoSuchStack(String),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error(transparent)]
    MachineConfig(#[from] MachineConfigError),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    GitOps(#[from] GitOpsError),
    #[error(transparent)]
    Access(#[from] AccessError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("operator key {0} missing; sealed stack files cannot be opened")]
    OperatorKeyMissing(PathBuf),
    #[error("write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
}

impl LifecycleError {
    /// 1 for user errors, 2 for provider/runtime errors, 3 for divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            LifecycleError::Read { .. }
            | LifecycleError::Manifest(_)
            | LifecycleError::Invalid(_)
            | LifecycleError::NoSuchStack(_)
            | LifecycleError::OperatorKeyMissing(_) => 1,
            LifecycleError::Access(AccessError::ClusterNotRegistered(_) | AccessError::InvalidTtl) => 1,
            LifecycleError::Pki(PkiError::TtlExceedsPolicy { .. } | PkiError::InvalidSubject(_)) => 1,
            LifecycleError::Cluster(ClusterError::Diverged { .. }) => 3,
            _ => 2,
        }
    }
}

/// Where a stack's files live.
#[derive(Debug, Clone)]
pub struct StackPaths {
    pub dir: PathBuf,
    pub key_dir: PathBuf,
    pub name: String,
}

impl StackPaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self { dir: dir.to_path_buf(), key_dir: dir.to_path_buf(), name: name.to_string() }
    }

    pub fn with_key_dir(mut self, key_dir: &Path) -> Self {
        self.key_dir = key_dir.to_path_buf();
        self
    }

    fn file(&self, suffix: &str) -> PathBuf {
        self.dir.join(format!("{}.{suffix}", self.name))
    }

    pub fn checkpoint(&self) -> CheckpointStore {
        CheckpointStore::new(&self.dir, &self.name)
    }

    pub fn trust(&self) -> PathBuf {
        self.file("trust.sealed")
    }

    pub fn operator_key(&self) -> PathBuf {
        self.key_dir.join(format!("{}.operator.key", self.name))
    }

    pub fn breakglass(&self) -> PathBuf {
        self.file("breakglass.kubeconfig.sealed")
    }

    pub fn manifest_copy(&self) -> PathBuf {
        self.file("manifest.json")
    }

    pub fn machineconfigs(&self) -> PathBuf {
        self.dir.join("machineconfigs")
    }

    pub fn registry(&self) -> PathBuf {
        AccessRegistry::path_in(&self.dir)
    }
}

#[derive(Debug, Clone)]
pub struct ApplyOptions {
    pub parallelism: usize,
    /// Simulated ticks between reconcile steps.
    pub reconcile_interval: u32,
    /// Reconcile budget; defaults to ten steps per node.
    pub max_reconcile_steps: Option<u32>,
    /// Stop after this many resource steps, leaving a resumable checkpoint.
    pub interrupt_after: Option<usize>,
    /// Seed for all generated key material. `None` uses OS entropy.
    pub entropy_seed: Option<u64>,
    /// Base directory for relative GitOps repository paths.
    pub repo_base: PathBuf,
}

impl Default for ApplyOptions {
    fn default() -> Self {
        Self {
            parallelism: 1,
            reconcile_interval: 1,
            max_reconcile_steps: None,
            interrupt_after: None,
            entropy_seed: None,
            repo_base: PathBuf::from("."),
        }
    }
}

impl ApplyOptions {
    fn rng(&self) -> Box<dyn RngCore> {
        match self.entropy_seed {
            Some(seed) => Box::new(StdRng::seed_from_u64(seed)),
            None => Box::new(OsRng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Done,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub status: StageStatus,
    pub detail: String,
}

/// Receives stage and step events as they happen.
pub trait Progress {
    fn stage(&self, _record: &StageRecord) {}
    fn step(&self, _step: &PlanStep) {}
}

pub struct Quiet;
impl Progress for Quiet {}

/// Machine-readable result of one command.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub stack: String,
    pub status: String,
    pub exit_code: i32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fqdn: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec_hash: Option<String>,
    pub stages: Vec<StageRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<PlanSummary>,
    pub steps_completed: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconcile_steps: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gitops_revision: Option<String>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(command: &str, stack: &str) -> Self {
        Self {
            command: command.to_string(),
            stack: stack.to_string(),
            status: "ok".into(),
            exit_code: 0,
            fqdn: None,
            spec_hash: None,
            stages: Vec::new(),
            plan: None,
            steps_completed: 0,
            converged: None,
            reconcile_steps: None,
            gitops_revision: None,
            warnings: Vec::new(),
            error: None,
        }
    }

    pub fn fail(&mut self, err: &LifecycleError) {
        self.exit_code = err.exit_code();
        self.status = if self.exit_code == 3 { "diverged".into() } else { "error".into() };
        self.error = Some(err.to_string());
    }
}

/// Reads, parses and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<ClusterManifest, LifecycleError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| LifecycleError::Read { path: path.to_path_buf(), source })?;
    let m = manifest::parse_manifest(&text)?;
    let report = manifest::validate(&m);
    if !report.is_empty() {
        return Err(LifecycleError::Invalid(report));
    }
    Ok(m)
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> LifecycleError + '_ {
    move |source| LifecycleError::Write { path: path.to_path_buf(), source }
}

fn read_operator_key(paths: &StackPaths) -> Result<SealPrivateKey, LifecycleError> {
    let path = paths.operator_key();
    let pem = std::fs::read_to_string(&path).map_err(|_| LifecycleError::OperatorKeyMissing(path.clone()))?;
    Ok(SealPrivateKey::from_pem(&pem)?)
}

fn read_blob(path: &Path) -> Result<SealedBlob, LifecycleError> {
    let bytes = std::fs::read(path).map_err(|source| LifecycleError::Read { path: path.to_path_buf(), source })?;
    Ok(SealedBlob::from_bytes(&bytes)?)
}

/// Opens the stack's sealed trust bundle, if one exists.
pub fn open_trust(paths: &StackPaths) -> Result<Option<TrustBundle>, LifecycleError> {
    if !paths.trust().exists() {
        return Ok(None);
    }
    let key = read_operator_key(paths)?;
    Ok(Some(TrustBundle::from_sealed(&read_blob(&paths.trust())?, &key)?))
}

fn open_or_create_trust(
    paths: &StackPaths,
    clock: &dyn Clock,
    rng: &mut dyn RngCore,
) -> Result<(TrustBundle, bool), LifecycleError> {
    if let Some(bundle) = open_trust(paths)? {
        return Ok((bundle, false));
    }
    let bundle = pki::new_trust_bundle_with(&paths.name, clock, rng)?;
    let key = bundle.seal_private_key().expect("fresh bundle holds its seal key");
    let key_path = paths.operator_key();
    fsutil::atomic_write_private(&key_path, key.to_pem().as_bytes()).map_err(write_err(&key_path))?;
    let trust = paths.trust();
    fsutil::atomic_write(&trust, &bundle.to_sealed(rng)?.to_bytes()).map_err(write_err(&trust))?;
    Ok((bundle, true))
}

fn desired_plan(m: &ClusterManifest, bundle: &TrustBundle, cp: &StackCheckpoint) -> Result<Plan, LifecycleError> {
    Ok(stack::plan(&stack::desired_resources(m, bundle), cp)?)
}

struct Run<'a> {
    record: RunRecord,
    progress: &'a dyn Progress,
}

impl Run<'_> {
    fn stage(&mut self, stage: &str, status: StageStatus, detail: impl Into<String>) {
        let r = StageRecord { stage: stage.to_string(), status, detail: detail.into() };
        self.progress.stage(&r);
        self.record.stages.push(r);
    }
}

/// Creates or updates the cluster described by `m`. Every stage is
/// idempotent, so re-running after any failure resumes the lifecycle.
pub fn apply(
    m: &ClusterManifest,
    target: &dyn Target,
    paths: &StackPaths,
    clock: &dyn Clock,
    opts: &ApplyOptions,
    progress: &dyn Progress,
) -> (RunRecord, Result<(), LifecycleError>) {
    let mut run = Run { record: RunRecord::new("apply", &m.name), progress };
    run.record.fqdn = Some(m.fqdn());
    run.record.spec_hash = Some(m.spec_hash());
    let result = apply_inner(m, target, paths, clock, opts, &mut run);
    if let Err(e) = &result {
        run.record.fail(e);
    }
    (run.record, result)
}

fn apply_inner(
    m: &ClusterManifest,
    target: &dyn Target,
    paths: &StackPaths,
    clock: &dyn Clock,
    opts: &ApplyOptions,
    run: &mut Run<'_>,
) -> Result<(), LifecycleError> {
    let report = manifest::validate(m);
    if !report.is_empty() {
        return Err(LifecycleError::Invalid(report));
    }
    let mut rng = opts.rng();

    // Stack, lock and trust material.
    let _lock = StackLock::acquire(&paths.dir, &m.name)?;
    let mut store = paths.checkpoint();
    let mut cp = store.load()?.unwrap_or_else(|| StackCheckpoint::new(&m.name));
    let (bundle, fresh) = open_or_create_trust(paths, clock, &mut *rng)?;
    if cp.seal_public_key.is_none() {
        cp.seal_public_key = Some(bundle.seal_public_key().to_hex());
    }
    let plan = desired_plan(m, &bundle, &cp)?;
    run.record.plan = Some(plan.summary());
    run.stage(
        "stack",
        StageStatus::Done,
        format!("{} step(s), trust {}", plan.steps.len(), if fresh { "created" } else { "reused" }),
    );

    let mut budget = opts.interrupt_after;
    let mut phase = |run: &mut Run<'_>, cp: &mut StackCheckpoint, name: &str, keep: &dyn Fn(&PlanStep) -> bool| {
        let part = plan.filter(keep);
        if part.steps.is_empty() {
            run.stage(name, StageStatus::Skipped, "no changes");
            return Ok(());
        }
        for s in &part.steps {
            run.progress.step(s);
        }
        let exec = ExecOptions { parallelism: opts.parallelism, interrupt_after: budget };
        let before = cp.resources.len();
        let result = stack::execute(&part, target, cp, &mut store, clock, exec);
        let completed = before.abs_diff(cp.resources.len());
        run.record.steps_completed += completed;
        if let Some(b) = budget.as_mut() {
            *b = b.saturating_sub(completed);
        }
        match result {
            Ok(r) => {
                run.record.warnings.extend(r.warnings);
                run.stage(name, StageStatus::Done, format!("{} step(s)", r.completed));
                Ok(())
            }
            Err(e) => {
                run.stage(name, StageStatus::Failed, e.to_string());
                Err(LifecycleError::Stack(e))
            }
        }
    };

    // Replacements tear down first; the rest is created stage by stage.
    phase(run, &mut cp, "teardown", &|s| s.action == StepAction::Delete)?;
    phase(run, &mut cp, "network", &|s| {
        s.action == StepAction::Create && !matches!(s.kind, ResourceKind::Machine | ResourceKind::DnsRecord)
    })?;

    // Machine configs, sealed, then the machines that boot from them.
    let configs = machineconfig::render_all(m, &bundle)?;
    let dir = paths.machineconfigs();
    std::fs::create_dir_all(&dir).map_err(write_err(&dir))?;
    for cfg in &configs {
        let path = dir.join(stack::sealed_config_name(&cfg.node_name));
        fsutil::atomic_write(&path, &cfg.seal(&bundle)?.to_bytes()).map_err(write_err(&path))?;
    }
    run.stage("machineconfigs", StageStatus::Done, format!("{} sealed", configs.len()));
    phase(run, &mut cp, "machines", &|s| s.action == StepAction::Create && s.kind == ResourceKind::Machine)?;

    // Convergence: configs applied, etcd bootstrapped once, labels/taints.
    let desired = DesiredClusterState::from_manifest(m);
    let budget_steps = opts.max_reconcile_steps.unwrap_or(10 * m.node_count().max(1));
    let mut looped = ReconcileLoop::new(desired, target).with_interval(opts.reconcile_interval);
    match looped.run(budget_steps) {
        Ok(status) => {
            run.record.converged = Some(true);
            run.record.reconcile_steps = Some(status.steps_used);
            run.stage("converge", StageStatus::Done, format!("{} step(s)", status.steps_used));
        }
        Err(e) => {
            run.record.converged = Some(false);
            if let ClusterError::Diverged { status, .. } = &e {
                run.record.reconcile_steps = Some(status.steps_used);
            }
            run.stage("converge", StageStatus::Failed, e.to_string());
            return Err(e.into());
        }
    }

    let breakglass = paths.breakglass();
    if breakglass.exists() {
        run.stage("breakglass", StageStatus::Skipped, "already sealed");
    } else {
        let endpoint = machineconfig::cluster_endpoint(m);
        let kc = pki::generate_kubeconfig(&bundle, BREAKGLASS_IDENTITY, CertRole::Admin, pki::ADMIN_TTL, &endpoint, clock)?;
        let blob = pki::seal_with(kc.yaml.as_bytes(), &bundle.seal_public_key(), &mut *rng)?;
        fsutil::atomic_write(&breakglass, &blob.to_bytes()).map_err(write_err(&breakglass))?;
        run.stage("breakglass", StageStatus::Done, "admin kubeconfig sealed");
    }

    // GitOps, storage class, access agent.
    let sync = gitops::bootstrap_sync(target, &m.name, &m.gitops, &opts.repo_base)?;
    let root = gitops::resolve_repository(&sync.repository, &opts.repo_base)?;
    let snapshot = RepoSnapshot::load(&root, &sync.path)?;
    let result = gitops::sync_once(target, &m.name, &snapshot)?;
    run.record.gitops_revision = Some(result.revision.clone());
    run.stage("gitops", StageStatus::Done, describe_sync(&result));
    for e in &result.errors {
        run.record.warnings.push(format!("{}: {}", e.file, e.reason));
    }
    gitops::install_storage_class(target, &m.name, m.provider)?;
    run.stage("storage", StageStatus::Done, "default storage class");

    let registry = AccessRegistry::open(&paths.registry())?;
    let agent_present = target.app_objects(&m.name)?.contains_key(gitops::ACCESS_AGENT_ID);
    if registry.registration(&m.name).is_some() && agent_present {
        run.stage("access", StageStatus::Skipped, "already registered");
    } else {
        let token = registry.mint_join_token_with(DEFAULT_JOIN_TOKEN_TTL, clock, &mut *rng)?;
        let agent = gitops::register_access_agent(target, &registry, &m.name, &m.fqdn(), token.value(), clock)?;
        run.stage("access", StageStatus::Done, agent);
    }

    phase(run, &mut cp, "dns", &|s| s.action == StepAction::Create && s.kind == ResourceKind::DnsRecord)?;

    let copy = paths.manifest_copy();
    fsutil::atomic_write(&copy, &m.to_canonical_json()).map_err(write_err(&copy))?;
    Ok(())
}

fn describe_sync(r: &SyncResult) -> String {
    format!(
        "revision {} applied {} pruned {} errors {}",
        &r.revision[..r.revision.len().min(12)],
        r.applied.len(),
        r.pruned.len(),
        r.errors.len()
    )
}

/// Computes what `apply` would do. Never writes anything.
pub fn plan(m: &ClusterManifest, paths: &StackPaths, clock: &dyn Clock) -> Result<Plan, LifecycleError> {
    let report = manifest::validate(m);
    if !report.is_empty() {
        return Err(LifecycleError::Invalid(report));
    }
    let cp = paths.checkpoint().load()?.unwrap_or_else(|| StackCheckpoint::new(&m.name));
    let bundle = match open_trust(paths)? {
        Some(b) => b,
        // No trust material yet: everything is a create regardless of keys.
        None => pki::new_trust_bundle(&m.name, clock)?,
    };
    desired_plan(m, &bundle, &cp)
}

/// Tears down every resource of a stack and removes its local files.
pub fn destroy(
    name: &str,
    target: &dyn Target,
    paths: &StackPaths,
    clock: &dyn Clock,
    progress: &dyn Progress,
) -> (RunRecord, Result<(), LifecycleError>) {
    let mut run = Run { record: RunRecord::new("destroy", name), progress };
    let result = destroy_inner(name, target, paths, clock, &mut run);
    if let Err(e) = &result {
        run.record.fail(e);
    }
    (run.record, result)
}

fn destroy_inner(
    name: &str,
    target: &dyn Target,
    paths: &StackPaths,
    clock: &dyn Clock,
    run: &mut Run<'_>,
) -> Result<(), LifecycleError> {
    let _lock = StackLock::acquire(&paths.dir, name)?;
    let mut store = paths.checkpoint();
    let Some(mut cp) = store.load()? else {
        if paths.manifest_copy().exists() || paths.trust().exists() {
            remove_local_files(paths)?;
            run.stage("files", StageStatus::Done, "removed");
            return Ok(());
        }
        return Err(LifecycleError::NoSuchStack(name.to_string()));
    };
    let plan = stack::plan_destroy(&cp)?;
    for s in &plan.steps {
        run.progress.step(s);
    }
    run.record.plan = Some(plan.summary());
    match stack::destroy(&mut cp, target, &mut store, clock) {
        Ok(report) => {
            run.record.steps_completed = report.completed;
            run.record.warnings.extend(report.warnings);
            run.stage("teardown", StageStatus::Done, format!("{} step(s)", report.completed));
        }
        Err(e) => {
            run.stage("teardown", StageStatus::Failed, e.to_string());
            return Err(e.into());
        }
    }
    if paths.registry().exists() {
        AccessRegistry::open(&paths.registry())?.deregister(name)?;
    }
    store.remove()?;
    remove_local_files(paths)?;
    run.stage("files", StageStatus::Done, "removed");
    Ok(())
}

fn remove_local_files(paths: &StackPaths) -> Result<(), LifecycleError> {
    let remove = |p: &Path| match std::fs::remove_file(p) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(LifecycleError::Write { path: p.to_path_buf(), source: e }),
        _ => Ok(()),
    };
    remove(&paths.trust())?;
    remove(&paths.breakglass())?;
    remove(&paths.manifest_copy())?;
    remove(&paths.operator_key())?;
    let prefix = format!("{}-", paths.name);
    if let Ok(entries) = std::fs::read_dir(paths.machineconfigs()) {
        for entry in entries.flatten() {
            if entry.file_name().to_string_lossy().starts_with(&prefix) {
                remove(&entry.path())?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackStatus {
    pub stack: String,
    pub fqdn: String,
    pub spec_hash: Option<String>,
    pub resources: usize,
    pub converged: bool,
    pub ready_nodes: usize,
    pub desired_nodes: usize,
    pub etcd: EtcdStatus,
    pub observed: ObservedState,
    pub gitops_revision: Option<String>,
    pub dns_record: Option<String>,
}

/// Observes a stack without changing it.
pub fn status(name: &str, target: &dyn Target, paths: &StackPaths) -> Result<StackStatus, LifecycleError> {
    let copy = paths.manifest_copy();
    let text = std::fs::read_to_string(&copy).map_err(|_| LifecycleError::NoSuchStack(name.to_string()))?;
    let m: ClusterManifest =
        manifest::parse_manifest(&text).map_err(|_| LifecycleError::NoSuchStack(name.to_string()))?;
    let cp = paths.checkpoint().load()?.unwrap_or_else(|| StackCheckpoint::new(name));
    let desired = DesiredClusterState::from_manifest(&m);
    let observed = Observer::new(StalenessPolicy::default()).observe(target, name);
    let ready = observed.nodes.iter().filter(|n| n.phase == crate::node::NodePhase::Ready).count();
    let gitops_revision = target.sync_state(name).ok().flatten().and_then(|s| s.revision);
    let dns_record = cp
        .resources
        .iter()
        .find(|r| r.kind == ResourceKind::DnsRecord)
        .map(|r| r.provider_id.clone());
    Ok(StackStatus {
        stack: name.to_string(),
        fqdn: m.fqdn(),
        spec_hash: cp.spec_hash.clone(),
        resources: cp.resources.len(),
        converged: crate::cluster::is_converged(&desired, &observed),
        ready_nodes: ready,
        desired_nodes: desired.nodes.len(),
        etcd: observed.etcd,
        observed,
        gitops_revision,
        dns_record,
    })
}

/// Opens the sealed break-glass kubeconfig with the operator key.
pub fn breakglass_kubeconfig(paths: &StackPaths) -> Result<String, LifecycleError> {
    let path = paths.breakglass();
    if !path.exists() {
        return Err(LifecycleError::NoSuchStack(paths.name.clone()));
    }
    let key = read_operator_key(paths)?;
    let plain = pki::unseal(&read_blob(&path)?, &key)?;
    Ok(String::from_utf8_lossy(&plain).into_owned())
}

/// Short-lived user kubeconfig for a registered cluster.
pub fn user_kubeconfig(
    name: &str,
    identity: &str,
    ttl: Duration,
    paths: &StackPaths,
    clock: &dyn Clock,
) -> Result<String, LifecycleError> {
    let registry = AccessRegistry::open(&paths.registry())?;
    if registry.registration(name).is_none() {
        return Err(AccessError::ClusterNotRegistered(name.to_string()).into());
    }
    let bundle = open_trust(paths)?.ok_or_else(|| LifecycleError::NoSuchStack(name.to_string()))?;
    Ok(registry.issue_user_credential(&bundle, identity, name, ttl, clock)?.yaml)
}
