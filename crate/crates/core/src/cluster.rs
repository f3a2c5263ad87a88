//! The reconciliation engine.
//!
//! [`reconcile_step`] compares desired and observed cluster state and
//! returns the actions that move one toward the other. It is pure; a
//! [`ReconcileLoop`] observes the target, executes the actions and advances
//! simulated time until the step returns nothing.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::machineconfig::{cluster_endpoint, labels_and_taints};
use crate::manifest::ClusterManifest;
use crate::node::{node_name, EtcdStatus, Labels, NodePhase, NodeRole, Taint};
use crate::provider::{ClusterRuntime, ObservedNode, ProviderError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesiredNode {
    pub name: String,
    pub role: NodeRole,
    pub labels: Labels,
    pub taints: Vec<Taint>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DesiredClusterState {
    pub cluster: String,
    pub nodes: Vec<DesiredNode>,
    pub endpoint: String,
    pub gitops_revision_target: Option<String>,
}

impl DesiredClusterState {
    pub fn from_manifest(m: &ClusterManifest) -> Self {
        let mut nodes = Vec::new();
        for (role, pool) in [
            (NodeRole::ControlPlane, &m.control_plane),
            (NodeRole::Worker, &m.workers),
            (NodeRole::GpuWorker, &m.gpu_workers),
        ] {
            let (labels, taints) = labels_and_taints(role);
            for i in 0..pool.count {
                nodes.push(DesiredNode {
                    name: node_name(&m.name, role, i),
                    role,
                    labels: labels.clone(),
                    taints: taints.clone(),
                });
            }
        }
        Self { cluster: m.name.clone(), nodes, endpoint: cluster_endpoint(m), gitops_revision_target: None }
    }

    /// Unique node names and at least one control-plane node.
    pub fn validate(&self) -> Result<(), ClusterError> {
        let mut seen = BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert(&n.name) {
                return Err(ClusterError::InvalidDesired(format!("duplicate node `{}`", n.name)));
            }
        }
        if !self.nodes.iter().any(|n| n.role == NodeRole::ControlPlane) {
            return Err(ClusterError::InvalidDesired("no control-plane node".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ObservedState {
    pub nodes: Vec<ObservedNode>,
    pub etcd: EtcdStatus,
    /// Ticks between when this observation was taken and when it was
    /// returned.
    pub observation_age: u32,
    pub stale: bool,
}

impl ObservedState {
    pub fn node(&self, name: &str) -> Option<&ObservedNode> {
        self.nodes.iter().find(|n| n.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActionKind {
    ApplyConfig,
    BootstrapEtcd,
    ApplyLabelsTaints,
    Wait,
    RecreateNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Action {
    RecreateNode { node: String },
    ApplyConfig { node: String },
    BootstrapEtcd { node: String },
    ApplyLabelsTaints { node: String, labels: Labels, taints: Vec<Taint> },
    /// Nothing to do but the cluster has not converged yet.
    Wait { cluster: String },
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::RecreateNode { .. } => ActionKind::RecreateNode,
            Action::ApplyConfig { .. } => ActionKind::ApplyConfig,
            Action::BootstrapEtcd { .. } => ActionKind::BootstrapEtcd,
            Action::ApplyLabelsTaints { .. } => ActionKind::ApplyLabelsTaints,
            Action::Wait { .. } => ActionKind::Wait,
        }
    }

    pub fn target(&self) -> &str {
        match self {
            Action::RecreateNode { node }
            | Action::ApplyConfig { node }
            | Action::BootstrapEtcd { node }
            | Action::ApplyLabelsTaints { node, .. } => node,
            Action::Wait { cluster } => cluster,
        }
    }
}

fn node_matches(d: &DesiredNode, o: &ObservedNode) -> bool {
    let mut want = d.taints.clone();
    let mut have = o.taints.clone();
    want.sort();
    have.sort();
    o.labels == d.labels && want == have
}

/// True when every desired node is Ready with its labels and taints and
/// etcd is bootstrapped.
pub fn is_converged(desired: &DesiredClusterState, observed: &ObservedState) -> bool {
    observed.etcd == EtcdStatus::Bootstrapped
        && desired.nodes.iter().all(|d| {
            observed.node(&d.name).is_some_and(|o| o.phase == NodePhase::Ready && node_matches(d, o))
        })
}

/// Actions that move `observed` toward `desired`. Empty exactly when the
/// cluster has converged.
pub fn reconcile_step(desired: &DesiredClusterState, observed: &ObservedState) -> Vec<Action> {
    let mut actions = Vec::new();
    let present: BTreeMap<&str, &ObservedNode> =
        observed.nodes.iter().map(|n| (n.name.as_str(), n)).collect();

    let quorum_lost = !desired
        .nodes
        .iter()
        .any(|d| d.role == NodeRole::ControlPlane && present.contains_key(d.name.as_str()));
    if quorum_lost {
        // Replace, don't repair: the whole node set is rebuilt.
        return desired.nodes.iter().map(|d| Action::RecreateNode { node: d.name.clone() }).collect();
    }

    for d in &desired.nodes {
        match present.get(d.name.as_str()) {
            None => actions.push(Action::RecreateNode { node: d.name.clone() }),
            Some(o) if o.phase == NodePhase::Provisioned => {
                actions.push(Action::ApplyConfig { node: d.name.clone() })
            }
            Some(o) if o.phase >= NodePhase::Joined && !node_matches(d, o) => {
                actions.push(Action::ApplyLabelsTaints {
                    node: d.name.clone(),
                    labels: d.labels.clone(),
                    taints: d.taints.clone(),
                })
            }
            Some(_) => {}
        }
    }

    if observed.etcd == EtcdStatus::Absent {
        let first_ready_cp = desired.nodes.iter().find(|d| {
            d.role == NodeRole::ControlPlane
                && present.get(d.name.as_str()).is_some_and(|o| o.phase == NodePhase::ConfigApplied)
        });
        if let Some(cp) = first_ready_cp {
            actions.push(Action::BootstrapEtcd { node: cp.name.clone() });
        }
    }

    if actions.is_empty() && !is_converged(desired, observed) {
        actions.push(Action::Wait { cluster: desired.cluster.clone() });
    }
    actions
}

/// How far observations lag behind the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StalenessPolicy {
    /// Observations are returned this many calls after they were taken.
    pub lag: u32,
}

/// Observes a cluster through a staleness policy. When the target cannot
/// be observed the previous observation is returned, marked stale.
#[derive(Debug, Default)]
pub struct Observer {
    policy: StalenessPolicy,
    history: VecDeque<ObservedState>,
    last: Option<ObservedState>,
}

impl Observer {
    pub fn new(policy: StalenessPolicy) -> Self {
        Self { policy, history: VecDeque::new(), last: None }
    }

    pub fn observe(&mut self, runtime: &dyn ClusterRuntime, cluster: &str) -> ObservedState {
        let fresh = match runtime.observe_nodes(cluster) {
            Ok(o) => ObservedState { nodes: o.nodes, etcd: o.etcd, observation_age: 0, stale: false },
            Err(_) => {
                let mut prev = self.last.clone().unwrap_or_default();
                prev.stale = true;
                prev.observation_age += 1;
                self.last = Some(prev.clone());
                return prev;
            }
        };
        self.history.push_back(fresh);
        while self.history.len() > self.policy.lag as usize + 1 {
            self.history.pop_front();
        }
        let mut out = self.history.front().cloned().expect("just pushed");
        // Once nothing changed over the lag window the lagged view is current.
        let settled = self.history.iter().all(|h| h.nodes == out.nodes && h.etcd == out.etcd);
        out.observation_age = if settled { 0 } else { (self.history.len() - 1) as u32 };
        out.stale = out.observation_age > 0;
        self.last = Some(out.clone());
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("cluster did not converge within {max_steps} step(s)")]
    Diverged { max_steps: u32, status: Box<ClusterStatus> },
    #[error("invalid desired state: {0}")]
    InvalidDesired(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ActionOutcome {
    pub step: u32,
    pub action: Action,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClusterStatus {
    pub converged: bool,
    pub steps_used: u32,
    pub observed: ObservedState,
    pub actions: Vec<ActionOutcome>,
}

/// One reconcile loop per cluster; the sole issuer of actions.
pub struct ReconcileLoop<'a> {
    desired: DesiredClusterState,
    runtime: &'a dyn ClusterRuntime,
    observer: Observer,
    interval: u32,
    steps: u32,
    etcd_issued: bool,
    log: Vec<ActionOutcome>,
    last: ObservedState,
}

impl<'a> ReconcileLoop<'a> {
    pub fn new(desired: DesiredClusterState, runtime: &'a dyn ClusterRuntime) -> Self {
        Self {
            desired,
            runtime,
            observer: Observer::default(),
            interval: 1,
            steps: 0,
            etcd_issued: false,
            log: Vec::new(),
            last: ObservedState::default(),
        }
    }

    pub fn with_staleness(mut self, policy: StalenessPolicy) -> Self {
        self.observer = Observer::new(policy);
        self
    }

    /// Simulated ticks advanced after each step.
    pub fn with_interval(mut self, ticks: u32) -> Self {
        self.interval = ticks.max(1);
        self
    }

    /// Observe, act, advance time. Returns true once a fresh observation
    /// shows the fixed point; nothing is executed in that step.
    pub fn step(&mut self) -> bool {
        self.steps += 1;
        let observed = self.observer.observe(self.runtime, &self.desired.cluster);
        self.last = observed.clone();
        if observed.etcd == EtcdStatus::Bootstrapped {
            self.etcd_issued = true;
        }
        let actions = reconcile_step(&self.desired, &observed);
        if actions.is_empty() && !observed.stale {
            return true;
        }
        for action in actions {
            if action.kind() == ActionKind::BootstrapEtcd && self.etcd_issued {
                continue;
            }
            let result = self.execute(&action);
            if action.kind() == ActionKind::BootstrapEtcd
                && matches!(result, Ok(()) | Err(ProviderError::AlreadyBootstrapped(_)))
            {
                self.etcd_issued = true;
            }
            self.log.push(ActionOutcome {
                step: self.steps,
                action,
                error: result.err().map(|e| e.to_string()),
            });
        }
        self.runtime.tick(self.interval);
        false
    }

    fn execute(&self, action: &Action) -> Result<(), ProviderError> {
        match action {
            Action::RecreateNode { node } => self.runtime.recreate_node(node),
            Action::ApplyConfig { node } => self.runtime.apply_config(node),
            Action::BootstrapEtcd { node } => self.runtime.bootstrap_etcd(node),
            Action::ApplyLabelsTaints { node, labels, taints } => {
                self.runtime.apply_labels_taints(node, labels, taints)
            }
            Action::Wait { .. } => Ok(()),
        }
    }

    pub fn status(&self, converged: bool) -> ClusterStatus {
        ClusterStatus {
            converged,
            steps_used: self.steps,
            observed: self.last.clone(),
            actions: self.log.clone(),
        }
    }

    /// Steps until the fixed point or until `max_steps` are used.
    pub fn run(&mut self, max_steps: u32) -> Result<ClusterStatus, ClusterError> {
        self.desired.validate()?;
        let start = self.steps;
        while self.steps - start < max_steps {
            if self.step() {
                return Ok(self.status(true));
            }
        }
        Err(ClusterError::Diverged { max_steps, status: Box::new(self.status(false)) })
    }
}

/// Drives `runtime` toward `desired` with a fresh loop.
pub fn run_to_convergence(
    desired: &DesiredClusterState,
    runtime: &dyn ClusterRuntime,
    max_steps: u32,
) -> Result<ClusterStatus, ClusterError> {
    ReconcileLoop::new(desired.clone(), runtime).run(max_steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{Document, FaultBehavior, FaultSpec, Provider, ResourceKind, SimConfig, Simulator};
    use serde_json::json;

    fn desired(cp: u32, w: u32) -> DesiredClusterState {
        let mut nodes = Vec::new();
        for (role, count) in [(NodeRole::ControlPlane, cp), (NodeRole::Worker, w)] {
            let (labels, taints) = labels_and_taints(role);
            for i in 0..count {
                nodes.push(DesiredNode { name: node_name("demo", role, i), role, labels: labels.clone(), taints: taints.clone() });
            }
        }
        DesiredClusterState { cluster: "demo".into(), nodes, endpoint: "https://demo.x:6443".into(), gitops_revision_target: None }
    }

    fn provision(sim: &Simulator, d: &DesiredClusterState) {
        for n in &d.nodes {
            let inputs: Document = json!({
                "image": "talos-v1", "machine_type": "m", "config_ref": "x", "cluster": "demo",
                "name": n.name, "role": n.role.as_str(),
            })
            .as_object()
            .unwrap()
            .clone()
            .into_iter()
            .collect();
            sim.create(ResourceKind::Machine, &inputs).unwrap();
        }
    }

    fn ready(d: &DesiredClusterState) -> ObservedState {
        ObservedState {
            nodes: d
                .nodes
                .iter()
                .map(|n| ObservedNode { name: n.name.clone(), role: n.role, phase: NodePhase::Ready, labels: n.labels.clone(), taints: n.taints.clone() })
                .collect(),
            etcd: EtcdStatus::Bootstrapped,
            observation_age: 0,
            stale: false,
        }
    }

    #[test]
    fn empty_observation_recreates_everything() {
        let d = desired(1, 2);
        let a = reconcile_step(&d, &ObservedState::default());
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|x| x.kind() == ActionKind::RecreateNode));
    }

    #[test]
    fn fixed_point() {
        let d = desired(3, 2);
        assert!(reconcile_step(&d, &ready(&d)).is_empty());
    }

    #[test]
    fn config_applied_cp_gets_exactly_one_bootstrap() {
        let d = desired(3, 0);
        let mut o = ready(&d);
        o.etcd = EtcdStatus::Absent;
        for n in &mut o.nodes {
            n.phase = NodePhase::ConfigApplied;
            n.labels.clear();
            n.taints.clear();
        }
        let a = reconcile_step(&d, &o);
        let boots: Vec<_> = a.iter().filter(|x| x.kind() == ActionKind::BootstrapEtcd).collect();
        assert_eq!(boots.len(), 1);
        assert_eq!(boots[0].target(), "demo-cp-0");
    }

    #[test]
    fn wrong_labels_on_joined_node() {
        let d = desired(1, 1);
        let mut o = ready(&d);
        o.nodes[0].phase = NodePhase::Joined;
        o.nodes[0].labels.clear();
        let a = reconcile_step(&d, &o);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].kind(), ActionKind::ApplyLabelsTaints);
    }

    #[test]
    fn not_converged_without_actions_waits() {
        let d = desired(1, 1);
        let mut o = ready(&d);
        o.nodes[1].phase = NodePhase::Booted;
        assert_eq!(reconcile_step(&d, &o), vec![Action::Wait { cluster: "demo".into() }]);
    }

    #[test]
    fn reconcile_is_deterministic() {
        let d = desired(3, 2);
        let mut o = ready(&d);
        o.nodes.remove(3);
        o.nodes[0].phase = NodePhase::Provisioned;
        assert_eq!(reconcile_step(&d, &o), reconcile_step(&d, &o));
    }

    #[test]
    fn fresh_cluster_converges_within_oracle_bound() {
        let sim = Simulator::new(SimConfig::default());
        let d = desired(1, 1);
        provision(&sim, &d);
        let status = run_to_convergence(&d, &sim, 50).unwrap();
        assert!(status.converged);
        assert!(status.steps_used <= 12);
        // configure, bootstrap etcd, label the control plane, confirm
        assert_eq!(status.steps_used, 4);
        assert_eq!(sim.etcd_bootstrap_count("demo"), 1);
    }

    #[test]
    fn budget_of_one_diverges() {
        let sim = Simulator::new(SimConfig::default());
        let d = desired(1, 1);
        provision(&sim, &d);
        assert!(matches!(run_to_convergence(&d, &sim, 1), Err(ClusterError::Diverged { max_steps: 1, .. })));
    }

    #[test]
    fn worker_killed_mid_run_is_recreated() {
        let sim = Simulator::new(SimConfig::default());
        let d = desired(1, 2);
        provision(&sim, &d);
        let mut l = ReconcileLoop::new(d.clone(), &sim);
        assert!(!l.step());
        assert!(!l.step());
        sim.kill_node("demo-w-1").unwrap();
        let status = l.run(40).unwrap();
        assert!(status.converged);
        assert!(status.actions.iter().any(|a| a.action == Action::RecreateNode { node: "demo-w-1".into() }));
        assert_eq!(sim.etcd_bootstrap_count("demo"), 1);
    }

    #[test]
    fn quorum_loss_rebuilds_all_nodes() {
        let sim = Simulator::new(SimConfig::default());
        let d = desired(1, 2);
        provision(&sim, &d);
        run_to_convergence(&d, &sim, 30).unwrap();
        sim.kill_node("demo-cp-0").unwrap();
        let status = run_to_convergence(&d, &sim, 30).unwrap();
        assert!(status.converged);
        let recreated = status.actions.iter().filter(|a| a.action.kind() == ActionKind::RecreateNode).count();
        assert_eq!(recreated, 3);
        assert_eq!(sim.etcd_bootstrap_count("demo"), 1);
    }

    #[test]
    fn dropped_observation_returns_previous_marked_stale() {
        let sim = Simulator::new(SimConfig::default());
        let d = desired(1, 0);
        provision(&sim, &d);
        let mut obs = Observer::default();
        let first = obs.observe(&sim, "demo");
        assert!(!first.stale);
        sim.inject(FaultSpec::new(ResourceKind::Machine, 2, FaultBehavior::DropObservation));
        sim.apply_config("demo-cp-0").unwrap();
        let second = obs.observe(&sim, "demo");
        assert!(second.stale);
        assert_eq!(second.nodes, first.nodes);
        let third = obs.observe(&sim, "demo");
        assert!(!third.stale);
        assert_eq!(third.nodes[0].phase, NodePhase::Booted);
    }

    #[test]
    fn lagging_observer_still_converges() {
        let sim = Simulator::new(SimConfig::default());
        let d = desired(3, 2);
        provision(&sim, &d);
        let status = ReconcileLoop::new(d, &sim)
            .with_staleness(StalenessPolicy { lag: 2 })
            .run(50)
            .unwrap();
        assert!(status.converged);
        assert_eq!(sim.etcd_bootstrap_count("demo"), 1);
    }
}
