//! Immutable-OS machine configuration for each node.
//!
//! A config is a pure function of manifest, trust bundle, role and index:
//! node keys and the bootstrap token are derived from the bundle, and
//! certificates are issued at the bundle's creation instant. Configs carry
//! private keys, so they only ever reach disk sealed.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::canonical;
use crate::manifest::ClusterManifest;
use crate::node::{node_name, Labels, NodeRole, Taint};
use crate::pki::{self, CertRole, PkiError, SealPrivateKey, SealedBlob, TrustBundle};
use crate::stack::image_for;

pub const API_PORT: u16 = 50000;
pub const NVIDIA_EXTENSION: &str = "nvidia-driver";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MachineConfigError {
    #[error("{role} index {index} out of range (pool has {count} node(s))")]
    IndexOutOfRange { role: NodeRole, index: u32, count: u32 },
    #[error("GPU overlay cannot be applied to a {0} config")]
    InvalidRole(NodeRole),
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("malformed machine config: {0}")]
    Malformed(String),
}

/// OS flags. The immutable, shell-less OS contract is enforced on
/// construction and on deserialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawOsFlags")]
pub struct OsFlags {
    root_readonly: bool,
    ssh_enabled: bool,
    api_port: u16,
}

#[derive(Deserialize)]
struct RawOsFlags {
    root_readonly: bool,
    ssh_enabled: bool,
    api_port: u16,
}

impl TryFrom<RawOsFlags> for OsFlags {
    type Error = String;

    fn try_from(raw: RawOsFlags) -> Result<Self, Self::Error> {
        if !raw.root_readonly {
            return Err("root_readonly must be true".into());
        }
        if raw.ssh_enabled {
            return Err("ssh_enabled must be false".into());
        }
        Ok(OsFlags::new(raw.api_port))
    }
}

impl OsFlags {
    pub fn new(api_port: u16) -> Self {
        Self { root_readonly: true, ssh_enabled: false, api_port }
    }

    pub fn root_readonly(&self) -> bool {
        self.root_readonly
    }

    pub fn ssh_enabled(&self) -> bool {
        self.ssh_enabled
    }

    pub fn api_port(&self) -> u16 {
        self.api_port
    }
}

impl Default for OsFlags {
    fn default() -> Self {
        Self::new(API_PORT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EtcdPeerCerts {
    pub ca_pem: String,
    pub cert_pem: String,
    pub key_pem: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineCerts {
    pub cluster_ca_pem: String,
    pub node_cert_pem: String,
    pub node_key_pem: String,
    /// Control-plane nodes only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub etcd_peer: Option<EtcdPeerCerts>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineSecrets {
    pub bootstrap_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MachineConfig {
    pub node_name: String,
    pub cluster: String,
    pub role: NodeRole,
    pub image: String,
    pub cluster_endpoint: String,
    pub certs: MachineCerts,
    pub secrets: MachineSecrets,
    pub labels: Labels,
    pub taints: Vec<Taint>,
    pub os_flags: OsFlags,
    pub extensions: Vec<String>,
}

/// The fixed label and taint table.
pub fn labels_and_taints(role: NodeRole) -> (Labels, Vec<Taint>) {
    let mut labels = Labels::new();
    let mut taints = Vec::new();
    match role {
        NodeRole::ControlPlane => {
            labels.insert("node-role/control-plane".into(), "true".into());
            taints.push(Taint::no_schedule("node-role/control-plane"));
        }
        NodeRole::GpuWorker => {
            labels.insert("accelerator".into(), "gpu".into());
            taints.push(Taint::no_schedule("gpu"));
        }
        NodeRole::Worker => {}
    }
    (labels, taints)
}

pub fn cluster_endpoint(m: &ClusterManifest) -> String {
    format!("https://{}:6443", m.fqdn())
}

/// Cluster-wide bootstrap token in `xxxxxx.yyyyyyyyyyyyyyyy` form.
pub fn bootstrap_token(bundle: &TrustBundle) -> String {
    let h = hex::encode(bundle.derive_secret("*", "bootstrap-token"));
    format!("{}.{}", &h[..6], &h[6..22])
}

fn pool_count(m: &ClusterManifest, role: NodeRole) -> u32 {
    match role {
        NodeRole::ControlPlane => m.control_plane.count,
        NodeRole::Worker => m.workers.count,
        NodeRole::GpuWorker => m.gpu_workers.count,
    }
}

/// Renders the config for node `index` of the `role` pool.
pub fn render(
    m: &ClusterManifest,
    bundle: &TrustBundle,
    role: NodeRole,
    index: u32,
) -> Result<MachineConfig, MachineConfigError> {
    let count = pool_count(m, role);
    if index >= count {
        return Err(MachineConfigError::IndexOutOfRange { role, index, count });
    }
    let name = node_name(&m.name, role, index);
    let issued_at = bundle.created_at;
    let ttl = bundle.policy.machine_ttl;

    let node = pki::issue_cert_with_key(
        bundle,
        &name,
        CertRole::for_node(role),
        ttl,
        issued_at,
        bundle.derive_node_key(&name, "node"),
    )?;
    let etcd_peer = if role == NodeRole::ControlPlane {
        let peer = pki::issue_cert_with_key(
            bundle,
            &name,
            CertRole::EtcdPeer,
            ttl,
            issued_at,
            bundle.derive_node_key(&name, "etcd-peer"),
        )?;
        Some(EtcdPeerCerts {
            ca_pem: bundle.etcd_ca.certificate.to_pem(),
            cert_pem: peer.certificate.to_pem(),
            key_pem: peer.private_key_pem(),
        })
    } else {
        None
    };

    // GPU nodes start from the plain worker shape; the overlay adds the rest.
    let base_role = if role == NodeRole::GpuWorker { NodeRole::Worker } else { role };
    let (labels, taints) = labels_and_taints(base_role);
    let cfg = MachineConfig {
        node_name: name,
        cluster: m.name.clone(),
        role: base_role,
        image: image_for(base_role).to_string(),
        cluster_endpoint: cluster_endpoint(m),
        certs: MachineCerts {
            cluster_ca_pem: bundle.cluster_ca.certificate.to_pem(),
            node_cert_pem: node.certificate.to_pem(),
            node_key_pem: node.private_key_pem(),
            etcd_peer,
        },
        secrets: MachineSecrets { bootstrap_token: bootstrap_token(bundle) },
        labels,
        taints,
        os_flags: OsFlags::default(),
        extensions: Vec::new(),
    };
    if role == NodeRole::GpuWorker {
        gpu_overlay(cfg)
    } else {
        Ok(cfg)
    }
}

/// Turns a worker config into a GPU worker config. Idempotent.
pub fn gpu_overlay(mut cfg: MachineConfig) -> Result<MachineConfig, MachineConfigError> {
    if cfg.role == NodeRole::ControlPlane {
        return Err(MachineConfigError::InvalidRole(cfg.role));
    }
    cfg.role = NodeRole::GpuWorker;
    cfg.image = image_for(NodeRole::GpuWorker).to_string();
    let (labels, taints) = labels_and_taints(NodeRole::GpuWorker);
    cfg.labels = labels;
    cfg.taints = taints;
    if !cfg.extensions.iter().any(|e| e == NVIDIA_EXTENSION) {
        cfg.extensions.push(NVIDIA_EXTENSION.to_string());
    }
    Ok(cfg)
}

/// Renders every node of the manifest, control plane first.
pub fn render_all(m: &ClusterManifest, bundle: &TrustBundle) -> Result<Vec<MachineConfig>, MachineConfigError> {
    let mut out = Vec::with_capacity(m.node_count() as usize);
    for role in NodeRole::ALL {
        for index in 0..pool_count(m, role) {
            out.push(render(m, bundle, role, index)?);
        }
    }
    Ok(out)
}

impl MachineConfig {
    /// Canonical serialization: sorted keys, two-space indentation.
    pub fn to_canonical(&self) -> String {
        canonical::to_canonical_pretty(self)
    }

    /// Canonical form with private keys and the bootstrap token replaced by
    /// their digests. Safe to commit; used for golden files.
    pub fn to_redacted_canonical(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        fn redact(v: &mut Value, key: &str) {
            if let Some(Value::String(s)) = v.pointer_mut(key) {
                *s = format!("redacted:sha256:{}", canonical::sha256_hex(s.as_bytes()));
            }
        }
        redact(&mut v, "/certs/node_key_pem");
        redact(&mut v, "/certs/etcd_peer/key_pem");
        redact(&mut v, "/secrets/bootstrap_token");
        canonical::to_canonical_pretty(&v)
    }

    pub fn from_json(text: &str) -> Result<Self, MachineConfigError> {
        serde_json::from_str(text).map_err(|e| MachineConfigError::Malformed(e.to_string()))
    }

    /// Seals the canonical serialization to the bundle's seal key.
    pub fn seal(&self, bundle: &TrustBundle) -> Result<SealedBlob, MachineConfigError> {
        Ok(pki::seal(self.to_canonical().as_bytes(), &bundle.seal_public_key())?)
    }

    pub fn unseal(blob: &SealedBlob, key: &SealPrivateKey) -> Result<Self, MachineConfigError> {
        let plain = pki::unseal(blob, key)?;
        let text = String::from_utf8(plain).map_err(|e| MachineConfigError::Malformed(e.to_string()))?;
        Self::from_json(&text)
    }
}
