//! Interface-only cloud targets (aws, azure, vsphere).
//!
//! They check for credentials the same way a real backend would and then
//! answer every operation with `NotImplemented`.

use std::collections::BTreeMap;

use super::{
    credential_var, AppObject, ClusterRuntime, DnsRecordType, Document, NodeObservation, Provider,
    ProviderError, ProviderResourceRecord, ResourceKind, SyncRecord,
};
use crate::manifest::ProviderKind;
use crate::node::{Labels, Taint};

#[derive(Debug, Clone)]
pub struct UnimplementedCloud {
    kind: ProviderKind,
}

impl UnimplementedCloud {
    /// Builds a stub without checking credentials.
    pub fn new(kind: ProviderKind) -> Self {
        Self { kind }
    }

    /// Builds a stub if `SSKUBA_<PROVIDER>_TOKEN` is set and non-empty.
    pub fn from_env(kind: ProviderKind) -> Result<Self, ProviderError> {
        let var = credential_var(kind);
        match std::env::var(&var) {
            Ok(v) if !v.is_empty() => Ok(Self { kind }),
            _ => Err(ProviderError::MissingCredentials { provider: kind.to_string(), var }),
        }
    }

    fn nope<T>(&self, operation: &'static str) -> Result<T, ProviderError> {
        Err(ProviderError::NotImplemented { provider: self.kind.to_string(), operation })
    }
}

impl Provider for UnimplementedCloud {
    fn name(&self) -> &str {
        self.kind.as_str()
    }

    fn create(&self, _: ResourceKind, _: &Document) -> Result<ProviderResourceRecord, ProviderError> {
        self.nope("create")
    }

    fn delete(&self, _: &str) -> Result<(), ProviderError> {
        self.nope("delete")
    }

    fn read(&self, _: &str) -> Result<ProviderResourceRecord, ProviderError> {
        self.nope("read")
    }

    fn snapshot(&self) -> Result<String, ProviderError> {
        self.nope("snapshot")
    }

    fn secret_put(&self, _: &str, _: &str) -> Result<(), ProviderError> {
        self.nope("secret_put")
    }

    fn secret_get(&self, _: &str) -> Result<String, ProviderError> {
        self.nope("secret_get")
    }

    fn dns_upsert(&self, _: &str, _: &str, _: DnsRecordType, _: &str) -> Result<String, ProviderError> {
        self.nope("dns_upsert")
    }
}

impl ClusterRuntime for UnimplementedCloud {
    fn observe_nodes(&self, _: &str) -> Result<NodeObservation, ProviderError> {
        self.nope("observe_nodes")
    }

    fn apply_config(&self, _: &str) -> Result<(), ProviderError> {
        self.nope("apply_config")
    }

    fn bootstrap_etcd(&self, _: &str) -> Result<(), ProviderError> {
        self.nope("bootstrap_etcd")
    }

    fn apply_labels_taints(&self, _: &str, _: &Labels, _: &[Taint]) -> Result<(), ProviderError> {
        self.nope("apply_labels_taints")
    }

    fn recreate_node(&self, _: &str) -> Result<(), ProviderError> {
        self.nope("recreate_node")
    }

    fn tick(&self, _: u32) {}

    fn app_objects(&self, _: &str) -> Result<BTreeMap<String, AppObject>, ProviderError> {
        self.nope("app_objects")
    }

    fn app_apply(&self, _: &str, _: &str, _: AppObject) -> Result<(), ProviderError> {
        self.nope("app_apply")
    }

    fn app_delete(&self, _: &str, _: &str) -> Result<(), ProviderError> {
        self.nope("app_delete")
    }

    fn sync_state(&self, _: &str) -> Result<Option<SyncRecord>, ProviderError> {
        self.nope("sync_state")
    }

    fn set_sync_state(&self, _: &str, _: SyncRecord) -> Result<(), ProviderError> {
        self.nope("set_sync_state")
    }
}
