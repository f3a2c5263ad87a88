//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use sskuba::clock::ManualClock;
use sskuba::lifecycle::{apply, ApplyOptions, Quiet, RunRecord, StackPaths};
use sskuba::manifest::{parse_manifest, ClusterManifest};
use sskuba::provider::{SimConfig, Simulator};

pub fn testdata() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata")
}

pub fn manifest_text(cp: u32, w: u32) -> String {
    format!(
        "apiVersion: sskuba/v1\n\
         kind: Cluster\n\
         metadata: {{ name: demo, domain: dev.example.org }}\n\
         target:\n  provider: sim\n  region: local-1\n  \
         controlPlane: {{ count: {cp}, machineType: m.small }}\n  \
         workers: {{ count: {w}, machineType: m.large }}\n\
         gitops: {{ repository: ./fleet, branch: main, path: apps }}\n"
    )
}

pub fn manifest(cp: u32, w: u32) -> ClusterManifest {
    parse_manifest(&manifest_text(cp, w)).unwrap()
}

pub fn copy_dir(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let rel = entry.path().strip_prefix(from).unwrap();
        let dest = to.join(rel);
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(&dest).unwrap();
        } else {
            std::fs::copy(entry.path(), &dest).unwrap();
        }
    }
}

/// A workspace with the fleet fixture copied in, a stack directory and a
/// separate key directory.
pub struct Workspace {
    pub root: tempfile::TempDir,
    pub keys: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        copy_dir(&testdata().join("fleet"), &root.path().join("fleet"));
        Self { root, keys: tempfile::tempdir().unwrap() }
    }

    pub fn stack_dir(&self) -> PathBuf {
        self.root.path().join("state")
    }

    pub fn paths(&self, name: &str) -> StackPaths {
        StackPaths::new(&self.stack_dir(), name).with_key_dir(self.keys.path())
    }

    pub fn options(&self, seed: u64) -> ApplyOptions {
        ApplyOptions {
            entropy_seed: Some(seed),
            repo_base: self.root.path().to_path_buf(),
            ..ApplyOptions::default()
        }
    }

    pub fn apply(&self, sim: &Simulator, m: &ClusterManifest, opts: &ApplyOptions, clock: &ManualClock) -> RunRecord {
        let (record, result) = apply(m, sim, &self.paths(&m.name), clock, opts, &Quiet);
        result.unwrap_or_else(|e| panic!("apply failed: {e}"));
        record
    }
}

pub fn sim_for(m: &ClusterManifest) -> Simulator {
    Simulator::new(SimConfig::with_zone(&m.domain))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resource names the expansion rule produces, written out by hand: eight
/// fixed resources plus one machine per node.
pub fn expected_urns(stack: &str, cp: u32, w: u32) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = [
        ("Network", "vpc"),
        ("Subnet", "nodes"),
        ("SecurityGroup", "nodes"),
        ("Route", "default"),
        ("PublicIp", "ingress"),
        ("LoadBalancer", "api"),
        ("SecretEntry", "registry-token"),
        ("DnsRecord", "cname"),
    ]
    .iter()
    .map(|(k, n)| format!("urn:sskuba:{stack}:{k}:{n}"))
    .collect();
    for i in 0..cp {
        out.insert(format!("urn:sskuba:{stack}:Machine:{stack}-cp-{i}"));
    }
    for i in 0..w {
        out.insert(format!("urn:sskuba:{stack}:Machine:{stack}-w-{i}"));
    }
    out
}

/// Artifact locators in a YAML tree, found by line scanning rather than
/// parsing.
pub fn scan_locators(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for entry in walkdir::WalkDir::new(dir) {
        let entry = entry.unwrap();
        if !entry.file_type().is_file() {
            continue;
        }
        let text = std::fs::read_to_string(entry.path()).unwrap();
        for line in text.lines() {
            let t = line.trim_start().trim_start_matches("- ");
            for key in ["image:", "chart:", "repository:"] {
                if let Some(rest) = t.strip_prefix(key) {
                    let v = rest.trim();
                    if !v.is_empty() {
                        out.insert(v.to_string());
                    }
                }
            }
        }
    }
    out
}

/// Object ids (`kind/namespace/name`) by line scanning a fixture file with
/// one object and a namespaced metadata block.
pub fn scan_object_id(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    let field = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(key).map(|v| v.trim().to_string()))
            .unwrap()
    };
    let kind = field("kind:");
    let name = field("  name:");
    let ns = field("  namespace:");
    format!("{kind}/{ns}/{name}")
}
