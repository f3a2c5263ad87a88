//! Air-gap bundles: the closure of artifacts a GitOps tree refers to,
//! stored content-addressed and verifiable offline.
//!
//! Blobs live at `<store>/blobs/sha256/<digest>` and the manifest at
//! `<store>/bundle.manifest.json`. Verification only re-hashes files; it
//! never touches a resolver.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use time::OffsetDateTime;

use crate::canonical;
use crate::clock::Clock;
use crate::fsutil;
use crate::gitops::RepoSnapshot;

pub const MANIFEST_FILE: &str = "bundle.manifest.json";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Image,
    Chart,
    Repo,
    File,
}

impl ArtifactKind {
    fn for_field(field: &str) -> Option<ArtifactKind> {
        match field {
            "image" => Some(ArtifactKind::Image),
            "chart" => Some(ArtifactKind::Chart),
            "repository" => Some(ArtifactKind::Repo),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub kind: ArtifactKind,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
}

impl ArtifactRef {
    pub fn new(kind: ArtifactKind, locator: &str) -> Self {
        Self { kind, locator: locator.to_string(), digest: None }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BundleError {
    #[error("could not resolve {locator}: {reason}")]
    ResolveFailed { locator: String, reason: String },
    #[error("store {path}: {source}")]
    StoreIo { path: PathBuf, source: std::io::Error },
    #[error("bundle manifest {path}: {detail}")]
    ManifestInvalid { path: PathBuf, detail: String },
}

fn scan(v: &Value, out: &mut BTreeMap<String, ArtifactKind>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                if let (Some(kind), Some(s)) = (ArtifactKind::for_field(k), child.as_str()) {
                    let s = s.trim();
                    if !s.is_empty() {
                        out.entry(s.to_string()).or_insert(kind);
                    }
                }
                scan(child, out);
            }
        }
        Value::Array(items) => items.iter().for_each(|i| scan(i, out)),
        _ => {}
    }
}

/// Every string value under an `image`, `chart` or `repository` key,
/// deduplicated by locator and sorted.
pub fn collect_references(snapshot: &RepoSnapshot) -> Vec<ArtifactRef> {
    let (docs, _) = snapshot.documents();
    let mut found = BTreeMap::new();
    for (_, doc) in &docs {
        scan(doc, &mut found);
    }
    found.into_iter().map(|(locator, kind)| ArtifactRef { kind, locator, digest: None }).collect()
}

/// Produces the bytes of an artifact.
pub trait Resolver: Sync {
    fn resolve(&self, artifact: &ArtifactRef) -> Result<Vec<u8>, String>;
}

/// Stand-in content derived from the locator. Lets a bundle be built and
/// verified without any registry.
#[derive(Debug, Clone, Copy, Default)]
pub struct SyntheticResolver;

impl Resolver for SyntheticResolver {
    fn resolve(&self, a: &ArtifactRef) -> Result<Vec<u8>, String> {
        let kind = serde_json::to_value(a.kind).expect("kind serializes");
        Ok(format!("sskuba synthetic artifact\nkind: {}\nlocator: {}\n", kind.as_str().unwrap_or_default(), a.locator)
            .into_bytes())
    }
}

/// Reads artifacts from a local mirror directory, one file per locator
/// with `/` and `:` replaced by `_`.
#[derive(Debug, Clone)]
pub struct MirrorResolver {
    pub root: PathBuf,
}

impl MirrorResolver {
    pub fn file_name(locator: &str) -> String {
        locator.chars().map(|c| if c == '/' || c == ':' || c == '@' { '_' } else { c }).collect()
    }
}

impl Resolver for MirrorResolver {
    fn resolve(&self, a: &ArtifactRef) -> Result<Vec<u8>, String> {
        let path = self.root.join(Self::file_name(&a.locator));
        std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    #[serde(rename = "ref")]
    pub reference: ArtifactRef,
    /// Other references whose content is byte-identical.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<ArtifactRef>,
    pub digest: String,
    pub size_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub version: u32,
    #[serde(with = "time::serde::rfc3339")]
    pub created_at: OffsetDateTime,
    pub source_revision: String,
    pub entries: Vec<BundleEntry>,
    pub bundle_digest: String,
}

impl BundleManifest {
    /// Digest over the sorted entries; creation time is excluded.
    pub fn compute_digest(entries: &[BundleEntry]) -> String {
        canonical::digest_of(entries)
    }

    pub fn load(path: &Path) -> Result<Self, BundleError> {
        let invalid = |detail: String| BundleError::ManifestInvalid { path: path.to_path_buf(), detail };
        let bytes = std::fs::read(path).map_err(|e| invalid(e.to_string()))?;
        let m: BundleManifest = serde_json::from_slice(&bytes).map_err(|e| invalid(e.to_string()))?;
        if m.version != BUNDLE_VERSION {
            return Err(invalid(format!("unsupported version {}", m.version)));
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        canonical::to_canonical_pretty(self)
    }
}

pub fn blob_path(store: &Path, digest: &str) -> PathBuf {
    store.join("blobs").join("sha256").join(digest)
}

/// Resolves every reference, writes the blobs and the manifest.
pub fn build_bundle(
    refs: &[ArtifactRef],
    resolver: &dyn Resolver,
    store: &Path,
    source_revision: &str,
    clock: &dyn Clock,
) -> Result<BundleManifest, BundleError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| BundleError::StoreIo { path, source }
    };
    let blobs = store.join("blobs").join("sha256");
    std::fs::create_dir_all(&blobs).map_err(io(&blobs))?;

    let mut by_digest: BTreeMap<String, BundleEntry> = BTreeMap::new();
    for r in refs {
        let bytes = resolver
            .resolve(r)
            .map_err(|reason| BundleError::ResolveFailed { locator: r.locator.clone(), reason })?;
        let digest = canonical::sha256_hex(&bytes);
        let path = blob_path(store, &digest);
        if !path.exists() {
            fsutil::atomic_write(&path, &bytes).map_err(io(&path))?;
        }
        let resolved = ArtifactRef { digest: Some(digest.clone()), ..r.clone() };
        match by_digest.get_mut(&digest) {
            Some(entry) => entry.aliases.push(resolved),
            None => {
                by_digest.insert(
                    digest.clone(),
                    BundleEntry { reference: resolved, aliases: Vec::new(), digest, size_bytes: bytes.len() as u64 },
                );
            }
        }
    }
    let mut entries: Vec<BundleEntry> = by_digest.into_values().collect();
    for e in &mut entries {
        e.aliases.sort();
    }
    let manifest = BundleManifest {
        version: BUNDLE_VERSION,
        created_at: clock.now(),
        source_revision: source_revision.to_string(),
        bundle_digest: BundleManifest::compute_digest(&entries),
        entries,
    };
    let path = store.join(MANIFEST_FILE);
    fsutil::atomic_write(&path, manifest.to_json().as_bytes()).map_err(io(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptBlob {
    pub digest: String,
    pub actual_digest: String,
    pub expected_size: u64,
    pub actual_size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub missing: Vec<String>,
    pub corrupt: Vec<CorruptBlob>,
    /// The manifest's own digest does not match its entries.
    pub manifest_mismatch: bool,
}

impl VerifyReport {
    pub fn is_complete(&self) -> bool {
        self.missing.is_empty() && self.corrupt.is_empty() && !self.manifest_mismatch
    }
}

/// Re-hashes every blob the manifest lists. Reads local files only.
pub fn verify_bundle(manifest: &BundleManifest, store: &Path) -> VerifyReport {
    let mut report = VerifyReport {
        manifest_mismatch: BundleManifest::compute_digest(&manifest.entries) != manifest.bundle_digest,
        ..VerifyReport::default()
    };
    for e in &manifest.entries {
        match std::fs::read(blob_path(store, &e.digest)) {
            Ok(bytes) => {
                let actual = canonical::sha256_hex(&bytes);
                if actual != e.digest {
                    report.corrupt.push(CorruptBlob {
                        digest: e.digest.clone(),
                        actual_digest: actual,
                        expected_size: e.size_bytes,
                        actual_size: bytes.len() as u64,
                    });
                }
            }
            Err(_) => report.missing.push(e.digest.clone()),
        }
    }
    report
}

/// A store directory together with the resolver used to fill it.
pub struct BundleStore<R: Resolver> {
    pub dir: PathBuf,
    resolver: R,
}

impl<R: Resolver> BundleStore<R> {
    pub fn new(dir: &Path, resolver: R) -> Self {
        Self { dir: dir.to_path_buf(), resolver }
    }

    pub fn build(&self, snapshot: &RepoSnapshot, clock: &dyn Clock) -> Result<BundleManifest, BundleError> {
        let refs = collect_references(snapshot);
        build_bundle(&refs, &self.resolver, &self.dir, &snapshot.revision(), clock)
    }

    /// Offline check; the resolver is never consulted.
    pub fn verify(&self, manifest: &BundleManifest) -> VerifyReport {
        verify_bundle(manifest, &self.dir)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join(MANIFEST_FILE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::gitops::RepoFile;

    fn snap(files: &[(&str, &str)]) -> RepoSnapshot {
        RepoSnapshot {
            files: files
                .iter()
                .map(|(p, c)| RepoFile { path: p.to_string(), content: c.as_bytes().to_vec() })
                .collect(),
        }
    }

    const A: &str = "apiVersion: apps/v1\nkind: Deployment\nmetadata: { name: a }\nspec:\n  template:\n    spec:\n      containers:\n        - name: a\n          image: registry.local/a:1\n        - name: side\n          image: registry.local/proxy:2\n";
    const B: &str = "apiVersion: apps/v1\nkind: Deployment\nmetadata: { name: b }\nspec:\n  containers:\n    - image: registry.local/a:1\n    - image: registry.local/b:3\n";
    const H: &str = "apiVersion: helm/v2\nkind: HelmRelease\nmetadata: { name: h }\nspec:\n  chart: minio\n  repository: https://charts.local/minio\n";

    struct Panicking;
    impl Resolver for Panicking {
        fn resolve(&self, _: &ArtifactRef) -> Result<Vec<u8>, String> {
            panic!("resolver used during verify");
        }
    }

    #[test]
    fn references_are_deduplicated() {
        let refs = collect_references(&snap(&[("a.yaml", A), ("b.yaml", B), ("h.yaml", H)]));
        let locators: Vec<&str> = refs.iter().map(|r| r.locator.as_str()).collect();
        assert_eq!(
            locators,
            vec!["https://charts.local/minio", "minio", "registry.local/a:1", "registry.local/b:3", "registry.local/proxy:2"]
        );
        assert!(collect_references(&RepoSnapshot::default()).is_empty());
    }

    #[test]
    fn build_verify_and_damage() {
        let dir = tempfile::tempdir().unwrap();
        let clock = ManualClock::at_epoch();
        let s = snap(&[("a.yaml", A), ("b.yaml", B)]);
        let store = BundleStore::new(dir.path(), SyntheticResolver);
        let m = store.build(&s, &clock).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert!(m.entries.windows(2).all(|w| w[0].digest < w[1].digest));
        assert!(store.verify(&m).is_complete());
        assert_eq!(BundleManifest::load(&store.manifest_path()).unwrap(), m);

        let victim = m.entries[1].digest.clone();
        std::fs::remove_file(blob_path(dir.path(), &victim)).unwrap();
        let r = BundleStore::new(dir.path(), Panicking).verify(&m);
        assert_eq!(r.missing, vec![victim]);

        let other = &m.entries[0];
        std::fs::write(blob_path(dir.path(), &other.digest), b"trunc").unwrap();
        let r = verify_bundle(&m, dir.path());
        assert_eq!(r.corrupt.len(), 1);
        assert_eq!(r.corrupt[0].digest, other.digest);
        assert_eq!(r.corrupt[0].actual_digest, canonical::sha256_hex(b"trunc"));
    }

    #[test]
    fn rebuild_is_deterministic_and_ignores_time() {
        let s = snap(&[("h.yaml", H)]);
        let one = tempfile::tempdir().unwrap();
        let two = tempfile::tempdir().unwrap();
        let clock = ManualClock::at_epoch();
        let a = BundleStore::new(one.path(), SyntheticResolver).build(&s, &clock).unwrap();
        clock.advance(time::Duration::hours(1));
        let b = BundleStore::new(two.path(), SyntheticResolver).build(&s, &clock).unwrap();
        assert_eq!(a.bundle_digest, b.bundle_digest);
        assert_ne!(a.created_at, b.created_at);
    }

    #[test]
    fn unresolvable_reference_is_named() {
        struct Fails;
        impl Resolver for Fails {
            fn resolve(&self, _: &ArtifactRef) -> Result<Vec<u8>, String> {
                Err("not mirrored".into())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let refs = vec![ArtifactRef::new(ArtifactKind::Image, "registry.local/gone:1")];
        match build_bundle(&refs, &Fails, dir.path(), "r", &ManualClock::at_epoch()) {
            Err(BundleError::ResolveFailed { locator, .. }) => assert_eq!(locator, "registry.local/gone:1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_content_becomes_an_alias() {
        struct Same;
        impl Resolver for Same {
            fn resolve(&self, _: &ArtifactRef) -> Result<Vec<u8>, String> {
                Ok(b"same".to_vec())
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let refs = vec![
            ArtifactRef::new(ArtifactKind::Image, "x:1"),
            ArtifactRef::new(ArtifactKind::Image, "y:1"),
        ];
        let m = build_bundle(&refs, &Same, dir.path(), "r", &ManualClock::at_epoch()).unwrap();
        assert_eq!(m.entries.len(), 1);
        assert_eq!(m.entries[0].aliases.len(), 1);
    }
}
