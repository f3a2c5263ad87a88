//! Access registry: single-use join tokens, cluster registrations and
//! short-lived user credentials.
//!
//! Tokens are stored as SHA-256 digests and compared in constant time. All
//! mutations go through one mutex, and redeeming is a single check-and-set
//! under it, so racing redeemers see exactly one winner.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use subtle::ConstantTimeEq;
use time::{Duration, OffsetDateTime};

use crate::canonical;
use crate::clock::Clock;
use crate::fsutil;
use crate::pki::{self, CertRole, KubeconfigDocument, PkiError, TrustBundle};

pub const DEFAULT_JOIN_TOKEN_TTL: Duration = Duration::minutes(30);
const REGISTRY_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum AccessError {
    #[error("unknown join token")]
    UnknownToken,
    #[error("join token already used")]
    TokenReused,
    #[error("join token expired at {0}")]
    TokenExpired(OffsetDateTime),
    #[error("cluster `{0}` is not registered")]
    ClusterNotRegistered(String),
    #[error("join token ttl must be positive")]
    InvalidTtl,
    #[error(transparent)]
    Pki(#[from] PkiError),
    #[error("registry {path}: {detail}")]
    Persistence { path: PathBuf, detail: String },
}

/// A join token value: 32 random bytes, hex encoded.
#[derive(Clone, PartialEq, Eq)]
pub struct JoinToken {
    value: String,
    pub expires_at: OffsetDateTime,
}

impl fmt::Debug for JoinToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("JoinToken").field("expires_at", &self.expires_at).finish_non_exhaustive()
    }
}

impl JoinToken {
    pub fn value(&self) -> &str {
        &self.value
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRegistration {
    pub cluster: String,
    pub endpoint_fqdn: String,
    #[serde(with = "time::serde::rfc3339")]
    pub registered_at: OffsetDateTime,
    pub agent_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenRecord {
    sha256: String,
    #[serde(with = "time::serde::rfc3339")]
    expires_at: OffsetDateTime,
    used: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegistryState {
    version: u32,
    tokens: Vec<TokenRecord>,
    registrations: BTreeMap<String, ClusterRegistration>,
}

impl Default for RegistryState {
    fn default() -> Self {
        Self { version: REGISTRY_VERSION, tokens: Vec::new(), registrations: BTreeMap::new() }
    }
}

pub struct AccessRegistry {
    path: Option<PathBuf>,
    state: Mutex<RegistryState>,
}

impl fmt::Debug for AccessRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessRegistry").field("path", &self.path).finish_non_exhaustive()
    }
}

impl Default for AccessRegistry {
    fn default() -> Self {
        Self::in_memory()
    }
}

fn token_hash(value: &str) -> String {
    canonical::sha256_hex(value.as_bytes())
}

impl AccessRegistry {
    pub fn in_memory() -> Self {
        Self { path: None, state: Mutex::new(RegistryState::default()) }
    }

    /// `<stack-dir>/registry.json`
    pub fn path_in(stack_dir: &Path) -> PathBuf {
        stack_dir.join("registry.json")
    }

    /// Opens the registry persisted at `path`, starting empty if absent.
    pub fn open(path: &Path) -> Result<Self, AccessError> {
        let persistence = |detail: String| AccessError::Persistence { path: path.to_path_buf(), detail };
        let state = match std::fs::read(path) {
            Ok(bytes) => {
                let s: RegistryState = serde_json::from_slice(&bytes).map_err(|e| persistence(e.to_string()))?;
                if s.version != REGISTRY_VERSION {
                    return Err(persistence(format!("unsupported version {}", s.version)));
                }
                s
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RegistryState::default(),
            Err(e) => return Err(persistence(e.to_string())),
        };
        Ok(Self { path: Some(path.to_path_buf()), state: Mutex::new(state) })
    }

    fn lock(&self) -> MutexGuard<'_, RegistryState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn save(&self, state: &RegistryState) -> Result<(), AccessError> {
        if let Some(path) = &self.path {
            fsutil::atomic_write_private(path, canonical::to_canonical_pretty(state).as_bytes())
                .map_err(|e| AccessError::Persistence { path: path.clone(), detail: e.to_string() })?;
        }
        Ok(())
    }

    /// Mints a token valid for `ttl`, using OS entropy.
    pub fn mint_join_token(&self, ttl: Duration, clock: &dyn Clock) -> Result<JoinToken, AccessError> {
        self.mint_join_token_with(ttl, clock, &mut rand::rngs::OsRng)
    }

    pub fn mint_join_token_with(
        &self,
        ttl: Duration,
        clock: &dyn Clock,
        rng: &mut dyn RngCore,
    ) -> Result<JoinToken, AccessError> {
        if ttl <= Duration::ZERO {
            return Err(AccessError::InvalidTtl);
        }
        let mut bytes = [0u8; 32];
        rng.try_fill_bytes(&mut bytes)
            .map_err(|e| AccessError::Pki(PkiError::EntropyUnavailable(e.to_string())))?;
        let token = JoinToken { value: hex::encode(bytes), expires_at: clock.now() + ttl };
        let mut state = self.lock();
        state.tokens.push(TokenRecord { sha256: token_hash(&token.value), expires_at: token.expires_at, used: false });
        self.save(&state)?;
        Ok(token)
    }

    /// Consumes `token` and records `cluster` as registered. Replaces any
    /// earlier registration of the same cluster.
    pub fn redeem(
        &self,
        token: &str,
        cluster: &str,
        endpoint_fqdn: &str,
        clock: &dyn Clock,
    ) -> Result<ClusterRegistration, AccessError> {
        let presented = token_hash(token);
        let mut state = self.lock();
        // Compare against every record so timing does not reveal position.
        let mut found = None;
        for (i, rec) in state.tokens.iter().enumerate() {
            if bool::from(rec.sha256.as_bytes().ct_eq(presented.as_bytes())) {
                found = Some(i);
            }
        }
        let idx = found.ok_or(AccessError::UnknownToken)?;
        let now = clock.now();
        let rec = &mut state.tokens[idx];
        if rec.used {
            return Err(AccessError::TokenReused);
        }
        if now >= rec.expires_at {
            return Err(AccessError::TokenExpired(rec.expires_at));
        }
        rec.used = true;
        // Stable per cluster endpoint, so re-registration after a
        // replacement yields the same agent.
        let agent_id = format!(
            "agent-{}",
            &canonical::sha256_hex(format!("{cluster}/{endpoint_fqdn}").as_bytes())[..12]
        );
        let registration = ClusterRegistration {
            cluster: cluster.to_string(),
            endpoint_fqdn: endpoint_fqdn.to_string(),
            registered_at: now,
            agent_id,
        };
        state.registrations.insert(cluster.to_string(), registration.clone());
        self.save(&state)?;
        Ok(registration)
    }

    pub fn registration(&self, cluster: &str) -> Option<ClusterRegistration> {
        self.lock().registrations.get(cluster).cloned()
    }

    pub fn registrations(&self) -> Vec<ClusterRegistration> {
        self.lock().registrations.values().cloned().collect()
    }

    pub fn deregister(&self, cluster: &str) -> Result<bool, AccessError> {
        let mut state = self.lock();
        let removed = state.registrations.remove(cluster).is_some();
        if removed {
            self.save(&state)?;
        }
        Ok(removed)
    }

    /// Short-lived user kubeconfig for a registered cluster.
    pub fn issue_user_credential(
        &self,
        bundle: &TrustBundle,
        identity: &str,
        cluster: &str,
        ttl: Duration,
        clock: &dyn Clock,
    ) -> Result<KubeconfigDocument, AccessError> {
        let reg = self
            .registration(cluster)
            .ok_or_else(|| AccessError::ClusterNotRegistered(cluster.to_string()))?;
        let endpoint = format!("https://{}:6443", reg.endpoint_fqdn);
        Ok(pki::generate_kubeconfig(bundle, identity, CertRole::User, ttl, &endpoint, clock)?)
    }
}
