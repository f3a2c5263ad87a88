//! Per-cluster trust: certificate authorities, short-lived certificates and
//! sealed blobs.
//!
//! A [`TrustBundle`] holds two Ed25519 CAs (cluster and etcd), the seal
//! keypair used to encrypt machine configurations, and a node seed from
//! which per-node keys are derived. Certificates are standard X.509 and
//! validate with any conforming implementation.
//!
//! Sealing is hybrid: an ephemeral X25519 agreement with the recipient key,
//! HKDF-SHA256, then ChaCha20-Poly1305 over the payload with the blob header
//! as associated data.

use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::pkcs8::EncodePrivateKey;
use ed25519_dalek::{Signature, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::rngs::OsRng;
use rand::RngCore;
use rcgen::{
    BasicConstraints, CertificateParams, DistinguishedName, DnType, ExtendedKeyUsagePurpose, IsCa,
    KeyPair, KeyUsagePurpose, SanType, SerialNumber,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use time::{Duration, OffsetDateTime};
use x25519_dalek::{PublicKey as XPublicKey, StaticSecret};

use crate::clock::{format_duration, Clock};
use crate::node::NodeRole;

pub const MACHINE_TTL: Duration = Duration::hours(24);
pub const USER_TTL: Duration = Duration::hours(12);
pub const ADMIN_TTL: Duration = Duration::hours(720);
const CA_LIFETIME: Duration = Duration::days(3650);

/// Magic header of every sealed blob.
pub const SEAL_MAGIC: &[u8; 16] = b"SSKUBA-SEAL\0v1\0\0";
const SEAL_INFO: &[u8] = b"sskuba-seal v1";
const NODE_KEY_INFO: &str = "sskuba-node-key v1";
const OPERATOR_KEY_LABEL: &str = "SSKUBA SEAL PRIVATE KEY";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PkiError {
    #[error("entropy unavailable: {0}")]
    EntropyUnavailable(String),
    #[error("ttl {ttl} not allowed for {role} certificates (maximum {max})")]
    TtlExceedsPolicy { role: CertRole, ttl: String, max: String },
    #[error("invalid certificate subject `{0}`")]
    InvalidSubject(String),
    #[error("invalid cluster id `{0}`")]
    InvalidClusterId(String),
    #[error("sealed blob failed its integrity check")]
    IntegrityError,
    #[error("sealed blob is addressed to a different key")]
    WrongKey,
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("certificate generation failed: {0}")]
    Generation(String),
}

fn malformed(what: &'static str, detail: impl fmt::Display) -> PkiError {
    PkiError::Malformed { what, detail: detail.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertRole {
    ControlPlane,
    Worker,
    GpuWorker,
    Admin,
    User,
    /// etcd member identity; issued by the etcd CA.
    EtcdPeer,
}

impl CertRole {
    pub const ALL: [CertRole; 6] = [
        CertRole::ControlPlane,
        CertRole::Worker,
        CertRole::GpuWorker,
        CertRole::Admin,
        CertRole::User,
        CertRole::EtcdPeer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CertRole::ControlPlane => "control_plane",
            CertRole::Worker => "worker",
            CertRole::GpuWorker => "gpu_worker",
            CertRole::Admin => "admin",
            CertRole::User => "user",
            CertRole::EtcdPeer => "etcd_peer",
        }
    }

    pub fn parse(s: &str) -> Option<CertRole> {
        CertRole::ALL.into_iter().find(|r| r.as_str() == s)
    }

    pub fn for_node(role: NodeRole) -> CertRole {
        match role {
            NodeRole::ControlPlane => CertRole::ControlPlane,
            NodeRole::Worker => CertRole::Worker,
            NodeRole::GpuWorker => CertRole::GpuWorker,
        }
    }

    fn issuer(self) -> CaKind {
        match self {
            CertRole::EtcdPeer => CaKind::Etcd,
            _ => CaKind::Cluster,
        }
    }
}

impl fmt::Display for CertRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaKind {
    Cluster,
    Etcd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignatureAlgorithm {
    Ed25519,
}

/// Maximum certificate lifetimes per role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IssuancePolicy {
    #[serde(with = "duration_secs")]
    pub machine_ttl: Duration,
    #[serde(with = "duration_secs")]
    pub user_ttl: Duration,
    #[serde(with = "duration_secs")]
    pub admin_ttl: Duration,
}

impl Default for IssuancePolicy {
    fn default() -> Self {
        Self { machine_ttl: MACHINE_TTL, user_ttl: USER_TTL, admin_ttl: ADMIN_TTL }
    }
}

impl IssuancePolicy {
    pub fn max_ttl(&self, role: CertRole) -> Duration {
        match role {
            CertRole::ControlPlane | CertRole::Worker | CertRole::GpuWorker | CertRole::EtcdPeer => {
                self.machine_ttl
            }
            CertRole::User => self.user_ttl,
            CertRole::Admin => self.admin_ttl,
        }
    }

    pub fn check(&self, role: CertRole, ttl: Duration) -> Result<(), PkiError> {
        let max = self.max_ttl(role);
        if ttl <= Duration::ZERO || ttl > max {
            return Err(PkiError::TtlExceedsPolicy {
                role,
                ttl: format_duration(ttl),
                max: format_duration(max),
            });
        }
        Ok(())
    }
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(d.whole_seconds())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        i64::deserialize(d).map(Duration::seconds)
    }
}

fn fill(rng: &mut dyn RngCore, buf: &mut [u8]) -> Result<(), PkiError> {
    rng.try_fill_bytes(buf).map_err(|e| PkiError::EntropyUnavailable(e.to_string()))
}

fn random32(rng: &mut dyn RngCore) -> Result<[u8; 32], PkiError> {
    let mut b = [0u8; 32];
    fill(rng, &mut b)?;
    Ok(b)
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_be_bytes());
        h.update(p);
    }
    h.finalize().into()
}

fn rcgen_keypair(key: &SigningKey) -> Result<KeyPair, PkiError> {
    let der = key.to_pkcs8_der().map_err(|e| PkiError::Generation(e.to_string()))?;
    KeyPair::try_from(der.as_bytes()).map_err(|e| PkiError::Generation(e.to_string()))
}

/// Positive, non-zero 16-byte serial derived from the certificate contents.
fn serial_for(parts: &[&[u8]]) -> SerialNumber {
    let digest = sha256(parts);
    let mut serial = digest[..16].to_vec();
    serial[0] = (serial[0] & 0x7f) | 0x40;
    SerialNumber::from_slice(&serial)
}

fn truncate_to_second(t: OffsetDateTime) -> OffsetDateTime {
    t.replace_nanosecond(0).expect("zero nanoseconds is valid")
}

/// A certificate authority: its certificate plus signing key.
#[derive(Clone)]
pub struct CertificateWithKey {
    pub certificate: Certificate,
    key: SigningKey,
    params: CaParams,
}

impl fmt::Debug for CertificateWithKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CertificateWithKey")
            .field("certificate", &self.certificate.subject)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CaParams {
    kind: CaKind,
    cluster_id: String,
    created_at: OffsetDateTime,
}

impl CaParams {
    fn rcgen_params(&self, key: &SigningKey) -> CertificateParams {
        let key_id = hex::encode(&Sha256::digest(key.verifying_key().as_bytes())[..8]);
        let mut dn = DistinguishedName::new();
        let cn = match self.kind {
            CaKind::Cluster => "sskuba cluster CA",
            CaKind::Etcd => "sskuba etcd CA",
        };
        dn.push(DnType::CommonName, cn);
        dn.push(DnType::OrganizationName, self.cluster_id.as_str());
        dn.push(DnType::OrganizationalUnitName, format!("key-{key_id}"));
        let mut p = CertificateParams::default();
        p.distinguished_name = dn;
        p.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
        p.key_usages =
            vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign, KeyUsagePurpose::DigitalSignature];
        p.not_before = self.created_at;
        p.not_after = self.created_at + CA_LIFETIME;
        p.serial_number = Some(serial_for(&[
            b"ca",
            self.cluster_id.as_bytes(),
            cn.as_bytes(),
            key.verifying_key().as_bytes(),
        ]));
        p.use_authority_key_identifier_extension = true;
        p
    }

    fn build(&self, key: &SigningKey) -> Result<(rcgen::Certificate, KeyPair), PkiError> {
        let kp = rcgen_keypair(key)?;
        let cert = self
            .rcgen_params(key)
            .self_signed(&kp)
            .map_err(|e| PkiError::Generation(e.to_string()))?;
        Ok((cert, kp))
    }
}

impl CertificateWithKey {
    fn create(kind: CaKind, cluster_id: &str, created_at: OffsetDateTime, seed: [u8; 32]) -> Result<Self, PkiError> {
        let key = SigningKey::from_bytes(&seed);
        let params = CaParams { kind, cluster_id: cluster_id.to_string(), created_at };
        let (cert, _) = params.build(&key)?;
        let certificate = Certificate::from_der(cert.der())?;
        Ok(Self { certificate, key, params })
    }

    pub fn public_key(&self) -> VerifyingKey {
        self.key.verifying_key()
    }

    /// The CA's signing key. Held in memory only; persisted solely inside
    /// the sealed trust bundle.
    pub fn signing_key(&self) -> &SigningKey {
        &self.key
    }
}

/// A parsed X.509 certificate issued (or self-issued) by this module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Certificate {
    pub subject: String,
    /// Role from the subject organization attribute; `None` for CAs.
    pub role: Option<CertRole>,
    pub not_before: OffsetDateTime,
    pub not_after: OffsetDateTime,
    pub public_key: [u8; 32],
    pub is_ca: bool,
    der: Vec<u8>,
}

impl Certificate {
    pub fn from_der(der: &[u8]) -> Result<Self, PkiError> {
        let (rest, cert) =
            x509_parser::parse_x509_certificate(der).map_err(|e| malformed("certificate", e))?;
        if !rest.is_empty() {
            return Err(malformed("certificate", "trailing bytes"));
        }
        let subject = cert
            .subject()
            .iter_common_name()
            .next()
            .and_then(|a| a.as_str().ok())
            .unwrap_or_default()
            .to_string();
        let role = cert
            .subject()
            .iter_organizational_unit()
            .filter_map(|a| a.as_str().ok())
            .find_map(|ou| ou.strip_prefix("role:").and_then(CertRole::parse));
        let spki = &cert.public_key().subject_public_key.data;
        let public_key: [u8; 32] =
            spki.as_ref().try_into().map_err(|_| malformed("certificate", "not an Ed25519 key"))?;
        let is_ca = cert.is_ca();
        let not_before = cert.validity().not_before.to_datetime();
        let not_after = cert.validity().not_after.to_datetime();
        Ok(Self { subject, role, not_before, not_after, public_key, is_ca, der: der.to_vec() })
    }

    pub fn from_pem(pem: &str) -> Result<Self, PkiError> {
        let body: String = pem
            .lines()
            .filter(|l| !l.starts_with("-----"))
            .collect();
        let der = B64.decode(body.trim()).map_err(|e| malformed("certificate PEM", e))?;
        Self::from_der(&der)
    }

    pub fn der(&self) -> &[u8] {
        &self.der
    }

    pub fn to_pem(&self) -> String {
        pem_encode("CERTIFICATE", &self.der)
    }

    pub fn lifetime(&self) -> Duration {
        self.not_after - self.not_before
    }
}

fn pem_encode(label: &str, der: &[u8]) -> String {
    let b64 = B64.encode(der);
    let mut out = format!("-----BEGIN {label}-----\n");
    for chunk in b64.as_bytes().chunks(64) {
        out.push_str(std::str::from_utf8(chunk).expect("base64 is ascii"));
        out.push('\n');
    }
    out.push_str(&format!("-----END {label}-----\n"));
    out
}

fn pem_decode(label: &str, pem: &str) -> Result<Vec<u8>, PkiError> {
    let begin = format!("-----BEGIN {label}-----");
    let end = format!("-----END {label}-----");
    let start = pem.find(&begin).ok_or_else(|| malformed("PEM", format!("missing {begin}")))?;
    let stop = pem.find(&end).ok_or_else(|| malformed("PEM", format!("missing {end}")))?;
    let body: String = pem[start + begin.len()..stop].split_whitespace().collect();
    B64.decode(body).map_err(|e| malformed("PEM", e))
}

/// A certificate with its freshly generated private key.
pub struct IssuedCert {
    pub certificate: Certificate,
    key: SigningKey,
}

impl fmt::Debug for IssuedCert {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IssuedCert").field("certificate", &self.certificate).finish_non_exhaustive()
    }
}

impl IssuedCert {
    /// PKCS#8 PEM of the private key. Only ever written inside sealed
    /// blobs or user-requested kubeconfigs.
    pub fn private_key_pem(&self) -> String {
        let der = self.key.to_pkcs8_der().expect("ed25519 keys encode");
        pem_encode("PRIVATE KEY", der.as_bytes())
    }
}

/// Public half of the seal keypair.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct SealPublicKey(XPublicKey);

impl fmt::Debug for SealPublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealPublicKey({})", self.to_hex())
    }
}

impl SealPublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0.as_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, PkiError> {
        let bytes: [u8; 32] = hex::decode(s)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| malformed("seal public key", "expected 32 hex-encoded bytes"))?;
        Ok(Self(XPublicKey::from(bytes)))
    }

    /// SHA-256 of the key bytes; identifies the recipient of a sealed blob.
    pub fn key_id(&self) -> [u8; 32] {
        Sha256::digest(self.0.as_bytes()).into()
    }
}

/// Private half of the seal keypair. Lives only in the operator key file.
#[derive(Clone)]
pub struct SealPrivateKey(StaticSecret);

impl fmt::Debug for SealPrivateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealPrivateKey({})", self.public().to_hex())
    }
}

impl SealPrivateKey {
    pub fn generate(rng: &mut dyn RngCore) -> Result<Self, PkiError> {
        Ok(Self(StaticSecret::from(random32(rng)?)))
    }

    pub fn public(&self) -> SealPublicKey {
        SealPublicKey(XPublicKey::from(&self.0))
    }

    /// Operator key file contents.
    pub fn to_pem(&self) -> String {
        pem_encode(OPERATOR_KEY_LABEL, self.0.as_bytes())
    }

    pub fn from_pem(pem: &str) -> Result<Self, PkiError> {
        let bytes: [u8; 32] = pem_decode(OPERATOR_KEY_LABEL, pem)?
            .try_into()
            .map_err(|_| malformed("operator key", "expected 32 bytes"))?;
        Ok(Self(StaticSecret::from(bytes)))
    }
}

/// Binary layout: magic (16) | recipient key id (32) | ephemeral public
/// key (32) | nonce (12) | ciphertext with 16-byte tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedBlob {
    pub recipient_key_id: [u8; 32],
    ephemeral: [u8; 32],
    nonce: [u8; 12],
    pub ciphertext: Vec<u8>,
}

const HEADER_LEN: usize = 16 + 32 + 32 + 12;
const TAG_LEN: usize = 16;

impl SealedBlob {
    fn header(&self) -> Vec<u8> {
        let mut h = Vec::with_capacity(HEADER_LEN);
        h.extend_from_slice(SEAL_MAGIC);
        h.extend_from_slice(&self.recipient_key_id);
        h.extend_from_slice(&self.ephemeral);
        h.extend_from_slice(&self.nonce);
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header();
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PkiError> {
        if bytes.len() < HEADER_LEN + TAG_LEN {
            return Err(malformed("sealed blob", "too short"));
        }
        if &bytes[..16] != SEAL_MAGIC {
            return Err(malformed("sealed blob", "bad magic header"));
        }
        Ok(Self {
            recipient_key_id: bytes[16..48].try_into().expect("sized"),
            ephemeral: bytes[48..80].try_into().expect("sized"),
            nonce: bytes[80..92].try_into().expect("sized"),
            ciphertext: bytes[HEADER_LEN..].to_vec(),
        })
    }

    pub fn recipient_key_id_hex(&self) -> String {
        hex::encode(self.recipient_key_id)
    }
}

fn seal_cipher(shared: &[u8; 32], ephemeral: &[u8; 32], recipient: &SealPublicKey) -> ChaCha20Poly1305 {
    let mut salt = Vec::with_capacity(64);
    salt.extend_from_slice(ephemeral);
    salt.extend_from_slice(recipient.0.as_bytes());
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; 32];
    hk.expand(SEAL_INFO, &mut key).expect("32 bytes is a valid HKDF length");
    ChaCha20Poly1305::new(&key.into())
}

/// Encrypts `plaintext` to `recipient` using OS entropy.
pub fn seal(plaintext: &[u8], recipient: &SealPublicKey) -> Result<SealedBlob, PkiError> {
    seal_with(plaintext, recipient, &mut OsRng)
}

pub fn seal_with(
    plaintext: &[u8],
    recipient: &SealPublicKey,
    rng: &mut dyn RngCore,
) -> Result<SealedBlob, PkiError> {
    let eph = StaticSecret::from(random32(rng)?);
    let ephemeral = *XPublicKey::from(&eph).as_bytes();
    let mut nonce = [0u8; 12];
    fill(rng, &mut nonce)?;
    let shared = eph.diffie_hellman(&recipient.0);
    let mut blob =
        SealedBlob { recipient_key_id: recipient.key_id(), ephemeral, nonce, ciphertext: Vec::new() };
    let aad = blob.header();
    blob.ciphertext = seal_cipher(shared.as_bytes(), &ephemeral, recipient)
        .encrypt(&nonce.into(), Payload { msg: plaintext, aad: &aad })
        .map_err(|_| PkiError::IntegrityError)?;
    Ok(blob)
}

pub fn unseal(blob: &SealedBlob, key: &SealPrivateKey) -> Result<Vec<u8>, PkiError> {
    let public = key.public();
    if blob.recipient_key_id != public.key_id() {
        return Err(PkiError::WrongKey);
    }
    let shared = key.0.diffie_hellman(&XPublicKey::from(blob.ephemeral));
    let aad = blob.header();
    seal_cipher(shared.as_bytes(), &blob.ephemeral, &public)
        .decrypt(&blob.nonce.into(), Payload { msg: &blob.ciphertext, aad: &aad })
        .map_err(|_| PkiError::IntegrityError)
}

/// Per-cluster trust material. Immutable after creation.
#[derive(Clone)]
pub struct TrustBundle {
    pub cluster_id: String,
    pub algorithm: SignatureAlgorithm,
    pub policy: IssuancePolicy,
    pub created_at: OffsetDateTime,
    pub cluster_ca: CertificateWithKey,
    pub etcd_ca: CertificateWithKey,
    seal_public: SealPublicKey,
    seal_private: Option<SealPrivateKey>,
    node_seed: [u8; 32],
}

impl fmt::Debug for TrustBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrustBundle")
            .field("cluster_id", &self.cluster_id)
            .field("seal_key_id", &self.seal_key_id())
            .finish_non_exhaustive()
    }
}

/// What gets sealed to disk. The seal private key is not part of it: it is
/// needed to open the blob in the first place.
#[derive(Serialize, Deserialize)]
struct TrustMaterial {
    version: u32,
    cluster_id: String,
    algorithm: SignatureAlgorithm,
    policy: IssuancePolicy,
    #[serde(with = "time::serde::rfc3339")]
    created_at: OffsetDateTime,
    cluster_ca_seed: String,
    etcd_ca_seed: String,
    node_seed: String,
}

fn valid_cluster_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 63 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'.')
}

fn valid_subject(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"-._@:".contains(&b))
}

/// Fresh bundle using OS entropy.
pub fn new_trust_bundle(cluster_id: &str, clock: &dyn Clock) -> Result<TrustBundle, PkiError> {
    new_trust_bundle_with(cluster_id, clock, &mut OsRng)
}

/// Fresh bundle drawing all key material from `rng`.
pub fn new_trust_bundle_with(
    cluster_id: &str,
    clock: &dyn Clock,
    rng: &mut dyn RngCore,
) -> Result<TrustBundle, PkiError> {
    if !valid_cluster_id(cluster_id) {
        return Err(PkiError::InvalidClusterId(cluster_id.into()));
    }
    let cluster_seed = random32(rng)?;
    let etcd_seed = random32(rng)?;
    let seal = SealPrivateKey::generate(rng)?;
    let node_seed = random32(rng)?;
    TrustBundle::assemble(
        cluster_id,
        IssuancePolicy::default(),
        truncate_to_second(clock.now()),
        cluster_seed,
        etcd_seed,
        seal.public(),
        Some(seal),
        node_seed,
    )
}

impl TrustBundle {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cluster_id: &str,
        policy: IssuancePolicy,
        created_at: OffsetDateTime,
        cluster_seed: [u8; 32],
        etcd_seed: [u8; 32],
        seal_public: SealPublicKey,
        seal_private: Option<SealPrivateKey>,
        node_seed: [u8; 32],
    ) -> Result<Self, PkiError> {
        Ok(Self {
            cluster_id: cluster_id.to_string(),
            algorithm: SignatureAlgorithm::Ed25519,
            policy,
            created_at,
            cluster_ca: CertificateWithKey::create(CaKind::Cluster, cluster_id, created_at, cluster_seed)?,
            etcd_ca: CertificateWithKey::create(CaKind::Etcd, cluster_id, created_at, etcd_seed)?,
            seal_public,
            seal_private,
            node_seed,
        })
    }

    pub fn seal_public_key(&self) -> SealPublicKey {
        self.seal_public
    }

    /// The seal private key, present only when this bundle was freshly
    /// generated or opened with it.
    pub fn seal_private_key(&self) -> Option<&SealPrivateKey> {
        self.seal_private.as_ref()
    }

    pub fn seal_key_id(&self) -> String {
        hex::encode(self.seal_public.key_id())
    }

    pub fn ca(&self, kind: CaKind) -> &CertificateWithKey {
        match kind {
            CaKind::Cluster => &self.cluster_ca,
            CaKind::Etcd => &self.etcd_ca,
        }
    }

    /// Seals the bundle's secret material to its own seal key.
    pub fn to_sealed(&self, rng: &mut dyn RngCore) -> Result<SealedBlob, PkiError> {
        let material = TrustMaterial {
            version: 1,
            cluster_id: self.cluster_id.clone(),
            algorithm: self.algorithm,
            policy: self.policy,
            created_at: self.created_at,
            cluster_ca_seed: hex::encode(self.cluster_ca.key.to_bytes()),
            etcd_ca_seed: hex::encode(self.etcd_ca.key.to_bytes()),
            node_seed: hex::encode(self.node_seed),
        };
        let json = serde_json::to_vec(&material).expect("trust material serializes");
        seal_with(&json, &self.seal_public, rng)
    }

    /// Reopens a bundle sealed with [`TrustBundle::to_sealed`].
    pub fn from_sealed(blob: &SealedBlob, key: &SealPrivateKey) -> Result<Self, PkiError> {
        let plain = unseal(blob, key)?;
        let m: TrustMaterial = serde_json::from_slice(&plain).map_err(|e| malformed("trust material", e))?;
        let seed = |s: &str| -> Result<[u8; 32], PkiError> {
            hex::decode(s)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| malformed("trust material", "bad seed"))
        };
        Self::assemble(
            &m.cluster_id,
            m.policy,
            m.created_at,
            seed(&m.cluster_ca_seed)?,
            seed(&m.etcd_ca_seed)?,
            key.public(),
            Some(key.clone()),
            seed(&m.node_seed)?,
        )
    }

    /// Deterministic per-node key for `purpose`.
    pub fn derive_node_key(&self, node: &str, purpose: &str) -> SigningKey {
        SigningKey::from_bytes(&self.derive_secret(node, purpose))
    }

    /// Deterministic 32-byte secret scoped to `(node, purpose)`.
    pub fn derive_secret(&self, node: &str, purpose: &str) -> [u8; 32] {
        let hk = Hkdf::<Sha256>::new(Some(self.cluster_id.as_bytes()), &self.node_seed);
        let mut out = [0u8; 32];
        hk.expand(format!("{NODE_KEY_INFO}|{node}|{purpose}").as_bytes(), &mut out)
            .expect("32 bytes is a valid HKDF length");
        out
    }
}

/// Issues a certificate with a fresh key from OS entropy.
pub fn issue_cert(
    bundle: &TrustBundle,
    subject: &str,
    role: CertRole,
    ttl: Duration,
    clock: &dyn Clock,
) -> Result<IssuedCert, PkiError> {
    let key = SigningKey::from_bytes(&random32(&mut OsRng)?);
    issue_cert_with_key(bundle, subject, role, ttl, clock.now(), key)
}

/// Issues a certificate for an existing key, valid from `now`.
pub fn issue_cert_with_key(
    bundle: &TrustBundle,
    subject: &str,
    role: CertRole,
    ttl: Duration,
    now: OffsetDateTime,
    key: SigningKey,
) -> Result<IssuedCert, PkiError> {
    if !valid_subject(subject) {
        return Err(PkiError::InvalidSubject(subject.into()));
    }
    bundle.policy.check(role, ttl)?;
    let not_before = truncate_to_second(now);
    let ca = bundle.ca(role.issuer());

    let mut dn = DistinguishedName::new();
    dn.push(DnType::CommonName, subject);
    dn.push(DnType::OrganizationName, bundle.cluster_id.as_str());
    dn.push(DnType::OrganizationalUnitName, format!("role:{}", role.as_str()));
    let mut p = CertificateParams::default();
    p.distinguished_name = dn;
    p.is_ca = IsCa::ExplicitNoCa;
    p.key_usages = vec![KeyUsagePurpose::DigitalSignature];
    p.extended_key_usages = match role {
        CertRole::Admin | CertRole::User => vec![ExtendedKeyUsagePurpose::ClientAuth],
        _ => vec![ExtendedKeyUsagePurpose::ServerAuth, ExtendedKeyUsagePurpose::ClientAuth],
    };
    if matches!(role, CertRole::ControlPlane | CertRole::Worker | CertRole::GpuWorker | CertRole::EtcdPeer) {
        let name = subject.try_into().map_err(|_| PkiError::InvalidSubject(subject.into()))?;
        p.subject_alt_names = vec![SanType::DnsName(name)];
    }
    p.not_before = not_before;
    p.not_after = not_before + ttl;
    p.serial_number = Some(serial_for(&[
        subject.as_bytes(),
        role.as_str().as_bytes(),
        &not_before.unix_timestamp().to_be_bytes(),
        key.verifying_key().as_bytes(),
    ]));
    p.use_authority_key_identifier_extension = true;

    let (ca_cert, ca_kp) = ca.params.build(&ca.key)?;
    let leaf_kp = rcgen_keypair(&key)?;
    let cert = p
        .signed_by(&leaf_kp, &ca_cert, &ca_kp)
        .map_err(|e| PkiError::Generation(e.to_string()))?;
    Ok(IssuedCert { certificate: Certificate::from_der(cert.der())?, key })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyFailure {
    Expired,
    NotYetValid,
    UnknownIssuer,
    BadSignature,
    Malformed(String),
}

impl fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VerifyFailure::Expired => f.write_str("expired"),
            VerifyFailure::NotYetValid => f.write_str("not yet valid"),
            VerifyFailure::UnknownIssuer => f.write_str("unknown issuer"),
            VerifyFailure::BadSignature => f.write_str("bad signature"),
            VerifyFailure::Malformed(m) => write!(f, "malformed: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub valid: bool,
    pub issuer: Option<CaKind>,
    pub failure: Option<VerifyFailure>,
}

impl VerifyReport {
    fn fail(issuer: Option<CaKind>, failure: VerifyFailure) -> Self {
        Self { valid: false, issuer, failure: Some(failure) }
    }
}

/// Checks that `cert` was signed by one of the bundle's CAs and is valid at
/// `at`. Never errors; problems are reported.
pub fn verify_chain(cert: &Certificate, bundle: &TrustBundle, at: OffsetDateTime) -> VerifyReport {
    let parsed = match x509_parser::parse_x509_certificate(cert.der()) {
        Ok((_, c)) => c,
        Err(e) => return VerifyReport::fail(None, VerifyFailure::Malformed(e.to_string())),
    };
    let issuer_raw = parsed.issuer().as_raw();
    let found = [CaKind::Cluster, CaKind::Etcd].into_iter().find(|kind| {
        x509_parser::parse_x509_certificate(bundle.ca(*kind).certificate.der())
            .map(|(_, ca)| ca.subject().as_raw() == issuer_raw)
            .unwrap_or(false)
    });
    let Some(kind) = found else {
        return VerifyReport::fail(None, VerifyFailure::UnknownIssuer);
    };
    if parsed.signature_algorithm.algorithm != x509_parser::oid_registry::OID_SIG_ED25519 {
        return VerifyReport::fail(Some(kind), VerifyFailure::BadSignature);
    }
    let signature = match Signature::from_slice(parsed.signature_value.data.as_ref()) {
        Ok(s) => s,
        Err(_) => return VerifyReport::fail(Some(kind), VerifyFailure::BadSignature),
    };
    let tbs: &[u8] = parsed.tbs_certificate.as_ref();
    if bundle.ca(kind).public_key().verify(tbs, &signature).is_err() {
        return VerifyReport::fail(Some(kind), VerifyFailure::BadSignature);
    }
    if at < cert.not_before {
        return VerifyReport::fail(Some(kind), VerifyFailure::NotYetValid);
    }
    if at > cert.not_after {
        return VerifyReport::fail(Some(kind), VerifyFailure::Expired);
    }
    VerifyReport { valid: true, issuer: Some(kind), failure: None }
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeconfigFile {
    #[serde(rename = "apiVersion")]
    api_version: String,
    kind: String,
    clusters: Vec<Named<KubeCluster>>,
    users: Vec<Named<KubeUser>>,
    contexts: Vec<Named<KubeContext>>,
    #[serde(rename = "current-context")]
    current_context: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Named<T> {
    name: String,
    #[serde(flatten)]
    inner: T,
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeCluster {
    cluster: KubeClusterBody,
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeClusterBody {
    server: String,
    #[serde(rename = "certificate-authority-data")]
    certificate_authority_data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeUser {
    user: KubeUserBody,
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeUserBody {
    #[serde(rename = "client-certificate-data")]
    client_certificate_data: String,
    #[serde(rename = "client-key-data")]
    client_key_data: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeContext {
    context: KubeContextBody,
}

#[derive(Debug, Serialize, Deserialize)]
struct KubeContextBody {
    cluster: String,
    user: String,
}

/// A kubeconfig document plus the client certificate embedded in it.
#[derive(Debug)]
pub struct KubeconfigDocument {
    pub yaml: String,
    pub client_certificate: Certificate,
    pub endpoint: String,
}

impl KubeconfigDocument {
    /// Parses a kubeconfig produced by [`generate_kubeconfig`].
    pub fn parse(yaml: &str) -> Result<Self, PkiError> {
        let f: KubeconfigFile = serde_yaml::from_str(yaml).map_err(|e| malformed("kubeconfig", e))?;
        let user = f.users.first().ok_or_else(|| malformed("kubeconfig", "no users"))?;
        let cluster = f.clusters.first().ok_or_else(|| malformed("kubeconfig", "no clusters"))?;
        let pem = B64
            .decode(&user.inner.user.client_certificate_data)
            .map_err(|e| malformed("kubeconfig", e))?;
        let pem = String::from_utf8(pem).map_err(|e| malformed("kubeconfig", e))?;
        Ok(Self {
            yaml: yaml.to_string(),
            client_certificate: Certificate::from_pem(&pem)?,
            endpoint: cluster.inner.cluster.server.clone(),
        })
    }
}

/// Builds a kubeconfig for `identity` against `endpoint`, with a client
/// certificate of `role` valid for `ttl`.
pub fn generate_kubeconfig(
    bundle: &TrustBundle,
    identity: &str,
    role: CertRole,
    ttl: Duration,
    endpoint: &str,
    clock: &dyn Clock,
) -> Result<KubeconfigDocument, PkiError> {
    let issued = issue_cert(bundle, identity, role, ttl, clock)?;
    let cluster = bundle.cluster_id.clone();
    let context = format!("{identity}@{cluster}");
    let file = KubeconfigFile {
        api_version: "v1".into(),
        kind: "Config".into(),
        clusters: vec![Named {
            name: cluster.clone(),
            inner: KubeCluster {
                cluster: KubeClusterBody {
                    server: endpoint.to_string(),
                    certificate_authority_data: B64.encode(bundle.cluster_ca.certificate.to_pem()),
                },
            },
        }],
        users: vec![Named {
            name: identity.to_string(),
            inner: KubeUser {
                user: KubeUserBody {
                    client_certificate_data: B64.encode(issued.certificate.to_pem()),
                    client_key_data: B64.encode(issued.private_key_pem()),
                },
            },
        }],
        contexts: vec![Named {
            name: context.clone(),
            inner: KubeContext { context: KubeContextBody { cluster, user: identity.to_string() } },
        }],
        current_context: context,
    };
    let yaml = serde_yaml::to_string(&file).expect("kubeconfig serializes");
    Ok(KubeconfigDocument { yaml, client_certificate: issued.certificate, endpoint: endpoint.to_string() })
}

#[cfg(test)]
pub(crate) fn test_bundle(seed: u64) -> TrustBundle {
    use rand::SeedableRng;
    let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
    new_trust_bundle_with("demo", &crate::clock::ManualClock::at_epoch(), &mut rng).unwrap()
}
