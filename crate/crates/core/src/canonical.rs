//! Canonical JSON encoding and content digests.
//!
//! Every digest in the crate (manifest hashes, resource input hashes, sync
//! revisions, bundle digests) goes through this module so that the same
//! value hashes identically across processes and platforms.

use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

/// Rebuilds `value` with every object's keys in lexicographic order.
pub fn canonicalize(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            let mut sorted = Map::new();
            for (k, v) in entries {
                sorted.insert(k, canonicalize(v));
            }
            Value::Object(sorted)
        }
        Value::Array(items) => Value::Array(items.into_iter().map(canonicalize).collect()),
        other => other,
    }
}

/// Compact canonical encoding: sorted keys, no insignificant whitespace.
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("value is representable as JSON");
    serde_json::to_vec(&canonicalize(v)).expect("canonical JSON encodes")
}

/// Indented canonical encoding, used for files meant to be read by people.
pub fn to_canonical_pretty<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value is representable as JSON");
    let mut s = serde_json::to_string_pretty(&canonicalize(v)).expect("canonical JSON encodes");
    s.push('\n');
    s
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the canonical encoding of `value`.
pub fn digest_of<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(&to_canonical_bytes(value))
}
