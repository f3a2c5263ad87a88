//! Interface conformance checks that any [`Provider`] must pass.
//!
//! A backend either performs an operation with the documented result shape
//! or refuses it with `NotImplemented`. Anything else is a failure.

use serde_json::json;

use super::{DnsRecordType, Document, Provider, ProviderError, ResourceKind, ResourceState};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConformanceFailure {
    pub check: &'static str,
    pub detail: String,
}

fn inputs_for(kind: ResourceKind, probe: &str) -> Document {
    let v = match kind {
        ResourceKind::Machine => json!({
            "image": "talos-v1",
            "machine_type": "m.small",
            "config_ref": format!("{probe}.machineconfig.sealed"),
            "cluster": probe,
            "name": format!("{probe}-w-0"),
            "role": "worker",
        }),
        ResourceKind::DnsRecord => json!({
            "zone": "conformance.invalid",
            "name": format!("{probe}.conformance.invalid"),
            "value": "lb.example",
        }),
        ResourceKind::SecretEntry | ResourceKind::StorageClass => {
            json!({ "name": format!("{probe}-{}", kind.as_str().to_ascii_lowercase()) })
        }
        _ => json!({ "name": format!("{probe}-{}", kind.as_str().to_ascii_lowercase()) }),
    };
    v.as_object().unwrap().clone().into_iter().collect()
}

fn refused(e: &ProviderError) -> bool {
    matches!(e, ProviderError::NotImplemented { .. })
}

/// Runs the suite, cleaning up whatever it creates. An empty result means
/// the provider conforms.
pub fn run(provider: &dyn Provider) -> Vec<ConformanceFailure> {
    let mut failures = Vec::new();
    let mut fail = |check: &'static str, detail: String| {
        failures.push(ConformanceFailure { check, detail });
    };
    let probe = "conformance-probe";

    if provider.name().is_empty() {
        fail("name", "provider name is empty".into());
    }

    for kind in ResourceKind::ALL {
        if kind == ResourceKind::DnsRecord {
            continue;
        }
        match provider.create(kind, &inputs_for(kind, probe)) {
            Ok(rec) => {
                if rec.kind != kind {
                    fail("create.kind", format!("{kind}: record kind {}", rec.kind));
                }
                if rec.state != ResourceState::Ready {
                    fail("create.state", format!("{kind}: state {:?}", rec.state));
                }
                if rec.outputs.is_empty() {
                    fail("create.outputs", format!("{kind}: empty outputs once ready"));
                }
                match provider.read(&rec.provider_id) {
                    Ok(again) if again.outputs == rec.outputs => {}
                    Ok(_) => fail("read.outputs", format!("{kind}: outputs changed on read")),
                    Err(e) => fail("read", format!("{kind}: {e}")),
                }
                if let Err(e) = provider.delete(&rec.provider_id) {
                    fail("delete", format!("{kind}: {e}"));
                }
                match provider.read(&rec.provider_id) {
                    Err(ProviderError::NotFound(_)) => {}
                    other => fail("read.after_delete", format!("{kind}: {other:?}")),
                }
                match provider.delete(&rec.provider_id) {
                    Err(ProviderError::NotFound(_)) => {}
                    other => fail("delete.twice", format!("{kind}: {other:?}")),
                }
            }
            Err(e) if refused(&e) => {}
            Err(e) => fail("create", format!("{kind}: {e}")),
        }
    }

    match provider.read("conformance-unknown-id") {
        Err(ProviderError::NotFound(_)) => {}
        Err(e) if refused(&e) => {}
        other => fail("read.unknown", format!("{other:?}")),
    }
    match provider.delete("conformance-unknown-id") {
        Err(ProviderError::NotFound(_)) => {}
        Err(e) if refused(&e) => {}
        other => fail("delete.unknown", format!("{other:?}")),
    }
    match provider.secret_get("conformance-missing-secret") {
        Err(ProviderError::SecretNotFound(_)) => {}
        Err(e) if refused(&e) => {}
        other => fail("secret_get.unknown", format!("{other:?}")),
    }
    match provider.secret_put("conformance-secret", "conformance-value") {
        Ok(()) => match provider.secret_get("conformance-secret") {
            Ok(v) if v == "conformance-value" => {}
            other => fail("secret.round_trip", format!("{other:?}")),
        },
        Err(e) if refused(&e) => {}
        Err(e) => fail("secret_put", e.to_string()),
    }
    match provider.dns_upsert("conformance.invalid", "x.conformance.invalid", DnsRecordType::Cname, "y") {
        Err(ProviderError::ZoneNotFound(_)) => {}
        Err(e) if refused(&e) => {}
        other => fail("dns_upsert.unknown_zone", format!("{other:?}")),
    }
    match provider.snapshot() {
        Ok(s) => {
            if serde_json::from_str::<serde_json::Value>(&s).is_err() {
                fail("snapshot", "snapshot is not JSON".into());
            }
            if s.contains("conformance-value") {
                fail("snapshot.redaction", "secret value present in snapshot".into());
            }
        }
        Err(e) if refused(&e) => {}
        Err(e) => fail("snapshot", e.to_string()),
    }
    failures
}
