//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero if any
//! criterion fails.

mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Barrier};
use std::time::{Duration as StdDuration, Instant};

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use sskuba::access::{AccessError, AccessRegistry};
use sskuba::bundle::{blob_path, collect_references, ArtifactRef, BundleStore, Resolver, SyntheticResolver};
use sskuba::clock::{Clock, ManualClock};
use sskuba::cluster::{run_to_convergence, DesiredClusterState};
use sskuba::gitops::{bootstrap_sync, sync_once, RepoSnapshot};
use sskuba::lifecycle::{self, Quiet};
use sskuba::machineconfig::MachineConfig;
use sskuba::node::{EtcdStatus, NodePhase};
use sskuba::pki::{self, CertRole, SealPrivateKey, SealedBlob};
use sskuba::provider::{ClusterRuntime, DnsRecordType, Provider};
use sskuba::stack::{StackCheckpoint, StackError, StepAction};
use time::Duration;

use common::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn end_to_end_lifecycle() -> Outcome {
    let started = Instant::now();
    let ws = Workspace::new();
    let m = manifest(3, 2);
    let sim = sim_for(&m);
    let clock = ManualClock::at_epoch();
    let before = sim.snapshot().map_err(|e| e.to_string())?;

    let record = ws.apply(&sim, &m, &ws.options(1), &clock);
    let status = lifecycle::status(&m.name, &sim, &ws.paths(&m.name)).map_err(|e| e.to_string())?;
    ensure!(status.converged, "status not converged");
    ensure!(status.ready_nodes == 5, "{} ready nodes", status.ready_nodes);
    ensure!(status.etcd == EtcdStatus::Bootstrapped, "etcd {:?}", status.etcd);
    let bootstraps = sim.etcd_bootstrap_count(&m.name);
    ensure!(bootstraps == 1, "etcd bootstrapped {bootstraps} times");

    let lb_hostname = sim
        .live_records()
        .into_iter()
        .find(|r| r.kind.to_string() == "LoadBalancer")
        .and_then(|r| r.output_str("hostname").map(str::to_string))
        .ok_or("no load balancer")?;
    let cname = sim.dns_lookup(&m.domain, &m.fqdn(), DnsRecordType::Cname);
    ensure!(cname.as_deref() == Some(lb_hostname.as_str()), "CNAME {:?} != {lb_hostname}", cname);

    // Revision oracle: SHA-256 over the sorted per-file digests.
    let mut digests: Vec<String> = walkdir::WalkDir::new(ws.root.path().join("fleet/apps"))
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| sha256_hex(&std::fs::read(e.path()).unwrap()))
        .collect();
    digests.sort();
    let expected_rev = sha256_hex(digests.join("\n").as_bytes());
    ensure!(status.gitops_revision.as_deref() == Some(expected_rev.as_str()), "revision {:?}", status.gitops_revision);
    ensure!(record.gitops_revision.as_deref() == Some(expected_rev.as_str()), "run record revision");

    let (_, result) = lifecycle::destroy(&m.name, &sim, &ws.paths(&m.name), &clock, &Quiet);
    result.map_err(|e| e.to_string())?;
    let after = sim.snapshot().map_err(|e| e.to_string())?;
    ensure!(after == before, "snapshot after destroy differs from the initial one");
    let elapsed = started.elapsed();
    ensure!(elapsed < StdDuration::from_secs(5), "took {elapsed:?}");
    Ok(format!("5/5 Ready, etcd x1, CNAME -> {lb_hostname}, destroyed in {elapsed:.2?}"))
}

fn idempotency_and_replacement() -> Outcome {
    let ws = Workspace::new();
    let m = manifest(3, 2);
    let sim = sim_for(&m);
    let clock = ManualClock::at_epoch();
    ws.apply(&sim, &m, &ws.options(2), &clock);
    let paths = ws.paths(&m.name);

    let replan = lifecycle::plan(&m, &paths, &clock).map_err(|e| e.to_string())?;
    ensure!(replan.steps.is_empty(), "unchanged manifest plans {} steps", replan.steps.len());
    let again = ws.apply(&sim, &m, &ws.options(2), &clock);
    ensure!(again.steps_completed == 0, "re-apply ran {} steps", again.steps_completed);

    let cp = paths.checkpoint().load().map_err(|e| e.to_string())?.ok_or("no checkpoint")?;
    let previous: BTreeSet<String> = cp.resources.iter().map(|r| r.urn.as_str().to_string()).collect();
    ensure!(previous == expected_urns("demo", 3, 2), "checkpoint holds {} resources", previous.len());

    let bigger = manifest(3, 3);
    let plan = lifecycle::plan(&bigger, &paths, &clock).map_err(|e| e.to_string())?;
    let deletes: BTreeSet<String> =
        plan.steps.iter().filter(|s| s.action == StepAction::Delete).map(|s| s.urn.as_str().to_string()).collect();
    let creates: BTreeSet<String> =
        plan.steps.iter().filter(|s| s.action == StepAction::Create).map(|s| s.urn.as_str().to_string()).collect();
    let want_creates = expected_urns("demo", 3, 3);
    ensure!(deletes == previous, "deletes {} != previous {}", deletes.len(), previous.len());
    ensure!(creates == want_creates, "creates {} != {}", creates.len(), want_creates.len());
    ensure!(plan.steps.len() == previous.len() + want_creates.len(), "extra steps");

    let replaced = ws.apply(&sim, &bigger, &ws.options(2), &clock);
    ensure!(replaced.converged == Some(true), "replacement did not converge");
    Ok(format!("re-plan 0 steps; workers 2->3 plans {} deletes, {} creates", deletes.len(), creates.len()))
}

fn reconciler_self_healing() -> Outcome {
    let ws = Workspace::new();
    let m = manifest(3, 2);
    let sim = sim_for(&m);
    let clock = ManualClock::at_epoch();
    ws.apply(&sim, &m, &ws.options(3), &clock);
    let desired = DesiredClusterState::from_manifest(&m);
    let budget = 10 * desired.nodes.len() as u32;
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut worst = 0;
    for trial in 0..100 {
        let victim = &desired.nodes[rng.gen_range(0..desired.nodes.len())].name;
        sim.kill_node(victim).map_err(|e| format!("trial {trial}: {e}"))?;
        sim.tick(rng.gen_range(0..4));
        let status = run_to_convergence(&desired, &sim, budget).map_err(|e| format!("trial {trial} ({victim}): {e}"))?;
        worst = worst.max(status.steps_used);
        let obs = sim.observe_nodes(&m.name).map_err(|e| e.to_string())?;
        ensure!(obs.nodes.iter().all(|n| n.phase == NodePhase::Ready), "trial {trial}: not all Ready");
    }
    ensure!(sim.etcd_bootstrap_count(&m.name) == 1, "etcd re-bootstrapped");
    Ok(format!("100/100 trials converged, worst {worst} of {budget} steps"))
}

fn openssl_verify(dir: &Path, ca_pem: &str, cert_pem: &str, at: i64, tag: &str) -> Result<(), String> {
    let ca = dir.join(format!("{tag}-ca.pem"));
    let cert = dir.join(format!("{tag}.pem"));
    std::fs::write(&ca, ca_pem).unwrap();
    std::fs::write(&cert, cert_pem).unwrap();
    let out = Command::new("openssl")
        .args(["verify", "-x509_strict", "-attime", &at.to_string(), "-CAfile"])
        .arg(&ca)
        .arg(&cert)
        .output()
        .map_err(|e| format!("openssl unavailable: {e}"))?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{tag}: {}{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn kubeconfig_pems(yaml: &str) -> (String, String, String) {
    let v: serde_yaml::Value = serde_yaml::from_str(yaml).unwrap();
    let b64 = |s: &serde_yaml::Value| {
        String::from_utf8(base64::engine::general_purpose::STANDARD.decode(s.as_str().unwrap()).unwrap()).unwrap()
    };
    let ca = b64(&v["clusters"][0]["cluster"]["certificate-authority-data"]);
    let cert = b64(&v["users"][0]["user"]["client-certificate-data"]);
    let key = b64(&v["users"][0]["user"]["client-key-data"]);
    (ca, cert, key)
}

fn pki_soundness() -> Outcome {
    let ws = Workspace::new();
    let m = manifest(3, 2);
    let sim = sim_for(&m);
    let clock = ManualClock::at_epoch();
    ws.apply(&sim, &m, &ws.options(4), &clock);
    let paths = ws.paths(&m.name);
    let at = clock.now().unix_timestamp() + 60;
    let scratch = tempfile::tempdir().unwrap();

    let key_pem = std::fs::read_to_string(paths.operator_key()).map_err(|e| e.to_string())?;
    let key = SealPrivateKey::from_pem(&key_pem).map_err(|e| e.to_string())?;
    let bundle = lifecycle::open_trust(&paths).map_err(|e| e.to_string())?.ok_or("no trust bundle")?;

    let mut secrets: Vec<String> = vec![
        key_pem.trim().to_string(),
        hex::encode(bundle.cluster_ca.signing_key().to_bytes()),
        hex::encode(bundle.etcd_ca.signing_key().to_bytes()),
    ];
    let mut checked = 0;
    let configs = std::fs::read_dir(paths.machineconfigs()).map_err(|e| e.to_string())?;
    for entry in configs {
        let path = entry.unwrap().path();
        let blob = SealedBlob::from_bytes(&std::fs::read(&path).unwrap()).map_err(|e| e.to_string())?;
        let cfg = MachineConfig::unseal(&blob, &key).map_err(|e| e.to_string())?;
        openssl_verify(scratch.path(), &cfg.certs.cluster_ca_pem, &cfg.certs.node_cert_pem, at, &cfg.node_name)?;
        checked += 1;
        secrets.push(cfg.certs.node_key_pem.trim().to_string());
        secrets.push(cfg.secrets.bootstrap_token.clone());
        if let Some(peer) = &cfg.certs.etcd_peer {
            openssl_verify(scratch.path(), &peer.ca_pem, &peer.cert_pem, at, &format!("{}-etcd", cfg.node_name))?;
            checked += 1;
            secrets.push(peer.key_pem.trim().to_string());
        }
    }

    let admin = lifecycle::breakglass_kubeconfig(&paths).map_err(|e| e.to_string())?;
    let (ca, cert, admin_key) = kubeconfig_pems(&admin);
    openssl_verify(scratch.path(), &ca, &cert, at, "breakglass")?;
    checked += 1;
    secrets.push(admin_key.trim().to_string());

    let user = lifecycle::user_kubeconfig(&m.name, "alice", Duration::hours(8), &paths, &clock)
        .map_err(|e| e.to_string())?;
    let (ca, cert, _) = kubeconfig_pems(&user);
    openssl_verify(scratch.path(), &ca, &cert, at, "alice")?;
    checked += 1;

    for role in CertRole::ALL {
        let ttl = bundle.policy.max_ttl(role);
        let issued = pki::issue_cert(&bundle, &format!("probe-{}", role.as_str()), role, ttl, &clock)
            .map_err(|e| e.to_string())?;
        let ca = match role {
            CertRole::EtcdPeer => &bundle.etcd_ca,
            _ => &bundle.cluster_ca,
        };
        openssl_verify(scratch.path(), &ca.certificate.to_pem(), &issued.certificate.to_pem(), at, role.as_str())?;
        checked += 1;
    }

    // Private-key scan over everything persisted in the stack directory.
    let mut scanned = 0;
    for entry in walkdir::WalkDir::new(ws.stack_dir()) {
        let entry = entry.unwrap();
        if !entry.file_type().is_file() {
            continue;
        }
        let bytes = std::fs::read(entry.path()).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        ensure!(!text.contains("PRIVATE KEY"), "PEM private key marker in {}", entry.path().display());
        for s in &secrets {
            let b64 = base64::engine::general_purpose::STANDARD.encode(s);
            ensure!(
                !text.contains(s.as_str()) && !text.contains(&b64),
                "secret material in {}",
                entry.path().display()
            );
        }
        scanned += 1;
    }
    Ok(format!("{checked}/{checked} certificates verified by openssl; {scanned} persisted files clean"))
}

fn crash_consistency() -> Outcome {
    let m = manifest(3, 2);
    let clock = ManualClock::at_epoch();
    let reference = {
        let ws = Workspace::new();
        let sim = sim_for(&m);
        let record = ws.apply(&sim, &m, &ws.options(5), &clock);
        ensure!(record.steps_completed == 13, "uninterrupted apply ran {} steps", record.steps_completed);
        sim.snapshot().map_err(|e| e.to_string())?
    };
    for point in 0..13 {
        let ws = Workspace::new();
        let sim = sim_for(&m);
        let mut opts = ws.options(5);
        opts.interrupt_after = Some(point);
        let (_, result) = lifecycle::apply(&m, &sim, &ws.paths(&m.name), &clock, &opts, &Quiet);
        match result {
            Err(lifecycle::LifecycleError::Stack(StackError::Interrupted { .. })) => {}
            other => return Err(format!("point {point}: expected interruption, got {other:?}")),
        }
        let cp: StackCheckpoint = ws.paths(&m.name).checkpoint().load().map_err(|e| e.to_string())?.unwrap();
        ensure!(cp.resources.len() == point, "point {point}: checkpoint has {}", cp.resources.len());
        let resumed = ws.apply(&sim, &m, &ws.options(5), &clock);
        ensure!(resumed.steps_completed == 13 - point, "point {point}: resume ran {}", resumed.steps_completed);
        let snap = sim.snapshot().map_err(|e| e.to_string())?;
        ensure!(snap == reference, "point {point}: final snapshot differs");
    }
    Ok("13/13 interruption points resume to the uninterrupted snapshot".into())
}

fn gitops_sync() -> Outcome {
    let ws = Workspace::new();
    let m = manifest(1, 0);
    let sim = sim_for(&m);
    let clock = ManualClock::at_epoch();
    ws.apply(&sim, &m, &ws.options(6), &clock);
    // The apply already synced; start from a clean sync-owned slate.
    let apps = ws.root.path().join("fleet/apps");
    let files: Vec<_> = std::fs::read_dir(&apps).unwrap().map(|e| e.unwrap().path()).collect();
    ensure!(files.len() >= 5, "fixture has {} files", files.len());
    let moved = tempfile::tempdir().unwrap();
    for f in &files {
        std::fs::rename(f, moved.path().join(f.file_name().unwrap())).unwrap();
    }
    let empty = RepoSnapshot::load(&ws.root.path().join("fleet"), "apps").map_err(|e| e.to_string())?;
    sync_once(&sim, &m.name, &empty).map_err(|e| e.to_string())?;
    for f in &files {
        std::fs::rename(moved.path().join(f.file_name().unwrap()), f).unwrap();
    }

    bootstrap_sync(&sim, &m.name, &m.gitops, ws.root.path()).map_err(|e| e.to_string())?;
    let load = || RepoSnapshot::load(&ws.root.path().join("fleet"), "apps").map_err(|e| e.to_string());
    let first = sync_once(&sim, &m.name, &load()?).map_err(|e| e.to_string())?;
    let all: BTreeSet<String> = files.iter().map(|f| scan_object_id(f)).collect();
    let applied: BTreeSet<String> = first.applied.iter().cloned().collect();
    ensure!(first.applied.len() == files.len(), "applied {}", first.applied.len());
    ensure!(applied == all, "applied ids {:?}", applied);

    let mut sorted = files.clone();
    sorted.sort();
    let removed: BTreeSet<String> = sorted[..2].iter().map(|f| scan_object_id(f)).collect();
    for f in &sorted[..2] {
        std::fs::remove_file(f).unwrap();
    }
    let second = sync_once(&sim, &m.name, &load()?).map_err(|e| e.to_string())?;
    let pruned: BTreeSet<String> = second.pruned.iter().cloned().collect();
    ensure!(pruned == removed && second.applied.is_empty(), "pruned {:?} applied {:?}", pruned, second.applied);
    let third = sync_once(&sim, &m.name, &load()?).map_err(|e| e.to_string())?;
    ensure!(third.is_noop(), "unchanged tree re-applied {:?}", third);
    Ok(format!("applied {}, pruned 2, re-sync empty", first.applied.len()))
}

struct Panicking;
impl Resolver for Panicking {
    fn resolve(&self, a: &ArtifactRef) -> Result<Vec<u8>, String> {
        panic!("verify tried to resolve {}", a.locator);
    }
}

fn air_gap_bundle() -> Outcome {
    let fleet = testdata().join("fleet");
    let snapshot = RepoSnapshot::load(&fleet, "apps").map_err(|e| e.to_string())?;
    let refs = collect_references(&snapshot);
    let found: BTreeSet<String> = refs.iter().map(|r| r.locator.clone()).collect();
    ensure!(found == scan_locators(&fleet.join("apps")), "collected {:?}", found);

    let dir = tempfile::tempdir().unwrap();
    let clock = ManualClock::at_epoch();
    let manifest = BundleStore::new(dir.path(), SyntheticResolver).build(&snapshot, &clock).map_err(|e| e.to_string())?;
    let offline = BundleStore::new(dir.path(), Panicking);
    let report = offline.verify(&manifest);
    ensure!(report.is_complete(), "fresh bundle report {:?}", report);
    for e in &manifest.entries {
        let path = blob_path(dir.path(), &e.digest);
        let saved = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        let r = offline.verify(&manifest);
        ensure!(r.missing == vec![e.digest.clone()] && r.corrupt.is_empty(), "removing {} reported {:?}", e.digest, r);
        std::fs::write(&path, saved).unwrap();
    }
    Ok(format!("{} artifacts; each single-blob removal named exactly", manifest.entries.len()))
}

fn single_use_join_token() -> Outcome {
    let clock = Arc::new(ManualClock::at_epoch());
    let mut seeds = StdRng::seed_from_u64(0xacce55);
    for trial in 0..1000 {
        let registry = Arc::new(AccessRegistry::in_memory());
        let token = registry.mint_join_token(Duration::minutes(30), &*clock).map_err(|e| e.to_string())?;
        let barrier = Arc::new(Barrier::new(2));
        let delays: [u32; 2] = [seeds.gen_range(0..200), seeds.gen_range(0..200)];
        let handles: Vec<_> = (0..2)
            .map(|i| {
                let (registry, barrier, clock) = (registry.clone(), barrier.clone(), clock.clone());
                let token = token.value().to_string();
                let spin = delays[i];
                std::thread::spawn(move || {
                    barrier.wait();
                    for _ in 0..spin {
                        std::hint::spin_loop();
                    }
                    registry.redeem(&token, &format!("c{i}"), "c.example.org", &*clock)
                })
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let ok = results.iter().filter(|r| r.is_ok()).count();
        let reused = results.iter().filter(|r| matches!(r, Err(AccessError::TokenReused))).count();
        ensure!(ok == 1 && reused == 1, "trial {trial}: {ok} succeeded, {reused} rejected");
    }
    Ok("1000/1000 trials: exactly one redeem succeeded".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("end-to-end lifecycle", end_to_end_lifecycle),
        ("idempotency and replacement", idempotency_and_replacement),
        ("reconciler self-healing", reconciler_self_healing),
        ("pki soundness", pki_soundness),
        ("crash consistency", crash_consistency),
        ("gitops sync", gitops_sync),
        ("air-gap bundle", air_gap_bundle),
        ("single-use join token", single_use_join_token),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("acceptance: PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("acceptance: FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("acceptance: FAIL {name}: panicked");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 8 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
