//! The `sskuba-ctl` binary: exit codes, read-only plan, JSON run records.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::io::Write;

use common::{copy_dir, testdata};

struct Env {
    root: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        copy_dir(&testdata().join("fleet"), &root.path().join("fleet"));
        std::fs::copy(testdata().join("demo.yaml"), root.path().join("demo.yaml")).unwrap();
        Self { root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.path().join(rel)
    }

    fn run_with_stdin(&self, args: &[&str], stdin: &str) -> Output {
        let mut child = Command::new(env!("CARGO_BIN_EXE_sskuba-ctl"))
            .args(args)
            .current_dir(self.root.path())
            .env("SSKUBA_STACK_DIR", self.path("state"))
            .env("SSKUBA_KEY_DIR", self.path("keys"))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_with_stdin(args, "")
    }

    fn world(&self) -> Vec<u8> {
        std::fs::read(self.path("state/simworld.json")).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn schema_check(doc: &str) {
    let schema: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/run-record.schema.json"))
            .unwrap(),
    )
    .unwrap();
    let instance: serde_json::Value = serde_json::from_str(doc).unwrap();
    let compiled = jsonschema::JSONSchema::compile(&schema).unwrap();
    let errors: Vec<String> = match compiled.validate(&instance) {
        Ok(()) => Vec::new(),
        Err(errs) => errs.map(|e| e.to_string()).collect(),
    };
    assert!(errors.is_empty(), "{errors:?}\n{doc}");
}

#[test]
fn apply_status_plan_destroy_round_trip() {
    let env = Env::new();
    let out = env.run(&["apply", "-f", "demo.yaml", "--output", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    schema_check(&stdout(&out));
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(record["steps_completed"], 13);
    assert_eq!(record["converged"], true);

    let status = env.run(&["status", "--name", "demo"]);
    assert_eq!(code(&status), 0);
    assert!(stdout(&status).contains("5/5 ready"), "{}", stdout(&status));

    let before = env.world();
    let plan = env.run(&["plan", "-f", "demo.yaml"]);
    assert_eq!(code(&plan), 0);
    assert_eq!(stdout(&plan).trim(), "no changes");
    assert_eq!(env.world(), before, "plan changed the simulator");

    let destroy = env.run(&["destroy", "--name", "demo", "--yes", "--output", "json"]);
    assert_eq!(code(&destroy), 0, "{}", String::from_utf8_lossy(&destroy.stderr));
    schema_check(&stdout(&destroy));
    let status = env.run(&["status", "--name", "demo"]);
    assert_eq!(code(&status), 1);
    assert!(String::from_utf8_lossy(&status.stderr).contains("no such stack"));
}

#[test]
fn invalid_manifest_exits_one_without_touching_the_provider() {
    let env = Env::new();
    let text = std::fs::read_to_string(env.path("demo.yaml")).unwrap().replace("count: 3", "count: 2");
    std::fs::write(env.path("bad.yaml"), text).unwrap();
    let out = env.run(&["apply", "-f", "bad.yaml"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("control plane count must be odd"));
    assert!(!env.path("state/simworld.json").exists());
}

#[test]
fn failed_machine_create_exits_two_and_resumes() {
    let env = Env::new();
    let out = env.run(&["apply", "-f", "demo.yaml", "--sim-fault", "Machine:3:fail_create", "--output", "json"]);
    assert_eq!(code(&out), 2);
    schema_check(&stdout(&out));
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(record["steps_completed"], 9);

    let out = env.run(&["apply", "-f", "demo.yaml", "--output", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(record["steps_completed"], 4);
}

#[test]
fn reconcile_budget_exhaustion_exits_three() {
    let env = Env::new();
    let out = env.run(&["apply", "-f", "demo.yaml", "--max-reconcile-steps", "1", "--output", "json"]);
    assert_eq!(code(&out), 3);
    schema_check(&stdout(&out));
}

#[test]
fn destroy_requires_confirmation() {
    let env = Env::new();
    assert_eq!(code(&env.run(&["apply", "-f", "demo.yaml"])), 0);
    let out = env.run_with_stdin(&["destroy", "--name", "demo"], "nope\n");
    assert_eq!(code(&out), 1);
    assert!(env.path("state/demo.checkpoint.json").exists());
    let out = env.run_with_stdin(&["destroy", "--name", "demo"], "demo\n");
    assert_eq!(code(&out), 0);
    assert!(!env.path("state/demo.checkpoint.json").exists());
}

#[test]
fn kubeconfig_requires_registration_and_is_private() {
    let env = Env::new();
    let out = env.run(&["kubeconfig", "--name", "demo", "--identity", "alice"]);
    assert_eq!(code(&out), 1);

    assert_eq!(code(&env.run(&["apply", "-f", "demo.yaml"])), 0);
    let out = env.run(&["kubeconfig", "--name", "demo", "--identity", "alice", "--ttl", "8h", "--out", "alice.kubeconfig"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let meta = std::fs::metadata(env.path("alice.kubeconfig")).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        assert_eq!(meta.permissions().mode() & 0o777, 0o600);
    }
    let yaml = std::fs::read_to_string(env.path("alice.kubeconfig")).unwrap();
    let doc = sskuba::pki::KubeconfigDocument::parse(&yaml).unwrap();
    assert_eq!(doc.endpoint, "https://demo.dev.example.org:6443");

    let out = env.run(&["kubeconfig", "--name", "demo", "--ttl", "13h"]);
    assert_eq!(code(&out), 1);
    let out = env.run(&["kubeconfig", "--name", "demo", "--breakglass"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("breakglass-admin"));
}

#[test]
fn token_mint_prints_a_token() {
    let env = Env::new();
    let out = env.run(&["token-mint", "--ttl", "10m", "--output", "json"]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["token"].as_str().unwrap().len(), 64);
    assert_eq!(code(&env.run(&["token-mint", "--ttl", "soon"])), 1);
}

#[test]
fn bundle_create_and_verify() {
    let env = Env::new();
    let out = env.run(&["bundle", "create", "--repo", "fleet", "--path", "apps", "--store", "bundle"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(code(&env.run(&["bundle", "verify", "--store", "bundle"])), 0);

    let blob = std::fs::read_dir(env.path("bundle/blobs/sha256")).unwrap().next().unwrap().unwrap();
    std::fs::remove_file(blob.path()).unwrap();
    let out = env.run(&["bundle", "verify", "--store", "bundle"]);
    assert_eq!(code(&out), 3);
    assert!(stdout(&out).contains(&format!("missing {}", blob.file_name().to_string_lossy())));
}

#[test]
fn missing_cloud_credentials_exit_two() {
    let env = Env::new();
    let text = std::fs::read_to_string(env.path("demo.yaml")).unwrap().replace("provider: sim", "provider: aws");
    std::fs::write(env.path("aws.yaml"), text).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_sskuba-ctl"))
        .args(["apply", "-f", "aws.yaml"])
        .current_dir(env.root.path())
        .env("SSKUBA_STACK_DIR", env.path("state"))
        .env_remove("SSKUBA_AWS_TOKEN")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("SSKUBA_AWS_TOKEN"));
}
