//! `sskuba-ctl`: the command surface over the lifecycle.
//!
//! Exit codes: 0 success, 1 validation or user error, 2 provider or
//! runtime error, 3 diverged or incomplete.

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::access::AccessRegistry;
use crate::bundle::{BundleManifest, BundleStore, MirrorResolver, SyntheticResolver, MANIFEST_FILE};
use crate::clock::{format_duration, parse_duration, Clock, SystemClock};
use crate::gitops::{resolve_repository, RepoSnapshot};
use crate::lifecycle::{self, ApplyOptions, LifecycleError, Progress, RunRecord, StackPaths, StageRecord};
use crate::manifest::{self, ClusterManifest, ProviderKind};
use crate::pki::USER_TTL;
use crate::provider::{FaultSpec, ProviderError, SimConfig, Simulator, Target, UnimplementedCloud};
use crate::stack::{Plan, PlanStep, PlanStepView};

pub const SIM_WORLD_FILE: &str = "simworld.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sskuba-ctl", version, about = "Create, reconcile and destroy ephemeral clusters from one manifest")]
pub struct Cli {
    /// Directory holding stack checkpoints and sealed state.
    #[arg(long, global = true, env = "SSKUBA_STACK_DIR", default_value = ".sskuba")]
    pub stack_dir: PathBuf,
    /// Directory for operator keys; defaults to the stack directory.
    #[arg(long, global = true, env = "SSKUBA_KEY_DIR")]
    pub key_dir: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = OutputFormat::Text)]
    pub output: OutputFormat,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create or update the cluster described by a manifest.
    Apply(ApplyArgs),
    /// Show what apply would change, without changing anything.
    Plan(ManifestArg),
    /// Tear down a stack and everything it created.
    Destroy(DestroyArgs),
    /// Report a stack's observed state.
    Status(NameArg),
    /// Issue a short-lived user kubeconfig, or open the break-glass one.
    Kubeconfig(KubeconfigArgs),
    /// Mint a single-use join token.
    TokenMint(TokenArgs),
    /// Air-gap bundles.
    #[command(subcommand)]
    Bundle(BundleCommand),
}

#[derive(Debug, Args)]
pub struct ManifestArg {
    #[arg(short = 'f', long = "file")]
    pub file: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(short = 'f', long = "file")]
    pub file: PathBuf,
    /// Accepted for non-interactive use; apply never prompts.
    #[arg(long)]
    pub yes: bool,
    /// Independent resource steps in flight.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    /// Simulated ticks between reconcile steps.
    #[arg(long, default_value_t = 1)]
    pub reconcile_interval: u32,
    #[arg(long)]
    pub max_reconcile_steps: Option<u32>,
    /// Simulator fault, `KIND:ORDINAL:BEHAVIOR`. Repeatable.
    #[arg(long, hide = true)]
    pub sim_fault: Vec<String>,
    #[arg(long, hide = true)]
    pub interrupt_after: Option<usize>,
    #[arg(long, hide = true)]
    pub entropy_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DestroyArgs {
    /// Stack name; alternatively pass the manifest with -f.
    #[arg(long, required_unless_present = "file")]
    pub name: Option<String>,
    #[arg(short = 'f', long = "file")]
    pub file: Option<PathBuf>,
    /// Skip the confirmation prompt.
    #[arg(long)]
    pub yes: bool,
}

#[derive(Debug, Args)]
pub struct NameArg {
    #[arg(long)]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct KubeconfigArgs {
    #[arg(long)]
    pub name: String,
    #[arg(long, default_value = "operator")]
    pub identity: String,
    #[arg(long, default_value = "12h")]
    pub ttl: String,
    /// Write to this file (mode 0600) instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Open the sealed break-glass admin kubeconfig instead.
    #[arg(long)]
    pub breakglass: bool,
}

#[derive(Debug, Args)]
pub struct TokenArgs {
    #[arg(long, default_value = "30m")]
    pub ttl: String,
}

#[derive(Debug, Subcommand)]
pub enum BundleCommand {
    /// Collect and store every artifact a GitOps tree refers to.
    Create(BundleCreateArgs),
    /// Re-hash a bundle's blobs offline.
    Verify(BundleVerifyArgs),
}

#[derive(Debug, Args)]
pub struct BundleCreateArgs {
    #[arg(long)]
    pub repo: PathBuf,
    #[arg(long, default_value = ".")]
    pub path: String,
    #[arg(long)]
    pub store: PathBuf,
    /// Directory of mirrored artifacts; without it content is synthesized.
    #[arg(long)]
    pub mirror: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BundleVerifyArgs {
    #[arg(long)]
    pub store: PathBuf,
}

/// Builds the target named by a manifest. The simulator world is shared
/// by all stacks in one stack directory.
pub fn open_target(
    provider: ProviderKind,
    domain: &str,
    stack_dir: &Path,
    faults: &[FaultSpec],
) -> Result<Box<dyn Target>, ProviderError> {
    match provider {
        ProviderKind::Sim => {
            std::fs::create_dir_all(stack_dir).map_err(|e| ProviderError::Persistence(e.to_string()))?;
            let sim = Simulator::open(&stack_dir.join(SIM_WORLD_FILE), SimConfig::with_zone(domain))?;
            for f in faults {
                sim.inject(*f);
            }
            Ok(Box::new(sim))
        }
        other => Ok(Box::new(UnimplementedCloud::from_env(other)?)),
    }
}

struct Console<'a> {
    text: bool,
    err: std::cell::RefCell<&'a mut dyn Write>,
}

impl Progress for Console<'_> {
    fn stage(&self, r: &StageRecord) {
        if self.text {
            let _ = writeln!(self.err.borrow_mut(), "==> {:<14} {:?}: {}", r.stage, r.status, r.detail);
        }
    }

    fn step(&self, s: &PlanStep) {
        if self.text {
            let _ = writeln!(self.err.borrow_mut(), "    {}", PlanStepView(s));
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, v: &T) {
    let _ = writeln!(out, "{}", serde_json::to_string_pretty(v).expect("serializable"));
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn run<I, T>(args: I, stdin: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USER } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{rendered}") } else { write!(out, "{rendered}") };
            return code;
        }
    };
    dispatch(&cli, &SystemClock, stdin, out, err)
}

pub fn dispatch(
    cli: &Cli,
    clock: &dyn Clock,
    stdin: &mut dyn BufRead,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let json = cli.output == OutputFormat::Json;
    let paths_for = |name: &str| {
        let p = StackPaths::new(&cli.stack_dir, name);
        match &cli.key_dir {
            Some(k) => p.with_key_dir(k),
            None => p,
        }
    };
    let fail = |out: &mut dyn Write, err: &mut dyn Write, command: &str, stack: &str, e: &LifecycleError| {
        if json {
            let mut r = RunRecord::new(command, stack);
            r.fail(e);
            print_json(out, &r);
        } else {
            let _ = writeln!(err, "error: {e}");
        }
        e.exit_code()
    };

    match &cli.command {
        Command::Apply(a) => {
            let m = match lifecycle::load_manifest(&a.file) {
                Ok(m) => m,
                Err(e) => return fail(out, err, "apply", "", &e),
            };
            let mut faults = Vec::new();
            for f in &a.sim_fault {
                match f.parse::<FaultSpec>() {
                    Ok(spec) => faults.push(spec),
                    Err(e) => {
                        let _ = writeln!(err, "error: --sim-fault {f}: {e}");
                        return EXIT_USER;
                    }
                }
            }
            let target = match open_target(m.provider, &m.domain, &cli.stack_dir, &faults) {
                Ok(t) => t,
                Err(e) => return fail(out, err, "apply", &m.name, &e.into()),
            };
            let opts = ApplyOptions {
                parallelism: a.parallel.max(1),
                reconcile_interval: a.reconcile_interval.max(1),
                max_reconcile_steps: a.max_reconcile_steps,
                interrupt_after: a.interrupt_after,
                entropy_seed: a.entropy_seed,
                repo_base: a.file.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let console = Console { text: !json, err: std::cell::RefCell::new(err) };
            let (record, result) = lifecycle::apply(&m, &*target, &paths_for(&m.name), clock, &opts, &console);
            let err = console.err.into_inner();
            report(out, err, json, &record, result.err())
        }
        Command::Plan(p) => {
            let m = match lifecycle::load_manifest(&p.file) {
                Ok(m) => m,
                Err(e) => return fail(out, err, "plan", "", &e),
            };
            match lifecycle::plan(&m, &paths_for(&m.name), clock) {
                Ok(plan) => {
                    if json {
                        print_json(out, &plan_view(&plan));
                    } else if plan.is_empty() {
                        let _ = writeln!(out, "no changes");
                    } else {
                        for s in &plan.steps {
                            let _ = writeln!(out, "{}", PlanStepView(s));
                        }
                        let s = plan.summary();
                        let _ = writeln!(out, "plan: {} to create, {} to delete, {} replaced", s.create, s.delete, s.replace);
                    }
                    EXIT_OK
                }
                Err(e) => fail(out, err, "plan", &m.name, &e),
            }
        }
        Command::Destroy(d) => {
            let (name, provider, domain) = match stack_identity(d.name.as_deref(), d.file.as_deref(), &cli.stack_dir) {
                Ok(x) => x,
                Err(e) => return fail(out, err, "destroy", d.name.as_deref().unwrap_or(""), &e),
            };
            if !d.yes && !confirm(&name, stdin, err) {
                let _ = writeln!(err, "aborted");
                return EXIT_USER;
            }
            let paths = paths_for(&name);
            if !paths.checkpoint().exists() && !paths.manifest_copy().exists() {
                return fail(out, err, "destroy", &name, &LifecycleError::NoSuchStack(name.clone()));
            }
            let target = match open_target(provider, &domain, &cli.stack_dir, &[]) {
                Ok(t) => t,
                Err(e) => return fail(out, err, "destroy", &name, &e.into()),
            };
            let console = Console { text: !json, err: std::cell::RefCell::new(err) };
            let (record, result) = lifecycle::destroy(&name, &*target, &paths, clock, &console);
            let err = console.err.into_inner();
            report(out, err, json, &record, result.err())
        }
        Command::Status(n) => {
            let (name, provider, domain) = match stack_identity(Some(&n.name), None, &cli.stack_dir) {
                Ok(x) => x,
                Err(e) => return fail(out, err, "status", &n.name, &e),
            };
            let target = match open_target(provider, &domain, &cli.stack_dir, &[]) {
                Ok(t) => t,
                Err(e) => return fail(out, err, "status", &name, &e.into()),
            };
            match lifecycle::status(&name, &*target, &paths_for(&name)) {
                Ok(s) => {
                    if json {
                        print_json(out, &s);
                    } else {
                        let _ = writeln!(out, "stack:      {}", s.stack);
                        let _ = writeln!(out, "fqdn:       {}", s.fqdn);
                        let _ = writeln!(out, "converged:  {}", s.converged);
                        let _ = writeln!(out, "nodes:      {}/{} ready", s.ready_nodes, s.desired_nodes);
                        let _ = writeln!(out, "etcd:       {:?}", s.etcd);
                        let _ = writeln!(out, "resources:  {}", s.resources);
                        let _ = writeln!(out, "gitops:     {}", s.gitops_revision.as_deref().unwrap_or("-"));
                        let _ = writeln!(out, "dns:        {}", s.dns_record.as_deref().unwrap_or("-"));
                    }
                    if s.converged { EXIT_OK } else { EXIT_DIVERGED }
                }
                Err(e) => fail(out, err, "status", &name, &e),
            }
        }
        Command::Kubeconfig(k) => {
            let paths = paths_for(&k.name);
            let result = if k.breakglass {
                lifecycle::breakglass_kubeconfig(&paths)
            } else {
                match parse_duration(&k.ttl) {
                    Ok(ttl) if ttl <= USER_TTL => lifecycle::user_kubeconfig(&k.name, &k.identity, ttl, &paths, clock),
                    Ok(_) => {
                        let _ = writeln!(err, "error: --ttl exceeds the user credential limit of {}", format_duration(USER_TTL));
                        return EXIT_USER;
                    }
                    Err(e) => {
                        let _ = writeln!(err, "error: --ttl: {e}");
                        return EXIT_USER;
                    }
                }
            };
            match result {
                Ok(yaml) => match &k.out {
                    Some(path) => match crate::fsutil::atomic_write_private(path, yaml.as_bytes()) {
                        Ok(()) => {
                            let _ = writeln!(err, "wrote {}", path.display());
                            EXIT_OK
                        }
                        Err(e) => {
                            let _ = writeln!(err, "error: {}: {e}", path.display());
                            EXIT_RUNTIME
                        }
                    },
                    None => {
                        let _ = write!(out, "{yaml}");
                        EXIT_OK
                    }
                },
                Err(e) => fail(out, err, "kubeconfig", &k.name, &e),
            }
        }
        Command::TokenMint(t) => {
            let ttl = match parse_duration(&t.ttl) {
                Ok(d) => d,
                Err(e) => {
                    let _ = writeln!(err, "error: --ttl: {e}");
                    return EXIT_USER;
                }
            };
            let minted = std::fs::create_dir_all(&cli.stack_dir)
                .map_err(|e| crate::access::AccessError::Persistence { path: cli.stack_dir.clone(), detail: e.to_string() })
                .and_then(|_| AccessRegistry::open(&AccessRegistry::path_in(&cli.stack_dir)))
                .and_then(|r| r.mint_join_token(ttl, clock));
            match minted {
                Ok(token) => {
                    let expires = token.expires_at.format(&time::format_description::well_known::Rfc3339).unwrap_or_default();
                    if json {
                        print_json(out, &serde_json::json!({ "token": token.value(), "expires_at": expires }));
                    } else {
                        let _ = writeln!(out, "{}", token.value());
                        let _ = writeln!(err, "expires {expires}");
                    }
                    EXIT_OK
                }
                Err(e) => fail(out, err, "token-mint", "", &e.into()),
            }
        }
        Command::Bundle(BundleCommand::Create(b)) => {
            let snapshot = match resolve_repository(&b.repo.to_string_lossy(), Path::new("."))
                .and_then(|root| RepoSnapshot::load(&root, &b.path))
            {
                Ok(s) => s,
                Err(e) => return fail(out, err, "bundle-create", "", &e.into()),
            };
            let built = match &b.mirror {
                Some(dir) => BundleStore::new(&b.store, MirrorResolver { root: dir.clone() }).build(&snapshot, clock),
                None => BundleStore::new(&b.store, SyntheticResolver).build(&snapshot, clock),
            };
            match built {
                Ok(m) => {
                    if json {
                        print_json(out, &m);
                    } else {
                        let _ = writeln!(out, "{} artifact(s), bundle {}", m.entries.len(), m.bundle_digest);
                    }
                    EXIT_OK
                }
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    EXIT_RUNTIME
                }
            }
        }
        Command::Bundle(BundleCommand::Verify(b)) => {
            let manifest = match BundleManifest::load(&b.store.join(MANIFEST_FILE)) {
                Ok(m) => m,
                Err(e) => {
                    let _ = writeln!(err, "error: {e}");
                    return EXIT_USER;
                }
            };
            let report = crate::bundle::verify_bundle(&manifest, &b.store);
            if json {
                print_json(out, &report);
            } else if report.is_complete() {
                let _ = writeln!(out, "ok: {} blob(s) verified", manifest.entries.len());
            } else {
                for d in &report.missing {
                    let _ = writeln!(out, "missing {d}");
                }
                for c in &report.corrupt {
                    let _ = writeln!(out, "corrupt {} (found {})", c.digest, c.actual_digest);
                }
                if report.manifest_mismatch {
                    let _ = writeln!(out, "manifest digest mismatch");
                }
            }
            if report.is_complete() { EXIT_OK } else { EXIT_DIVERGED }
        }
    }
}

fn report(out: &mut dyn Write, err: &mut dyn Write, json: bool, record: &RunRecord, e: Option<LifecycleError>) -> i32 {
    if json {
        print_json(out, record);
    } else {
        match &e {
            Some(e) => {
                let _ = writeln!(err, "error: {e}");
            }
            None => {
                let _ = writeln!(out, "{} {}: ok ({} resource step(s))", record.command, record.stack, record.steps_completed);
            }
        }
    }
    record.exit_code
}

fn confirm(name: &str, stdin: &mut dyn BufRead, err: &mut dyn Write) -> bool {
    let _ = write!(err, "destroy stack `{name}` and every resource in it? type the stack name to confirm: ");
    let _ = err.flush();
    let mut line = String::new();
    stdin.read_line(&mut line).is_ok() && line.trim() == name
}

/// Resolves a stack's name, provider and zone from a manifest file or the
/// last applied copy.
fn stack_identity(
    name: Option<&str>,
    file: Option<&Path>,
    stack_dir: &Path,
) -> Result<(String, ProviderKind, String), LifecycleError> {
    let m: ClusterManifest = match (file, name) {
        (Some(f), _) => lifecycle::load_manifest(f)?,
        (None, Some(n)) => {
            let copy = StackPaths::new(stack_dir, n).manifest_copy();
            let text = std::fs::read_to_string(&copy).map_err(|_| LifecycleError::NoSuchStack(n.to_string()))?;
            manifest::parse_manifest(&text).map_err(|_| LifecycleError::NoSuchStack(n.to_string()))?
        }
        (None, None) => return Err(LifecycleError::NoSuchStack(String::new())),
    };
    Ok((m.name.clone(), m.provider, m.domain.clone()))
}

#[derive(Serialize)]
struct PlanView<'a> {
    stack: &'a str,
    no_changes: bool,
    resync_only: bool,
    summary: crate::stack::PlanSummary,
    steps: Vec<String>,
}

fn plan_view(plan: &Plan) -> PlanView<'_> {
    PlanView {
        stack: &plan.stack_name,
        no_changes: plan.is_empty(),
        resync_only: plan.resync_only,
        summary: plan.summary(),
        steps: plan.steps.iter().map(|s| PlanStepView(s).to_string()).collect(),
    }
}
