//! The `rundir` command line.
//!
//! Every workflow is a subcommand. [`dispatch`] parses arguments, runs the
//! command against a [`Session`] and returns the process exit code: `0` on
//! success, `1` when the workflow itself reports failure and `2` for usage
//! errors.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rundir_core::bootstrap::{bootstrap_thin_env, default_env_path, git_hooks_dir};
use rundir_core::config::{is_identifier, ContainerMode, Stage, CONFIG_FILE};
use rundir_core::discovery::{container_for, discover, DirNode, DirTree, RealFs};
use rundir_core::hooks::{changeset_from_index, run_checks, ChangeSet, DockerizedChecker, HookPolicy};
use rundir_core::ignore::{
    compute_file_closure, default_always_keep, emit_dockerignore, ClosureOptions, IgnoreError, ScannerProfile,
    IGNORE_FILE,
};
use rundir_core::lifecycle::{build_stage, promote};
use rundir_core::links::{sync_links, LinkManifest};
use rundir_core::orchestrator::{run_tests, OrchestratorError, TestOptions};
use rundir_core::runtime::{BackendOptions, BackendRegistry, ContainerBackend, RuntimeError, BACKEND_ENV};
use rundir_core::tools::{ToolRunner, ToolSpec};

pub const HELPERS_DIR: &str = "helpers";
const DEFAULT_BACKEND: &str = "exec";

#[derive(Debug, Parser)]
#[command(name = "rundir", version, about = "Build, test and ship runnable directories")]
pub struct Cli {
    /// Tree root; defaults to the nearest ancestor holding runnable_dir.yaml.
    #[arg(long, global = true)]
    pub root: Option<PathBuf>,
    /// Container backend.
    #[arg(long, global = true, env = BACKEND_ENV)]
    pub backend: Option<String>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the discovered directory tree.
    List,
    /// Build local images.
    Build(BuildArgs),
    /// Retag an image into the next stage.
    Promote(PromoteArgs),
    /// Run every directory's tests in its own container.
    Test(TestArgs),
    /// Run a dockerized helper tool against the repository.
    Exec(ExecArgs),
    /// Create or join the shared thin environment and install hooks.
    Bootstrap(BootstrapArgs),
    /// Helper symlink farm.
    #[command(subcommand)]
    Links(LinksCommand),
    /// Policy hooks.
    #[command(subcommand)]
    Hooks(HooksCommand),
    /// Ignore-file generation.
    #[command(subcommand)]
    Ignore(IgnoreCommand),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// dir_ids to build; defaults to the directory containing the cwd.
    pub ids: Vec<String>,
    #[arg(long)]
    pub user: Option<String>,
}

#[derive(Debug, Args)]
pub struct PromoteArgs {
    pub id: String,
    #[arg(long)]
    pub from: Stage,
    #[arg(long)]
    pub to: Stage,
    /// Owner of the local image when promoting from local.
    #[arg(long)]
    pub user: Option<String>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Only these dir_ids.
    #[arg(long = "select", value_name = "ID")]
    pub select: Vec<String>,
    #[arg(long, default_value = "dev")]
    pub stage: Stage,
    #[arg(long)]
    pub user: Option<String>,
    #[arg(short = 'j', long = "jobs", default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub fail_fast: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExecArgs {
    pub tool: String,
    #[arg(long)]
    pub tool_version: Option<String>,
    #[arg(long, default_value = "sibling")]
    pub mode: ContainerMode,
    /// Command run inside the tool container.
    #[arg(last = true)]
    pub argv: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    /// Defaults to $RUNDIR_ENV_PATH, then ~/.rundir-env.
    #[arg(long)]
    pub env_path: Option<PathBuf>,
    /// Repository to register; defaults to the enclosing git repository.
    #[arg(long)]
    pub repo: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum LinksCommand {
    /// Create or verify every link in helpers/links.yaml.
    Sync {
        /// Replace regular files and foreign links at targets.
        #[arg(long)]
        repair: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum HooksCommand {
    /// Run the policy checks.
    Run(HooksRunArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["changeset", "staged"])))]
pub struct HooksRunArgs {
    /// JSON change set.
    #[arg(long)]
    pub changeset: Option<PathBuf>,
    /// Read the change set from the git index.
    #[arg(long)]
    pub staged: bool,
    /// Policy file; defaults to helpers/hook_policy.yaml when present.
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum IgnoreCommand {
    /// Write a .dockerignore keeping only the entrypoints' closure.
    Gen(IgnoreGenArgs),
}

#[derive(Debug, Args)]
pub struct IgnoreGenArgs {
    /// Directory to generate for; defaults to the one containing the cwd.
    #[arg(long = "dir", value_name = "ID")]
    pub dir_id: Option<String>,
    /// Entrypoint, relative to the directory.
    #[arg(long = "entry", value_name = "PATH")]
    pub entries: Vec<PathBuf>,
    /// YAML scanner profile.
    #[arg(long)]
    pub profile: Option<PathBuf>,
    /// Extra paths to keep.
    #[arg(long = "keep", value_name = "PATH")]
    pub keep: Vec<String>,
    /// Output file; `-` for stdout. Defaults to the directory's .dockerignore.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Everything a command may touch besides its arguments.
pub struct Session<'a> {
    pub cwd: PathBuf,
    pub registry: BackendRegistry,
    pub backend_options: BackendOptions,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

impl<'a> Session<'a> {
    pub fn new(cwd: PathBuf, out: &'a mut dyn Write, err: &'a mut dyn Write) -> Self {
        Session {
            cwd,
            registry: BackendRegistry::default(),
            backend_options: BackendOptions::from_env(),
            out,
            err,
        }
    }
}

/// Bad input from the caller; maps to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    Failed,
}

pub fn dispatch<I, T>(args: I, session: &mut Session<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let sink: &mut dyn Write = if code == 0 { session.out } else { session.err };
            let _ = sink.write_all(text.as_bytes());
            return code;
        }
    };
    match run(cli, session) {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::Failed) => 1,
        Err(e) => {
            let _ = writeln!(session.err, "error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                2
            } else {
                1
            }
        }
    }
}

fn run(cli: Cli, s: &mut Session<'_>) -> Result<Outcome> {
    let json = cli.json;
    match &cli.command {
        Command::List => cmd_list(&cli, s, json),
        Command::Build(a) => cmd_build(&cli, s, a),
        Command::Promote(a) => cmd_promote(&cli, s, a),
        Command::Test(a) => cmd_test(&cli, s, a, json),
        Command::Exec(a) => cmd_exec(&cli, s, a),
        Command::Bootstrap(a) => cmd_bootstrap(&cli, s, a, json),
        Command::Links(LinksCommand::Sync { repair }) => cmd_links(&cli, s, *repair, json),
        Command::Hooks(HooksCommand::Run(a)) => cmd_hooks(&cli, s, a, json),
        Command::Ignore(IgnoreCommand::Gen(a)) => cmd_ignore(&cli, s, a),
    }
}

fn absolutize(cwd: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        cwd.join(p)
    }
}

/// `--root`, else the nearest ancestor of the cwd with a marker file.
fn find_root(cli: &Cli, s: &Session<'_>) -> Result<PathBuf> {
    if let Some(r) = &cli.root {
        return Ok(absolutize(&s.cwd, r));
    }
    s.cwd
        .ancestors()
        .find(|d| d.join(CONFIG_FILE).is_file())
        .map(Path::to_path_buf)
        .ok_or_else(|| {
            usage(format!(
                "no {CONFIG_FILE} in {} or any parent; pass --root",
                s.cwd.display()
            ))
        })
}

fn load_tree(cli: &Cli, s: &Session<'_>) -> Result<DirTree> {
    let root = find_root(cli, s)?;
    Ok(discover(&root, &RealFs)?)
}

fn backend(cli: &Cli, s: &Session<'_>) -> Result<Arc<dyn ContainerBackend>> {
    let name = cli.backend.as_deref().unwrap_or(DEFAULT_BACKEND);
    match s.registry.create(name, &s.backend_options) {
        Err(RuntimeError::UnknownBackend(n)) => Err(usage(format!(
            "unknown backend `{n}` (available: {})",
            s.registry.names().join(", ")
        ))),
        other => Ok(other?),
    }
}

fn lookup<'t>(tree: &'t DirTree, id: &str) -> Result<&'t DirNode> {
    tree.get(id)
        .ok_or_else(|| usage(format!("no runnable directory with dir_id `{id}`")))
}

fn node_for_cwd<'t>(tree: &'t DirTree, s: &Session<'_>) -> &'t DirNode {
    let cwd = s.cwd.canonicalize().unwrap_or_else(|_| s.cwd.clone());
    let rel = cwd.strip_prefix(tree.base()).map(Path::to_path_buf);
    match rel {
        Ok(rel) => container_for(tree, &rel).unwrap_or(tree.root()),
        Err(_) => tree.root(),
    }
}

/// `--user`, else `$USER` reduced to the identifier alphabet.
fn resolve_user(explicit: Option<&str>) -> Result<String> {
    if let Some(u) = explicit {
        if !is_identifier(u) {
            return Err(usage(format!("user `{u}` must match [a-z0-9_-]+")));
        }
        return Ok(u.to_string());
    }
    let raw = std::env::var("USER")
        .or_else(|_| std::env::var("USERNAME"))
        .unwrap_or_default();
    let cleaned: String = raw
        .to_lowercase()
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || *c == '_' || *c == '-')
        .collect();
    Ok(if cleaned.is_empty() { "dev".to_string() } else { cleaned })
}

fn print_json<T: serde::Serialize>(s: &mut Session<'_>, value: &T) -> Result<()> {
    writeln!(s.out, "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_list(cli: &Cli, s: &mut Session<'_>, json: bool) -> Result<Outcome> {
    let tree = load_tree(cli, s)?;
    if json {
        print_json(s, &tree)?;
    } else {
        write!(s.out, "{}", tree.render())?;
    }
    Ok(Outcome::Ok)
}

fn cmd_build(cli: &Cli, s: &mut Session<'_>, a: &BuildArgs) -> Result<Outcome> {
    let tree = load_tree(cli, s)?;
    let user = resolve_user(a.user.as_deref())?;
    let nodes: Vec<&DirNode> = if a.ids.is_empty() {
        vec![node_for_cwd(&tree, s)]
    } else {
        a.ids.iter().map(|id| lookup(&tree, id)).collect::<Result<_>>()?
    };
    let backend = backend(cli, s)?;
    for node in nodes {
        let image =
            build_stage(backend.as_ref(), &tree, node, &user).with_context(|| format!("building `{}`", node.id()))?;
        writeln!(s.out, "{}  {}", node.id(), image.tag())?;
    }
    Ok(Outcome::Ok)
}

fn cmd_promote(cli: &Cli, s: &mut Session<'_>, a: &PromoteArgs) -> Result<Outcome> {
    let tree = load_tree(cli, s)?;
    let node = lookup(&tree, &a.id)?;
    let user = if a.from == Stage::Local {
        Some(resolve_user(a.user.as_deref())?)
    } else {
        None
    };
    let backend = backend(cli, s)?;
    let (image, t) = promote(backend.as_ref(), &tree, node, a.from, a.to, user.as_deref())?;
    writeln!(s.out, "{}  {} -> {}  {}", node.id(), t.from, t.to, image.tag())?;
    Ok(Outcome::Ok)
}

fn cmd_test(cli: &Cli, s: &mut Session<'_>, a: &TestArgs, json: bool) -> Result<Outcome> {
    let tree = load_tree(cli, s)?;
    let user = if a.stage == Stage::Local {
        Some(resolve_user(a.user.as_deref())?)
    } else if a.user.is_some() {
        return Err(usage("--user only applies to --stage local"));
    } else {
        None
    };
    let opts = TestOptions {
        selector: (!a.select.is_empty()).then(|| a.select.iter().cloned().collect::<BTreeSet<_>>()),
        stage: a.stage,
        user,
        parallelism: a.jobs,
        fail_fast: a.fail_fast,
    };
    let backend = backend(cli, s)?;
    let report = match run_tests(backend.as_ref(), &tree, &opts) {
        Err(e @ (OrchestratorError::UnknownSelector(_) | OrchestratorError::ZeroParallelism)) => {
            return Err(usage(e.to_string()))
        }
        other => other?,
    };
    if let Some(path) = &a.report_out {
        let path = absolutize(&s.cwd, path);
        std::fs::write(&path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    }
    if json {
        writeln!(s.out, "{}", report.to_json())?;
    } else {
        write!(s.out, "{}", report.render())?;
    }
    Ok(if report.passed() { Outcome::Ok } else { Outcome::Failed })
}

fn cmd_exec(cli: &Cli, s: &mut Session<'_>, a: &ExecArgs) -> Result<Outcome> {
    let root = find_root(cli, s)?;
    let version = a
        .tool_version
        .as_deref()
        .map(|v| v.parse().map_err(|e| usage(format!("--tool-version `{v}`: {e}"))))
        .transpose()?;
    let spec = ToolSpec::load(&root.join(HELPERS_DIR), &a.tool, version)?;
    let backend = backend(cli, s)?;
    let runner = ToolRunner::new(backend.as_ref());
    let result = runner.run_tool(&spec, &a.argv, &root, a.mode)?;
    s.out.write_all(result.stdout.as_bytes())?;
    s.err.write_all(result.stderr.as_bytes())?;
    if result.success() {
        Ok(Outcome::Ok)
    } else {
        writeln!(s.err, "{} exited with {}", spec.image_tag(), result.exit_code)?;
        Ok(Outcome::Failed)
    }
}

fn cmd_bootstrap(cli: &Cli, s: &mut Session<'_>, a: &BootstrapArgs, json: bool) -> Result<Outcome> {
    let env_path = a
        .env_path
        .as_deref()
        .map(|p| absolutize(&s.cwd, p))
        .unwrap_or_else(default_env_path);
    let repo = match (&a.repo, &cli.root) {
        (Some(r), _) | (None, Some(r)) => absolutize(&s.cwd, r),
        (None, None) => s
            .cwd
            .ancestors()
            .find(|d| git_hooks_dir(d).is_ok())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| s.cwd.clone()),
    };
    let manifest = bootstrap_thin_env(&env_path, &repo)?;
    if json {
        print_json(s, &manifest)?;
    } else {
        writeln!(s.out, "environment: {}", manifest.env_path.display())?;
        for dep in &manifest.dependencies {
            let state = if dep.present { "found" } else { "missing" };
            writeln!(s.out, "  {} {} ({state})", dep.name, dep.version_constraint)?;
        }
        writeln!(s.out, "consumers: {}", manifest.consumers.len())?;
    }
    Ok(Outcome::Ok)
}

fn cmd_links(cli: &Cli, s: &mut Session<'_>, repair: bool, json: bool) -> Result<Outcome> {
    let root = find_root(cli, s)?;
    let helpers = root.join(HELPERS_DIR);
    let manifest = LinkManifest::load(&helpers)?;
    let report = sync_links(&helpers, &root, &manifest, repair)?;
    if json {
        print_json(s, &report)?;
    } else {
        writeln!(
            s.out,
            "created={} repaired={} unchanged={} conflicts={}",
            report.created,
            report.repaired,
            report.unchanged,
            report.conflicts.len()
        )?;
        for c in &report.conflicts {
            writeln!(s.out, "  conflict: {}: {}", c.target.display(), c.reason)?;
        }
    }
    Ok(if report.conflicts.is_empty() {
        Outcome::Ok
    } else {
        Outcome::Failed
    })
}

fn cmd_hooks(cli: &Cli, s: &mut Session<'_>, a: &HooksRunArgs, json: bool) -> Result<Outcome> {
    let root = match &cli.root {
        Some(r) => absolutize(&s.cwd, r),
        None => find_root(cli, s).unwrap_or_else(|_| s.cwd.clone()),
    };
    let helpers = root.join(HELPERS_DIR);
    let policy = match &a.policy {
        Some(p) => {
            let p = absolutize(&s.cwd, p);
            let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            HookPolicy::from_yaml(&text, &p)?
        }
        None => HookPolicy::load(&helpers)?,
    };
    let change: ChangeSet = match (&a.changeset, a.staged) {
        (Some(path), _) => {
            let path = absolutize(&s.cwd, path);
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        (None, true) => changeset_from_index(&root)?,
        (None, false) => bail!("no change set source"),
    };
    let backend = backend(cli, s)?;
    let runner = ToolRunner::new(backend.as_ref());
    let checker = DockerizedChecker::new(&runner, &helpers);
    let report = run_checks(&change, &policy, &checker)?;
    if json {
        print_json(s, &report)?;
    } else {
        write!(s.out, "{}", report.render())?;
    }
    Ok(if report.passed { Outcome::Ok } else { Outcome::Failed })
}

fn cmd_ignore(cli: &Cli, s: &mut Session<'_>, a: &IgnoreGenArgs) -> Result<Outcome> {
    let tree = load_tree(cli, s)?;
    let node = match &a.dir_id {
        Some(id) => lookup(&tree, id)?,
        None => node_for_cwd(&tree, s),
    };
    let dir = tree.abs_path(node);
    let profile = match &a.profile {
        Some(p) => ScannerProfile::load(&absolutize(&s.cwd, p))?,
        None => ScannerProfile::default(),
    };
    let options = ClosureOptions {
        excluded_dirs: node
            .children
            .iter()
            .filter_map(|c| c.path.strip_prefix(&node.path).ok().map(Path::to_path_buf))
            .collect(),
    };
    let closure = match compute_file_closure(&dir, &a.entries, &profile, &options) {
        Err(e @ IgnoreError::NoEntrypoints) => return Err(usage(format!("{e}; pass --entry"))),
        other => other?,
    };
    for w in &closure.warnings {
        writeln!(
            s.err,
            "warning: {}: unresolved `{}` ({})",
            w.file, w.reference, w.reason
        )?;
    }
    let mut keep = default_always_keep(&node.config);
    keep.extend(a.keep.iter().cloned());
    let doc = emit_dockerignore(&closure, &keep);
    match a.out.as_deref() {
        Some(p) if p == Path::new("-") => s.out.write_all(doc.as_bytes())?,
        out => {
            let path = out
                .map(|p| absolutize(&s.cwd, p))
                .unwrap_or_else(|| dir.join(IGNORE_FILE));
            std::fs::write(&path, &doc).with_context(|| format!("writing {}", path.display()))?;
            writeln!(s.out, "wrote {} ({} kept)", path.display(), doc.lines().count() - 1)?;
        }
    }
    Ok(Outcome::Ok)
}
