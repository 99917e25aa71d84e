//! Recursive test execution: every runnable directory's tests run in that
//! directory's own image, all from one call.
//!
//! Recursion is flat. Each node is one job; a parent never re-runs its
//! children's tests. Jobs fan out over up to `parallelism` worker threads
//! and the report is sorted by node path afterwards, so completion order
//! never shows up in the output.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{load_changelog, resolve_image_tag, ConfigError, ImageTag, Stage};
use crate::discovery::{DirNode, DirTree};
use crate::runtime::{ContainerBackend, ContainerSpec, Mount, RunResult, RuntimeError};

/// Container path every node directory is mounted at.
pub const WORKSPACE_MOUNT: &str = "/workspace";
const EXCERPT_BYTES: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("unknown dir_id `{0}` in selector")]
    UnknownSelector(String),
    #[error("no image {tag} for `{node}`")]
    ImageMissing { node: String, tag: ImageTag },
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("`{node}`: {source}")]
    Config {
        node: String,
        #[source]
        source: ConfigError,
    },
    #[error("parallelism must be at least 1")]
    ZeroParallelism,
    #[error("`{node}`: {source}")]
    Runtime {
        node: String,
        #[source]
        source: RuntimeError,
    },
}

#[derive(Debug, Clone)]
pub struct TestOptions {
    /// dir_ids to run; `None` runs every node.
    pub selector: Option<BTreeSet<String>>,
    pub stage: Stage,
    /// Required when `stage` is local.
    pub user: Option<String>,
    pub parallelism: usize,
    /// Stop scheduling new nodes after the first failure.
    pub fail_fast: bool,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            selector: None,
            stage: Stage::Dev,
            user: None,
            parallelism: 1,
            fail_fast: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestEntry {
    pub node_id: String,
    pub path: String,
    pub image: ImageTag,
    /// `None` when the node was never started because of `fail_fast`.
    pub exit_code: Option<u8>,
    pub duration_ms: u64,
    pub output_excerpt: String,
}

impl TestEntry {
    pub fn passed(&self) -> bool {
        self.exit_code == Some(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestReport {
    pub entries: Vec<TestEntry>,
    pub aggregate: Aggregate,
}

impl TestReport {
    fn from_entries(mut entries: Vec<TestEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let aggregate = if entries.iter().all(TestEntry::passed) {
            Aggregate::Pass
        } else {
            Aggregate::Fail
        };
        TestReport { entries, aggregate }
    }

    pub fn passed(&self) -> bool {
        self.aggregate == Aggregate::Pass
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let status = match e.exit_code {
                Some(0) => "PASS".to_string(),
                Some(c) => format!("FAIL({c})"),
                None => "SKIP".to_string(),
            };
            out.push_str(&format!(
                "{status:<9} {:<16} {:<24} {} ({} ms)\n",
                e.node_id, e.path, e.image, e.duration_ms
            ));
        }
        out.push_str(match self.aggregate {
            Aggregate::Pass => "aggregate: pass\n",
            Aggregate::Fail => "aggregate: fail\n",
        });
        out
    }
}

struct Job {
    node_id: String,
    path: String,
    spec: ContainerSpec,
}

fn excerpt(result: &RunResult) -> String {
    let mut text = result.stdout.clone();
    text.push_str(&result.stderr);
    if text.len() <= EXCERPT_BYTES {
        return text;
    }
    let mut start = text.len() - EXCERPT_BYTES;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    text[start..].to_string()
}

fn select<'t>(tree: &'t DirTree, selector: &Option<BTreeSet<String>>) -> Result<Vec<&'t DirNode>, OrchestratorError> {
    if let Some(ids) = selector {
        if let Some(unknown) = ids.iter().find(|id| tree.get(id).is_none()) {
            return Err(OrchestratorError::UnknownSelector(unknown.clone()));
        }
    }
    let mut nodes: Vec<&DirNode> = tree
        .nodes()
        .into_iter()
        .filter(|n| selector.as_ref().is_none_or(|ids| ids.contains(n.id())))
        .collect();
    nodes.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(nodes)
}

fn prepare(
    backend: &dyn ContainerBackend,
    tree: &DirTree,
    node: &DirNode,
    opts: &TestOptions,
) -> Result<Job, OrchestratorError> {
    let id = node.id().to_string();
    let dir = tree.abs_path(node);
    let config_err = |source| OrchestratorError::Config {
        node: id.clone(),
        source,
    };
    let changelog = load_changelog(&dir, &node.config).map_err(config_err)?;
    let user = if opts.stage == Stage::Local {
        opts.user.as_deref()
    } else {
        None
    };
    let image = resolve_image_tag(&node.config, &changelog, opts.stage, user)
        .map_err(config_err)?
        .tag();
    match backend.image_digest(&image) {
        Ok(Some(_)) => {}
        Ok(None) => return Err(OrchestratorError::ImageMissing { node: id, tag: image }),
        Err(e) => return Err(runtime_err(&id, e)),
    }
    let mut spec = ContainerSpec::new(image, vec!["sh".into(), "-c".into(), node.config.test_command.clone()]);
    spec.mounts.push(Mount {
        host_path: absolute(dir),
        container_path: WORKSPACE_MOUNT.into(),
        read_only: false,
    });
    spec.workdir = WORKSPACE_MOUNT.into();
    spec.env.insert("RUNDIR_DIR_ID".into(), id.clone());
    spec.env.insert("RUNDIR_STAGE".into(), opts.stage.to_string());
    spec.mode = node.config.container_mode;
    spec.remove_after_exit = true;
    Ok(Job {
        node_id: id,
        path: node.display_path(),
        spec,
    })
}

fn absolute(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        std::env::current_dir().map(|cwd| cwd.join(&p)).unwrap_or(p)
    }
}

fn runtime_err(node: &str, e: RuntimeError) -> OrchestratorError {
    match e {
        RuntimeError::ImageMissing(tag) => OrchestratorError::ImageMissing {
            node: node.to_string(),
            tag,
        },
        RuntimeError::RuntimeUnavailable(msg) => OrchestratorError::RuntimeUnavailable(msg),
        source => OrchestratorError::Runtime {
            node: node.to_string(),
            source,
        },
    }
}

/// Runs each selected node's `test_command` in its own stage image.
pub fn run_tests(
    backend: &dyn ContainerBackend,
    tree: &DirTree,
    opts: &TestOptions,
) -> Result<TestReport, OrchestratorError> {
    if opts.parallelism == 0 {
        return Err(OrchestratorError::ZeroParallelism);
    }
    let jobs = select(tree, &opts.selector)?
        .into_iter()
        .map(|n| prepare(backend, tree, n, opts))
        .collect::<Result<Vec<_>, _>>()?;

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let outcomes: Mutex<Vec<Option<Result<RunResult, RuntimeError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());

    std::thread::scope(|s| {
        for _ in 0..opts.parallelism.min(jobs.len()) {
            s.spawn(|| loop {
                if opts.fail_fast && failed.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(i) else { return };
                log::info!("testing {} in {}", job.node_id, job.spec.image);
                let res = backend.run_container(&job.spec);
                if !matches!(&res, Ok(r) if r.success()) {
                    failed.store(true, Ordering::SeqCst);
                }
                outcomes.lock().unwrap()[i] = Some(res);
            });
        }
    });

    let outcomes = outcomes.into_inner().unwrap();
    let mut entries = Vec::with_capacity(jobs.len());
    for (job, outcome) in jobs.into_iter().zip(outcomes) {
        let entry = match outcome {
            Some(Ok(r)) => TestEntry {
                node_id: job.node_id,
                path: job.path,
                image: job.spec.image,
                exit_code: Some(r.exit_code),
                duration_ms: r.duration_ms,
                output_excerpt: excerpt(&r),
            },
            Some(Err(e)) => return Err(runtime_err(&job.node_id, e)),
            None => TestEntry {
                node_id: job.node_id,
                path: job.path,
                image: job.spec.image,
                exit_code: None,
                duration_ms: 0,
                output_excerpt: String::new(),
            },
        };
        entries.push(entry);
    }
    Ok(TestReport::from_entries(entries))
}
