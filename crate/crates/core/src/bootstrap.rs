//! The shared thin environment.
//!
//! One environment directory serves every repository on the machine. It
//! holds a manifest of the minimal bootstrap dependencies and the
//! repositories using it, plus an activation stub. Bootstrapping a
//! repository also installs its policy hook.

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::lock::{LockError, LockFile};
use crate::runtime::DEFAULT_CONTAINER_CLI;

pub const ENV_PATH_ENV: &str = "RUNDIR_ENV_PATH";
pub const DEFAULT_ENV_DIR: &str = ".rundir-env";
pub const MANIFEST_FILE: &str = "manifest.yaml";
pub const ACTIVATE_FILE: &str = "activate";
const ENV_LOCK_FILE: &str = ".bootstrap.lock";
/// Git hooks installed into every consumer repository.
pub const HOOK_NAMES: &[&str] = &["pre-commit"];

#[derive(Debug, thiserror::Error)]
pub enum BootstrapError {
    #[error("environment path {} is not writable: {reason}", .path.display())]
    EnvPathNotWritable { path: PathBuf, reason: String },
    #[error("{} is not a git repository", .0.display())]
    NotAGitRepo(PathBuf),
    #[error("malformed manifest {}: {reason}", .path.display())]
    MalformedManifest { path: PathBuf, reason: String },
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dependency {
    pub name: String,
    pub version_constraint: String,
    /// Whether the binary was found on `PATH` at the last bootstrap.
    pub present: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvManifest {
    pub env_path: PathBuf,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub dependencies: Vec<Dependency>,
    pub consumers: Vec<PathBuf>,
}

/// `$RUNDIR_ENV_PATH`, else `~/.rundir-env`.
pub fn default_env_path() -> PathBuf {
    if let Some(p) = std::env::var_os(ENV_PATH_ENV) {
        return PathBuf::from(p);
    }
    let home = std::env::var_os("HOME")
        .or_else(|| std::env::var_os("USERPROFILE"))
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    home.join(DEFAULT_ENV_DIR)
}

fn on_path(binary: &str) -> bool {
    let Some(paths) = std::env::var_os("PATH") else {
        return false;
    };
    std::env::split_paths(&paths).any(|dir| dir.join(binary).is_file())
}

/// Container CLI plus the task runner itself.
fn bootstrap_dependencies(container_cli: &str) -> Vec<Dependency> {
    vec![
        Dependency {
            name: container_cli.to_string(),
            version_constraint: "*".into(),
            present: on_path(container_cli) || Path::new(container_cli).is_file(),
        },
        Dependency {
            name: "rundir".into(),
            version_constraint: format!("={}", env!("CARGO_PKG_VERSION")),
            present: true,
        },
    ]
}

/// The repository's hooks directory; `.git` may be a directory or a
/// `gitdir:` pointer file (submodules, worktrees).
pub fn git_hooks_dir(repo_root: &Path) -> Result<PathBuf, BootstrapError> {
    let dot_git = repo_root.join(".git");
    let meta = std::fs::metadata(&dot_git).map_err(|_| BootstrapError::NotAGitRepo(repo_root.to_path_buf()))?;
    if meta.is_dir() {
        return Ok(dot_git.join("hooks"));
    }
    let text = std::fs::read_to_string(&dot_git).map_err(|source| BootstrapError::Io {
        path: dot_git.clone(),
        source,
    })?;
    let gitdir = text
        .lines()
        .find_map(|l| l.strip_prefix("gitdir:"))
        .map(str::trim)
        .ok_or_else(|| BootstrapError::NotAGitRepo(repo_root.to_path_buf()))?;
    Ok(repo_root.join(gitdir).join("hooks"))
}

pub fn hook_script(hook: &str) -> String {
    format!(
        "#!/bin/sh\n\
         # {hook} hook installed by rundir bootstrap. Bypass with `git commit --no-verify`.\n\
         root=\"$(git rev-parse --show-toplevel)\" || exit 1\n\
         exec rundir --root \"$root\" hooks run --staged\n"
    )
}

fn write_executable(path: &Path, text: &str) -> Result<(), BootstrapError> {
    let io = |source| BootstrapError::Io {
        path: path.to_path_buf(),
        source,
    };
    std::fs::write(path, text).map_err(io)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(path, std::fs::Permissions::from_mode(0o755)).map_err(io)?;
    }
    Ok(())
}

pub fn install_hooks(repo_root: &Path) -> Result<Vec<PathBuf>, BootstrapError> {
    let dir = git_hooks_dir(repo_root)?;
    std::fs::create_dir_all(&dir).map_err(|source| BootstrapError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut installed = Vec::new();
    for hook in HOOK_NAMES {
        let path = dir.join(hook);
        write_executable(&path, &hook_script(hook))?;
        installed.push(path);
    }
    Ok(installed)
}

fn activate_script(env_path: &Path) -> String {
    format!(
        "# Source this file to use the shared rundir environment.\n\
         export {ENV_PATH_ENV}=\"{}\"\n\
         export PATH=\"{}/bin:$PATH\"\n",
        env_path.display(),
        env_path.display()
    )
}

pub fn load_manifest(env_path: &Path) -> Result<Option<EnvManifest>, BootstrapError> {
    let path = env_path.join(MANIFEST_FILE);
    match std::fs::read_to_string(&path) {
        Ok(text) => serde_yaml::from_str(&text)
            .map(Some)
            .map_err(|e| BootstrapError::MalformedManifest {
                path,
                reason: e.to_string(),
            }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(BootstrapError::Io { path, source }),
    }
}

/// Creates the environment if needed and registers `repo_root` as a
/// consumer. Idempotent per `(env_path, repo_root)`.
pub fn bootstrap_thin_env(env_path: &Path, repo_root: &Path) -> Result<EnvManifest, BootstrapError> {
    bootstrap_with_cli(env_path, repo_root, DEFAULT_CONTAINER_CLI)
}

pub fn bootstrap_with_cli(
    env_path: &Path,
    repo_root: &Path,
    container_cli: &str,
) -> Result<EnvManifest, BootstrapError> {
    let repo = repo_root
        .canonicalize()
        .map_err(|_| BootstrapError::NotAGitRepo(repo_root.to_path_buf()))?;
    git_hooks_dir(&repo)?;

    let not_writable = |e: std::io::Error| BootstrapError::EnvPathNotWritable {
        path: env_path.to_path_buf(),
        reason: e.to_string(),
    };
    std::fs::create_dir_all(env_path.join("bin")).map_err(not_writable)?;
    let _lock = match LockFile::acquire(env_path.join(ENV_LOCK_FILE)) {
        Err(LockError::Io { source, .. }) => return Err(not_writable(source)),
        other => other?,
    };
    let env_abs = env_path.canonicalize().map_err(not_writable)?;

    let now = Utc::now();
    let mut manifest = match load_manifest(env_path)? {
        Some(m) => m,
        None => {
            log::info!("creating thin environment at {}", env_abs.display());
            EnvManifest {
                env_path: env_abs.clone(),
                created_at: now,
                updated_at: now,
                dependencies: Vec::new(),
                consumers: Vec::new(),
            }
        }
    };
    manifest.updated_at = now;
    manifest.dependencies = bootstrap_dependencies(container_cli);
    if !manifest.consumers.contains(&repo) {
        manifest.consumers.push(repo.clone());
    }

    std::fs::write(env_path.join(ACTIVATE_FILE), activate_script(&env_abs)).map_err(not_writable)?;
    let text = serde_yaml::to_string(&manifest).expect("manifest serializes");
    std::fs::write(env_path.join(MANIFEST_FILE), text).map_err(not_writable)?;
    install_hooks(&repo)?;
    Ok(manifest)
}
