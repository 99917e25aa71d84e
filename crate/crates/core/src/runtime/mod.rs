//! Container operations behind a single backend trait.
//!
//! Two backends ship with the crate: [`ExecBackend`] shells out to an
//! OCI-compatible CLI, [`FakeBackend`] is an in-memory stand-in that records
//! every request as a [`BackendEvent`]. Backends are looked up by name in a
//! [`BackendRegistry`].

mod exec;
mod fake;
mod registry;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{ContainerMode, ImageTag};

pub use exec::{ExecBackend, CONTAINER_CLI_ENV, DEFAULT_CONTAINER_CLI, HOST_SOCKET};
pub use fake::{FakeBackend, FakeScript, RunRule, FAKE_STATE_ENV};
pub use registry::{BackendFactory, BackendOptions, BackendRegistry, BACKEND_ENV};

#[derive(Debug, thiserror::Error)]
pub enum RuntimeError {
    #[error("build of {tag} failed:\n{output}")]
    BuildFailed { tag: ImageTag, output: String },
    #[error("recipe {} is not inside build context {}", .recipe.display(), .context.display())]
    ContextMissing { context: PathBuf, recipe: PathBuf },
    #[error("image {0} does not exist")]
    ImageMissing(ImageTag),
    #[error("container runtime unavailable: {0}")]
    RuntimeUnavailable(String),
    #[error("invalid container spec: {0}")]
    InvalidSpec(String),
    #[error("no backend named `{0}`")]
    UnknownBackend(String),
    #[error("backend state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mount {
    pub host_path: PathBuf,
    pub container_path: String,
    #[serde(default)]
    pub read_only: bool,
}

/// One container invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub image: ImageTag,
    pub command: Vec<String>,
    #[serde(default)]
    pub mounts: Vec<Mount>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    pub workdir: String,
    pub mode: ContainerMode,
    pub remove_after_exit: bool,
}

impl ContainerSpec {
    pub fn new(image: ImageTag, command: Vec<String>) -> Self {
        ContainerSpec {
            image,
            command,
            mounts: Vec::new(),
            env: BTreeMap::new(),
            workdir: "/".to_string(),
            mode: ContainerMode::Sibling,
            remove_after_exit: true,
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.command.is_empty() {
            return Err(RuntimeError::InvalidSpec("command is empty".into()));
        }
        if let Some(m) = self.mounts.iter().find(|m| !m.host_path.is_absolute()) {
            return Err(RuntimeError::InvalidSpec(format!(
                "mount host path {} is not absolute",
                m.host_path.display()
            )));
        }
        Ok(())
    }
}

/// Outcome of a finished container.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub exit_code: u8,
    pub stdout: String,
    pub stderr: String,
    pub duration_ms: u64,
}

impl RunResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildRequest {
    pub context: PathBuf,
    pub recipe: PathBuf,
    pub tag: ImageTag,
    /// Requested architectures, recorded but not acted on.
    #[serde(default)]
    pub architectures: Vec<String>,
}

impl BuildRequest {
    pub fn new(context: impl Into<PathBuf>, recipe: impl Into<PathBuf>, tag: ImageTag) -> Self {
        BuildRequest {
            context: context.into(),
            recipe: recipe.into(),
            tag,
            architectures: Vec::new(),
        }
    }

    /// `ContextMissing` unless the recipe is an existing file inside the context.
    pub fn check_context(&self) -> Result<(), RuntimeError> {
        let missing = || RuntimeError::ContextMissing {
            context: self.context.clone(),
            recipe: self.recipe.clone(),
        };
        let context = self.context.canonicalize().map_err(|_| missing())?;
        let recipe = self.recipe.canonicalize().map_err(|_| missing())?;
        if recipe.starts_with(&context) && recipe.is_file() {
            Ok(())
        } else {
            Err(missing())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Build,
    Run,
    Retag,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EventPayload {
    Build {
        request: BuildRequest,
        digest: String,
    },
    Run {
        spec: ContainerSpec,
        container_id: String,
        /// `sibling:host-socket` or `child:nested`.
        annotation: String,
    },
    Retag {
        src: ImageTag,
        dst: ImageTag,
    },
    Remove {
        container_id: String,
    },
}

impl EventPayload {
    pub fn kind(&self) -> EventKind {
        match self {
            EventPayload::Build { .. } => EventKind::Build,
            EventPayload::Run { .. } => EventKind::Run,
            EventPayload::Retag { .. } => EventKind::Retag,
            EventPayload::Remove { .. } => EventKind::Remove,
        }
    }
}

/// A request observed by a recording backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendEvent {
    pub sequence: u64,
    pub payload: EventPayload,
}

impl BackendEvent {
    pub fn kind(&self) -> EventKind {
        self.payload.kind()
    }
}

pub fn mode_annotation(mode: ContainerMode) -> &'static str {
    match mode {
        ContainerMode::Sibling => "sibling:host-socket",
        ContainerMode::Child => "child:nested",
    }
}

/// Everything the rest of the crate needs from a container runtime.
///
/// Implementations must accept concurrent calls.
pub trait ContainerBackend: Send + Sync {
    fn name(&self) -> &'static str;

    /// Builds `request.tag` and returns the image digest.
    fn build_image(&self, request: &BuildRequest) -> Result<String, RuntimeError>;

    fn run_container(&self, spec: &ContainerSpec) -> Result<RunResult, RuntimeError>;

    /// Points `dst` at the image `src` resolves to.
    fn retag(&self, src: &ImageTag, dst: &ImageTag) -> Result<(), RuntimeError>;

    /// Digest of `tag`, `None` when no such image exists.
    fn image_digest(&self, tag: &ImageTag) -> Result<Option<String>, RuntimeError>;

    fn remove_container(&self, container_id: &str) -> Result<(), RuntimeError>;

    /// Containers started by this backend that still exist.
    fn live_containers(&self) -> Result<Vec<String>, RuntimeError>;
}
