use std::path::{Path, PathBuf};

use semver::Version;

use super::{ChangedFile, CheckerCommand, HookError};
use crate::config::{is_contained_relative, ContainerMode};
use crate::tools::{ToolRunner, ToolSpec};

/// Decides whether one file passes its syntax check.
pub trait SyntaxChecker: Send + Sync {
    /// `Ok(true)` when the file is fine. `CheckerUnavailable` when the
    /// checker itself cannot run.
    fn check(&self, extension: &str, command: &CheckerCommand, file: &ChangedFile) -> Result<bool, HookError>;
}

/// Runs each checker as a dockerized tool against a scratch copy of the
/// staged file, so the checked content is exactly what is being committed.
pub struct DockerizedChecker<'r, 'b> {
    runner: &'r ToolRunner<'b>,
    helpers_root: PathBuf,
    mode: ContainerMode,
}

impl<'r, 'b> DockerizedChecker<'r, 'b> {
    pub fn new(runner: &'r ToolRunner<'b>, helpers_root: impl Into<PathBuf>) -> Self {
        DockerizedChecker {
            runner,
            helpers_root: helpers_root.into(),
            mode: ContainerMode::Sibling,
        }
    }

    pub fn with_mode(mut self, mode: ContainerMode) -> Self {
        self.mode = mode;
        self
    }
}

impl SyntaxChecker for DockerizedChecker<'_, '_> {
    fn check(&self, extension: &str, command: &CheckerCommand, file: &ChangedFile) -> Result<bool, HookError> {
        let unavailable = |reason: String| HookError::CheckerUnavailable {
            extension: extension.to_string(),
            reason,
        };
        let version = command
            .version
            .as_deref()
            .map(Version::parse)
            .transpose()
            .map_err(|e| unavailable(e.to_string()))?;
        let spec =
            ToolSpec::load(&self.helpers_root, &command.tool, version).map_err(|e| unavailable(e.to_string()))?;
        let rel = Path::new(&file.path);
        if !is_contained_relative(rel) {
            return Err(unavailable(format!("path `{}` is not repo-relative", file.path)));
        }
        let scratch = tempfile::tempdir()?;
        let target = scratch.path().join(rel);
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&target, &file.content)?;
        let mut argv = command.command.clone();
        argv.push(file.path.clone());
        let result = self
            .runner
            .run_tool(&spec, &argv, scratch.path(), self.mode)
            .map_err(|e| unavailable(e.to_string()))?;
        Ok(result.success())
    }
}
