//! Dockerized executables: occasional tools packaged as slim versioned
//! images and run in throwaway containers with the repository mounted.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use semver::Version;
use serde::{Deserialize, Serialize};

use crate::config::{
    is_identifier, parse_changelog, ConfigError, ContainerMode, ImageTag, CHANGELOG_FILE, RECIPE_FILE,
};
use crate::runtime::{BuildRequest, ContainerBackend, ContainerSpec, Mount, RunResult, RuntimeError};

/// Tool recipes live in `<helpers>/dockerized/<tool>/`.
pub const TOOLS_DIR: &str = "dockerized";
pub const TOOL_FILE: &str = "tool.yaml";
/// Where the repository is mounted inside a tool container.
pub const REPO_MOUNT: &str = "/workspace";

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("invalid tool name `{0}`, must match [a-z0-9_-]+")]
    InvalidName(String),
    #[error("no dockerized tool `{name}` under {}", .dir.display())]
    NotFound { name: String, dir: PathBuf },
    #[error("tool `{0}` has no version: pass one or add a changelog")]
    MissingVersion(String),
    #[error("tool `{0}` has no default command and none was given")]
    NoCommand(String),
    #[error("repository root {} does not exist", .0.display())]
    RepoRootMissing(PathBuf),
    #[error("{}: {source}", .path.display())]
    Config {
        path: PathBuf,
        #[source]
        source: ConfigError,
    },
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub tool_name: String,
    pub version: Version,
    pub recipe: PathBuf,
    #[serde(default)]
    pub default_command: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
struct ToolFile {
    #[serde(default)]
    version: Option<String>,
    #[serde(default)]
    default_command: Vec<String>,
}

impl ToolSpec {
    pub fn new(
        tool_name: impl Into<String>,
        version: Version,
        recipe: impl Into<PathBuf>,
        default_command: Vec<String>,
    ) -> Result<Self, ToolError> {
        let tool_name = tool_name.into();
        if !is_identifier(&tool_name) {
            return Err(ToolError::InvalidName(tool_name));
        }
        Ok(ToolSpec {
            tool_name,
            version,
            recipe: recipe.into(),
            default_command,
        })
    }

    /// `tool-<name>:<version>`
    pub fn image_tag(&self) -> ImageTag {
        ImageTag::new(format!("tool-{}:{}", self.tool_name, self.version))
    }

    /// Reads `<helpers>/dockerized/<name>/`. Version precedence: `version`,
    /// then `tool.yaml`, then the head of the tool's changelog.
    pub fn load(helpers_root: &Path, name: &str, version: Option<Version>) -> Result<Self, ToolError> {
        if !is_identifier(name) {
            return Err(ToolError::InvalidName(name.to_string()));
        }
        let dir = helpers_root.join(TOOLS_DIR).join(name);
        let recipe = dir.join(RECIPE_FILE);
        if !recipe.is_file() {
            return Err(ToolError::NotFound {
                name: name.to_string(),
                dir,
            });
        }
        let tool_path = dir.join(TOOL_FILE);
        let tool_file: ToolFile = match std::fs::read_to_string(&tool_path) {
            Ok(text) => serde_yaml::from_str(&text).map_err(|e| ToolError::Config {
                path: tool_path.clone(),
                source: ConfigError::MalformedYaml(e.to_string()),
            })?,
            Err(_) => ToolFile::default(),
        };
        let version = match version {
            Some(v) => v,
            None => match tool_file.version {
                Some(v) => Version::parse(&v).map_err(|_| ToolError::Config {
                    path: tool_path.clone(),
                    source: ConfigError::MalformedVersion(v.clone()),
                })?,
                None => {
                    let cl_path = dir.join(CHANGELOG_FILE);
                    let text =
                        std::fs::read_to_string(&cl_path).map_err(|_| ToolError::MissingVersion(name.to_string()))?;
                    parse_changelog(&text)
                        .map_err(|source| ToolError::Config { path: cl_path, source })?
                        .latest()
                        .clone()
                }
            },
        };
        ToolSpec::new(name, version, recipe, tool_file.default_command)
    }
}

type BuildGuard = Arc<Mutex<()>>;

/// Runs tools, building each `(name, version)` image at most once.
pub struct ToolRunner<'b> {
    backend: &'b dyn ContainerBackend,
    guards: Mutex<HashMap<(String, Version), BuildGuard>>,
}

impl<'b> ToolRunner<'b> {
    pub fn new(backend: &'b dyn ContainerBackend) -> Self {
        ToolRunner {
            backend,
            guards: Mutex::new(HashMap::new()),
        }
    }

    fn guard(&self, spec: &ToolSpec) -> Arc<Mutex<()>> {
        let mut guards = self.guards.lock().unwrap();
        guards
            .entry((spec.tool_name.clone(), spec.version.clone()))
            .or_default()
            .clone()
    }

    /// Builds the tool image unless the backend already has it.
    pub fn ensure_image(&self, spec: &ToolSpec) -> Result<ImageTag, ToolError> {
        let tag = spec.image_tag();
        let guard = self.guard(spec);
        let _held = guard.lock().unwrap();
        if self.backend.image_digest(&tag)?.is_none() {
            let context = spec.recipe.parent().unwrap_or(Path::new(".")).to_path_buf();
            log::info!("building {tag}");
            self.backend
                .build_image(&BuildRequest::new(context, &spec.recipe, tag.clone()))?;
        }
        Ok(tag)
    }

    pub fn run_tool(
        &self,
        spec: &ToolSpec,
        argv: &[String],
        repo_root: &Path,
        mode: ContainerMode,
    ) -> Result<RunResult, ToolError> {
        let repo_root = repo_root
            .canonicalize()
            .map_err(|_| ToolError::RepoRootMissing(repo_root.to_path_buf()))?;
        let command = if argv.is_empty() {
            spec.default_command.clone()
        } else {
            argv.to_vec()
        };
        if command.is_empty() {
            return Err(ToolError::NoCommand(spec.tool_name.clone()));
        }
        let image = self.ensure_image(spec)?;
        let mut container = ContainerSpec::new(image, command);
        container.mounts.push(Mount {
            host_path: repo_root,
            container_path: REPO_MOUNT.into(),
            read_only: false,
        });
        container.workdir = REPO_MOUNT.into();
        container.mode = mode;
        container.remove_after_exit = true;
        Ok(self.backend.run_container(&container)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{EventKind, EventPayload, FakeBackend, FakeScript};

    fn helpers() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let fmt = dir.path().join("helpers/dockerized/fmt");
        std::fs::create_dir_all(&fmt).unwrap();
        std::fs::write(fmt.join("Dockerfile"), "FROM alpine\nRUN apk add shfmt\n").unwrap();
        std::fs::write(fmt.join("tool.yaml"), "default_command: [shfmt, -d, .]\n").unwrap();
        std::fs::write(
            fmt.join("changelog.yaml"),
            "- {version: 1.0.0, date: 2024-01-01, note: x}\n",
        )
        .unwrap();
        dir
    }

    fn fmt_spec(root: &Path, version: &str) -> ToolSpec {
        ToolSpec::load(&root.join("helpers"), "fmt", Some(Version::parse(version).unwrap())).unwrap()
    }

    #[test]
    fn load_uses_changelog_version() {
        let d = helpers();
        let spec = ToolSpec::load(&d.path().join("helpers"), "fmt", None).unwrap();
        assert_eq!(spec.version, Version::new(1, 0, 0));
        assert_eq!(spec.default_command, ["shfmt", "-d", "."]);
        assert_eq!(spec.image_tag().as_str(), "tool-fmt:1.0.0");
        assert!(matches!(
            ToolSpec::load(&d.path().join("helpers"), "lint", None),
            Err(ToolError::NotFound { .. })
        ));
        assert!(matches!(
            ToolSpec::load(&d.path().join("helpers"), "Bad Name", None),
            Err(ToolError::InvalidName(_))
        ));
    }

    #[test]
    fn cached_after_first_build() {
        let d = helpers();
        let fake = FakeBackend::new();
        let runner = ToolRunner::new(&fake);
        let spec = fmt_spec(d.path(), "1.0.0");
        runner.run_tool(&spec, &[], d.path(), ContainerMode::Sibling).unwrap();
        assert_eq!((fake.count(EventKind::Build), fake.count(EventKind::Run)), (1, 1));
        runner
            .run_tool(&spec, &["shfmt".into()], d.path(), ContainerMode::Sibling)
            .unwrap();
        assert_eq!((fake.count(EventKind::Build), fake.count(EventKind::Run)), (1, 2));
        assert!(fake.live_containers().unwrap().is_empty());
    }

    #[test]
    fn version_bump_rebuilds() {
        let d = helpers();
        let fake = FakeBackend::new();
        let runner = ToolRunner::new(&fake);
        runner
            .run_tool(&fmt_spec(d.path(), "1.0.0"), &[], d.path(), ContainerMode::Sibling)
            .unwrap();
        runner
            .run_tool(&fmt_spec(d.path(), "1.1.0"), &[], d.path(), ContainerMode::Sibling)
            .unwrap();
        assert_eq!(fake.count(EventKind::Build), 2);
    }

    #[test]
    fn repo_mounted_at_workspace() {
        let d = helpers();
        let fake = FakeBackend::new();
        ToolRunner::new(&fake)
            .run_tool(&fmt_spec(d.path(), "1.0.0"), &[], d.path(), ContainerMode::Child)
            .unwrap();
        let run = fake.events().into_iter().find(|e| e.kind() == EventKind::Run).unwrap();
        match run.payload {
            EventPayload::Run { spec, annotation, .. } => {
                assert_eq!(spec.mounts[0].host_path, d.path().canonicalize().unwrap());
                assert_eq!(spec.mounts[0].container_path, REPO_MOUNT);
                assert!(!spec.mounts[0].read_only);
                assert_eq!(spec.workdir, REPO_MOUNT);
                assert!(spec.remove_after_exit);
                assert_eq!(annotation, "child:nested");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn failing_tool_leaves_no_container() {
        let d = helpers();
        let fake = FakeBackend::with_script(FakeScript::default().exit_for_arg("shfmt", 1));
        let res = ToolRunner::new(&fake)
            .run_tool(&fmt_spec(d.path(), "1.0.0"), &[], d.path(), ContainerMode::Sibling)
            .unwrap();
        assert_eq!(res.exit_code, 1);
        assert!(fake.live_containers().unwrap().is_empty());
    }

    #[test]
    fn build_failure_and_missing_root() {
        let d = helpers();
        let fake = FakeBackend::with_script(FakeScript::default().fail_build("tool-fmt:1.0.0"));
        let runner = ToolRunner::new(&fake);
        assert!(matches!(
            runner.run_tool(&fmt_spec(d.path(), "1.0.0"), &[], d.path(), ContainerMode::Sibling),
            Err(ToolError::Runtime(RuntimeError::BuildFailed { .. }))
        ));
        assert!(fake.live_containers().unwrap().is_empty());
        assert!(matches!(
            runner.run_tool(
                &fmt_spec(d.path(), "1.0.0"),
                &[],
                &d.path().join("nope"),
                ContainerMode::Sibling
            ),
            Err(ToolError::RepoRootMissing(_))
        ));
    }

    #[test]
    fn concurrent_first_use_builds_once() {
        let d = helpers();
        let fake = FakeBackend::new();
        let runner = ToolRunner::new(&fake);
        let spec = fmt_spec(d.path(), "1.0.0");
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| runner.run_tool(&spec, &[], d.path(), ContainerMode::Sibling).unwrap());
            }
        });
        assert_eq!(fake.count(EventKind::Build), 1);
        assert_eq!(fake.count(EventKind::Run), 8);
    }
}
