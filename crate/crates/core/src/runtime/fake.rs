use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    mode_annotation, BackendEvent, BuildRequest, ContainerBackend, ContainerSpec, EventKind, EventPayload, RunResult,
    RuntimeError,
};
use crate::config::ImageTag;

/// Path of the JSON file a persisted fake backend loads and saves.
pub const FAKE_STATE_ENV: &str = "RUNDIR_FAKE_STATE";

/// Scripted outcome for runs. All present matchers must hold.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<ImageTag>,
    /// Matches when any command argument contains this text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command_contains: Option<String>,
    #[serde(default)]
    pub exit_code: u8,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub duration_ms: u64,
}

impl RunRule {
    fn matches(&self, spec: &ContainerSpec) -> bool {
        self.image.as_ref().is_none_or(|i| *i == spec.image)
            && self
                .command_contains
                .as_ref()
                .is_none_or(|needle| spec.command.iter().any(|a| a.contains(needle)))
    }
}

/// Fault injection and canned results for a [`FakeBackend`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeScript {
    /// First matching rule decides a run's result; no match means exit 0.
    #[serde(default)]
    pub runs: Vec<RunRule>,
    #[serde(default)]
    pub build_failures: BTreeSet<ImageTag>,
    /// Every operation fails with `RuntimeUnavailable`.
    #[serde(default)]
    pub unavailable: bool,
}

impl FakeScript {
    pub fn exit_for_image(mut self, image: impl Into<ImageTag>, exit_code: u8) -> Self {
        self.runs.push(RunRule {
            image: Some(image.into()),
            exit_code,
            ..RunRule::default()
        });
        self
    }

    pub fn exit_for_arg(mut self, needle: impl Into<String>, exit_code: u8) -> Self {
        self.runs.push(RunRule {
            command_contains: Some(needle.into()),
            exit_code,
            ..RunRule::default()
        });
        self
    }

    pub fn fail_build(mut self, tag: impl Into<ImageTag>) -> Self {
        self.build_failures.insert(tag.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
struct FakeState {
    #[serde(default)]
    script: FakeScript,
    #[serde(default)]
    images: BTreeMap<ImageTag, String>,
    #[serde(default)]
    events: Vec<BackendEvent>,
    #[serde(default)]
    live: BTreeSet<String>,
    #[serde(default)]
    next_sequence: u64,
    #[serde(default)]
    next_container: u64,
}

impl FakeState {
    fn record(&mut self, payload: EventPayload) {
        let sequence = self.next_sequence;
        self.next_sequence += 1;
        self.events.push(BackendEvent { sequence, payload });
    }
}

/// Deterministic in-memory container runtime.
///
/// Digests are content hashes of the build context listing, the recipe
/// text and the tag. Optionally persisted to a JSON file so state survives
/// across processes.
#[derive(Debug, Default)]
pub struct FakeBackend {
    state: Mutex<FakeState>,
    persist_to: Option<PathBuf>,
}

/// Sorted, `/`-separated relative paths of regular files under `context`,
/// skipping hidden entries.
pub(crate) fn context_listing(context: &Path) -> Vec<String> {
    let mut files: Vec<String> = walkdir::WalkDir::new(context)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| e.depth() == 0 || !e.file_name().to_string_lossy().starts_with('.'))
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter_map(|e| {
            e.path()
                .strip_prefix(context)
                .ok()
                .map(|p| p.to_string_lossy().replace('\\', "/"))
        })
        .collect();
    files.sort();
    files
}

fn content_digest(request: &BuildRequest) -> Result<String, RuntimeError> {
    let recipe = std::fs::read(&request.recipe)?;
    let mut h = Sha256::new();
    for path in context_listing(&request.context) {
        h.update(path.as_bytes());
        h.update(b"\n");
    }
    h.update([0u8]);
    h.update(&recipe);
    h.update([0u8]);
    h.update(request.tag.as_str().as_bytes());
    Ok(format!("sha256:{}", hex::encode(h.finalize())))
}

impl FakeBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(script: FakeScript) -> Self {
        FakeBackend {
            state: Mutex::new(FakeState {
                script,
                ..FakeState::default()
            }),
            persist_to: None,
        }
    }

    /// Loads state from `path` if it exists and saves back after every
    /// mutating call.
    pub fn persistent(path: impl Into<PathBuf>) -> Result<Self, RuntimeError> {
        let path = path.into();
        let state = if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text).map_err(|e| RuntimeError::State(format!("{}: {e}", path.display())))?
        } else {
            FakeState::default()
        };
        Ok(FakeBackend {
            state: Mutex::new(state),
            persist_to: Some(path),
        })
    }

    /// Writes an initial state file holding `script` and pre-existing images.
    pub fn seed_state_file(
        path: &Path,
        script: &FakeScript,
        images: &BTreeMap<ImageTag, String>,
    ) -> Result<(), RuntimeError> {
        let state = FakeState {
            script: script.clone(),
            images: images.clone(),
            ..FakeState::default()
        };
        std::fs::write(path, serde_json::to_string_pretty(&state).unwrap())?;
        Ok(())
    }

    fn lock(&self) -> MutexGuard<'_, FakeState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn save(&self, state: &FakeState) -> Result<(), RuntimeError> {
        if let Some(path) = &self.persist_to {
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, serde_json::to_string_pretty(state).unwrap())?;
            std::fs::rename(&tmp, path)?;
        }
        Ok(())
    }

    fn check_available(state: &FakeState) -> Result<(), RuntimeError> {
        if state.script.unavailable {
            Err(RuntimeError::RuntimeUnavailable(
                "fake backend scripted as unavailable".into(),
            ))
        } else {
            Ok(())
        }
    }

    pub fn set_script(&self, script: FakeScript) {
        self.lock().script = script;
    }

    /// Makes `tag` exist without a build event.
    pub fn insert_image(&self, tag: impl Into<ImageTag>, digest: impl Into<String>) {
        let mut st = self.lock();
        st.images.insert(tag.into(), digest.into());
        let _ = self.save(&st);
    }

    pub fn events(&self) -> Vec<BackendEvent> {
        self.lock().events.clone()
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.lock().events.iter().filter(|e| e.kind() == kind).count()
    }

    pub fn images(&self) -> BTreeMap<ImageTag, String> {
        self.lock().images.clone()
    }

    /// Images named in run events, in event order.
    pub fn run_images(&self) -> Vec<ImageTag> {
        self.lock()
            .events
            .iter()
            .filter_map(|e| match &e.payload {
                EventPayload::Run { spec, .. } => Some(spec.image.clone()),
                _ => None,
            })
            .collect()
    }
}

impl ContainerBackend for FakeBackend {
    fn name(&self) -> &'static str {
        "fake"
    }

    fn build_image(&self, request: &BuildRequest) -> Result<String, RuntimeError> {
        Self::check_available(&self.lock())?;
        request.check_context()?;
        let digest = content_digest(request)?;
        let mut st = self.lock();
        if st.script.build_failures.contains(&request.tag) {
            return Err(RuntimeError::BuildFailed {
                tag: request.tag.clone(),
                output: "scripted build failure".into(),
            });
        }
        st.images.insert(request.tag.clone(), digest.clone());
        st.record(EventPayload::Build {
            request: request.clone(),
            digest: digest.clone(),
        });
        self.save(&st)?;
        Ok(digest)
    }

    fn run_container(&self, spec: &ContainerSpec) -> Result<RunResult, RuntimeError> {
        let mut st = self.lock();
        Self::check_available(&st)?;
        spec.validate()?;
        if !st.images.contains_key(&spec.image) {
            return Err(RuntimeError::ImageMissing(spec.image.clone()));
        }
        let container_id = format!("fake-{}", st.next_container);
        st.next_container += 1;
        let rule = st.script.runs.iter().find(|r| r.matches(spec)).cloned();
        let result = match rule {
            Some(r) => RunResult {
                exit_code: r.exit_code,
                stdout: r.stdout,
                stderr: r.stderr,
                duration_ms: r.duration_ms,
            },
            None => RunResult {
                exit_code: 0,
                stdout: String::new(),
                stderr: String::new(),
                duration_ms: 0,
            },
        };
        if !spec.remove_after_exit {
            st.live.insert(container_id.clone());
        }
        st.record(EventPayload::Run {
            spec: spec.clone(),
            container_id,
            annotation: mode_annotation(spec.mode).to_string(),
        });
        self.save(&st)?;
        Ok(result)
    }

    fn retag(&self, src: &ImageTag, dst: &ImageTag) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        Self::check_available(&st)?;
        let digest = st
            .images
            .get(src)
            .cloned()
            .ok_or_else(|| RuntimeError::ImageMissing(src.clone()))?;
        st.images.insert(dst.clone(), digest);
        st.record(EventPayload::Retag {
            src: src.clone(),
            dst: dst.clone(),
        });
        self.save(&st)?;
        Ok(())
    }

    fn image_digest(&self, tag: &ImageTag) -> Result<Option<String>, RuntimeError> {
        let st = self.lock();
        Self::check_available(&st)?;
        Ok(st.images.get(tag).cloned())
    }

    fn remove_container(&self, container_id: &str) -> Result<(), RuntimeError> {
        let mut st = self.lock();
        Self::check_available(&st)?;
        st.live.remove(container_id);
        st.record(EventPayload::Remove {
            container_id: container_id.to_string(),
        });
        self.save(&st)?;
        Ok(())
    }

    fn live_containers(&self) -> Result<Vec<String>, RuntimeError> {
        let st = self.lock();
        Self::check_available(&st)?;
        Ok(st.live.iter().cloned().collect())
    }
}
