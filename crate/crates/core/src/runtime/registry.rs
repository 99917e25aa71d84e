use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use super::{ContainerBackend, ExecBackend, FakeBackend, RuntimeError, CONTAINER_CLI_ENV, FAKE_STATE_ENV};

/// Selects the backend by name when no flag is given.
pub const BACKEND_ENV: &str = "RUNDIR_BACKEND";

/// Settings handed to every backend factory.
#[derive(Debug, Clone, Default)]
pub struct BackendOptions {
    /// Container CLI binary for the exec backend.
    pub cli: Option<String>,
    /// State file for the fake backend; in-memory when absent.
    pub fake_state: Option<PathBuf>,
}

impl BackendOptions {
    pub fn from_env() -> Self {
        BackendOptions {
            cli: std::env::var(CONTAINER_CLI_ENV).ok(),
            fake_state: std::env::var_os(FAKE_STATE_ENV).map(PathBuf::from),
        }
    }
}

pub type BackendFactory = fn(&BackendOptions) -> Result<Arc<dyn ContainerBackend>, RuntimeError>;

/// Named backend constructors.
pub struct BackendRegistry {
    factories: BTreeMap<&'static str, BackendFactory>,
}

fn make_exec(opts: &BackendOptions) -> Result<Arc<dyn ContainerBackend>, RuntimeError> {
    let backend = match &opts.cli {
        Some(cli) => ExecBackend::new(cli.clone()),
        None => ExecBackend::from_env(),
    };
    Ok(Arc::new(backend))
}

fn make_fake(opts: &BackendOptions) -> Result<Arc<dyn ContainerBackend>, RuntimeError> {
    Ok(match &opts.fake_state {
        Some(path) => Arc::new(FakeBackend::persistent(path)?),
        None => Arc::new(FakeBackend::new()),
    })
}

impl BackendRegistry {
    pub fn empty() -> Self {
        BackendRegistry {
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &'static str, factory: BackendFactory) {
        self.factories.insert(name, factory);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.factories.keys().copied().collect()
    }

    pub fn create(&self, name: &str, opts: &BackendOptions) -> Result<Arc<dyn ContainerBackend>, RuntimeError> {
        let factory = self
            .factories
            .get(name)
            .ok_or_else(|| RuntimeError::UnknownBackend(name.to_string()))?;
        factory(opts)
    }
}

impl Default for BackendRegistry {
    /// `exec` and `fake`.
    fn default() -> Self {
        let mut r = Self::empty();
        r.register("exec", make_exec);
        r.register("fake", make_fake);
        r
    }
}
