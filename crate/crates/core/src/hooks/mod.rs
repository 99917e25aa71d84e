//! Pre-commit policy checks.
//!
//! Six checks ship by default, each a [`PolicyCheck`] registered by name in
//! a [`CheckRegistry`]: `branch`, `author`, `file_size`, `forbidden_words`,
//! `compile` and `secrets`. Every enabled check runs on every change set;
//! a failing check never hides the others.

mod checks;
mod staged;
mod syntax;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

pub use checks::{AuthorCheck, BranchCheck, CompileCheck, FileSizeCheck, ForbiddenWordsCheck, SecretsCheck};
pub use staged::changeset_from_index;
pub use syntax::{DockerizedChecker, SyntaxChecker};

/// Policy file, relative to the helpers directory.
pub const POLICY_FILE: &str = "hook_policy.yaml";

#[derive(Debug, thiserror::Error)]
pub enum HookError {
    #[error("pattern `{pattern}` does not compile: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("max_file_bytes must be positive")]
    ZeroSizeLimit,
    #[error("unknown check `{0}`")]
    UnknownCheck(String),
    #[error("path `{0}` appears twice in the change set")]
    DuplicatePath(String),
    #[error("no usable checker for `.{extension}` files: {reason}")]
    CheckerUnavailable { extension: String, reason: String },
    #[error("malformed policy {}: {reason}", .path.display())]
    MalformedPolicy { path: PathBuf, reason: String },
    #[error("git: {0}")]
    Git(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Syntax checker for one file extension, run as a dockerized tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckerCommand {
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    /// Command prefix; the file path is appended.
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HookPolicy {
    pub protected_branches: Vec<String>,
    pub author_name_pattern: String,
    pub author_email_pattern: String,
    pub max_file_bytes: u64,
    pub forbidden_words: Vec<String>,
    pub compile_check_extensions: BTreeMap<String, CheckerCommand>,
    pub secret_patterns: Vec<String>,
    /// Checks to run, in registry order. `None` runs all.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub enabled_checks: Option<Vec<String>>,
}

pub const DEFAULT_MAX_FILE_BYTES: u64 = 512 * 1024;

pub fn default_secret_patterns() -> Vec<String> {
    [
        r"AKIA[0-9A-Z]{16}",
        r"ASIA[0-9A-Z]{16}",
        r#"(?i)aws_secret_access_key\s*[=:]\s*['"]?[A-Za-z0-9/+=]{40}"#,
        r"-----BEGIN (RSA |EC |DSA |OPENSSH |PGP |ENCRYPTED )?PRIVATE KEY( BLOCK)?-----",
        r"gh[pousr]_[A-Za-z0-9]{36}",
        r"AIza[0-9A-Za-z_\-]{35}",
        r"xox[baprs]-[0-9A-Za-z\-]{10,}",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

impl Default for HookPolicy {
    fn default() -> Self {
        let mut compile = BTreeMap::new();
        compile.insert(
            "py".to_string(),
            CheckerCommand {
                tool: "python".into(),
                version: None,
                command: vec!["python".into(), "-m".into(), "py_compile".into()],
            },
        );
        HookPolicy {
            protected_branches: vec!["master".into(), "main".into()],
            author_name_pattern: r"\S".into(),
            author_email_pattern: r"^[^@\s]+@[^@\s]+\.[^@\s]+$".into(),
            max_file_bytes: DEFAULT_MAX_FILE_BYTES,
            forbidden_words: Vec::new(),
            compile_check_extensions: compile,
            secret_patterns: default_secret_patterns(),
            enabled_checks: None,
        }
    }
}

impl HookPolicy {
    pub fn from_yaml(text: &str, path: &Path) -> Result<Self, HookError> {
        if text.trim().is_empty() {
            return Ok(HookPolicy::default());
        }
        serde_yaml::from_str(text).map_err(|e| HookError::MalformedPolicy {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Loads `<helpers>/hook_policy.yaml`, defaults when absent.
    pub fn load(helpers_root: &Path) -> Result<Self, HookError> {
        let path = helpers_root.join(POLICY_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => Self::from_yaml(&text, &path),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(HookPolicy::default()),
            Err(e) => Err(e.into()),
        }
    }

    pub fn compile(&self) -> Result<CompiledPolicy, HookError> {
        if self.max_file_bytes == 0 {
            return Err(HookError::ZeroSizeLimit);
        }
        let re = |p: &str| {
            Regex::new(p).map_err(|e| HookError::InvalidPattern {
                pattern: p.to_string(),
                reason: e.to_string(),
            })
        };
        Ok(CompiledPolicy {
            author_name: re(&self.author_name_pattern)?,
            author_email: re(&self.author_email_pattern)?,
            forbidden: self
                .forbidden_words
                .iter()
                .map(|w| Ok((w.clone(), re(&format!(r"(?i)\b{}\b", regex::escape(w)))?)))
                .collect::<Result<_, HookError>>()?,
            secrets: self.secret_patterns.iter().map(|p| re(p)).collect::<Result<_, _>>()?,
            policy: self.clone(),
        })
    }
}

/// A policy with every pattern compiled.
#[derive(Debug, Clone)]
pub struct CompiledPolicy {
    pub policy: HookPolicy,
    pub author_name: Regex,
    pub author_email: Regex,
    pub forbidden: Vec<(String, Regex)>,
    pub secrets: Vec<Regex>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Author {
    pub name: String,
    pub email: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangedFile {
    pub path: String,
    pub size: u64,
    pub content: String,
}

impl ChangedFile {
    pub fn new(path: impl Into<String>, content: impl Into<String>) -> Self {
        let content = content.into();
        ChangedFile {
            path: path.into(),
            size: content.len() as u64,
            content,
        }
    }

    pub fn extension(&self) -> Option<&str> {
        Path::new(&self.path).extension().and_then(|e| e.to_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub branch: String,
    pub author: Author,
    #[serde(default)]
    pub files: Vec<ChangedFile>,
}

impl ChangeSet {
    pub fn validate(&self) -> Result<(), HookError> {
        let mut seen = BTreeSet::new();
        for f in &self.files {
            if !seen.insert(f.path.as_str()) {
                return Err(HookError::DuplicatePath(f.path.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub check: String,
    pub passed: bool,
    pub offending: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookReport {
    pub results: Vec<CheckResult>,
    pub passed: bool,
}

impl HookReport {
    pub fn result(&self, check: &str) -> Option<&CheckResult> {
        self.results.iter().find(|r| r.check == check)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            out.push_str(&format!("{:<16} {}\n", r.check, if r.passed { "ok" } else { "FAILED" }));
            for item in &r.offending {
                out.push_str(&format!("    {item}\n"));
            }
        }
        out
    }
}

/// Inputs shared by all checks of one run.
pub struct CheckContext<'a> {
    pub policy: &'a CompiledPolicy,
    pub syntax: &'a dyn SyntaxChecker,
}

/// One named policy check. Returns the offending items; empty means pass.
pub trait PolicyCheck: Send + Sync {
    fn name(&self) -> &'static str;
    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError>;
}

/// Ordered, name-addressable set of checks.
pub struct CheckRegistry {
    checks: Vec<Box<dyn PolicyCheck>>,
}

impl CheckRegistry {
    pub fn empty() -> Self {
        CheckRegistry { checks: Vec::new() }
    }

    /// Appends a check; a check with the same name is replaced in place.
    pub fn register<C: PolicyCheck + 'static>(&mut self, check: C) {
        match self.checks.iter().position(|c| c.name() == check.name()) {
            Some(i) => self.checks[i] = Box::new(check),
            None => self.checks.push(Box::new(check)),
        }
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.checks.iter().map(|c| c.name()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&dyn PolicyCheck> {
        self.checks.iter().find(|c| c.name() == name).map(|c| c.as_ref())
    }

    /// Runs every enabled check in registry order.
    pub fn run(
        &self,
        change: &ChangeSet,
        policy: &HookPolicy,
        syntax: &dyn SyntaxChecker,
    ) -> Result<HookReport, HookError> {
        change.validate()?;
        let compiled = policy.compile()?;
        if let Some(enabled) = &policy.enabled_checks {
            if let Some(bad) = enabled.iter().find(|n| self.get(n).is_none()) {
                return Err(HookError::UnknownCheck(bad.clone()));
            }
        }
        let ctx = CheckContext {
            policy: &compiled,
            syntax,
        };
        let mut results = Vec::new();
        for check in &self.checks {
            let on = policy
                .enabled_checks
                .as_ref()
                .is_none_or(|e| e.iter().any(|n| n == check.name()));
            if !on {
                continue;
            }
            let offending = check.evaluate(change, &ctx)?;
            results.push(CheckResult {
                check: check.name().to_string(),
                passed: offending.is_empty(),
                offending,
            });
        }
        let passed = results.iter().all(|r| r.passed);
        Ok(HookReport { results, passed })
    }
}

impl Default for CheckRegistry {
    /// The six standard checks.
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(BranchCheck);
        r.register(AuthorCheck);
        r.register(FileSizeCheck);
        r.register(ForbiddenWordsCheck);
        r.register(CompileCheck);
        r.register(SecretsCheck);
        r
    }
}

/// Runs the standard checks.
pub fn run_checks(
    change: &ChangeSet,
    policy: &HookPolicy,
    syntax: &dyn SyntaxChecker,
) -> Result<HookReport, HookError> {
    CheckRegistry::default().run(change, policy, syntax)
}

#[cfg(test)]
mod tests;
