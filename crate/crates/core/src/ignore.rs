//! `.dockerignore` generation from a file-dependency closure.
//!
//! Starting from a set of entrypoints, files are scanned with per-extension
//! regex rules. Each captured reference is turned into candidate paths by the
//! rule's resolver templates and the first candidate that exists is added.
//! The resulting closure becomes an exclude-everything ignore file that
//! re-includes only what the image needs.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::{Component, Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::config::{RunnableDirConfig, CONFIG_FILE};

pub const IGNORE_FILE: &str = ".dockerignore";

#[derive(Debug, thiserror::Error)]
pub enum IgnoreError {
    #[error("no entrypoints given")]
    NoEntrypoints,
    #[error("entrypoint {} does not exist under the repository root", .0.display())]
    EntrypointMissing(PathBuf),
    #[error("rule for `.{extension}`: {reason}")]
    InvalidRule { extension: String, reason: String },
    #[error("malformed profile: {0}")]
    MalformedProfile(String),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One reference-extraction rule.
///
/// Resolver templates may use `{ref}` (the capture verbatim), `{ref_path}`
/// (the capture with `.` replaced by `/`) and `{dir}` (the directory of the
/// scanned file). Candidates are tried in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceRule {
    pub pattern: String,
    pub resolver: Vec<String>,
}

/// Extension → (pattern, resolver templates).
type CompiledRules = BTreeMap<String, Vec<(Regex, Vec<String>)>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScannerProfile {
    /// Extension without the dot → rules.
    pub rules: BTreeMap<String, Vec<ReferenceRule>>,
}

impl Default for ScannerProfile {
    fn default() -> Self {
        let rule = |pattern: &str, resolver: &[&str]| ReferenceRule {
            pattern: pattern.to_string(),
            resolver: resolver.iter().map(|s| s.to_string()).collect(),
        };
        let mut rules = BTreeMap::new();
        rules.insert(
            "py".to_string(),
            vec![
                rule(
                    r"^\s*from\s+([A-Za-z_][\w.]*)\s+import\b",
                    &["{ref_path}.py", "{ref_path}/__init__.py", "{dir}/{ref_path}.py"],
                ),
                rule(
                    r"^\s*import\s+([A-Za-z_][\w.]*)",
                    &["{ref_path}.py", "{ref_path}/__init__.py", "{dir}/{ref_path}.py"],
                ),
            ],
        );
        rules.insert(
            "sh".to_string(),
            vec![rule(
                r#"^\s*(?:source|\.)\s+["']?([\w./-]+)"#,
                &["{dir}/{ref}", "{ref}"],
            )],
        );
        ScannerProfile { rules }
    }
}

impl ScannerProfile {
    pub fn from_yaml(text: &str) -> Result<Self, IgnoreError> {
        let profile: ScannerProfile =
            serde_yaml::from_str(text).map_err(|e| IgnoreError::MalformedProfile(e.to_string()))?;
        profile.compile()?;
        Ok(profile)
    }

    pub fn load(path: &Path) -> Result<Self, IgnoreError> {
        let text = std::fs::read_to_string(path).map_err(|source| IgnoreError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_yaml(&text)
    }

    fn compile(&self) -> Result<CompiledRules, IgnoreError> {
        let mut out = BTreeMap::new();
        for (ext, rules) in &self.rules {
            let invalid = |reason: String| IgnoreError::InvalidRule {
                extension: ext.clone(),
                reason,
            };
            let mut compiled = Vec::new();
            for rule in rules {
                let re = Regex::new(&rule.pattern).map_err(|e| invalid(e.to_string()))?;
                if re.captures_len() != 2 {
                    return Err(invalid(format!(
                        "`{}` must have exactly one capture group",
                        rule.pattern
                    )));
                }
                for template in &rule.resolver {
                    if template.starts_with('/') || Path::new(template).is_absolute() {
                        return Err(invalid(format!("resolver `{template}` is absolute")));
                    }
                }
                compiled.push((re, rule.resolver.clone()));
            }
            out.insert(ext.clone(), compiled);
        }
        Ok(out)
    }
}

/// Forward-slash relative path normalization; `None` when the path climbs
/// above the root.
pub fn normalize_relative(raw: &str) -> Option<String> {
    let mut parts: Vec<&str> = Vec::new();
    for part in raw.split('/') {
        match part {
            "" | "." => {}
            ".." => {
                parts.pop()?;
            }
            p => parts.push(p),
        }
    }
    if parts.is_empty() {
        None
    } else {
        Some(parts.join("/"))
    }
}

fn rel_string(path: &Path) -> Option<String> {
    let mut parts = Vec::new();
    for c in path.components() {
        match c {
            Component::Normal(s) => parts.push(s.to_str()?.to_string()),
            Component::CurDir => {}
            _ => return None,
        }
    }
    normalize_relative(&parts.join("/"))
}

fn expand(template: &str, reference: &str, dir: &str) -> String {
    template
        .replace("{ref_path}", &reference.replace('.', "/"))
        .replace("{ref}", reference)
        .replace("{dir}", dir)
}

#[derive(Debug, Clone, Default)]
pub struct ClosureOptions {
    /// Directories (relative to the root) whose files are only included
    /// when given as entrypoints; typically nested runnable directories.
    pub excluded_dirs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnresolvedRef {
    pub file: String,
    pub reference: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileClosure {
    pub files: BTreeSet<String>,
    pub roots: BTreeSet<String>,
    pub warnings: Vec<UnresolvedRef>,
}

fn in_excluded(path: &str, excluded: &[String]) -> bool {
    excluded
        .iter()
        .any(|d| path == d || path.strip_prefix(d.as_str()).is_some_and(|r| r.starts_with('/')))
}

/// Least fixed point of the reference relation starting from `entrypoints`.
pub fn compute_file_closure(
    repo_root: &Path,
    entrypoints: &[PathBuf],
    profile: &ScannerProfile,
    options: &ClosureOptions,
) -> Result<FileClosure, IgnoreError> {
    if entrypoints.is_empty() {
        return Err(IgnoreError::NoEntrypoints);
    }
    let rules = profile.compile()?;
    let excluded: Vec<String> = options.excluded_dirs.iter().filter_map(|d| rel_string(d)).collect();

    let mut roots = BTreeSet::new();
    for entry in entrypoints {
        let rel = rel_string(entry)
            .filter(|r| repo_root.join(r).is_file())
            .ok_or_else(|| IgnoreError::EntrypointMissing(entry.clone()))?;
        roots.insert(rel);
    }

    let mut files = roots.clone();
    let mut queue: VecDeque<String> = roots.iter().cloned().collect();
    let mut warnings = Vec::new();
    while let Some(current) = queue.pop_front() {
        let ext = Path::new(&current).extension().and_then(|e| e.to_str()).unwrap_or("");
        let Some(file_rules) = rules.get(ext) else {
            continue;
        };
        let abs = repo_root.join(&current);
        let bytes = std::fs::read(&abs).map_err(|source| IgnoreError::Io { path: abs, source })?;
        let text = String::from_utf8_lossy(&bytes);
        let dir = current.rsplit_once('/').map(|(d, _)| d).unwrap_or("");
        for line in text.lines() {
            for (re, resolver) in file_rules {
                for caps in re.captures_iter(line) {
                    let reference = &caps[1];
                    let mut found = None;
                    let mut blocked = false;
                    for template in resolver {
                        let Some(candidate) = normalize_relative(&expand(template, reference, dir)) else {
                            continue;
                        };
                        if !repo_root.join(&candidate).is_file() {
                            continue;
                        }
                        if in_excluded(&candidate, &excluded) && !roots.contains(&candidate) {
                            blocked = true;
                            continue;
                        }
                        found = Some(candidate);
                        break;
                    }
                    match found {
                        Some(path) => {
                            if files.insert(path.clone()) {
                                queue.push_back(path);
                            }
                        }
                        None => warnings.push(UnresolvedRef {
                            file: current.clone(),
                            reference: reference.to_string(),
                            reason: if blocked {
                                "belongs to a nested runnable directory".into()
                            } else {
                                "no candidate exists".into()
                            },
                        }),
                    }
                }
            }
        }
    }
    warnings.sort_by(|a, b| (&a.file, &a.reference).cmp(&(&b.file, &b.reference)));
    warnings.dedup();
    for w in &warnings {
        log::warn!("{}: unresolved reference `{}` ({})", w.file, w.reference, w.reason);
    }
    Ok(FileClosure { files, roots, warnings })
}

fn escape_pattern(path: &str) -> String {
    let mut out = String::with_capacity(path.len());
    for c in path.chars() {
        if matches!(c, '*' | '?' | '[' | ']' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// `*` followed by one sorted `!path` line per kept path.
pub fn emit_dockerignore(closure: &FileClosure, always_keep: &BTreeSet<String>) -> String {
    let kept: BTreeSet<String> = closure
        .files
        .iter()
        .cloned()
        .chain(always_keep.iter().filter_map(|p| normalize_relative(p)))
        .collect();
    let mut out = String::from("*\n");
    for path in kept {
        out.push('!');
        out.push_str(&escape_pattern(&path));
        out.push('\n');
    }
    out
}

/// The marker file plus the build recipe directory.
pub fn default_always_keep(config: &RunnableDirConfig) -> BTreeSet<String> {
    let mut keep = BTreeSet::from([CONFIG_FILE.to_string()]);
    if let Some(ctx) = rel_string(&config.build_context) {
        keep.insert(ctx);
    }
    keep
}
