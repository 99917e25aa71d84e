//! Read-only symlink farm from repository paths to canonical files in the
//! helpers directory.

use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

/// Link manifest, relative to the helpers directory.
pub const LINKS_FILE: &str = "links.yaml";

#[derive(Debug, thiserror::Error)]
pub enum LinkError {
    #[error("link source {} does not exist under helpers", .0.display())]
    SourceMissing(PathBuf),
    #[error("link target {} escapes the repository", .0.display())]
    TargetEscapesRepo(PathBuf),
    #[error("helpers directory {} is not inside repository {}", .helpers.display(), .repo.display())]
    HelpersOutsideRepo { helpers: PathBuf, repo: PathBuf },
    #[error("malformed link manifest: {0}")]
    MalformedManifest(String),
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LinkError + '_ {
    move |source| LinkError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkSpec {
    /// Path inside helpers.
    pub source: PathBuf,
    /// Repo-root-relative path of the symlink.
    pub target: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkManifest {
    #[serde(default)]
    pub links: Vec<LinkSpec>,
}

impl LinkManifest {
    pub fn from_yaml(text: &str) -> Result<Self, LinkError> {
        if text.trim().is_empty() {
            return Ok(LinkManifest::default());
        }
        serde_yaml::from_str(text).map_err(|e| LinkError::MalformedManifest(e.to_string()))
    }

    pub fn load(helpers_root: &Path) -> Result<Self, LinkError> {
        let path = helpers_root.join(LINKS_FILE);
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::from_yaml(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkConflict {
    pub target: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkReport {
    pub created: usize,
    pub repaired: usize,
    pub unchanged: usize,
    pub conflicts: Vec<LinkConflict>,
}

impl LinkReport {
    pub fn total(&self) -> usize {
        self.created + self.repaired + self.unchanged + self.conflicts.len()
    }
}

fn escapes(rel: &Path) -> bool {
    let mut depth = 0i32;
    for c in rel.components() {
        match c {
            Component::Normal(_) => depth += 1,
            Component::CurDir => {}
            Component::ParentDir => {
                depth -= 1;
                if depth < 0 {
                    return true;
                }
            }
            Component::RootDir | Component::Prefix(_) => return true,
        }
    }
    depth == 0
}

fn make_read_only(path: &Path) -> Result<(), LinkError> {
    let meta = std::fs::metadata(path).map_err(io_err(path))?;
    let mut perms = meta.permissions();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let mode = perms.mode();
        if mode & 0o222 == 0 {
            return Ok(());
        }
        perms.set_mode(mode & !0o222);
    }
    #[cfg(not(unix))]
    {
        if perms.readonly() {
            return Ok(());
        }
        perms.set_readonly(true);
    }
    std::fs::set_permissions(path, perms).map_err(io_err(path))
}

#[cfg(unix)]
fn symlink(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::os::unix::fs::symlink(src, dst)
}

#[cfg(windows)]
fn symlink(src: &Path, dst: &Path) -> std::io::Result<()> {
    std::os::windows::fs::symlink_file(src, dst)
}

enum TargetState {
    Absent,
    Correct,
    WrongLink(PathBuf),
    RegularFile,
    Directory,
}

/// Creates or checks every link in `manifest`.
///
/// Links are relative so the repository can move. A regular file or a
/// foreign symlink at a target is a conflict unless `repair` is set, in
/// which case it is replaced. Directories are never replaced.
pub fn sync_links(
    helpers_root: &Path,
    repo_root: &Path,
    manifest: &LinkManifest,
    repair: bool,
) -> Result<LinkReport, LinkError> {
    let repo = repo_root.canonicalize().map_err(io_err(repo_root))?;
    let helpers = helpers_root.canonicalize().map_err(io_err(helpers_root))?;
    if !helpers.starts_with(&repo) {
        return Err(LinkError::HelpersOutsideRepo { helpers, repo });
    }

    // validate everything before touching the filesystem
    let mut planned = Vec::with_capacity(manifest.links.len());
    for link in &manifest.links {
        if escapes(&link.source) {
            return Err(LinkError::SourceMissing(link.source.clone()));
        }
        let source = helpers.join(&link.source);
        if !source.is_file() {
            return Err(LinkError::SourceMissing(link.source.clone()));
        }
        if escapes(&link.target) {
            return Err(LinkError::TargetEscapesRepo(link.target.clone()));
        }
        planned.push((source, repo.join(&link.target), link.target.clone()));
    }

    let mut report = LinkReport::default();
    for (source, target, rel_target) in planned {
        let parent = target.parent().unwrap_or(&repo).to_path_buf();
        let link_text = pathdiff::diff_paths(&source, &parent).unwrap_or_else(|| source.clone());
        let state = match std::fs::symlink_metadata(&target) {
            Err(_) => TargetState::Absent,
            Ok(m) if m.file_type().is_symlink() => {
                let current = std::fs::read_link(&target).map_err(io_err(&target))?;
                let resolved = parent.join(&current).canonicalize().ok();
                if resolved.as_deref() == Some(source.as_path()) {
                    TargetState::Correct
                } else {
                    TargetState::WrongLink(current)
                }
            }
            Ok(m) if m.is_dir() => TargetState::Directory,
            Ok(_) => TargetState::RegularFile,
        };
        match state {
            TargetState::Correct => report.unchanged += 1,
            TargetState::Absent => {
                std::fs::create_dir_all(&parent).map_err(io_err(&parent))?;
                symlink(&link_text, &target).map_err(io_err(&target))?;
                report.created += 1;
            }
            TargetState::Directory => report.conflicts.push(LinkConflict {
                target: rel_target,
                reason: "a directory exists at the target".into(),
            }),
            TargetState::RegularFile | TargetState::WrongLink(_) if repair => {
                std::fs::remove_file(&target).map_err(io_err(&target))?;
                symlink(&link_text, &target).map_err(io_err(&target))?;
                report.repaired += 1;
            }
            TargetState::RegularFile => report.conflicts.push(LinkConflict {
                target: rel_target,
                reason: "a regular file exists at the target".into(),
            }),
            TargetState::WrongLink(current) => report.conflicts.push(LinkConflict {
                target: rel_target,
                reason: format!("symlink points to {}", current.display()),
            }),
        }
        make_read_only(&source)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn repo() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        let h = d.path().join("helpers");
        std::fs::create_dir_all(h.join("conf")).unwrap();
        std::fs::write(h.join("LICENSE"), "Apache-2.0\n").unwrap();
        std::fs::write(h.join("conf/pyproject.toml"), "[tool]\n").unwrap();
        d
    }

    fn manifest(pairs: &[(&str, &str)]) -> LinkManifest {
        LinkManifest {
            links: pairs
                .iter()
                .map(|(s, t)| LinkSpec {
                    source: s.into(),
                    target: t.into(),
                })
                .collect(),
        }
    }

    fn two() -> LinkManifest {
        manifest(&[("LICENSE", "LICENSE"), ("conf/pyproject.toml", "app/pyproject.toml")])
    }

    #[test]
    fn create_then_unchanged() {
        let d = repo();
        let h = d.path().join("helpers");
        let first = sync_links(&h, d.path(), &two(), false).unwrap();
        assert_eq!(first.created, 2);
        assert_eq!(first.total(), 2);
        let second = sync_links(&h, d.path(), &two(), false).unwrap();
        assert_eq!((second.created, second.repaired, second.unchanged), (0, 0, 2));
        assert!(second.conflicts.is_empty());
        let link = d.path().join("app/pyproject.toml");
        assert_eq!(
            std::fs::read_link(&link).unwrap(),
            PathBuf::from("../helpers/conf/pyproject.toml")
        );
        assert!(std::fs::metadata(&link).unwrap().permissions().readonly());
        assert_eq!(std::fs::read_to_string(&link).unwrap(), "[tool]\n");
    }

    #[test]
    fn regular_file_conflict_or_repair() {
        let d = repo();
        let h = d.path().join("helpers");
        std::fs::write(d.path().join("LICENSE"), "stale copy\n").unwrap();
        let r = sync_links(&h, d.path(), &two(), false).unwrap();
        assert_eq!(r.conflicts.len(), 1);
        assert_eq!(r.conflicts[0].target, PathBuf::from("LICENSE"));
        assert_eq!(r.created, 1);
        assert_eq!(
            std::fs::read_to_string(d.path().join("LICENSE")).unwrap(),
            "stale copy\n"
        );
        let r = sync_links(&h, d.path(), &two(), true).unwrap();
        assert_eq!((r.repaired, r.unchanged), (1, 1));
        assert!(std::fs::symlink_metadata(d.path().join("LICENSE"))
            .unwrap()
            .file_type()
            .is_symlink());
    }

    #[test]
    fn foreign_symlink_is_conflict() {
        let d = repo();
        let h = d.path().join("helpers");
        std::fs::write(d.path().join("other"), "x").unwrap();
        symlink(Path::new("other"), &d.path().join("LICENSE")).unwrap();
        let r = sync_links(&h, d.path(), &manifest(&[("LICENSE", "LICENSE")]), false).unwrap();
        assert_eq!(r.conflicts.len(), 1);
        let r = sync_links(&h, d.path(), &manifest(&[("LICENSE", "LICENSE")]), true).unwrap();
        assert_eq!(r.repaired, 1);
    }

    #[test]
    fn directory_never_replaced() {
        let d = repo();
        let h = d.path().join("helpers");
        std::fs::create_dir_all(d.path().join("LICENSE")).unwrap();
        let r = sync_links(&h, d.path(), &manifest(&[("LICENSE", "LICENSE")]), true).unwrap();
        assert_eq!(r.conflicts.len(), 1);
    }

    #[test]
    fn errors() {
        let d = repo();
        let h = d.path().join("helpers");
        assert!(matches!(
            sync_links(&h, d.path(), &manifest(&[("NOPE", "NOPE")]), false),
            Err(LinkError::SourceMissing(_))
        ));
        assert!(matches!(
            sync_links(&h, d.path(), &manifest(&[("LICENSE", "../LICENSE")]), false),
            Err(LinkError::TargetEscapesRepo(_))
        ));
        assert!(matches!(
            sync_links(&h, d.path(), &manifest(&[("LICENSE", "/etc/LICENSE")]), false),
            Err(LinkError::TargetEscapesRepo(_))
        ));
        assert!(matches!(
            sync_links(&h, d.path(), &manifest(&[("../outside", "x")]), false),
            Err(LinkError::SourceMissing(_))
        ));
        // nothing was created by the failed runs
        assert!(!d.path().join("x").exists());
        let elsewhere = tempfile::tempdir().unwrap();
        assert!(matches!(
            sync_links(&h, elsewhere.path(), &two(), false),
            Err(LinkError::HelpersOutsideRepo { .. })
        ));
    }

    #[test]
    fn manifest_yaml() {
        let m = LinkManifest::from_yaml("links:\n  - {source: LICENSE, target: LICENSE}\n").unwrap();
        assert_eq!(m.links.len(), 1);
        assert!(LinkManifest::from_yaml("links: 3").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn second_sync_is_all_unchanged(targets in proptest::collection::btree_set("[a-z]{1,4}(/[a-z]{1,4}){0,2}", 1..5)) {
            let d = repo();
            let h = d.path().join("helpers");
            // a target may not be a parent directory of another target
            let targets: Vec<String> = targets.iter().filter(|t| !targets.iter().any(|o| o.starts_with(&format!("{t}/")) )).map(|t| format!("x/{t}")).collect();
            let m = LinkManifest {
                links: targets.iter().map(|t| LinkSpec { source: "LICENSE".into(), target: t.into() }).collect(),
            };
            let first = sync_links(&h, d.path(), &m, false).unwrap();
            prop_assert_eq!(first.total(), m.links.len());
            let second = sync_links(&h, d.path(), &m, false).unwrap();
            prop_assert_eq!(second.unchanged, m.links.len());
            for t in &targets {
                let resolved = d.path().join(t).canonicalize().unwrap();
                prop_assert!(resolved.starts_with(h.canonicalize().unwrap()));
                prop_assert!(std::fs::metadata(d.path().join(t)).unwrap().permissions().readonly());
            }
        }
    }
}
