//! Locating runnable directories and building their nesting tree.

use std::collections::BTreeMap;
use std::io;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{parse_runnable_config, ConfigError, RunnableDirConfig, CONFIG_FILE};

#[derive(Debug, thiserror::Error)]
pub enum DiscoveryError {
    #[error("{0} does not contain {CONFIG_FILE}")]
    RootNotRunnable(PathBuf),
    #[error("dir_id `{id}` is used by both `{}` and `{}`", .first.display(), .second.display())]
    DuplicateDirId {
        id: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("{}: {source}", .path.display())]
    Config {
        path: PathBuf,
        #[source]
        source: ConfigError,
    },
    #[error("path `{}` is outside the tree", .0.display())]
    PathOutsideTree(PathBuf),
    #[error("reading {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    File,
    Dir,
    Symlink,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FsEntry {
    pub name: String,
    pub kind: EntryKind,
}

/// Read-only view of a directory tree.
pub trait FsView {
    fn list(&self, dir: &Path) -> io::Result<Vec<FsEntry>>;
    fn read_to_string(&self, path: &Path) -> io::Result<String>;
    fn is_file(&self, path: &Path) -> bool;
}

/// The host filesystem.
#[derive(Debug, Default, Clone, Copy)]
pub struct RealFs;

impl FsView for RealFs {
    fn list(&self, dir: &Path) -> io::Result<Vec<FsEntry>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let ft = entry.file_type()?;
            let kind = if ft.is_symlink() {
                EntryKind::Symlink
            } else if ft.is_dir() {
                EntryKind::Dir
            } else {
                EntryKind::File
            };
            out.push(FsEntry {
                name: entry.file_name().to_string_lossy().into_owned(),
                kind,
            });
        }
        Ok(out)
    }

    fn read_to_string(&self, path: &Path) -> io::Result<String> {
        std::fs::read_to_string(path)
    }

    fn is_file(&self, path: &Path) -> bool {
        std::fs::symlink_metadata(path).map(|m| m.is_file()).unwrap_or(false)
    }
}

#[derive(Debug, Clone)]
enum MemNode {
    File(String),
    Dir,
    Symlink,
}

/// In-memory filesystem for tests and dry runs.
///
/// `list` returns entries in reverse name order so callers cannot rely on
/// enumeration order.
#[derive(Debug, Default, Clone)]
pub struct MemFs {
    nodes: BTreeMap<PathBuf, MemNode>,
}

impl MemFs {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_parents(&mut self, path: &Path) {
        let mut cur = path.parent();
        while let Some(p) = cur {
            if p.as_os_str().is_empty() {
                break;
            }
            self.nodes.entry(p.to_path_buf()).or_insert(MemNode::Dir);
            cur = p.parent();
        }
    }

    pub fn add_file(&mut self, path: impl AsRef<Path>, contents: impl Into<String>) -> &mut Self {
        let path = path.as_ref();
        self.add_parents(path);
        self.nodes.insert(path.to_path_buf(), MemNode::File(contents.into()));
        self
    }

    pub fn add_dir(&mut self, path: impl AsRef<Path>) -> &mut Self {
        let path = path.as_ref();
        self.add_parents(path);
        self.nodes.insert(path.to_path_buf(), MemNode::Dir);
        self
    }

    pub fn add_symlink(&mut self, path: impl AsRef<Path>) -> &mut Self {
        let path = path.as_ref();
        self.add_parents(path);
        self.nodes.insert(path.to_path_buf(), MemNode::Symlink);
        self
    }
}

impl FsView for MemFs {
    fn list(&self, dir: &Path) -> io::Result<Vec<FsEntry>> {
        match self.nodes.get(dir) {
            Some(MemNode::Dir) => {}
            _ if dir.as_os_str().is_empty() || dir == Path::new("/") => {}
            _ => return Err(io::Error::new(io::ErrorKind::NotFound, "not a directory")),
        }
        let mut out: Vec<FsEntry> = self
            .nodes
            .iter()
            .filter(|(p, _)| p.parent() == Some(dir))
            .map(|(p, n)| FsEntry {
                name: p.file_name().unwrap().to_string_lossy().into_owned(),
                kind: match n {
                    MemNode::File(_) => EntryKind::File,
                    MemNode::Dir => EntryKind::Dir,
                    MemNode::Symlink => EntryKind::Symlink,
                },
            })
            .collect();
        out.reverse();
        Ok(out)
    }

    fn read_to_string(&self, path: &Path) -> io::Result<String> {
        match self.nodes.get(path) {
            Some(MemNode::File(s)) => Ok(s.clone()),
            _ => Err(io::Error::new(io::ErrorKind::NotFound, "no such file")),
        }
    }

    fn is_file(&self, path: &Path) -> bool {
        matches!(self.nodes.get(path), Some(MemNode::File(_)))
    }
}

/// One runnable directory and the runnable directories nested in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirNode {
    /// Path relative to the tree root; empty for the root itself.
    pub path: PathBuf,
    pub config: RunnableDirConfig,
    pub children: Vec<DirNode>,
}

impl DirNode {
    pub fn id(&self) -> &str {
        &self.config.dir_id
    }

    /// Human-readable path, `.` for the root.
    pub fn display_path(&self) -> String {
        if self.path.as_os_str().is_empty() {
            ".".to_string()
        } else {
            self.path.to_string_lossy().replace('\\', "/")
        }
    }

    /// Pre-order traversal, children in path order.
    pub fn walk(&self) -> Vec<&DirNode> {
        let mut out = vec![self];
        for c in &self.children {
            out.extend(c.walk());
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct TreeRepr {
    base: PathBuf,
    root: DirNode,
}

/// Nesting structure of runnable directories under `base`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TreeRepr", into = "TreeRepr")]
pub struct DirTree {
    base: PathBuf,
    root: DirNode,
    index: BTreeMap<String, PathBuf>,
}

impl TryFrom<TreeRepr> for DirTree {
    type Error = DiscoveryError;

    fn try_from(repr: TreeRepr) -> Result<Self, Self::Error> {
        DirTree::from_root(repr.base, repr.root)
    }
}

impl From<DirTree> for TreeRepr {
    fn from(t: DirTree) -> Self {
        TreeRepr {
            base: t.base,
            root: t.root,
        }
    }
}

impl DirTree {
    pub fn from_root(base: PathBuf, root: DirNode) -> Result<Self, DiscoveryError> {
        let mut index = BTreeMap::new();
        for node in root.walk() {
            if let Some(first) = index.insert(node.id().to_string(), node.path.clone()) {
                return Err(DiscoveryError::DuplicateDirId {
                    id: node.id().to_string(),
                    first,
                    second: node.path.clone(),
                });
            }
        }
        Ok(DirTree { base, root, index })
    }

    /// Directory the tree was discovered from.
    pub fn base(&self) -> &Path {
        &self.base
    }

    pub fn root(&self) -> &DirNode {
        &self.root
    }

    pub fn nodes(&self) -> Vec<&DirNode> {
        self.root.walk()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn get(&self, dir_id: &str) -> Option<&DirNode> {
        let path = self.index.get(dir_id)?;
        self.nodes().into_iter().find(|n| &n.path == path)
    }

    /// Absolute location of a node.
    pub fn abs_path(&self, node: &DirNode) -> PathBuf {
        if node.path.as_os_str().is_empty() {
            self.base.clone()
        } else {
            self.base.join(&node.path)
        }
    }

    /// Indented listing, one node per line.
    pub fn render(&self) -> String {
        fn go(node: &DirNode, depth: usize, out: &mut String) {
            out.push_str(&"  ".repeat(depth));
            out.push_str(&format!(
                "{}  {}  image={} mode={}\n",
                node.id(),
                node.display_path(),
                node.config.image_name,
                node.config.container_mode
            ));
            for c in &node.children {
                go(c, depth + 1, out);
            }
        }
        let mut out = String::new();
        go(&self.root, 0, &mut out);
        out
    }
}

/// Scans `root_path` and returns every directory holding a marker file.
///
/// Hidden entries and symlinks are skipped; submodules are ordinary
/// subdirectories here.
pub fn discover(root_path: &Path, fs: &dyn FsView) -> Result<DirTree, DiscoveryError> {
    let marker = root_path.join(CONFIG_FILE);
    if !fs.is_file(&marker) {
        return Err(DiscoveryError::RootNotRunnable(root_path.to_path_buf()));
    }
    let root = load_node(root_path, PathBuf::new(), fs)?;
    let root = collect(root_path, root, fs)?;
    DirTree::from_root(root_path.to_path_buf(), root)
}

fn load_node(base: &Path, rel: PathBuf, fs: &dyn FsView) -> Result<DirNode, DiscoveryError> {
    let marker = base.join(&rel).join(CONFIG_FILE);
    let text = fs.read_to_string(&marker).map_err(|source| DiscoveryError::Io {
        path: marker.clone(),
        source,
    })?;
    let config = parse_runnable_config(&text).map_err(|source| DiscoveryError::Config {
        path: rel.join(CONFIG_FILE),
        source,
    })?;
    Ok(DirNode {
        path: rel,
        config,
        children: Vec::new(),
    })
}

/// Fills `node.children` with the nearest runnable descendants.
fn collect(base: &Path, mut node: DirNode, fs: &dyn FsView) -> Result<DirNode, DiscoveryError> {
    let mut found = Vec::new();
    find_runnable_below(base, &node.path, fs, &mut found)?;
    found.sort();
    for rel in found {
        let child = load_node(base, rel, fs)?;
        node.children.push(collect(base, child, fs)?);
    }
    Ok(node)
}

fn find_runnable_below(
    base: &Path,
    rel: &Path,
    fs: &dyn FsView,
    found: &mut Vec<PathBuf>,
) -> Result<(), DiscoveryError> {
    let abs = base.join(rel);
    let entries = fs.list(&abs).map_err(|source| DiscoveryError::Io {
        path: abs.clone(),
        source,
    })?;
    for entry in entries {
        if entry.kind != EntryKind::Dir || entry.name.starts_with('.') {
            continue;
        }
        let child_rel = rel.join(&entry.name);
        if fs.is_file(&base.join(&child_rel).join(CONFIG_FILE)) {
            found.push(child_rel);
        } else {
            find_runnable_below(base, &child_rel, fs, found)?;
        }
    }
    Ok(())
}

/// Lexically normalizes `path` relative to the tree base. `None` when it
/// escapes the base.
fn normalize_in_tree(base: &Path, path: &Path) -> Option<PathBuf> {
    let rel = if path.is_absolute() {
        path.strip_prefix(base).ok()?.to_path_buf()
    } else {
        path.to_path_buf()
    };
    let mut out = PathBuf::new();
    for c in rel.components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return None;
                }
            }
            Component::RootDir | Component::Prefix(_) => return None,
        }
    }
    Some(out)
}

/// Deepest node whose directory contains `path`.
pub fn container_for<'t>(tree: &'t DirTree, path: &Path) -> Result<&'t DirNode, DiscoveryError> {
    let rel =
        normalize_in_tree(tree.base(), path).ok_or_else(|| DiscoveryError::PathOutsideTree(path.to_path_buf()))?;
    let mut node = tree.root();
    'descend: loop {
        for child in &node.children {
            if rel.starts_with(&child.path) {
                node = child;
                continue 'descend;
            }
        }
        return Ok(node);
    }
}
