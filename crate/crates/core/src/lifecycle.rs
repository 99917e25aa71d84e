//! Local → dev → prod progression of a runnable directory's image.
//!
//! Only the local stage is ever built. Dev and prod images are retags of an
//! already built image with the same version, so the digest that was tested
//! is the digest that ships.

use serde::{Deserialize, Serialize};

use crate::config::{load_changelog, resolve_image_tag, ConfigError, ImageRef, Stage};
use crate::discovery::{DirNode, DirTree};
use crate::lock::{LockError, LockFile};
use crate::runtime::{BuildRequest, ContainerBackend, RuntimeError};

/// Per-node lock held while building or promoting.
pub const NODE_LOCK_FILE: &str = ".rundir.lock";

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Lock(#[from] LockError),
    #[error("illegal stage transition {from} -> {to} (allowed: local -> dev, dev -> prod)")]
    IllegalTransition { from: Stage, to: Stage },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTransition {
    pub node_id: String,
    pub from: Stage,
    pub to: Stage,
    pub version: semver::Version,
    pub actor: String,
}

pub fn is_legal_transition(from: Stage, to: Stage) -> bool {
    matches!((from, to), (Stage::Local, Stage::Dev) | (Stage::Dev, Stage::Prod))
}

/// Builds the node's local image `image:local-<user>-<version>`.
pub fn build_stage(
    backend: &dyn ContainerBackend,
    tree: &DirTree,
    node: &DirNode,
    user: &str,
) -> Result<ImageRef, LifecycleError> {
    let dir = tree.abs_path(node);
    let changelog = load_changelog(&dir, &node.config)?;
    let image = resolve_image_tag(&node.config, &changelog, Stage::Local, Some(user))?;
    let _lock = LockFile::acquire(dir.join(NODE_LOCK_FILE))?;
    let mut request = BuildRequest::new(&dir, node.config.recipe_path(&dir), image.tag());
    request.architectures = node.config.architectures.clone();
    let digest = backend.build_image(&request)?;
    log::info!("built {} ({digest})", image.tag());
    Ok(image)
}

/// Retags the node's `from` image as `to`. `user` names the local image
/// when promoting out of the local stage.
pub fn promote(
    backend: &dyn ContainerBackend,
    tree: &DirTree,
    node: &DirNode,
    from: Stage,
    to: Stage,
    user: Option<&str>,
) -> Result<(ImageRef, StageTransition), LifecycleError> {
    if !is_legal_transition(from, to) {
        return Err(LifecycleError::IllegalTransition { from, to });
    }
    let dir = tree.abs_path(node);
    let changelog = load_changelog(&dir, &node.config)?;
    let src_user = if from == Stage::Local { user } else { None };
    let src = resolve_image_tag(&node.config, &changelog, from, src_user)?;
    let dst = resolve_image_tag(&node.config, &changelog, to, None)?;
    let _lock = LockFile::acquire(dir.join(NODE_LOCK_FILE))?;
    backend.retag(&src.tag(), &dst.tag())?;
    let transition = StageTransition {
        node_id: node.id().to_string(),
        from,
        to,
        version: dst.version.clone(),
        actor: user.unwrap_or("unknown").to_string(),
    };
    Ok((dst, transition))
}
