use std::path::Path;
use std::process::Command;

use super::{Author, ChangeSet, ChangedFile, HookError};

fn git(repo: &Path, args: &[&str]) -> Result<Vec<u8>, HookError> {
    let out = Command::new("git")
        .arg("-C")
        .arg(repo)
        .args(args)
        .output()
        .map_err(|e| HookError::Git(e.to_string()))?;
    if !out.status.success() {
        return Err(HookError::Git(format!(
            "git {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(out.stdout)
}

fn git_text(repo: &Path, args: &[&str]) -> Result<String, HookError> {
    Ok(String::from_utf8_lossy(&git(repo, args)?).trim().to_string())
}

/// `Name <email> 1700000000 +0000` → (Name, email)
fn parse_ident(ident: &str) -> Author {
    let (name, rest) = ident.split_once('<').unwrap_or((ident, ""));
    let email = rest.split_once('>').map(|(e, _)| e).unwrap_or("");
    Author {
        name: name.trim().to_string(),
        email: email.trim().to_string(),
    }
}

/// Builds a change set from the git index: current branch, configured
/// author and the staged content of added/modified files.
pub fn changeset_from_index(repo: &Path) -> Result<ChangeSet, HookError> {
    let branch = git_text(repo, &["symbolic-ref", "--short", "HEAD"])
        .or_else(|_| git_text(repo, &["rev-parse", "--abbrev-ref", "HEAD"]))?;
    let author = parse_ident(&git_text(repo, &["var", "GIT_AUTHOR_IDENT"])?);
    let names = git(repo, &["diff", "--cached", "--name-only", "-z", "--diff-filter=ACMR"])?;
    let mut files = Vec::new();
    for name in names.split(|b| *b == 0).filter(|n| !n.is_empty()) {
        let path = String::from_utf8_lossy(name).into_owned();
        let blob = git(repo, &["show", &format!(":{path}")])?;
        files.push(ChangedFile {
            size: blob.len() as u64,
            content: String::from_utf8_lossy(&blob).into_owned(),
            path,
        });
    }
    Ok(ChangeSet { branch, author, files })
}
