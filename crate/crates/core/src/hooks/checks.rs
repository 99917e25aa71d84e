use super::{ChangeSet, CheckContext, HookError, PolicyCheck};

/// Rejects commits made directly on a protected branch.
pub struct BranchCheck;

impl PolicyCheck for BranchCheck {
    fn name(&self) -> &'static str {
        "branch"
    }

    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError> {
        let protected = &ctx.policy.policy.protected_branches;
        Ok(if protected.contains(&change.branch) {
            vec![change.branch.clone()]
        } else {
            Vec::new()
        })
    }
}

pub struct AuthorCheck;

impl PolicyCheck for AuthorCheck {
    fn name(&self) -> &'static str {
        "author"
    }

    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError> {
        let mut out = Vec::new();
        if !ctx.policy.author_name.is_match(&change.author.name) {
            out.push(format!("name: {:?}", change.author.name));
        }
        if !ctx.policy.author_email.is_match(&change.author.email) {
            out.push(format!("email: {:?}", change.author.email));
        }
        Ok(out)
    }
}

pub struct FileSizeCheck;

impl PolicyCheck for FileSizeCheck {
    fn name(&self) -> &'static str {
        "file_size"
    }

    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError> {
        let max = ctx.policy.policy.max_file_bytes;
        Ok(change
            .files
            .iter()
            .filter(|f| f.size > max)
            .map(|f| f.path.clone())
            .collect())
    }
}

/// Case-insensitive whole-word match against file contents.
pub struct ForbiddenWordsCheck;

impl PolicyCheck for ForbiddenWordsCheck {
    fn name(&self) -> &'static str {
        "forbidden_words"
    }

    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError> {
        let mut out = Vec::new();
        for f in &change.files {
            for (word, re) in &ctx.policy.forbidden {
                if re.is_match(&f.content) {
                    out.push(format!("{}: {word}", f.path));
                }
            }
        }
        Ok(out)
    }
}

/// Syntax-checks every file whose extension has a configured checker.
pub struct CompileCheck;

impl PolicyCheck for CompileCheck {
    fn name(&self) -> &'static str {
        "compile"
    }

    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError> {
        let table = &ctx.policy.policy.compile_check_extensions;
        let mut out = Vec::new();
        for f in &change.files {
            let Some(ext) = f.extension() else { continue };
            let Some(cmd) = table.get(ext) else { continue };
            if !ctx.syntax.check(ext, cmd, f)? {
                out.push(f.path.clone());
            }
        }
        Ok(out)
    }
}

pub struct SecretsCheck;

impl PolicyCheck for SecretsCheck {
    fn name(&self) -> &'static str {
        "secrets"
    }

    fn evaluate(&self, change: &ChangeSet, ctx: &CheckContext<'_>) -> Result<Vec<String>, HookError> {
        let mut out = Vec::new();
        for f in &change.files {
            for (lineno, line) in f.content.lines().enumerate() {
                if ctx.policy.secrets.iter().any(|re| re.is_match(line)) {
                    out.push(format!("{}:{}", f.path, lineno + 1));
                }
            }
        }
        Ok(out)
    }
}
