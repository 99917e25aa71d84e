use std::io::ErrorKind;
use std::process::{Command, Output};
use std::time::Instant;

use super::{BuildRequest, ContainerBackend, ContainerSpec, RunResult, RuntimeError};
use crate::config::{ContainerMode, ImageTag};

pub const CONTAINER_CLI_ENV: &str = "RUNDIR_CONTAINER_CLI";
pub const DEFAULT_CONTAINER_CLI: &str = "docker";
/// Host control socket shared with sibling containers.
pub const HOST_SOCKET: &str = "/var/run/docker.sock";
const MANAGED_LABEL: &str = "rundir.managed=true";

/// Backend that shells out to a docker-compatible CLI.
#[derive(Debug, Clone)]
pub struct ExecBackend {
    cli: String,
}

impl ExecBackend {
    pub fn new(cli: impl Into<String>) -> Self {
        ExecBackend { cli: cli.into() }
    }

    /// Uses `$RUNDIR_CONTAINER_CLI`, falling back to `docker`.
    pub fn from_env() -> Self {
        Self::new(std::env::var(CONTAINER_CLI_ENV).unwrap_or_else(|_| DEFAULT_CONTAINER_CLI.into()))
    }

    pub fn cli(&self) -> &str {
        &self.cli
    }

    fn invoke(&self, args: &[String]) -> Result<Output, RuntimeError> {
        log::debug!("{} {}", self.cli, args.join(" "));
        Command::new(&self.cli).args(args).output().map_err(|e| {
            if e.kind() == ErrorKind::NotFound {
                RuntimeError::RuntimeUnavailable(format!("`{}` not found", self.cli))
            } else {
                RuntimeError::RuntimeUnavailable(format!("`{}`: {e}", self.cli))
            }
        })
    }

    pub fn build_args(request: &BuildRequest) -> Vec<String> {
        let mut args = vec![
            "build".to_string(),
            "-f".to_string(),
            request.recipe.to_string_lossy().into_owned(),
            "-t".to_string(),
            request.tag.to_string(),
        ];
        if !request.architectures.is_empty() {
            args.push("--label".into());
            args.push(format!("rundir.architectures={}", request.architectures.join(",")));
        }
        args.push(request.context.to_string_lossy().into_owned());
        args
    }

    pub fn run_args(spec: &ContainerSpec) -> Vec<String> {
        let mut args = vec!["run".to_string(), "--label".to_string(), MANAGED_LABEL.to_string()];
        if spec.remove_after_exit {
            args.push("--rm".into());
        }
        match spec.mode {
            ContainerMode::Sibling => {
                args.push("-v".into());
                args.push(format!("{HOST_SOCKET}:{HOST_SOCKET}"));
            }
            ContainerMode::Child => {
                // nested daemon needs a privileged container
                args.push("--privileged".into());
                args.push("--label".into());
                args.push("rundir.mode=child".into());
            }
        }
        for m in &spec.mounts {
            let mut v = format!("{}:{}", m.host_path.display(), m.container_path);
            if m.read_only {
                v.push_str(":ro");
            }
            args.push("-v".into());
            args.push(v);
        }
        for (k, v) in &spec.env {
            args.push("-e".into());
            args.push(format!("{k}={v}"));
        }
        args.push("-w".into());
        args.push(spec.workdir.clone());
        args.push(spec.image.to_string());
        args.extend(spec.command.iter().cloned());
        args
    }
}

fn exit_code(status: std::process::ExitStatus) -> u8 {
    if let Some(code) = status.code() {
        return code.clamp(0, 255) as u8;
    }
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return (128 + sig).clamp(0, 255) as u8;
        }
    }
    255
}

fn combined(out: &Output) -> String {
    let mut s = String::from_utf8_lossy(&out.stdout).into_owned();
    s.push_str(&String::from_utf8_lossy(&out.stderr));
    s
}

impl ContainerBackend for ExecBackend {
    fn name(&self) -> &'static str {
        "exec"
    }

    fn build_image(&self, request: &BuildRequest) -> Result<String, RuntimeError> {
        request.check_context()?;
        let out = self.invoke(&Self::build_args(request))?;
        if !out.status.success() {
            return Err(RuntimeError::BuildFailed {
                tag: request.tag.clone(),
                output: combined(&out),
            });
        }
        self.image_digest(&request.tag)?
            .ok_or_else(|| RuntimeError::ImageMissing(request.tag.clone()))
    }

    fn run_container(&self, spec: &ContainerSpec) -> Result<RunResult, RuntimeError> {
        spec.validate()?;
        if self.image_digest(&spec.image)?.is_none() {
            return Err(RuntimeError::ImageMissing(spec.image.clone()));
        }
        let start = Instant::now();
        let out = self.invoke(&Self::run_args(spec))?;
        Ok(RunResult {
            exit_code: exit_code(out.status),
            stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
            duration_ms: start.elapsed().as_millis() as u64,
        })
    }

    fn retag(&self, src: &ImageTag, dst: &ImageTag) -> Result<(), RuntimeError> {
        if self.image_digest(src)?.is_none() {
            return Err(RuntimeError::ImageMissing(src.clone()));
        }
        let out = self.invoke(&["tag".into(), src.to_string(), dst.to_string()])?;
        if out.status.success() {
            Ok(())
        } else {
            Err(RuntimeError::RuntimeUnavailable(combined(&out)))
        }
    }

    fn image_digest(&self, tag: &ImageTag) -> Result<Option<String>, RuntimeError> {
        let out = self.invoke(&[
            "image".into(),
            "inspect".into(),
            "--format".into(),
            "{{.Id}}".into(),
            tag.to_string(),
        ])?;
        if !out.status.success() {
            return Ok(None);
        }
        let id = String::from_utf8_lossy(&out.stdout).trim().to_string();
        Ok(if id.is_empty() { None } else { Some(id) })
    }

    fn remove_container(&self, container_id: &str) -> Result<(), RuntimeError> {
        let out = self.invoke(&["rm".into(), "-f".into(), container_id.into()])?;
        if out.status.success() {
            Ok(())
        } else {
            Err(RuntimeError::RuntimeUnavailable(combined(&out)))
        }
    }

    fn live_containers(&self) -> Result<Vec<String>, RuntimeError> {
        let out = self.invoke(&[
            "ps".into(),
            "-aq".into(),
            "--filter".into(),
            format!("label={MANAGED_LABEL}"),
        ])?;
        if !out.status.success() {
            return Err(RuntimeError::RuntimeUnavailable(combined(&out)));
        }
        Ok(String::from_utf8_lossy(&out.stdout)
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }
}
