#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use rundir_cli::{dispatch, Session};
use rundir_core::config::ImageTag;
use rundir_core::runtime::{BackendOptions, FakeBackend, FakeScript, BACKEND_ENV, FAKE_STATE_ENV};

pub fn write(path: impl AsRef<Path>, text: &str) {
    let path = path.as_ref();
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, text).unwrap();
}

/// A runnable directory with a one-entry changelog and a recipe.
pub fn node(dir: &Path, id: &str, image: &str, version: &str) {
    write(
        dir.join("runnable_dir.yaml"),
        &format!("dir_id: {id}\nimage_name: {image}\n"),
    );
    write(
        dir.join("devops/changelog.yaml"),
        &format!("- {{version: {version}, date: 2024-03-01, note: release}}\n"),
    );
    write(dir.join("devops/Dockerfile"), "FROM alpine:3.19\n");
}

/// Root `a`, nested `b`, and `c` laid out like a git submodule.
pub fn nested_repo(root: &Path) {
    node(root, "a", "app-a", "1.2.0");
    node(&root.join("b"), "b", "app-b", "0.3.1");
    node(&root.join("c"), "c", "app-c", "2.0.0");
    write(root.join("c/.git"), "gitdir: ../.git/modules/c\n");
    write(root.join("b/src/app.py"), "print('b')\n");
}

/// Dev tags of the nested fixture, spelled out by hand.
pub fn nested_dev_tags() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("a", "app-a:dev-1.2.0"),
        ("b", "app-b:dev-0.3.1"),
        ("c", "app-c:dev-2.0.0"),
    ])
}

pub fn dev_images() -> BTreeMap<ImageTag, String> {
    nested_dev_tags()
        .values()
        .map(|t| (ImageTag::from(*t), format!("sha256:{}", t.len())))
        .collect()
}

/// A `fmt` tool under helpers.
pub fn fmt_tool(root: &Path) {
    let dir = root.join("helpers/dockerized/fmt");
    write(dir.join("Dockerfile"), "FROM alpine:3.19\nRUN apk add shfmt\n");
    write(dir.join("tool.yaml"), "default_command: [shfmt, -l, .]\n");
}

pub struct Output {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the CLI in-process with a fake backend persisted at `state`.
pub fn run_in(cwd: &Path, state: &Path, args: &[&str]) -> Output {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = {
        let mut session = Session::new(cwd.to_path_buf(), &mut out, &mut err);
        session.backend_options = BackendOptions {
            cli: None,
            fake_state: Some(state.to_path_buf()),
        };
        let argv = ["rundir", "--backend", "fake"].iter().chain(args);
        dispatch(argv, &mut session)
    };
    Output {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_rundir"))
}

/// Runs the real binary with the fake backend persisted at `state`.
pub fn run_bin(cwd: &Path, state: &Path, args: &[&str]) -> Output {
    let out = Command::new(binary())
        .current_dir(cwd)
        .env(BACKEND_ENV, "fake")
        .env(FAKE_STATE_ENV, state)
        .args(args)
        .output()
        .unwrap();
    Output {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

pub fn seed(state: &Path, script: &FakeScript, images: &BTreeMap<ImageTag, String>) {
    FakeBackend::seed_state_file(state, script, images).unwrap();
}

pub fn reload(state: &Path) -> FakeBackend {
    FakeBackend::persistent(state).unwrap()
}
