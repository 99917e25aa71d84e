//! Per-directory configuration, changelogs and versioned image identity.
//!
//! Every runnable directory carries a `runnable_dir.yaml` at its root and a
//! `changelog.yaml` inside its build context. The changelog is the only
//! source of version numbers; image tags are rendered from the config, the
//! changelog head and the release stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use chrono::NaiveDate;
use regex::Regex;
use semver::Version;
use serde::{Deserialize, Serialize};

/// Marker file that turns a directory into a runnable directory.
pub const CONFIG_FILE: &str = "runnable_dir.yaml";
/// Changelog file name, looked up inside the build context.
pub const CHANGELOG_FILE: &str = "changelog.yaml";
/// Build recipe file name, looked up inside the build context.
pub const RECIPE_FILE: &str = "Dockerfile";

pub const DEFAULT_TEST_COMMAND: &str = "pytest";
pub const DEFAULT_BUILD_CONTEXT: &str = "devops";

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("malformed yaml: {0}")]
    MalformedYaml(String),
    #[error("missing required field `{0}`")]
    MissingField(&'static str),
    #[error("invalid value for `{field}`: {reason}")]
    InvalidValue { field: &'static str, reason: String },
    #[error("changelog has no entries")]
    EmptyChangelog,
    #[error("changelog versions must strictly decrease: {newer} is listed before {older}")]
    NonMonotonicVersions { newer: String, older: String },
    #[error("malformed version `{0}`")]
    MalformedVersion(String),
    #[error("malformed date `{0}`, expected YYYY-MM-DD")]
    MalformedDate(String),
    #[error("stage `{stage}` {}", if *.user_given { "does not take a user" } else { "requires a user" })]
    StageUserMismatch { stage: Stage, user_given: bool },
}

/// How a directory's containers relate to the container that launches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContainerMode {
    /// Nested inside the issuing container with its own daemon.
    Child,
    /// Alongside the issuing container, sharing the host control socket.
    #[default]
    Sibling,
}

impl fmt::Display for ContainerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContainerMode::Child => "child",
            ContainerMode::Sibling => "sibling",
        })
    }
}

impl FromStr for ContainerMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "child" => Ok(ContainerMode::Child),
            "sibling" => Ok(ContainerMode::Sibling),
            other => Err(format!("unknown container mode `{other}` (expected child|sibling)")),
        }
    }
}

/// Image release stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Local,
    Dev,
    Prod,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Local => "local",
            Stage::Dev => "dev",
            Stage::Prod => "prod",
        })
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Stage::Local),
            "dev" => Ok(Stage::Dev),
            "prod" => Ok(Stage::Prod),
            other => Err(format!("unknown stage `{other}` (expected local|dev|prod)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageConfig {
    pub bucket: String,
    pub prefix: String,
}

/// Parsed `runnable_dir.yaml`.
///
/// Unknown keys are kept in `extra` and written back on render.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnableDirConfig {
    pub dir_id: String,
    pub image_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
    pub test_command: String,
    pub container_mode: ContainerMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageConfig>,
    pub build_context: PathBuf,
    /// Requested image architectures. Recorded as build metadata only.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub architectures: Vec<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_yaml::Value>,
}

#[derive(Deserialize)]
struct RawConfig {
    dir_id: Option<String>,
    image_name: Option<String>,
    registry: Option<String>,
    test_command: Option<String>,
    container_mode: Option<ContainerMode>,
    storage: Option<StorageConfig>,
    build_context: Option<PathBuf>,
    #[serde(default)]
    architectures: Vec<String>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_yaml::Value>,
}

fn identifier_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[a-z0-9_\-]+$").unwrap())
}

/// True when `s` is a valid directory or tool identifier.
pub fn is_identifier(s: &str) -> bool {
    identifier_re().is_match(s)
}

/// True when `path` is relative and has no `..` or root components.
pub fn is_contained_relative(path: &Path) -> bool {
    !path.as_os_str().is_empty()
        && path
            .components()
            .all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

impl RunnableDirConfig {
    /// Builds a config with defaults for every optional field.
    pub fn new(dir_id: impl Into<String>, image_name: impl Into<String>) -> Self {
        RunnableDirConfig {
            dir_id: dir_id.into(),
            image_name: image_name.into(),
            registry: None,
            test_command: DEFAULT_TEST_COMMAND.to_string(),
            container_mode: ContainerMode::default(),
            storage: None,
            build_context: PathBuf::from(DEFAULT_BUILD_CONTEXT),
            architectures: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !is_identifier(&self.dir_id) {
            return Err(ConfigError::InvalidValue {
                field: "dir_id",
                reason: format!("`{}` must match [a-z0-9_-]+", self.dir_id),
            });
        }
        if self.image_name.trim().is_empty() {
            return Err(ConfigError::InvalidValue {
                field: "image_name",
                reason: "must not be empty".into(),
            });
        }
        if self.test_command.trim().is_empty() {
            return Err(ConfigError::InvalidValue {
                field: "test_command",
                reason: "must not be empty".into(),
            });
        }
        if !is_contained_relative(&self.build_context) {
            return Err(ConfigError::InvalidValue {
                field: "build_context",
                reason: format!(
                    "`{}` must be a relative path without `..`",
                    self.build_context.display()
                ),
            });
        }
        Ok(())
    }

    /// Renders the config back to YAML.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config is always representable as yaml")
    }

    pub fn changelog_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.build_context).join(CHANGELOG_FILE)
    }

    pub fn recipe_path(&self, dir: &Path) -> PathBuf {
        dir.join(&self.build_context).join(RECIPE_FILE)
    }
}

/// Parses and validates a `runnable_dir.yaml` document.
pub fn parse_runnable_config(text: &str) -> Result<RunnableDirConfig, ConfigError> {
    let value: serde_yaml::Value = serde_yaml::from_str(text).map_err(|e| ConfigError::MalformedYaml(e.to_string()))?;
    if !value.is_mapping() {
        return Err(ConfigError::MalformedYaml(
            "top-level document must be a mapping".into(),
        ));
    }
    let raw: RawConfig = serde_yaml::from_value(value).map_err(|e| ConfigError::MalformedYaml(e.to_string()))?;
    let cfg = RunnableDirConfig {
        dir_id: raw.dir_id.ok_or(ConfigError::MissingField("dir_id"))?,
        image_name: raw.image_name.ok_or(ConfigError::MissingField("image_name"))?,
        registry: raw.registry,
        test_command: raw.test_command.unwrap_or_else(|| DEFAULT_TEST_COMMAND.to_string()),
        container_mode: raw.container_mode.unwrap_or_default(),
        storage: raw.storage,
        build_context: raw
            .build_context
            .unwrap_or_else(|| PathBuf::from(DEFAULT_BUILD_CONTEXT)),
        architectures: raw.architectures,
        extra: raw.extra,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `<dir>/<build_context>/changelog.yaml`; a missing file counts as empty.
pub fn load_changelog(dir: &Path, config: &RunnableDirConfig) -> Result<Changelog, ConfigError> {
    match std::fs::read_to_string(config.changelog_path(dir)) {
        Ok(text) => parse_changelog(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(ConfigError::EmptyChangelog),
        Err(e) => Err(ConfigError::MalformedYaml(e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangelogEntry {
    pub version: Version,
    pub date: NaiveDate,
    pub note: String,
}

/// Version history of one image, newest entry first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Changelog {
    entries: Vec<ChangelogEntry>,
}

impl Changelog {
    pub fn new(entries: Vec<ChangelogEntry>) -> Result<Self, ConfigError> {
        if entries.is_empty() {
            return Err(ConfigError::EmptyChangelog);
        }
        for pair in entries.windows(2) {
            if pair[0].version <= pair[1].version {
                return Err(ConfigError::NonMonotonicVersions {
                    newer: pair[0].version.to_string(),
                    older: pair[1].version.to_string(),
                });
            }
        }
        Ok(Changelog { entries })
    }

    pub fn entries(&self) -> &[ChangelogEntry] {
        &self.entries
    }

    pub fn latest(&self) -> &Version {
        &self.entries[0].version
    }
}

#[derive(Deserialize)]
struct RawEntry {
    version: serde_yaml::Value,
    date: serde_yaml::Value,
    #[serde(default)]
    note: String,
}

fn scalar_text(v: &serde_yaml::Value) -> String {
    match v {
        serde_yaml::Value::String(s) => s.clone(),
        other => serde_yaml::to_string(other).unwrap_or_default().trim().to_string(),
    }
}

pub fn parse_changelog(text: &str) -> Result<Changelog, ConfigError> {
    if text.trim().is_empty() {
        return Err(ConfigError::EmptyChangelog);
    }
    let raw: Option<Vec<RawEntry>> =
        serde_yaml::from_str(text).map_err(|e| ConfigError::MalformedYaml(e.to_string()))?;
    let raw = raw.unwrap_or_default();
    let mut entries = Vec::with_capacity(raw.len());
    for r in raw {
        let version_text = scalar_text(&r.version);
        let version = Version::parse(&version_text).map_err(|_| ConfigError::MalformedVersion(version_text.clone()))?;
        let date_text = scalar_text(&r.date);
        let date = NaiveDate::parse_from_str(&date_text, "%Y-%m-%d")
            .map_err(|_| ConfigError::MalformedDate(date_text.clone()))?;
        entries.push(ChangelogEntry {
            version,
            date,
            note: r.note,
        });
    }
    Changelog::new(entries)
}

/// A rendered image tag, e.g. `registry/app:dev-1.2.0`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageTag(String);

impl ImageTag {
    pub fn new(tag: impl Into<String>) -> Self {
        ImageTag(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageTag {
    fn from(s: &str) -> Self {
        ImageTag(s.to_string())
    }
}

/// A versioned, staged image identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub name: String,
    pub stage: Stage,
    pub version: Version,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub registry: Option<String>,
}

impl ImageRef {
    /// `[<registry>/]<name>:<stage>-<version>` for dev/prod,
    /// `<name>:local-<user>-<version>` for local images.
    pub fn tag(&self) -> ImageTag {
        let rendered = match (self.stage, &self.user) {
            (Stage::Local, Some(user)) => format!("{}:local-{}-{}", self.name, user, self.version),
            (stage, _) => match &self.registry {
                Some(registry) => format!("{}/{}:{}-{}", registry, self.name, stage, self.version),
                None => format!("{}:{}-{}", self.name, stage, self.version),
            },
        };
        ImageTag(rendered)
    }
}

pub fn resolve_image_tag(
    config: &RunnableDirConfig,
    changelog: &Changelog,
    stage: Stage,
    user: Option<&str>,
) -> Result<ImageRef, ConfigError> {
    match (stage, user) {
        (Stage::Local, None) => {
            return Err(ConfigError::StageUserMismatch {
                stage,
                user_given: false,
            })
        }
        (Stage::Dev | Stage::Prod, Some(_)) => {
            return Err(ConfigError::StageUserMismatch {
                stage,
                user_given: true,
            })
        }
        _ => {}
    }
    if let Some(u) = user {
        if !is_identifier(u) {
            return Err(ConfigError::InvalidValue {
                field: "user",
                reason: format!("`{u}` must match [a-z0-9_-]+ to be embedded in a tag"),
            });
        }
    }
    Ok(ImageRef {
        name: config.image_name.clone(),
        stage,
        version: changelog.latest().clone(),
        user: user.map(str::to_string),
        registry: if stage == Stage::Local {
            None
        } else {
            config.registry.clone()
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn changelog(versions: &[&str]) -> Changelog {
        let yaml: String = versions
            .iter()
            .map(|v| format!("- version: {v}\n  date: 2024-01-01\n  note: n\n"))
            .collect();
        parse_changelog(&yaml).unwrap()
    }

    #[test]
    fn minimal_document_gets_defaults() {
        let cfg = parse_runnable_config("{dir_id: helpers, image_name: helpers}").unwrap();
        assert_eq!(cfg.container_mode, ContainerMode::Sibling);
        assert_eq!(cfg.test_command, DEFAULT_TEST_COMMAND);
        assert_eq!(cfg.build_context, PathBuf::from("devops"));
        assert!(cfg.storage.is_none());
    }

    #[test]
    fn missing_dir_id() {
        assert_eq!(
            parse_runnable_config("{image_name: x}"),
            Err(ConfigError::MissingField("dir_id"))
        );
        assert_eq!(
            parse_runnable_config("{dir_id: x}"),
            Err(ConfigError::MissingField("image_name"))
        );
    }

    #[test]
    fn storage_fields_echoed() {
        let cfg = parse_runnable_config(r#"{dir_id: "a", image_name: app, storage: {bucket: b, prefix: p}}"#).unwrap();
        assert_eq!(
            cfg.storage,
            Some(StorageConfig {
                bucket: "b".into(),
                prefix: "p".into()
            })
        );
    }

    #[test]
    fn uppercase_identifier_rejected() {
        let err = parse_runnable_config(r#"{dir_id: "A", image_name: app}"#).unwrap_err();
        assert!(matches!(err, ConfigError::InvalidValue { field: "dir_id", .. }));
    }

    #[test]
    fn build_context_must_stay_inside() {
        for bad in ["/abs/devops", "../devops", "a/../../b"] {
            let doc = format!("{{dir_id: a, image_name: app, build_context: {bad:?}}}");
            let err = parse_runnable_config(&doc).unwrap_err();
            assert!(
                matches!(
                    err,
                    ConfigError::InvalidValue {
                        field: "build_context",
                        ..
                    }
                ),
                "{bad}: {err:?}"
            );
        }
    }

    #[test]
    fn non_mapping_is_malformed() {
        assert!(matches!(
            parse_runnable_config("- a\n- b\n"),
            Err(ConfigError::MalformedYaml(_))
        ));
        assert!(matches!(
            parse_runnable_config("dir_id: [unclosed"),
            Err(ConfigError::MalformedYaml(_))
        ));
    }

    #[test]
    fn unknown_fields_preserved() {
        let cfg = parse_runnable_config("{dir_id: a, image_name: app, owner: team-x, ports: [80]}").unwrap();
        assert_eq!(cfg.extra.len(), 2);
        let again = parse_runnable_config(&cfg.to_yaml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn changelog_latest_is_head() {
        let cl = changelog(&["1.1.0", "1.0.0"]);
        assert_eq!(cl.latest(), &Version::new(1, 1, 0));
    }

    #[test]
    fn changelog_errors() {
        let increasing =
            "- {version: 1.0.0, date: 2024-01-01, note: a}\n- {version: 1.1.0, date: 2024-01-02, note: b}\n";
        assert!(matches!(
            parse_changelog(increasing),
            Err(ConfigError::NonMonotonicVersions { .. })
        ));
        let dup = "- {version: 1.0.0, date: 2024-01-01, note: a}\n- {version: 1.0.0, date: 2024-01-02, note: b}\n";
        assert!(matches!(
            parse_changelog(dup),
            Err(ConfigError::NonMonotonicVersions { .. })
        ));
        assert_eq!(parse_changelog(""), Err(ConfigError::EmptyChangelog));
        assert_eq!(parse_changelog("[]"), Err(ConfigError::EmptyChangelog));
        assert_eq!(
            parse_changelog("- {version: 1.0, date: 2024-01-01, note: a}"),
            Err(ConfigError::MalformedVersion("1.0".into()))
        );
        assert_eq!(
            parse_changelog("- {version: 1.0.0, date: yesterday, note: a}"),
            Err(ConfigError::MalformedDate("yesterday".into()))
        );
    }

    #[test]
    fn tag_rendering() {
        let mut cfg = RunnableDirConfig::new("app", "app");
        cfg.registry = Some("r".into());
        let cl = changelog(&["1.2.0"]);
        let dev = resolve_image_tag(&cfg, &cl, Stage::Dev, None).unwrap();
        assert_eq!(dev.tag().as_str(), "r/app:dev-1.2.0");
        let local = resolve_image_tag(&cfg, &cl, Stage::Local, Some("ann")).unwrap();
        assert_eq!(local.tag().as_str(), "app:local-ann-1.2.0");
        cfg.registry = None;
        let prod = resolve_image_tag(&cfg, &cl, Stage::Prod, None).unwrap();
        assert_eq!(prod.tag().as_str(), "app:prod-1.2.0");
    }

    #[test]
    fn stage_user_mismatch() {
        let cfg = RunnableDirConfig::new("app", "app");
        let cl = changelog(&["1.2.0"]);
        assert!(matches!(
            resolve_image_tag(&cfg, &cl, Stage::Local, None),
            Err(ConfigError::StageUserMismatch { user_given: false, .. })
        ));
        assert!(matches!(
            resolve_image_tag(&cfg, &cl, Stage::Dev, Some("ann")),
            Err(ConfigError::StageUserMismatch { user_given: true, .. })
        ));
    }

    fn arb_config() -> impl Strategy<Value = RunnableDirConfig> {
        (
            "[a-z0-9_-]{1,12}",
            "[a-z][a-z0-9./-]{0,12}",
            proptest::option::of("[a-z]{1,8}\\.io"),
            "[a-z ]{1,20}",
            any::<bool>(),
            proptest::option::of(("[a-z]{1,8}", "[a-z/]{0,8}")),
            "[a-z]{1,6}(/[a-z]{1,6}){0,2}",
        )
            .prop_map(|(id, image, registry, cmd, child, storage, ctx)| {
                let mut cfg = RunnableDirConfig::new(id, image);
                cfg.registry = registry;
                cfg.test_command = format!("x{cmd}");
                cfg.container_mode = if child {
                    ContainerMode::Child
                } else {
                    ContainerMode::Sibling
                };
                cfg.storage = storage.map(|(bucket, prefix)| StorageConfig { bucket, prefix });
                cfg.build_context = PathBuf::from(ctx);
                cfg
            })
    }

    proptest! {
        #[test]
        fn render_then_parse_round_trips(cfg in arb_config()) {
            let again = parse_runnable_config(&cfg.to_yaml()).unwrap();
            prop_assert_eq!(again, cfg);
        }

        #[test]
        fn changelog_head_is_max(mut versions in proptest::collection::btree_set((0u64..5, 0u64..5, 0u64..5), 1..8)) {
            let sorted: Vec<_> = std::mem::take(&mut versions).into_iter().rev().collect();
            let yaml: String = sorted
                .iter()
                .map(|(a, b, c)| format!("- {{version: {a}.{b}.{c}, date: 2024-02-29, note: x}}\n"))
                .collect();
            let cl = parse_changelog(&yaml).unwrap();
            let max = cl.entries().iter().map(|e| e.version.clone()).max().unwrap();
            prop_assert_eq!(cl.latest(), &max);
        }

        #[test]
        fn tag_resolution_is_pure(cfg in arb_config(), minor in 0u64..20, user in "[a-z]{1,6}") {
            let cl = parse_changelog(&format!("- {{version: 1.{minor}.0, date: 2024-01-01, note: x}}")).unwrap();
            for (stage, u) in [(Stage::Local, Some(user.as_str())), (Stage::Dev, None), (Stage::Prod, None)] {
                let a = resolve_image_tag(&cfg, &cl, stage, u).unwrap().tag();
                let b = resolve_image_tag(&cfg, &cl, stage, u).unwrap().tag();
                prop_assert_eq!(a, b);
            }
        }
    }
}
