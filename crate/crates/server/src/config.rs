use std::path::{Path, PathBuf};

use assist_core::advisor::VoteThresholds;
use assist_core::sessionlog::Mode;
use serde::{Deserialize, Serialize};

use crate::ServerError;

/// Service configuration, read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    /// 0 picks a free port.
    #[serde(default)]
    pub port: u16,
    #[serde(default = "default_max_clients")]
    pub max_clients: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_log_dir")]
    pub log_dir: PathBuf,
    pub advisor_bundle: Option<PathBuf>,
    pub tagger_bundle: Option<PathBuf>,
    /// Tag schema used for vectors when no advisor bundle is loaded.
    pub schema: Option<PathBuf>,
    /// Domain definition; the bundled student-loan domain when absent.
    pub domain: Option<PathBuf>,
    /// Directory of `*.storyboard` files that bot clients can be created from.
    pub storyboards: Option<PathBuf>,
    /// Overrides the voting thresholds stored in the advisor bundle.
    pub thresholds: Option<VoteThresholds>,
}

fn default_bind() -> String {
    "127.0.0.1".into()
}

fn default_max_clients() -> usize {
    assist_core::orchestrator::DEFAULT_MAX_CLIENTS
}

fn default_log_dir() -> PathBuf {
    PathBuf::from("logs")
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            port: 0,
            max_clients: default_max_clients(),
            mode: Mode::Collect,
            seed: 0,
            log_dir: default_log_dir(),
            advisor_bundle: None,
            tagger_bundle: None,
            schema: None,
            domain: None,
            storyboards: None,
            thresholds: None,
        }
    }
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServerError> {
        let config: Self = toml::from_str(text).map_err(|e| ServerError::BadConfig(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file. Relative paths inside it resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ServerError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServerError::BadConfig(format!("{}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.log_dir);
        for p in [
            &mut self.advisor_bundle,
            &mut self.tagger_bundle,
            &mut self.schema,
            &mut self.domain,
            &mut self.storyboards,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ServerError> {
        if self.max_clients == 0 {
            return Err(ServerError::BadConfig("max_clients must be at least 1".into()));
        }
        if let Some(t) = &self.thresholds {
            let ok = |x: f64| (0.0..1.0).contains(&x);
            if !ok(t.first) || !ok(t.secondary) {
                return Err(ServerError::BadConfig("thresholds must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = ServerConfig::from_toml("port = 9000").unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.max_clients, 3);
        assert_eq!(c.mode, Mode::Collect);
    }

    #[test]
    fn full_config_parses() {
        let c = ServerConfig::from_toml(
            r#"
            port = 0
            max_clients = 2
            mode = "advise_and_collect"
            seed = 7
            advisor_bundle = "advisor.json"
            tagger_bundle = "tagger.json"
            thresholds = { first = 0.5, secondary = 0.3 }
            "#,
        )
        .unwrap();
        assert_eq!(c.mode, Mode::AdviseAndCollect);
        assert_eq!(c.thresholds.unwrap().first, 0.5);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(matches!(ServerConfig::from_toml("prot = 1"), Err(ServerError::BadConfig(_))));
        assert!(matches!(ServerConfig::from_toml("max_clients = 0"), Err(ServerError::BadConfig(_))));
        assert!(matches!(ServerConfig::from_toml("mode = \"phase4\""), Err(ServerError::BadConfig(_))));
        assert!(matches!(
            ServerConfig::from_toml("thresholds = { first = 1.5, secondary = 0.2 }"),
            Err(ServerError::BadConfig(_))
        ));
    }
}
