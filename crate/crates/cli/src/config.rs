//! TOML run configuration. Two optional sections, `[tabular]` and
//! `[bandit]`, mirror the core config structs field for field; anything
//! left out keeps its default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use softimit_core::study::StudyConfig;
use softimit_core::BanditConfig;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tabular: StudyConfig,
    pub bandit: BanditConfig,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        config.bandit.validate().map_err(|e| CliError::Config {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        Ok(config)
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, p)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use softimit_core::study::AgentKind;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("", Path::new("x")).unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_override_single_fields() {
        let text = "[tabular]\nn_seeds = 3\nagents = [\"expert\", \"bc\"]\n\n[bandit]\nlengthscale = 0.15\n\n[bandit.fit]\niterations = 10\n";
        let config = RunConfig::parse(text, Path::new("x")).unwrap();
        assert_eq!(config.tabular.n_seeds, 3);
        assert_eq!(config.tabular.agents, vec![AgentKind::Expert, AgentKind::Bc]);
        assert_eq!(config.bandit.lengthscale, 0.15);
        assert_eq!(config.bandit.fit.iterations, 10);
        assert_eq!(config.bandit.fit.lambda_kl, BanditConfig::default().fit.lambda_kl);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[tabular]\nseeds = 3\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("[plots]\n", Path::new("x")).is_err());
        assert!(RunConfig::parse("[bandit.fit]\nlr = 0.1\n", Path::new("x")).is_err());
    }

    #[test]
    fn invalid_bandit_values_are_rejected() {
        assert!(RunConfig::parse("[bandit]\naction_extent = 1.5\n", Path::new("x")).is_err());
    }
}
