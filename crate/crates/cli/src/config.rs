//! Run configuration file (TOML).
//!
//! ```toml
//! [data]                 # generator settings, every key optional
//! n_samples = 2000
//! task = { kind = "classification", classes = 2 }
//!
//! [train]                # training settings on top of a profile
//! profile = "desk"       # or "paper"
//! lambda1 = 0.2
//!
//! [output]
//! dir = "run"            # relative to the config file
//! dataset = "run/dataset.camib"
//! ```
//!
//! Unknown keys anywhere are errors, so a misspelt `lamda1` never silently
//! falls back to its default.

use std::fs;
use std::path::{Path, PathBuf};

use camib_core::synth::BiasSpec;
use camib_core::train::TrainConfig;
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    #[serde(default)]
    data: BiasSpec,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
    dataset: Option<PathBuf>,
}

/// Resolved configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfigFile {
    pub data: BiasSpec,
    pub train: TrainConfig,
    /// Directory that receives every output file.
    pub dir: PathBuf,
    pub dataset: PathBuf,
}

fn invalid(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::usage(format!("{}: {e}", path.display()))
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| invalid(path, e.message))
    }

    /// Parses `text`, resolving relative paths against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let raw: RawFile = toml::from_str(text).map_err(|e| CliError::usage(e.to_string()))?;
        let mut overlay = raw.train;
        let profile = match overlay.remove("profile") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(CliError::usage(format!("train.profile must be a string, got {other}"))),
        };
        let profile = TrainConfig::profile(&profile).map_err(CliError::from)?;
        let mut merged = toml::Table::try_from(&profile).map_err(|e| CliError::runtime(e.to_string()))?;
        merged.extend(overlay);
        let train: TrainConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::usage(format!("[train] {e}")))?;
        raw.data.validate()?;
        train.validate()?;
        let dir = base.join(raw.output.dir.unwrap_or_else(|| "run".into()));
        let dataset = match raw.output.dataset {
            Some(p) => base.join(p),
            None => dir.join("dataset.camib"),
        };
        Ok(Self {
            data: raw.data,
            train,
            dir,
            dataset,
        })
    }

    /// Overrides both the generator and the training seed.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.data.seed = s;
            self.train.seed = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfigFile::parse("", Path::new("/tmp/x")).unwrap();
        assert_eq!(c.data, BiasSpec::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.dir, Path::new("/tmp/x/run"));
        assert_eq!(c.dataset, Path::new("/tmp/x/run/dataset.camib"));
    }

    #[test]
    fn shipped_config_lists_the_defaults() {
        let text = include_str!("../../../configs/desk.toml");
        let c = RunConfigFile::parse(text, Path::new("/w/configs")).unwrap();
        assert_eq!(c.data, BiasSpec::default());
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.dir, Path::new("/w/configs/../run"));
    }

    #[test]
    fn profile_then_overrides() {
        let c = RunConfigFile::parse("[train]\nprofile = \"paper\"\nlambda1 = 0.5\n", Path::new(".")).unwrap();
        assert_eq!(c.train.d, 512);
        assert_eq!(c.train.lambda1, 0.5);
    }

    #[test]
    fn typos_are_rejected() {
        for text in ["[train]\nlamda1 = 0.2\n", "[data]\nrho = 0.5\n", "[outputs]\n", "[train.ablation]\nno_x = true\n"] {
            let e = RunConfigFile::parse(text, Path::new(".")).unwrap_err();
            assert_eq!(e.code, 1, "{text}");
        }
    }

    #[test]
    fn nested_tables() {
        let c = RunConfigFile::parse(
            "[data]\ntask = { kind = \"regression\" }\n[train.ablation]\nno_iv = true\n",
            Path::new("."),
        )
        .unwrap();
        assert!(c.train.ablation.no_iv);
        assert_eq!(c.data.task, camib_core::task::TaskKind::Regression);
    }
}
