//! TOML run configuration. Missing keys take defaults; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molecule::DEFAULT_JITTER;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Use the bundled toy set instead of a file.
    pub toy: bool,
    pub toy_size: usize,
    pub jitter: f64,
    /// Multi-frame XYZ training file.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            toy: false,
            toy_size: 16,
            jitter: DEFAULT_JITTER,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    #[default]
    Adaptive,
    Sync,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    #[default]
    Ema,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n: usize,
    pub mode: ModeName,
    pub lambda: f64,
    pub window: usize,
    /// Staircase window for manual schedules.
    pub u: usize,
    pub seed: u64,
    /// Chain size; defaults to the training maximum recorded in the checkpoint.
    pub atoms: Option<usize>,
    pub weights: Weights,
    /// Iteration cap as a multiple of the horizon.
    pub cap_factor: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            n: 64,
            mode: ModeName::Adaptive,
            lambda: 0.8,
            window: 2,
            u: 1,
            seed: 0,
            atoms: None,
            weights: Weights::Ema,
            cap_factor: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let s = &self.sample;
        if s.n < 1 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if !(s.lambda > 0.0 && s.lambda <= 1.0) {
            return Err(Error::Config("lambda must lie in (0, 1]".into()));
        }
        if s.window < 1 || s.u < 1 || s.cap_factor < 1 {
            return Err(Error::Config("window, u and cap_factor must be at least 1".into()));
        }
        if !(0.0..=crate::molecule::MAX_JITTER).contains(&self.data.jitter) {
            return Err(Error::Config("jitter out of range".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.steps = 17;
        cfg.data.path = Some("mols.xyz".into());
        cfg.sample.atoms = Some(9);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::parse("[train]\nsteps = 5\n[sample]\nmode = \"manual\"\n").unwrap();
        assert_eq!(cfg.train.steps, 5);
        assert_eq!(cfg.train.hidden, 64);
        assert_eq!(cfg.sample.mode, ModeName::Manual);
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(RunConfig::parse("[train]\nstep = 5\n"), Err(Error::Config(_))));
        assert!(RunConfig::parse("[train]\nsteps = \"x\"\n").is_err());
        let bad = RunConfig {
            sample: SampleConfig { lambda: 0.0, ..SampleConfig::default() },
            ..RunConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
