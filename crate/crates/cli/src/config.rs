//! Pipeline configuration file.

use std::path::{Path, PathBuf};

use multifamm::coarsen::StopRule;
use multifamm::fundata::LoadOptions;
use multifamm::simeval::{preset, SimSetting};
use multifamm::{Error, FitOptions, LayerDecl, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seed recorded in every output; drives the simulation replicates.
    pub seed: u64,
    /// Output directory, relative to the config file.
    pub output: PathBuf,
    pub data: DataConfig,
    pub coarsen: Option<CoarsenConfig>,
    pub fit: FitOptions,
    pub report: ReportConfig,
    pub simulate: SimulateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            output: PathBuf::from("multifamm-out"),
            data: DataConfig::default(),
            coarsen: None,
            fit: FitOptions::default(),
            report: ReportConfig::default(),
            simulate: SimulateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format points CSV: `curve_id,dim,t,y`.
    pub points: Option<PathBuf>,
    /// Per-curve CSV: `curve_id`, covariates and layer labels.
    pub meta: Option<PathBuf>,
    /// Grouping layers; when absent, non-numeric meta columns are crossed layers.
    pub layers: Option<Vec<LayerDecl>>,
    /// Rescale all time points to [0, 1].
    pub rescale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarsenConfig {
    pub lead_dims: Vec<String>,
    pub stop: StopRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Points of the grid on which effects and bands are written.
    pub grid_points: usize,
    /// Nominal level of the pointwise bands.
    pub level: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            grid_points: 100,
            level: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    /// Named data setting; ignored when `setting` is given.
    pub preset: String,
    pub setting: Option<SimSetting>,
    /// Overrides the setting's replicate count.
    pub replicates: Option<usize>,
    /// Fit the data-generating model with known component counts instead of `[fit]`.
    pub true_model: bool,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            preset: "setting1-desk".into(),
            setting: None,
            replicates: None,
            true_model: true,
        }
    }
}

impl SimulateConfig {
    /// Resolved setting with the run seed applied.
    pub fn setting(&self, seed: u64) -> Result<SimSetting> {
        let mut s = match &self.setting {
            Some(s) => s.clone(),
            None => preset(&self.preset)?,
        };
        if let Some(r) = self.replicates {
            s.replicates = r;
        }
        s.seed = seed;
        s.check()?;
        Ok(s)
    }
}

/// A parsed configuration together with the directory it was read from.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: PipelineConfig,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        let config: PipelineConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.check()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { config, base })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.resolve(&self.config.output)
    }

    pub fn data_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let d = &self.config.data;
        match (&d.points, &d.meta) {
            (Some(p), Some(m)) => Ok((self.resolve(p), self.resolve(m))),
            _ => Err(Error::Config("[data] needs both 'points' and 'meta'".into())),
        }
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            layers: self.config.data.layers.clone(),
            rescale: self.config.data.rescale,
        }
    }

    /// Header line embedded in every output file.
    pub fn preamble(&self) -> String {
        preamble(&self.config.hash(), self.config.seed)
    }
}

pub fn preamble(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash},seed={seed}\n")
}

impl PipelineConfig {
    pub fn check(&self) -> Result<()> {
        if self.report.grid_points < 2 {
            return Err(Error::Config("report.grid_points must be at least 2".into()));
        }
        if !(self.report.level > 0.0 && self.report.level < 1.0) {
            return Err(Error::Config("report.level must lie in (0, 1)".into()));
        }
        if let Some(c) = &self.coarsen {
            if c.lead_dims.len() != 2 {
                return Err(Error::Config("coarsen.lead_dims needs exactly two dimensions".into()));
            }
        }
        Ok(())
    }

    /// Short SHA-256 digest of the canonical serialization.
    pub fn hash(&self) -> String {
        let canonical = toml::to_string(self).expect("config serializes");
        hash_text(&canonical)
    }

    pub fn defaults_toml() -> String {
        toml::to_string_pretty(&PipelineConfig::default()).expect("defaults serialize")
    }
}

pub fn hash_text(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let text = PipelineConfig::defaults_toml();
        let back: PipelineConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, PipelineConfig::default());
        assert_eq!(back.hash(), PipelineConfig::default().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<PipelineConfig>("sed = 3").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let mut c = PipelineConfig::default();
        let h = c.hash();
        c.seed = 2;
        assert_ne!(h, c.hash());
        assert_eq!(h.len(), 16);
    }

    #[test]
    fn coarsen_section_parses() {
        let c: PipelineConfig =
            toml::from_str("[coarsen]\nlead_dims = [\"a\", \"b\"]\nstop = { relative = 0.003 }\n").unwrap();
        assert_eq!(c.coarsen.unwrap().stop, StopRule::Relative(0.003));
    }
}
