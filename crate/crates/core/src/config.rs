//! Pipeline configuration: one TOML file with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::phase::VsharpConfig;
use crate::separation::SolverConfig;
use crate::simulator::DEFAULT_TE_S;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub te_s: Vec<f64>,
    pub b0_tesla: f64,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            te_s: DEFAULT_TE_S.to_vec(),
            b0_tesla: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseSection {
    /// +1 or −1; multiplies every loaded phase image.
    pub phase_sign: f64,
}

impl Default for PhaseSection {
    fn default() -> Self {
        Self { phase_sign: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelaxometrySection {
    /// s⁻¹, subtracted from R2* to form R2′.
    pub r2_baseline: f64,
}

impl Default for RelaxometrySection {
    fn default() -> Self {
        Self { r2_baseline: 10.0 }
    }
}

/// Where the target deciles of the T1 normalization come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecileSource {
    /// Mean of each decile over the images being normalized.
    #[default]
    Cohort,
    /// Eleven explicit ascending values.
    Fixed(Vec<f64>),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSection {
    pub decile_targets: DecileSource,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub simulate: SimulateSection,
    pub phase: PhaseSection,
    pub vsharp: VsharpConfig,
    pub relaxometry: RelaxometrySection,
    pub chisep: SolverConfig,
    pub atlas: AtlasSection,
    pub paths: PathsSection,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.phase.phase_sign != 1.0 && self.phase.phase_sign != -1.0 {
            return Err(Error::InvalidParameter(format!(
                "phase_sign must be +1 or -1, got {}",
                self.phase.phase_sign
            )));
        }
        if !(self.simulate.b0_tesla > 0.0) {
            return Err(Error::InvalidParameter("b0_tesla must be positive".into()));
        }
        if self.simulate.te_s.len() < 2 || self.simulate.te_s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter(
                "te_s needs at least two strictly increasing echo times".into(),
            ));
        }
        if !(self.relaxometry.r2_baseline >= 0.0) {
            return Err(Error::InvalidParameter("r2_baseline must be non-negative".into()));
        }
        if let DecileSource::Fixed(t) = &self.atlas.decile_targets {
            if t.len() != crate::atlas::N_DECILES || t.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidParameter(
                    "fixed decile targets need 11 strictly ascending values".into(),
                ));
            }
        }
        self.vsharp.validate_params()?;
        self.chisep.validate()
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&json)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
