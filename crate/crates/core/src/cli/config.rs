//! On-disk run configuration (TOML), validated before any computation.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::estimator::OptimizerOptions;
use crate::experiment::{Diagnostics, SamplerKind, StudyConfig};
use crate::fbm::HurstIndex;
use crate::grid::TimeGrid;
use crate::model::{builtin_model, DriftModel, ParameterBox, SdeConfig};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub noise: NoiseSection,
    pub grid: GridSection,
    pub study: Option<StudySection>,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub simulate: SimulateSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub theta0: Option<Vec<f64>>,
    #[serde(default = "default_x0")]
    pub x0: f64,
    #[serde(rename = "box")]
    pub bounds: BoxSection,
}

fn default_x0() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(rename = "H")]
    pub hurst: f64,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    #[serde(rename = "M")]
    pub replicates: usize,
    pub seed: Option<u64>,
    /// Defaults to `[noise.epsilon]`.
    pub epsilons: Option<Vec<f64>>,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub paths: usize,
    pub seed: Option<u64>,
    pub sampler: SamplerKind,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            paths: 1,
            seed: None,
            sampler: SamplerKind::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<PathBuf>,
    pub formats: Vec<Format>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: None,
            formats: vec![Format::Json, Format::Csv],
        }
    }
}

impl OutputSection {
    pub fn wants(&self, f: Format) -> bool {
        self.formats.contains(&f)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_common()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::parse(&text)
    }

    fn validate_common(&self) -> Result<()> {
        let model = self.drift_model()?;
        let bounds = self.bounds()?;
        if bounds.dim() != model.dim() {
            return Err(Error::Config(format!(
                "model.box has {} axes but model '{}' has {} parameters",
                bounds.dim(),
                self.model.name,
                model.dim()
            )));
        }
        if let Some(theta0) = &self.model.theta0 {
            model
                .check_theta(theta0)
                .map_err(|e| Error::Config(format!("model.theta0: {e}")))?;
            bounds
                .require_interior(theta0)
                .map_err(|e| Error::Config(format!("model.theta0: {e}")))?;
        }
        if !self.model.x0.is_finite() {
            return Err(Error::Config("model.x0 must be finite".into()));
        }
        HurstIndex::new(self.noise.hurst).map_err(|e| Error::Config(format!("noise.H: {e}")))?;
        if let Some(e) = self.noise.epsilon {
            check_epsilon(e, "noise.epsilon")?;
        }
        self.grid()?;
        self.optimizer.validate()?;
        if let Some(s) = &self.study {
            if s.replicates < 2 {
                return Err(Error::Config(format!("study.M must be at least 2, got {}", s.replicates)));
            }
            if let Some(eps) = &s.epsilons {
                if eps.is_empty() {
                    return Err(Error::Config("study.epsilons must not be empty".into()));
                }
                for &e in eps {
                    check_epsilon(e, "study.epsilons")?;
                }
            }
        }
        if self.simulate.paths == 0 {
            return Err(Error::Config("simulate.paths must be at least 1".into()));
        }
        Ok(())
    }

    pub fn drift_model(&self) -> Result<DriftModel> {
        builtin_model(&self.model.name).map_err(|e| Error::Config(format!("model.name: {e}")))
    }

    pub fn bounds(&self) -> Result<ParameterBox> {
        ParameterBox::new(self.model.bounds.lower.clone(), self.model.bounds.upper.clone())
            .map_err(|e| Error::Config(format!("model.box: {e}")))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn theta0(&self) -> Result<Vec<f64>> {
        self.model
            .theta0
            .clone()
            .ok_or_else(|| Error::Config("missing key model.theta0".into()))
    }

    pub fn epsilon(&self) -> Result<f64> {
        self.noise
            .epsilon
            .ok_or_else(|| Error::Config("missing key noise.epsilon".into()))
    }

    /// Hurst index for the likelihood-based commands, where `H = 1/2` is excluded.
    pub fn estimation_hurst(&self) -> Result<HurstIndex> {
        HurstIndex::for_estimation(self.noise.hurst).map_err(|e| Error::Config(format!("noise.H: {e}")))
    }

    pub fn sde_config(&self, hurst: HurstIndex, epsilon: f64) -> Result<SdeConfig> {
        SdeConfig::new(self.model.x0, epsilon, hurst, self.grid()?)
    }

    /// The study configuration, with `seed` overriding `study.seed`.
    pub fn study_config(&self, seed: Option<u64>) -> Result<StudyConfig> {
        let s = self
            .study
            .as_ref()
            .ok_or_else(|| Error::Config("missing section [study]".into()))?;
        self.estimation_hurst()?;
        let epsilons = match &s.epsilons {
            Some(e) => e.clone(),
            None => vec![self.epsilon()?],
        };
        let seed = seed
            .or(s.seed)
            .ok_or_else(|| Error::Config("missing key study.seed (or pass --seed)".into()))?;
        Ok(StudyConfig {
            model: self.drift_model()?.family(),
            theta0: self.theta0()?,
            bounds: self.bounds()?,
            x0: self.model.x0,
            hurst: self.noise.hurst,
            epsilons,
            horizon: self.grid.horizon,
            steps: self.grid.n,
            replicates: s.replicates,
            seed,
            sampler: s.sampler,
            optimizer: self.optimizer.clone(),
            diagnostics: s.diagnostics.clone(),
        })
    }
}

fn check_epsilon(e: f64, key: &str) -> Result<()> {
    if !(e > 0.0 && e <= 1.0) {
        return Err(Error::Config(format!("{key} must lie in (0, 1], got {e}")));
    }
    Ok(())
}
