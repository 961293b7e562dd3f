//! Experiment configuration: a sectioned TOML file, dotted-path overrides and
//! a full echo of every resolved value.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use romer_core::noise::{AdcSpec, DeviceNoiseSpec, NoiseConfig, NoiseMode, TemperatureProfile};
use romer_core::romer::CalibrationConfig;
use serde::{Deserialize, Serialize};

use crate::generate::{CorpusSpec, Geometry, ModelSpec};
use crate::oracle::OracleSettings;

/// Default configuration shipped with the harness.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    /// Noise seeds per cell.
    pub trials: usize,
    /// Underactivation threshold as a fraction of the uniform share.
    pub tau: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            trials: 20,
            tau: 0.5,
        }
    }
}

/// Optional files replacing the generated model or corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    /// Device sigma used by `run`; ignored when `temperature` is set.
    pub sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    pub adc_enabled: bool,
    pub v_ref: f64,
    pub bits: u32,
    pub perturb_router: bool,
    pub perturb_experts: bool,
    pub mode: NoiseMode,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            sigma: 0.1,
            temperature: None,
            adc_enabled: true,
            v_ref: 1.0,
            bits: 8,
            perturb_router: true,
            perturb_experts: true,
            mode: NoiseMode::FrozenPerDeployment,
        }
    }
}

impl NoiseSection {
    pub fn at_sigma(&self, sigma: f64) -> NoiseConfig {
        NoiseConfig {
            device: DeviceNoiseSpec { sigma_dev: sigma },
            adc: AdcSpec {
                v_ref: self.v_ref,
                bits: self.bits,
                enabled: self.adc_enabled,
            },
            perturb_router: self.perturb_router,
            perturb_experts: self.perturb_experts,
            noise_mode: self.mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    /// `[temperature_c, sigma_dev]` pairs.
    pub points: Vec<(f64, f64)>,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            points: TemperatureProfile::default().points().to_vec(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Temperatures to visit; empty means every profile point.
    pub temperatures: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub n_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            n_values: vec![0, 2, 4, 8],
            lambda_values: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0],
            temperatures: vec![25.0, 80.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub n: usize,
    pub budget: u64,
    /// Evaluate this many random plans instead of enumerating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<usize>,
    pub trials: usize,
    pub experts: usize,
    pub layers: usize,
    pub clusters: usize,
    pub tokens: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        let settings = OracleSettings::default();
        Self {
            n: settings.n,
            budget: settings.budget,
            sample: settings.sample,
            trials: 10,
            experts: 6,
            layers: 1,
            clusters: 2,
            tokens: 256,
        }
    }
}

impl OracleSection {
    pub fn settings(&self) -> OracleSettings {
        OracleSettings {
            n: self.n,
            budget: self.budget,
            sample: self.sample,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub inputs: InputsSection,
    pub geometry: Geometry,
    pub model: ModelSpec,
    pub corpus: CorpusSpec,
    pub noise: NoiseSection,
    pub profile: ProfileSection,
    pub sweep: SweepSection,
    pub calibration: CalibrationConfig,
    pub ablation: AblationSection,
    pub oracle: OracleSection,
}

impl ExperimentConfig {
    pub fn shipped_default() -> Self {
        Self::from_toml(DEFAULT_CONFIG, &[]).expect("shipped config parses")
    }

    /// Loads `path` (or the shipped default when `None`) and applies
    /// `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (text, origin) = match path {
            Some(p) => (
                std::fs::read_to_string(p).with_context(|| format!("cannot read config file {}", p.display()))?,
                p.display().to_string(),
            ),
            None => (DEFAULT_CONFIG.to_string(), "<default>".to_string()),
        };
        let mut cfg = Self::from_toml(&text, overrides).with_context(|| format!("in config {origin}"))?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.resolve_inputs(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().context("malformed TOML")?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().context("invalid configuration")?;
        Ok(cfg)
    }

    fn resolve_inputs(&mut self, base: &Path) {
        for p in [&mut self.inputs.model, &mut self.inputs.corpus].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.trials == 0 {
            bail!("experiment.trials must be positive");
        }
        if self.corpus.tokens == 0 && self.inputs.corpus.is_none() {
            bail!("corpus.tokens must be positive");
        }
        if !(self.corpus.spread.is_finite() && self.corpus.spread >= 0.0) {
            bail!("corpus.spread must be finite and nonnegative");
        }
        if self.oracle.trials == 0 || self.oracle.tokens == 0 {
            bail!("oracle.trials and oracle.tokens must be positive");
        }
        for p in [&self.inputs.model, &self.inputs.corpus].into_iter().flatten() {
            if !p.exists() {
                bail!("input file {} does not exist", p.display());
            }
        }
        if self.inputs.model.is_none() {
            self.model.validate(&self.geometry)?;
        }
        self.calibration.validate()?;
        self.noise.at_sigma(self.noise.sigma).validate()?;
        let profile = self.temperature_profile()?;
        for &t in self.sweep.temperatures.iter().chain(&self.ablation.temperatures) {
            if profile.sigma_at(t).is_none() {
                bail!("temperature {t} C is not a point of the temperature profile");
            }
        }
        if let Some(t) = self.noise.temperature {
            if profile.sigma_at(t).is_none() {
                bail!("noise.temperature {t} C is not a point of the temperature profile");
            }
        }
        for &l in &self.ablation.lambda_values {
            if !(0.0..=1.0).contains(&l) {
                bail!("ablation lambda {l} outside [0, 1]");
            }
        }
        Ok(())
    }

    pub fn temperature_profile(&self) -> Result<TemperatureProfile> {
        Ok(TemperatureProfile::new(self.profile.points.clone())?)
    }

    /// Sigma and temperature of the single-cell `run` experiment.
    pub fn run_cell(&self) -> Result<(f64, Option<f64>)> {
        match self.noise.temperature {
            Some(t) => {
                let s = self
                    .temperature_profile()?
                    .sigma_at(t)
                    .ok_or_else(|| anyhow!("temperature {t} C is not in the profile"))?;
                Ok((s, Some(t)))
            }
            None => Ok((self.noise.sigma, None)),
        }
    }

    /// Every resolved value, as TOML.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Sets `section.key = value` (any depth) in a TOML table. The value is
/// parsed as TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override {spec:?} is not of the form key=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() {
        bail!("override {spec:?} has an empty key");
    }
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| anyhow!("override {key:?}: {part:?} is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
