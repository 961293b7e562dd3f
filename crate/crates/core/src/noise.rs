//! Analog compute-in-memory perturbation model.
//!
//! A stored weight `w` is read back as `w (1 + e)` with `e ~ N(0, sigma_dev^2)`
//! and every MVM output picks up additive ADC quantization error drawn from
//! `U(-step/2, step/2)` with `step = v_ref / (2^bits - 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{matvec, Matrix, RandomStream};

/// Multiplicative Gaussian conductance error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceNoiseSpec {
    pub sigma_dev: f64,
}

impl DeviceNoiseSpec {
    pub fn new(sigma_dev: f64) -> Result<Self> {
        let spec = Self { sigma_dev };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sigma_dev.is_finite() || self.sigma_dev < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "sigma_dev must be finite and >= 0, got {}",
                self.sigma_dev
            )));
        }
        Ok(())
    }
}

/// Output converter. `v_ref` is the full-scale range in output units; no
/// saturation is modelled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcSpec {
    pub v_ref: f64,
    pub bits: u32,
    pub enabled: bool,
}

impl AdcSpec {
    pub fn new(v_ref: f64, bits: u32, enabled: bool) -> Result<Self> {
        let spec = Self {
            v_ref,
            bits,
            enabled,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn disabled() -> Self {
        Self {
            v_ref: 1.0,
            bits: 8,
            enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.v_ref.is_finite() && self.v_ref > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "ADC v_ref must be > 0, got {}",
                self.v_ref
            )));
        }
        if !(1..=64).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "ADC bit-width must be in 1..=64, got {}",
                self.bits
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        quantization_step(self)
    }
}

/// `v_ref / (2^bits - 1)`.
pub fn quantization_step(adc: &AdcSpec) -> f64 {
    adc.v_ref / (2f64.powi(adc.bits as i32) - 1.0)
}

/// When device noise is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    /// Fresh device noise on every MVM call.
    ResamplePerCall,
    /// One realization per physical array, drawn when the array is programmed.
    FrozenPerDeployment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub device: DeviceNoiseSpec,
    pub adc: AdcSpec,
    pub perturb_router: bool,
    pub perturb_experts: bool,
    pub noise_mode: NoiseMode,
}

impl NoiseConfig {
    /// Every noise path disabled.
    pub fn clean() -> Self {
        Self {
            device: DeviceNoiseSpec { sigma_dev: 0.0 },
            adc: AdcSpec::disabled(),
            perturb_router: false,
            perturb_experts: false,
            noise_mode: NoiseMode::FrozenPerDeployment,
        }
    }

    /// Device noise only, on routers and experts, frozen per deployment.
    pub fn device_only(sigma_dev: f64) -> Self {
        Self {
            device: DeviceNoiseSpec { sigma_dev },
            adc: AdcSpec::disabled(),
            perturb_router: true,
            perturb_experts: true,
            noise_mode: NoiseMode::FrozenPerDeployment,
        }
    }

    pub fn with_sigma(mut self, sigma_dev: f64) -> Self {
        self.device.sigma_dev = sigma_dev;
        self
    }

    pub fn with_mode(mut self, mode: NoiseMode) -> Self {
        self.noise_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.adc.validate()
    }

    /// True when no path can perturb anything.
    pub fn is_clean(&self) -> bool {
        let path_noisy = self.device.sigma_dev > 0.0 || self.adc.enabled;
        !(path_noisy && (self.perturb_router || self.perturb_experts))
    }

    /// Noise settings seen by one class of array.
    pub fn for_path(&self, perturbed: bool) -> PathNoise {
        if perturbed {
            PathNoise {
                device: self.device,
                adc: self.adc,
                mode: self.noise_mode,
            }
        } else {
            PathNoise::ideal()
        }
    }
}

/// Noise applied to a single physical array.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathNoise {
    pub device: DeviceNoiseSpec,
    pub adc: AdcSpec,
    pub mode: NoiseMode,
}

impl PathNoise {
    pub fn ideal() -> Self {
        Self {
            device: DeviceNoiseSpec { sigma_dev: 0.0 },
            adc: AdcSpec::disabled(),
            mode: NoiseMode::FrozenPerDeployment,
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.device.sigma_dev == 0.0 && !self.adc.enabled
    }
}

/// Ordered temperature → sigma_dev lookup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemperatureProfile {
    points: Vec<(f64, f64)>,
}

impl TemperatureProfile {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidConfig("temperature profile is empty".into()));
        }
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidConfig(
                    "temperatures must be strictly increasing".into(),
                ));
            }
            if w[1].1 < w[0].1 {
                return Err(Error::InvalidConfig(
                    "sigma_dev must be non-decreasing in temperature".into(),
                ));
            }
        }
        for &(t, s) in &points {
            if !t.is_finite() {
                return Err(Error::InvalidConfig("temperature must be finite".into()));
            }
            DeviceNoiseSpec::new(s)?;
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Sigma for an exact temperature in the profile.
    pub fn sigma_at(&self, temp_c: f64) -> Option<f64> {
        self.points
            .iter()
            .find(|(t, _)| *t == temp_c)
            .map(|(_, s)| *s)
    }
}

impl Default for TemperatureProfile {
    fn default() -> Self {
        Self {
            points: vec![
                (25.0, 0.02),
                (45.0, 0.04),
                (65.0, 0.07),
                (80.0, 0.10),
                (85.0, 0.12),
            ],
        }
    }
}

/// Returns `W (1 + E)` with `E` i.i.d. `N(0, sigma_dev^2)`, drawn row-major.
pub fn perturb_weights(w: &Matrix, spec: &DeviceNoiseSpec, rng: &mut RandomStream) -> Matrix {
    if spec.sigma_dev == 0.0 {
        return w.clone();
    }
    let sigma = spec.sigma_dev;
    let data = w
        .data()
        .iter()
        .map(|&v| v * (1.0 + sigma * rng.normal()))
        .collect();
    Matrix::new(w.rows(), w.cols(), data).expect("perturbation keeps weights finite")
}

/// Adds independent `U(-step/2, step/2)` error to every entry.
pub fn apply_adc(y: &[f64], adc: &AdcSpec, rng: &mut RandomStream) -> Vec<f64> {
    if !adc.enabled {
        return y.to_vec();
    }
    let step = adc.step();
    y.iter()
        .map(|&v| v + step * (rng.uniform() - 0.5))
        .collect()
}

/// One-shot noisy product: fresh device noise, exact product, ADC error.
pub fn noisy_matvec(
    w: &Matrix,
    x: &[f64],
    noise: &PathNoise,
    rng: &mut RandomStream,
) -> Result<Vec<f64>> {
    AnalogArray::program(w.clone(), noise, rng).forward(x, noise, rng)
}

/// A weight matrix stored in a physical array.
///
/// In frozen mode the device realization is drawn once at programming time
/// and reused by every read; in resample mode only the nominal weights are
/// kept and each read draws its own realization.
#[derive(Debug, Clone)]
pub struct AnalogArray {
    nominal: Matrix,
    realized: Option<Matrix>,
}

impl AnalogArray {
    pub fn ideal(nominal: Matrix) -> Self {
        Self {
            nominal,
            realized: None,
        }
    }

    pub fn program(nominal: Matrix, noise: &PathNoise, rng: &mut RandomStream) -> Self {
        let realized = match noise.mode {
            NoiseMode::FrozenPerDeployment if noise.device.sigma_dev > 0.0 => {
                Some(perturb_weights(&nominal, &noise.device, rng))
            }
            _ => None,
        };
        Self { nominal, realized }
    }

    pub fn nominal(&self) -> &Matrix {
        &self.nominal
    }

    /// The frozen device realization, if one was drawn.
    pub fn realized(&self) -> Option<&Matrix> {
        self.realized.as_ref()
    }

    pub fn forward(&self, x: &[f64], noise: &PathNoise, rng: &mut RandomStream) -> Result<Vec<f64>> {
        let y = match (&self.realized, noise.mode) {
            (Some(w), _) => matvec(w, x)?,
            (None, NoiseMode::ResamplePerCall) if noise.device.sigma_dev > 0.0 => {
                if self.nominal.cols() != x.len() {
                    return Err(Error::DimensionMismatch {
                        context: "matvec",
                        expected: self.nominal.cols(),
                        found: x.len(),
                    });
                }
                matvec(&perturb_weights(&self.nominal, &noise.device, rng), x)?
            }
            (None, _) => matvec(&self.nominal, x)?,
        };
        Ok(apply_adc(&y, &noise.adc, rng))
    }
}
