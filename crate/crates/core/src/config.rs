//! Run configuration: a single TOML file with nested sections, environment
//! overrides under the `TBLAB_` prefix, and range validation.

use crate::dyadic::ExponentConfig;
use crate::error::{Error, Result};
use crate::kernels::KernelKind;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Spatial dimension, 1 or 2.
    pub dim: usize,
    /// Grid depth; the reference cube splits into `2^(dim*depth)` cells.
    pub depth: u32,
    pub kernel: KernelConfig,
    pub exponents: ExponentConfig,
    pub stopping: StoppingConfig,
    pub suppression: SuppressionConfig,
    pub system: SystemConfig,
    pub samples: SampleConfig,
    /// Master seed; every stream derives from it deterministically.
    pub seed: u64,
    /// Relative band within which a constant must agree between the run
    /// depth and the refined depth.
    pub stability_band: f64,
    /// Verifier groups to run; ["all"] runs the whole chain. Named groups:
    /// kernel, systems, cotlar, offdiag, stopping, suppress, martingale,
    /// bilinear, wbp, baby, final.
    pub verifiers: Vec<String>,
    /// Output directory for reports.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dim: 1,
            depth: 8,
            kernel: KernelConfig::default(),
            exponents: ExponentConfig::default(),
            stopping: StoppingConfig::default(),
            suppression: SuppressionConfig::default(),
            system: SystemConfig::default(),
            samples: SampleConfig::default(),
            seed: 7,
            stability_band: 0.25,
            verifiers: vec!["all".to_string()],
            out_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct KernelConfig {
    pub name: KernelKind,
    pub alpha: f64,
    pub lipschitz: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig { name: KernelKind::Hilbert, alpha: 0.4, lipschitz: 0.5 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct StoppingConfig {
    pub delta: f64,
    pub cz_const: f64,
    pub eta: f64,
    /// Explicit testing budget; unset means derived from measured headroom.
    pub eps: Option<f64>,
    /// Explicit off-diagonal budget; unset means derived likewise.
    pub sigma: Option<f64>,
    /// Whether the off-diagonal condition participates in the stopping
    /// scan; unset means off for antisymmetric single-system runs, on
    /// otherwise.
    pub use_offdiag: Option<bool>,
    /// Chebyshev levels exercised by the off-diagonal verifier.
    pub lambda_levels: Vec<f64>,
}

impl Default for StoppingConfig {
    fn default() -> Self {
        StoppingConfig {
            delta: 1.0 / 64.0,
            cz_const: 16.0,
            eta: 0.5,
            eps: None,
            sigma: None,
            use_offdiag: None,
            lambda_levels: vec![10.0, 100.0, 1000.0],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SuppressionConfig {
    /// Damping power; unset means the dimension.
    pub power: Option<u32>,
    /// Extra powers reported by the suppressed-kernel bound study; unset
    /// means `ceil(dim/2)`, `dim`, `2*dim`.
    pub report_powers: Option<Vec<u32>>,
}

impl Default for SuppressionConfig {
    fn default() -> Self {
        SuppressionConfig { power: None, report_powers: None }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Indicator,
    Rough,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SystemConfig {
    pub kind: SystemKind,
    pub roughness: f64,
    /// Size exponent of the generated system.
    pub p: f64,
    /// Seed offset of the primary system.
    pub seed: u64,
    /// Seed offset of the adjoint-side system (a distinct stream).
    pub adjoint_seed: u64,
    /// Deepest absolute level spikes may occupy; fixing it keeps the
    /// generated functions identical across grid depths.
    pub max_spike_level: u32,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            kind: SystemKind::Rough,
            roughness: 6.0,
            p: 1.5,
            seed: 11,
            adjoint_seed: 12,
            max_spike_level: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SampleConfig {
    /// Random quadruples for the kernel-estimate sampler.
    pub kernel_samples: usize,
    /// Random inputs per pointwise verifier.
    pub random_inputs: usize,
    /// Sample pairs for the reduced pairing bound.
    pub pairing_samples: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { kernel_samples: 2000, random_inputs: 8, pairing_samples: 64 }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {path:?}: {e}")))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("bad config: {e}")))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::config(format!("serialize config: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    /// Environment overrides, uniformly prefixed: `TBLAB_DIM`, `TBLAB_DEPTH`,
    /// `TBLAB_KERNEL`, `TBLAB_SEED`, `TBLAB_OUT`, `TBLAB_ROUGHNESS`,
    /// `TBLAB_DELTA`, `TBLAB_ETA`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = get("TBLAB_DIM") {
            self.dim = v.parse().map_err(|e| Error::config(format!("TBLAB_DIM: {e}")))?;
        }
        if let Some(v) = get("TBLAB_DEPTH") {
            self.depth = v.parse().map_err(|e| Error::config(format!("TBLAB_DEPTH: {e}")))?;
        }
        if let Some(v) = get("TBLAB_KERNEL") {
            self.kernel.name = parse_kernel_name(&v)?;
        }
        if let Some(v) = get("TBLAB_SEED") {
            self.seed = v.parse().map_err(|e| Error::config(format!("TBLAB_SEED: {e}")))?;
        }
        if let Some(v) = get("TBLAB_OUT") {
            self.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get("TBLAB_ROUGHNESS") {
            self.system.roughness =
                v.parse().map_err(|e| Error::config(format!("TBLAB_ROUGHNESS: {e}")))?;
        }
        if let Some(v) = get("TBLAB_DELTA") {
            self.stopping.delta =
                v.parse().map_err(|e| Error::config(format!("TBLAB_DELTA: {e}")))?;
        }
        if let Some(v) = get("TBLAB_ETA") {
            self.stopping.eta = v.parse().map_err(|e| Error::config(format!("TBLAB_ETA: {e}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 1 && self.dim != 2 {
            return Err(Error::config(format!("dim = {} must be 1 or 2", self.dim)));
        }
        let max_depth = if self.dim == 1 { 12 } else { 6 };
        if self.depth < 2 || self.depth > max_depth {
            return Err(Error::config(format!(
                "depth = {} out of range [2, {max_depth}] for dim {}",
                self.depth, self.dim
            )));
        }
        if !(self.stopping.delta > 0.0 && self.stopping.delta < 1.0) {
            return Err(Error::config(format!("delta = {} must lie in (0,1)", self.stopping.delta)));
        }
        if !(self.stopping.eta > 0.0 && self.stopping.eta < 1.0) {
            return Err(Error::config(format!("eta = {} must lie in (0,1)", self.stopping.eta)));
        }
        if self.stopping.cz_const < 1.0 {
            return Err(Error::config(format!(
                "cz_const = {} must be at least 1",
                self.stopping.cz_const
            )));
        }
        if self.system.roughness < 1.0 {
            return Err(Error::config(format!(
                "roughness = {} must be at least 1",
                self.system.roughness
            )));
        }
        if !(self.kernel.alpha > 0.0 && self.kernel.alpha < 0.5) {
            return Err(Error::config(format!(
                "kernel alpha = {} must lie in (0, 1/2)",
                self.kernel.alpha
            )));
        }
        if !(self.stability_band > 0.0 && self.stability_band < 1.0) {
            return Err(Error::config(format!(
                "stability band = {} must lie in (0,1)",
                self.stability_band
            )));
        }
        let kernel_dim = match self.kernel.name {
            KernelKind::Hilbert | KernelKind::CauchyRe | KernelKind::CauchyIm => Some(1),
            KernelKind::Riesz1 | KernelKind::Riesz2 => Some(2),
            KernelKind::Zero => None,
        };
        if let Some(d) = kernel_dim {
            if d != self.dim {
                return Err(Error::config(format!(
                    "kernel {:?} needs dim {d}, got {}",
                    self.kernel.name, self.dim
                )));
            }
        }
        self.exponents.validate()?;
        Ok(())
    }

    pub fn verifier_active(&self, name: &str) -> bool {
        self.verifiers.iter().any(|v| v == "all" || v == name)
    }

    pub fn suppression_power(&self) -> u32 {
        self.suppression.power.unwrap_or(self.dim as u32)
    }

    pub fn suppression_report_powers(&self) -> Vec<u32> {
        self.suppression.report_powers.clone().unwrap_or_else(|| {
            let d = self.dim as u32;
            let mut v = vec![d.div_ceil(2), d, 2 * d];
            v.dedup();
            v
        })
    }
}

pub fn parse_kernel_name(name: &str) -> Result<KernelKind> {
    match name.to_ascii_lowercase().as_str() {
        "hilbert" => Ok(KernelKind::Hilbert),
        "riesz1" => Ok(KernelKind::Riesz1),
        "riesz2" => Ok(KernelKind::Riesz2),
        "cauchy_re" | "cauchy-re" => Ok(KernelKind::CauchyRe),
        "cauchy_im" | "cauchy-im" => Ok(KernelKind::CauchyIm),
        "zero" => Ok(KernelKind::Zero),
        other => Err(Error::config(format!("unknown kernel {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.stopping.delta = 1.0;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dim = 3;
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.dim = 2;
        // Hilbert kernel needs dimension one.
        assert!(cfg.validate().is_err());

        let mut cfg = RunConfig::default();
        cfg.depth = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_overrides_apply() {
        let mut cfg = RunConfig::default();
        let env = |k: &str| match k {
            "TBLAB_DEPTH" => Some("6".to_string()),
            "TBLAB_KERNEL" => Some("cauchy_re".to_string()),
            "TBLAB_SEED" => Some("99".to_string()),
            _ => None,
        };
        cfg.apply_env(env).unwrap();
        assert_eq!(cfg.depth, 6);
        assert_eq!(cfg.kernel.name, KernelKind::CauchyRe);
        assert_eq!(cfg.seed, 99);
    }

    #[test]
    fn config_file_roundtrips_losslessly() {
        let dir = std::env::temp_dir().join("tblab_config_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("run.toml");
        let mut cfg = RunConfig::default();
        cfg.depth = 7;
        cfg.stopping.lambda_levels = vec![10.0, 50.0];
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(cfg, back);
    }
}
