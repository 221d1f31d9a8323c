//! Experiment configuration files.
//!
//! One TOML document per experiment. Shared sections are `[run]`,
//! `[medium]`, `[beam]`, `[bias]` and `[tolerances]`; each subcommand reads
//! its own section in addition.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use dckerr::profiles::{core_beam, BeamSpec};
use dckerr::smooth::Bump;
use dckerr::{GaussianBump, SusceptibilityField, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: cannot read config: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("{path}:{line}: `{key}`: {message}")]
    Invalid {
        path: String,
        line: usize,
        key: String,
        message: String,
    },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub run: RunSection,
    pub medium: Option<MediumSection>,
    pub beam: Option<BeamSection>,
    pub bias: Option<BiasSection>,
    #[serde(default)]
    pub tolerances: Tolerances,
    pub stationary: Option<StationarySection>,
    pub forward: Option<ForwardSection>,
    pub fdtd: Option<FdtdSection>,
    pub scan: Option<ScanSection>,
    pub kerrcell: Option<KerrCellSection>,
    pub convergence: Option<ConvergenceSection>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    pub h: Option<f64>,
    pub h_sweep: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BumpEntry {
    pub amplitude: f64,
    pub center: [f64; 3],
    pub width: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MediumSection {
    pub support_radius: f64,
    pub domain_radius: f64,
    /// Centre of the support ball; bumps are given relative to it.
    #[serde(default)]
    pub center: [f64; 3],
    #[serde(default)]
    pub bump: Vec<BumpEntry>,
    /// Extra bumps drawn from `run.seed`.
    #[serde(default)]
    pub random_bumps: usize,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BeamSection {
    pub a2: f64,
    pub a3: f64,
    #[serde(default = "default_core_radius")]
    pub core_radius: f64,
    /// Centre of the envelope at `t = 0`.
    #[serde(default)]
    pub launch: f64,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn default_core_radius() -> f64 {
    0.5
}

fn default_half_width() -> f64 {
    0.6
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSection {
    pub e0: f64,
}

#[derive(Debug, Clone, Copy, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub fixed_point: f64,
    pub max_relative_l2: f64,
    /// Largest accepted `C` in `error <= C h`.
    pub error_constant: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fixed_point: 1e-13,
            max_relative_l2: 0.05,
            error_constant: 5.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct StationarySection {
    pub nodes: usize,
    /// Far field `E_inf`; the boundary data is `E_inf . x`.
    #[serde(default = "default_far_field")]
    pub far_field: [f64; 3],
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_far_field() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}

fn default_max_iter() -> usize {
    100
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    pub detector: f64,
    #[serde(default)]
    pub angle: f64,
    pub x2: [f64; 2],
    pub x3: [f64; 2],
    pub n2: usize,
    pub n3: usize,
    #[serde(default = "default_samples")]
    pub samples_per_period: f64,
}

fn default_samples() -> f64 {
    24.0
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FdtdSection {
    /// When absent, a short layout around the medium is used and the beam
    /// launch point is chosen automatically.
    pub domain: Option<[f64; 2]>,
    pub detector: Option<f64>,
    pub t_final: Option<f64>,
    #[serde(default = "default_pph")]
    pub points_per_h: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    /// Also run without medium and report the phase shifts.
    #[serde(default = "default_true")]
    pub reference: bool,
}

fn default_pph() -> f64 {
    20.0
}

fn default_cfl() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub n_angles: usize,
    pub offset_min: f64,
    pub offset_max: f64,
    pub n_offsets: usize,
    #[serde(default = "default_slices")]
    pub slices: Vec<f64>,
    pub detector: f64,
    #[serde(default = "default_samples")]
    pub samples_per_period: f64,
}

fn default_slices() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KerrCellSection {
    pub a2: f64,
    pub a3: f64,
    pub d: f64,
    pub e0: f64,
    pub chi: f64,
    #[serde(default = "default_tau_step")]
    pub tau_step: f64,
    #[serde(default = "default_tau_max")]
    pub tau_max: f64,
    pub e0_max: Option<f64>,
    #[serde(default = "default_e0_steps")]
    pub e0_steps: usize,
    #[serde(default = "default_pph")]
    pub points_per_h: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

fn default_tau_step() -> f64 {
    1e-3
}

fn default_tau_max() -> f64 {
    PI
}

fn default_e0_steps() -> usize {
    400
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceSection {
    #[serde(default = "default_pph")]
    pub points_per_h: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
}

/// A parsed config together with its source, for diagnostics.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub path: PathBuf,
    pub text: String,
    pub config: ExperimentConfig,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(path, text)
    }

    pub fn parse(path: &Path, text: String) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let loaded = Self {
            path: path.to_path_buf(),
            text,
            config,
        };
        loaded.validate_common()?;
        Ok(loaded)
    }

    /// Error pointing at `key` inside `[section]`.
    pub fn invalid(&self, section: &str, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Invalid {
            path: self.path.display().to_string(),
            line: locate(&self.text, section, key),
            key: if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            },
            message: message.into(),
        }
    }

    fn validate_common(&self) -> Result<(), ConfigError> {
        let run = &self.config.run;
        if let Some(h) = run.h {
            check_h(self, "h", h)?;
        }
        if let Some(sweep) = &run.h_sweep {
            if sweep.is_empty() {
                return Err(self.invalid("run", "h_sweep", "sweep must not be empty"));
            }
            for &h in sweep {
                check_h(self, "h_sweep", h)?;
            }
        }
        if let Some(m) = &self.config.medium {
            if !(m.support_radius > 0.0 && m.domain_radius > m.support_radius) {
                return Err(self.invalid(
                    "medium",
                    "domain_radius",
                    "need 0 < support_radius < domain_radius",
                ));
            }
            if m.bump.iter().any(|b| !(b.width > 0.0)) {
                return Err(self.invalid("medium.bump", "width", "bump widths must be positive"));
            }
        }
        if let Some(b) = &self.config.beam {
            if b.a2 == 0.0 && b.a3 == 0.0 {
                return Err(self.invalid("beam", "a2", "a2 and a3 must not both vanish"));
            }
            if !(b.half_width > 0.0 && b.core_radius > 0.0) {
                return Err(self.invalid(
                    "beam",
                    "half_width",
                    "half_width and core_radius must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn output_dir(&self, command: &str) -> PathBuf {
        if let Ok(dir) = std::env::var("OUTPUT_DIR") {
            return PathBuf::from(dir);
        }
        match &self.config.run.output_dir {
            Some(d) if d.is_absolute() => d.clone(),
            Some(d) => self.path.parent().unwrap_or(Path::new(".")).join(d),
            None => PathBuf::from(format!("{command}-output")),
        }
    }

    pub fn h(&self) -> Result<f64, ConfigError> {
        self.config
            .run
            .h
            .ok_or_else(|| self.invalid("run", "h", "missing"))
    }

    pub fn h_sweep(&self) -> Result<Vec<f64>, ConfigError> {
        match (&self.config.run.h_sweep, self.config.run.h) {
            (Some(s), _) => Ok(s.clone()),
            (None, Some(h)) => Ok(vec![h]),
            (None, None) => Err(self.invalid("run", "h_sweep", "missing")),
        }
    }

    pub fn e0(&self) -> Result<f64, ConfigError> {
        self.config
            .bias
            .map(|b| b.e0)
            .ok_or_else(|| self.invalid("bias", "e0", "missing [bias] section"))
    }

    pub fn section<'a, T>(&self, value: &'a Option<T>, name: &str) -> Result<&'a T, ConfigError> {
        value
            .as_ref()
            .ok_or_else(|| self.invalid("", name, format!("missing [{name}] section")))
    }

    /// The `[medium]` section with the seeded random bumps written out.
    pub fn resolved_medium(&self) -> Result<MediumSection, ConfigError> {
        let m = self.section(&self.config.medium, "medium")?;
        let mut out = MediumSection {
            random_bumps: 0,
            ..m.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.run.seed);
        let r = 0.5 * m.support_radius;
        for _ in 0..m.random_bumps {
            let center = [
                rng.random_range(-r..r),
                rng.random_range(-r..r),
                rng.random_range(-r..r),
            ];
            let width = rng.random_range(0.1..0.3) * m.support_radius;
            out.bump.push(BumpEntry {
                amplitude: rng.random_range(0.2..1.0),
                center,
                width,
            });
        }
        Ok(out)
    }

    pub fn medium(&self) -> Result<SusceptibilityField, ConfigError> {
        build_medium(&self.resolved_medium()?)
            .map_err(|e| self.invalid("medium", "support_radius", e))
    }

    pub fn beam(&self, h: f64) -> Result<BeamSpec, ConfigError> {
        let b = self.section(&self.config.beam, "beam")?;
        core_beam(
            b.a2,
            b.a3,
            b.core_radius,
            Bump::new(b.launch, b.half_width),
            h,
        )
        .map_err(|e| self.invalid("beam", "a2", e.to_string()))
    }
}

pub fn build_medium(m: &MediumSection) -> Result<SusceptibilityField, String> {
    let bumps = m
        .bump
        .iter()
        .map(|b| GaussianBump::new(b.amplitude, Vec3::from(b.center), b.width))
        .collect();
    let field = SusceptibilityField::analytic(bumps, m.support_radius, m.domain_radius)
        .map_err(|e| e.to_string())?;
    Ok(field.translated(&Vec3::from(m.center)))
}

fn check_h(cfg: &LoadedConfig, key: &str, h: f64) -> Result<(), ConfigError> {
    if h > 0.0 && h < 1.0 {
        Ok(())
    } else {
        Err(cfg.invalid("run", key, format!("h must lie in (0, 1), got {h}")))
    }
}

/// 1-based line of `key` inside `[section]` (or of the section header, or 1).
pub fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix("[[").and_then(|l| l.strip_suffix("]]")) {
            current = name.trim().to_string();
        } else if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            let is_key = line
                .strip_prefix(key)
                .map(|rest| rest.trim_start().starts_with('='))
                .unwrap_or(false);
            if is_key {
                return i + 1;
            }
            continue;
        } else {
            continue;
        }
        if current == section && header_line.is_none() {
            header_line = Some(i + 1);
        }
    }
    header_line.unwrap_or(1)
}
