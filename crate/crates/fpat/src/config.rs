//! Experiment configuration: defaults, a flat `key=value` config-file
//! format mirroring every CLI flag, and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::hybrid::Handoff;
use crate::opt::BbVariant;
use crate::phantom::T1EtaThird;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {err}")]
    Io { path: PathBuf, err: std::io::Error },
    #[error("config line {line}: expected key=value, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Sim,
    Opt,
    #[default]
    Hybrid,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Sim => "sim",
            Method::Opt => "opt",
            Method::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(Method::Sim),
            "opt" => Ok(Method::Opt),
            "hybrid" => Ok(Method::Hybrid),
            other => Err(format!("unknown method `{other}` (sim, opt, hybrid)")),
        }
    }
}

/// One experiment cell. Field names double as config-file keys; see
/// `ExperimentConfig::set`.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub template: u8,
    pub noise: f64,
    pub measurements: usize,
    pub method: Method,
    /// Total iteration budget (hybrid splits it across phases).
    pub iters: usize,
    pub forward_nx: usize,
    pub forward_ny: usize,
    pub inverse_nx: usize,
    pub inverse_ny: usize,
    pub n_dir: usize,
    /// Explicit RNG seed; when absent one is derived from (template, noise,
    /// measurements) so the full matrix is reproducible without bookkeeping.
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub radius: f64,
    pub anisotropy: f64,
    pub solver_tol: f64,
    pub max_sweeps: usize,
    pub sim_tol: f64,
    pub hybrid_sim_tol: f64,
    pub hybrid_sim_max_iter: usize,
    pub hybrid_handoff: Handoff,
    pub tol_objective: f64,
    pub tol_gradient: f64,
    pub bb_variant: BbVariant,
    pub sim_envelope: bool,
    pub t1_eta_third: T1EtaThird,
    /// Wall-clock capture in traces; off makes traces bitwise reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            template: 1,
            noise: 0.0,
            measurements: 1,
            method: Method::Hybrid,
            iters: 50,
            forward_nx: 128,
            forward_ny: 128,
            inverse_nx: 96,
            inverse_ny: 96,
            n_dir: 32,
            seed: None,
            out: PathBuf::from("out"),
            radius: 20.0,
            anisotropy: 0.9,
            solver_tol: 1e-9,
            max_sweeps: 5000,
            sim_tol: 1e-3,
            hybrid_sim_tol: 1e-2,
            hybrid_sim_max_iter: 10,
            hybrid_handoff: Handoff::default(),
            tol_objective: 1e-10,
            tol_gradient: 1e-10,
            bb_variant: BbVariant::Bb1,
            sim_envelope: true,
            t1_eta_third: T1EtaThird::Omega4,
            timing: true,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: "expected on/off".into(),
        }),
    }
}

impl ExperimentConfig {
    /// The CI-sized profile: coarse grids and half the directions.
    pub fn apply_fast_profile(&mut self) {
        self.forward_nx = 48;
        self.forward_ny = 48;
        self.inverse_nx = 32;
        self.inverse_ny = 32;
        self.n_dir = 16;
    }

    /// Fixed per-cell seed when none is given explicitly.
    pub fn effective_seed(&self) -> u64 {
        match self.seed {
            Some(s) => s,
            None => {
                let noise_key = (self.noise * 1e4).round() as u64;
                1_000_000 * self.template as u64 + 1_000 * noise_key + self.measurements as u64
            }
        }
    }

    /// Applies one `key=value` assignment. Every CLI flag has a mirror key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "template" => self.template = parse(key, value)?,
            "noise" => self.noise = parse(key, value)?,
            "measurements" => self.measurements = parse(key, value)?,
            "method" => {
                self.method = value.parse().map_err(|e: String| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason: e,
                })?
            }
            "iters" => self.iters = parse(key, value)?,
            "forward_nx" => self.forward_nx = parse(key, value)?,
            "forward_ny" => self.forward_ny = parse(key, value)?,
            "inverse_nx" => self.inverse_nx = parse(key, value)?,
            "inverse_ny" => self.inverse_ny = parse(key, value)?,
            "ndir" => self.n_dir = parse(key, value)?,
            "seed" => self.seed = Some(parse(key, value)?),
            "out" => self.out = PathBuf::from(value),
            "fast" => {
                if parse_bool(key, value)? {
                    self.apply_fast_profile();
                }
            }
            "radius" => self.radius = parse(key, value)?,
            "anisotropy" => self.anisotropy = parse(key, value)?,
            "solver.tol" => self.solver_tol = parse(key, value)?,
            "solver.max_sweeps" => self.max_sweeps = parse(key, value)?,
            "sim.tol" => self.sim_tol = parse(key, value)?,
            "sim.envelope" => self.sim_envelope = parse_bool(key, value)?,
            "hybrid.sim_tol" => self.hybrid_sim_tol = parse(key, value)?,
            "hybrid.sim_max_iter" => self.hybrid_sim_max_iter = parse(key, value)?,
            "hybrid.handoff" => {
                self.hybrid_handoff = value
                    .parse()
                    .map_err(|e: String| ConfigError::BadValue {
                        key: key.into(),
                        value: value.into(),
                        reason: e,
                    })?
            }
            "opt.tol_objective" => self.tol_objective = parse(key, value)?,
            "opt.tol_gradient" => self.tol_gradient = parse(key, value)?,
            "opt.variant" => {
                self.bb_variant = match value {
                    "bb1" => BbVariant::Bb1,
                    "bb2" => BbVariant::Bb2,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected bb1 or bb2".into(),
                        })
                    }
                }
            }
            "phantom.t1_eta_third" => {
                self.t1_eta_third = match value {
                    "omega4" => T1EtaThird::Omega4,
                    "omega5" => T1EtaThird::Omega5,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: value.into(),
                            reason: "expected omega4 or omega5".into(),
                        })
                    }
                }
            }
            "timing" => self.timing = parse_bool(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Reads a flat key=value file; `#` starts a comment, blank lines skip.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|err| ConfigError::Io {
            path: path.to_path_buf(),
            err,
        })?;
        self.apply_text(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::BadLine {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.template == 1 || self.template == 2) {
            return Err(ConfigError::Invalid(format!(
                "template must be 1 or 2, got {}",
                self.template
            )));
        }
        if self.measurements == 0 || self.measurements > 4 {
            return Err(ConfigError::Invalid(format!(
                "measurements must be 1..=4, got {}",
                self.measurements
            )));
        }
        if self.forward_nx <= self.inverse_nx || self.forward_ny <= self.inverse_ny {
            return Err(ConfigError::Invalid(format!(
                "forward grid {}x{} must be strictly finer than inverse grid {}x{}",
                self.forward_nx, self.forward_ny, self.inverse_nx, self.inverse_ny
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(ConfigError::Invalid("noise must be >= 0".into()));
        }
        if self.iters == 0 {
            return Err(ConfigError::Invalid("iters must be > 0".into()));
        }
        Ok(())
    }

    /// Serializes every key in `set` order; `apply_text` of the output
    /// reproduces the config (the manifest mechanism builds on this).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        kv("template", self.template.to_string());
        kv("noise", self.noise.to_string());
        kv("measurements", self.measurements.to_string());
        kv("method", self.method.as_str().to_string());
        kv("iters", self.iters.to_string());
        kv("forward_nx", self.forward_nx.to_string());
        kv("forward_ny", self.forward_ny.to_string());
        kv("inverse_nx", self.inverse_nx.to_string());
        kv("inverse_ny", self.inverse_ny.to_string());
        kv("ndir", self.n_dir.to_string());
        kv("seed", self.effective_seed().to_string());
        kv("radius", self.radius.to_string());
        kv("anisotropy", self.anisotropy.to_string());
        kv("solver.tol", self.solver_tol.to_string());
        kv("solver.max_sweeps", self.max_sweeps.to_string());
        kv("sim.tol", self.sim_tol.to_string());
        kv(
            "sim.envelope",
            if self.sim_envelope { "on" } else { "off" }.to_string(),
        );
        kv("hybrid.sim_tol", self.hybrid_sim_tol.to_string());
        kv("hybrid.sim_max_iter", self.hybrid_sim_max_iter.to_string());
        kv("hybrid.handoff", self.hybrid_handoff.as_str().to_string());
        kv("opt.tol_objective", self.tol_objective.to_string());
        kv("opt.tol_gradient", self.tol_gradient.to_string());
        kv(
            "opt.variant",
            match self.bb_variant {
                BbVariant::Bb1 => "bb1",
                BbVariant::Bb2 => "bb2",
            }
            .to_string(),
        );
        kv(
            "phantom.t1_eta_third",
            match self.t1_eta_third {
                T1EtaThird::Omega4 => "omega4",
                T1EtaThird::Omega5 => "omega5",
            }
            .to_string(),
        );
        kv("timing", if self.timing { "on" } else { "off" }.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = ExperimentConfig::default();
        cfg.template = 2;
        cfg.noise = 0.02;
        cfg.measurements = 3;
        cfg.method = Method::Opt;
        cfg.apply_fast_profile();
        cfg.sim_envelope = false;
        cfg.timing = false;
        let text = cfg.to_text();
        let mut back = ExperimentConfig::default();
        back.apply_text(&text).unwrap();
        assert_eq!(back.template, 2);
        assert_eq!(back.noise, 0.02);
        assert_eq!(back.measurements, 3);
        assert_eq!(back.method, Method::Opt);
        assert_eq!(back.inverse_nx, 32);
        assert_eq!(back.n_dir, 16);
        assert!(!back.sim_envelope);
        assert!(!back.timing);
        assert_eq!(back.effective_seed(), cfg.effective_seed());
    }

    #[test]
    fn rejects_garbage() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.apply_text("nonsense").is_err());
        assert!(cfg.apply_text("imaginary_key=1").is_err());
        assert!(cfg.apply_text("ndir=-3").is_err());
        cfg.apply_text("# comment\n\ntemplate = 2  # trailing\n").unwrap();
        assert_eq!(cfg.template, 2);
    }

    #[test]
    fn validation_catches_grid_inversion() {
        let mut cfg = ExperimentConfig::default();
        cfg.forward_nx = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.measurements = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.template = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn derived_seeds_distinguish_cells() {
        let mut a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        b.noise = 0.02;
        assert_ne!(a.effective_seed(), b.effective_seed());
        b.noise = a.noise;
        b.measurements = 2;
        assert_ne!(a.effective_seed(), b.effective_seed());
        a.seed = Some(7);
        assert_eq!(a.effective_seed(), 7);
    }
}
