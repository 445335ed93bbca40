//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//! checks = ["roundtrip", "capacity"]   # optional; default: every check
//!
//! [model]
//! kind = "flat_torus"                  # or "round_sphere"
//! area = 1.0
//! base_resolution = 256
//!
//! [endpoints]
//! phi0 = []
//! phi1 = [{ family = "cos", k = 1, coefficient = 0.04 }]
//!
//! [solver]
//! method = "legendre"                  # or "epsilon"
//! nt = 33
//! ```
//!
//! Unknown keys are errors. Endpoints are lists of modes, so a single
//! configuration serves every resolution of a convergence study.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foliation::DEFAULT_REGULAR_THRESHOLD;
use crate::model::{ModelError, Potential, SurfaceKind, SurfaceModel, MIN_RESOLUTION};
use crate::solver::{NewtonConfig, StripGeometry, MIN_TIME_NODES};

/// Names of the verification checks, in suite order.
pub const CHECK_NAMES: [&str; 12] = [
    "hcma_residual_convergence",
    "solver_agreement",
    "kenergy_torus",
    "kenergy_sphere",
    "kenergy_convexity",
    "path_independence",
    "curvature_sign",
    "inequalities",
    "max_principle",
    "roundtrip",
    "area_uniformity",
    "capacity",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown check name {0:?}")]
    UnknownCheck(String),
    #[error("mode family {family:?} is not available on the {kind}")]
    ModeFamily { family: ModeFamily, kind: &'static str },
    #[error("endpoint {which} is not a Kähler potential: {source}")]
    Endpoint { which: &'static str, source: ModelError },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Basis function of an endpoint mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeFamily {
    /// `1` (any model).
    Constant,
    /// `cos(2πkx)` on the torus.
    Cos,
    /// `sin(2πkx)` on the torus.
    Sin,
    /// Legendre polynomial `P_k(x)` in the moment coordinate of the sphere.
    Legendre,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub family: ModeFamily,
    #[serde(default)]
    pub k: u32,
    pub coefficient: f64,
}

/// Legendre polynomial `P_k(x)` by the three-term recurrence.
pub fn legendre_polynomial(k: u32, x: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, x);
    if k == 0 {
        return p0;
    }
    for n in 1..k {
        let n = f64::from(n);
        let p2 = ((2.0 * n + 1.0) * x * p1 - n * p0) / (n + 1.0);
        p0 = p1;
        p1 = p2;
    }
    p1
}

impl Mode {
    pub fn eval(&self, x: f64) -> f64 {
        let arg = 2.0 * std::f64::consts::PI * f64::from(self.k) * x;
        self.coefficient
            * match self.family {
                ModeFamily::Constant => 1.0,
                ModeFamily::Cos => arg.cos(),
                ModeFamily::Sin => arg.sin(),
                ModeFamily::Legendre => legendre_polynomial(self.k, x),
            }
    }

    fn check(&self, kind: SurfaceKind) -> Result<(), ConfigError> {
        let ok = match self.family {
            ModeFamily::Constant => true,
            ModeFamily::Cos | ModeFamily::Sin => kind == SurfaceKind::FlatTorus,
            ModeFamily::Legendre => kind == SurfaceKind::RoundSphere,
        };
        if !ok {
            return Err(ConfigError::ModeFamily { family: self.family, kind: kind.as_str() });
        }
        if !self.coefficient.is_finite() {
            return Err(ConfigError::Invalid(format!("mode coefficient {} is not finite", self.coefficient)));
        }
        Ok(())
    }
}

/// Node values of a sum of modes on a model grid.
pub fn evaluate_modes(model: &SurfaceModel, modes: &[Mode]) -> Vec<f64> {
    model.grid.nodes.iter().map(|&x| modes.iter().map(|m| m.eval(x)).sum()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: SurfaceKind,
    pub area: f64,
    pub base_resolution: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointsConfig {
    #[serde(default)]
    pub phi0: Vec<Mode>,
    #[serde(default)]
    pub phi1: Vec<Mode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Legendre,
    Epsilon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default = "default_method")]
    pub method: MethodName,
    /// Time nodes of the main instance.
    #[serde(default = "default_nt")]
    pub nt: usize,
    #[serde(default = "default_geometry")]
    pub geometry: StripGeometry,
    /// Regularization levels for the ε solver and the agreement check.
    #[serde(default = "default_epsilons")]
    pub epsilon_schedule: Vec<f64>,
    #[serde(default)]
    pub newton: NewtonConfig,
}

fn default_method() -> MethodName {
    MethodName::Legendre
}
fn default_nt() -> usize {
    33
}
fn default_geometry() -> StripGeometry {
    StripGeometry::Cylinder
}
fn default_epsilons() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3]
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: default_method(),
            nt: default_nt(),
            geometry: default_geometry(),
            epsilon_schedule: default_epsilons(),
            newton: NewtonConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoliationConfig {
    /// Relative density threshold of the regular set.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Leaf seeds at `t = 0`; empty means one leaf per base node.
    #[serde(default)]
    pub seeds: Vec<f64>,
}

fn default_threshold() -> f64 {
    DEFAULT_REGULAR_THRESHOLD
}

impl Default for FoliationConfig {
    fn default() -> Self {
        FoliationConfig { threshold: default_threshold(), seeds: Vec::new() }
    }
}

/// Sizes of the verification instances. Pass thresholds are fixed in
/// [`crate::suite`] and cannot be configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Base resolutions of the residual convergence study (time step = base spacing).
    pub levels: Vec<usize>,
    /// Base resolutions of the round-trip study.
    pub roundtrip_levels: Vec<usize>,
    /// Time nodes used by the round-trip and area studies.
    pub study_nt: usize,
    pub agreement_resolution: usize,
    pub agreement_nt: usize,
    pub kenergy_resolution: usize,
    pub kenergy_steps: usize,
    pub random_torus: usize,
    pub random_sphere: usize,
    pub path_resolution: usize,
    /// Simpson steps per leg of the path-independence refinement.
    pub path_steps: Vec<usize>,
    pub test_sections: usize,
    /// Factors applied to the `phi1` modes to build the degenerating family.
    pub capacity_family: Vec<f64>,
    pub capacity_resolution: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            levels: vec![64, 128, 256],
            roundtrip_levels: vec![128, 256, 512],
            study_nt: 65,
            agreement_resolution: 128,
            agreement_nt: 65,
            kenergy_resolution: 128,
            kenergy_steps: 64,
            random_torus: 100,
            random_sphere: 50,
            path_resolution: 256,
            path_steps: vec![32, 64, 128],
            test_sections: 20,
            capacity_family: vec![0.25, 0.5, 0.75, 1.0, 1.125],
            capacity_resolution: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Enabled checks; `None` enables all of them.
    #[serde(default)]
    pub checks: Option<Vec<String>>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub endpoints: EndpointsConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub foliation: FoliationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// The standard torus experiment: `0 → 0.04·cos(2πx)` at base 256.
    pub fn standard_torus() -> Self {
        ExperimentConfig {
            seed: 20_240_601,
            checks: None,
            output_dir: None,
            model: ModelConfig { kind: SurfaceKind::FlatTorus, area: 1.0, base_resolution: 256 },
            endpoints: EndpointsConfig {
                phi0: Vec::new(),
                phi1: vec![Mode { family: ModeFamily::Cos, k: 1, coefficient: 0.04 }],
            },
            solver: SolverConfig::default(),
            foliation: FoliationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    /// Enabled check names in suite order.
    pub fn enabled_checks(&self) -> Vec<&'static str> {
        match &self.checks {
            None => CHECK_NAMES.to_vec(),
            Some(list) => CHECK_NAMES.iter().copied().filter(|c| list.iter().any(|l| l == c)).collect(),
        }
    }

    pub fn model_at(&self, resolution: usize) -> Result<SurfaceModel, ModelError> {
        SurfaceModel::new(self.model.kind, resolution, self.model.area)
    }

    /// Endpoint potentials on `model`; `scale` multiplies the `phi1` modes.
    pub fn endpoints_on(&self, model: &SurfaceModel, scale: f64) -> Result<(Potential, Potential), ConfigError> {
        let phi0 = Potential::new(model, evaluate_modes(model, &self.endpoints.phi0))
            .map_err(|source| ConfigError::Endpoint { which: "phi0", source })?;
        let phi1_values = evaluate_modes(model, &self.endpoints.phi1).into_iter().map(|v| scale * v).collect();
        let phi1 =
            Potential::new(model, phi1_values).map_err(|source| ConfigError::Endpoint { which: "phi1", source })?;
        Ok((phi0, phi1))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if let Some(list) = &self.checks {
            if let Some(bad) = list.iter().find(|c| !CHECK_NAMES.contains(&c.as_str())) {
                return Err(ConfigError::UnknownCheck(bad.clone()));
            }
        }
        if !(self.model.area.is_finite() && self.model.area > 0.0) {
            return Err(ConfigError::Invalid(format!("area must be positive, got {}", self.model.area)));
        }
        let a = &self.analysis;
        let resolutions = [self.model.base_resolution, a.agreement_resolution, a.kenergy_resolution, a.path_resolution]
            .into_iter()
            .chain(a.levels.iter().copied())
            .chain(a.roundtrip_levels.iter().copied())
            .chain([a.capacity_resolution]);
        for n in resolutions {
            if n < MIN_RESOLUTION {
                return Err(ConfigError::Invalid(format!("resolution {n} is below the minimum of {MIN_RESOLUTION}")));
            }
        }
        for levels in [&a.levels, &a.roundtrip_levels] {
            if levels.len() < 3 || levels.windows(2).any(|w| w[1] != 2 * w[0]) {
                return Err(ConfigError::Invalid(format!("levels {levels:?} must be at least three doublings")));
            }
        }
        if a.path_steps.len() < 3 || a.path_steps.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(ConfigError::Invalid(format!("path steps {:?} must be at least three doublings", a.path_steps)));
        }
        if a.path_steps.iter().any(|s| s % 2 != 0) || a.kenergy_steps % 2 != 0 {
            return Err(ConfigError::Invalid("Simpson step counts must be even".into()));
        }
        for nt in [self.solver.nt, a.study_nt, a.agreement_nt] {
            if nt < MIN_TIME_NODES {
                return Err(ConfigError::Invalid(format!("nt = {nt} is below the minimum of {MIN_TIME_NODES}")));
            }
        }
        if self.solver.epsilon_schedule.is_empty() || self.solver.epsilon_schedule.iter().any(|e| !(*e > 0.0)) {
            return Err(ConfigError::Invalid("epsilon schedule must be non-empty and positive".into()));
        }
        if !(self.foliation.threshold > 0.0 && self.foliation.threshold < 1.0) {
            return Err(ConfigError::Invalid(format!("threshold must lie in (0, 1), got {}", self.foliation.threshold)));
        }
        if a.test_sections == 0 || a.capacity_family.len() < 2 || a.capacity_family.iter().any(|s| !(*s > 0.0)) {
            return Err(ConfigError::Invalid("test count and capacity family factors must be positive".into()));
        }
        if let StripGeometry::Rectangle { half_width } = self.solver.geometry {
            if !(half_width > 0.0) {
                return Err(ConfigError::Invalid(format!("half width must be positive, got {half_width}")));
            }
        }
        for m in self.endpoints.phi0.iter().chain(&self.endpoints.phi1) {
            m.check(self.model.kind)?;
        }
        let model = self.model_at(self.model.base_resolution).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.endpoints_on(&model, 1.0)?;
        let top = a.capacity_family.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.endpoints_on(&model, top)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_config_round_trips_through_toml() {
        let c = ExperimentConfig::standard_torus();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        assert_eq!(c.enabled_checks().len(), 12);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let c = ExperimentConfig::from_toml(
            r#"
            [model]
            kind = "round_sphere"
            area = 12.566370614359172
            base_resolution = 64
            [endpoints]
            phi1 = [{ family = "legendre", k = 2, coefficient = 0.05 }]
            "#,
        )
        .unwrap();
        assert_eq!(c.solver.nt, 33);
        assert_eq!(c.analysis, AnalysisConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_checks() {
        let bad_key = "seed = 1\ncolour = 3\n[model]\nkind = \"flat_torus\"\narea = 1.0\nbase_resolution = 64\n[endpoints]\n";
        assert!(matches!(ExperimentConfig::from_toml(bad_key), Err(ConfigError::Parse(_))));
        let mut c = ExperimentConfig::standard_torus();
        c.checks = Some(vec!["roundtrip".into(), "no_such_check".into()]);
        assert!(matches!(c.validate(), Err(ConfigError::UnknownCheck(name)) if name == "no_such_check"));
    }

    #[test]
    fn rejects_wrong_family_and_non_kahler_endpoint() {
        let mut c = ExperimentConfig::standard_torus();
        c.endpoints.phi1 = vec![Mode { family: ModeFamily::Legendre, k: 2, coefficient: 0.1 }];
        assert!(matches!(c.validate(), Err(ConfigError::ModeFamily { .. })));
        c.endpoints.phi1 = vec![Mode { family: ModeFamily::Cos, k: 1, coefficient: 0.2 }];
        assert!(matches!(c.validate(), Err(ConfigError::Endpoint { which: "phi1", .. })));
    }

    #[test]
    fn legendre_polynomials() {
        for &x in &[-0.7, 0.1, 0.9] {
            assert!((legendre_polynomial(2, x) - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-15);
            assert!((legendre_polynomial(3, x) - 0.5 * (5.0 * x * x * x - 3.0 * x)).abs() < 1e-15);
        }
    }
}
