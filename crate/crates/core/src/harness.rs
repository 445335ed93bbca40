//! Experiment runner: the pipeline model → solve → foliate → analyze →
//! verify, the convergence study, and the artifact files they produce.
//!
//! Everything is computed in memory first; files are written only once the
//! pipeline has finished, so a failed run never leaves partial tables.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, MethodName};
use crate::disc::{curvature_csv, pullback_density, AreaBound, CapacityReport, Calibration, MaxPrincipleReport};
use crate::foliation::{ensemble_csv, full_ensemble, leaf_vector, reconstruct_potential};
use crate::kenergy::kenergy_along;
use crate::model::{Measure, NodeArray, SurfaceKind};
use crate::numeric::observed_orders;
use crate::solver::{hcma_residual, SolutionHeader, StripSolution};
use crate::suite::{
    epsilon_distances, main_instance, matched_time_nodes, path_discrepancies, solve_instance, verify_with, Instance,
    PipelineError, Verdict, EXACT_FLOOR,
};

/// Format version of the artifact layout.
pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Process exit code: 2 for configuration errors, 3 for solver and I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Pipeline(PipelineError::Config(_)) => 2,
            HarnessError::Pipeline(_) | HarnessError::Io { .. } => 3,
        }
    }
}

/// One output file with its content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub artifact_version: u32,
    pub verb: String,
    pub config: ExperimentConfig,
    pub files: Vec<FileEntry>,
    /// `None` when no checks were run.
    pub all_passed: Option<bool>,
}

/// Named file contents, in write order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub manifest: Manifest,
    pub files: Vec<(String, String)>,
    pub verdicts: Vec<Verdict>,
}

impl RunArtifacts {
    fn assemble(verb: &str, config: &ExperimentConfig, files: Vec<(String, String)>, verdicts: Vec<Verdict>) -> Self {
        let entries = files
            .iter()
            .map(|(name, body)| FileEntry { name: name.clone(), bytes: body.len(), sha256: sha256_hex(body) })
            .collect();
        let all_passed = (!verdicts.is_empty()).then(|| verdicts.iter().all(|v| v.passed));
        let manifest = Manifest {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            artifact_version: ARTIFACT_VERSION,
            verb: verb.into(),
            config: config.clone(),
            files: entries,
            all_passed,
        };
        RunArtifacts { manifest, files, verdicts }
    }

    /// `0` when every verdict passed (or none ran), `1` otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.verdicts.iter().all(|v| v.passed) {
            0
        } else {
            1
        }
    }

    /// Write every file and then `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        write_file(dir, "", "")?;
        for (name, body) in &self.files {
            write_file(dir, name, body)?;
        }
        write_file(dir, "manifest.json", &to_json(&self.manifest))
    }
}

pub fn sha256_hex(body: &str) -> String {
    Sha256::digest(body.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
    s.push('\n');
    s
}

/// Create `dir` (empty `name`) or write `dir/name`.
fn write_file(dir: &Path, name: &str, body: &str) -> Result<(), HarnessError> {
    if name.is_empty() {
        return std::fs::create_dir_all(dir).map_err(|source| HarnessError::Io { path: dir.to_owned(), source });
    }
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|source| HarnessError::Io { path, source })
}

/// Solution dump: header plus the coordinates of the CSV rows and columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionJson {
    pub kind: SurfaceKind,
    pub area: f64,
    pub header: SolutionHeader,
    pub times: Vec<f64>,
    pub nodes: Vec<f64>,
    pub min_density: f64,
}

fn solution_json(sol: &StripSolution) -> String {
    to_json(&SolutionJson {
        kind: sol.model.kind,
        area: sol.model.total_area,
        header: sol.header(),
        times: sol.grid.times(),
        nodes: sol.model.grid.nodes.clone(),
        min_density: sol.min_density(),
    })
}

/// Ensemble-level results of the analysis stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub leaves: usize,
    #[serde(rename = "max_trF")]
    pub max_trf: f64,
    pub margins: [f64; 3],
    pub calibration: Calibration,
    pub max_principle: Vec<MaxPrincipleReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityJson {
    pub strip_measure: f64,
    pub report: CapacityReport,
    pub areas: Vec<AreaBound>,
}

/// Tables of the configured instance.
fn instance_files(config: &ExperimentConfig, inst: &Instance) -> Result<Vec<(String, String)>, PipelineError> {
    let sol = &inst.solution;
    let times = sol.grid.times();
    let metrics = inst.leaves.par_iter().map(pullback_density).collect::<Result<Vec<_>, _>>()?;
    let kenergy = kenergy_along(sol, config.analysis.kenergy_steps)?;
    let a = &inst.analysis;
    let summary = AnalysisSummary {
        leaves: inst.leaves.len(),
        max_trf: a.max_trf,
        margins: a.margins,
        calibration: a.calibration,
        max_principle: a.max_principle.clone(),
    };
    let capacity = CapacityJson {
        strip_measure: sol.grid.geometry.transverse_length(),
        report: a.capacity.clone(),
        areas: a.areas.clone(),
    };
    Ok(vec![
        ("solution.csv".into(), sol.to_csv()),
        ("solution.json".into(), solution_json(sol)),
        ("kenergy.csv".into(), kenergy.to_csv()),
        ("leaves.csv".into(), ensemble_csv(&inst.leaves, &times)),
        ("curvature.csv".into(), curvature_csv(&a.curvature, &metrics, &times)),
        ("capacity.json".into(), to_json(&capacity)),
        ("analysis.json".into(), to_json(&summary)),
    ])
}

/// Full pipeline plus the enabled checks.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    config.validate()?;
    let inst = main_instance(config)?;
    let mut files = instance_files(config, &inst)?;
    let main = Ok(inst);
    let verdicts = verify_with(config, Some(&main));
    files.push(("verdicts.json".into(), to_json(&verdicts)));
    Ok(RunArtifacts::assemble("run", config, files, verdicts))
}

/// The enabled checks only.
pub fn verify(config: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    config.validate()?;
    let verdicts = verify_with(config, None);
    let files = vec![("verdicts.json".into(), to_json(&verdicts))];
    Ok(RunArtifacts::assemble("verify", config, files, verdicts))
}

/// Endpoints, the solved strip and its leaves, without analysis or checks.
pub fn dump(config: &ExperimentConfig) -> Result<RunArtifacts, HarnessError> {
    config.validate()?;
    let sol = solve_instance(config, config.model.base_resolution, config.solver.nt, 1.0, config.solver.method)?;
    let leaves = crate::suite::trace_leaves(config, &sol)?;
    let m = &sol.model;
    let (phi0, phi1) = (&sol.boundary.0, &sol.boundary.1);
    let files = vec![
        ("phi0.json".into(), to_json(&NodeArray::new(m, &phi0.values))),
        ("phi1.json".into(), to_json(&NodeArray::new(m, &phi1.values))),
        ("phi0.csv".into(), NodeArray::new(m, &phi0.values).to_csv(m)),
        ("phi1.csv".into(), NodeArray::new(m, &phi1.values).to_csv(m)),
        ("solution.csv".into(), sol.to_csv()),
        ("solution.json".into(), solution_json(&sol)),
        ("leaves.csv".into(), ensemble_csv(&leaves, &sol.grid.times())),
    ];
    Ok(RunArtifacts::assemble("dump", config, files, Vec::new()))
}

/// Diagnostic written next to the outputs when the pipeline fails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureReport {
    pub error: String,
    pub exit_code: i32,
    pub config: ExperimentConfig,
}

pub fn write_failure(dir: &Path, config: &ExperimentConfig, err: &HarnessError) -> Result<(), HarnessError> {
    write_file(dir, "", "")?;
    let report = FailureReport { error: err.to_string(), exit_code: err.exit_code(), config: config.clone() };
    write_file(dir, "failure.json", &to_json(&report))
}

/// One row of the convergence table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub quantity: String,
    /// Base resolution, Simpson step count or ε, depending on the quantity.
    pub parameter: f64,
    pub value: f64,
    /// Observed order against the previous row, `"exact"`, or empty.
    pub order: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
    /// First failure; rows after it were not computed.
    pub failure: Option<String>,
}

impl ConvergenceTable {
    /// CSV with header `quantity,parameter,value,order,status`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,parameter,value,order,status\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6e},{},{}\n", r.quantity, r.parameter, r.value, r.order, r.status));
        }
        out
    }

    /// Rows for one quantity; `rate` converts consecutive values into an order.
    fn push_series(&mut self, quantity: &str, series: &[(f64, f64)], scale: f64, rate: impl Fn(usize) -> String) {
        for (j, &(parameter, value)) in series.iter().enumerate() {
            let order = if j == 0 {
                String::new()
            } else if value <= EXACT_FLOOR * scale && series[j - 1].1 <= EXACT_FLOOR * scale {
                "exact".into()
            } else {
                rate(j)
            };
            self.rows.push(ConvergenceRow {
                quantity: quantity.into(),
                parameter,
                value,
                order,
                status: "ok".into(),
            });
        }
    }

    fn fail(&mut self, quantity: &str, parameter: f64, err: &PipelineError) {
        self.rows.push(ConvergenceRow {
            quantity: quantity.into(),
            parameter,
            value: f64::NAN,
            order: String::new(),
            status: "failed".into(),
        });
        self.failure = Some(format!("{quantity} at {parameter}: {err}"));
    }

    /// Values of the leading levels that succeeded, or the first failure.
    fn level_series(
        &mut self,
        quantity: &str,
        levels: &[usize],
        f: impl Fn(usize) -> Result<f64, PipelineError> + Sync,
    ) -> Option<Vec<(f64, f64)>> {
        let results: Vec<_> = levels.par_iter().map(|&n| f(n)).collect();
        let mut series = Vec::new();
        for (&n, r) in levels.iter().zip(results) {
            match r {
                Ok(v) => series.push((n as f64, v)),
                Err(e) => {
                    self.push_series(quantity, &series, 1.0, |j| log2_order(&series, j));
                    self.fail(quantity, n as f64, &e);
                    return None;
                }
            }
        }
        Some(series)
    }
}

fn log2_order(series: &[(f64, f64)], j: usize) -> String {
    let values: Vec<f64> = series.iter().map(|s| s.1).collect();
    format!("{:.3}", observed_orders(&values)[j - 1])
}

/// Observed orders of the residual, the round trip, the Gauss–Bonnet
/// defect and path independence over `levels`, plus the ε sweep.
pub fn convergence_study(config: &ExperimentConfig, levels: &[usize]) -> Result<ConvergenceTable, HarnessError> {
    config.validate()?;
    if levels.len() < 3 || levels.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(ConfigError::Invalid(format!("levels {levels:?} must be at least three doublings")).into());
    }
    for &n in levels {
        config.model_at(n).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    let mut table = ConvergenceTable { rows: Vec::new(), failure: None };

    let residual = |n: usize| -> Result<f64, PipelineError> {
        let model = config.model_at(n)?;
        let sol = solve_instance(config, n, matched_time_nodes(&model), 1.0, MethodName::Legendre)?;
        Ok(hcma_residual(&sol).sup_norm)
    };
    let Some(series) = table.level_series("hcma_residual", levels, residual) else { return Ok(table) };
    let finest = config.model_at(*levels.last().expect("three levels")).map_err(PipelineError::from)?.grid.spacing;
    table.push_series("hcma_residual", &series, 1.0 / (finest * finest), |j| log2_order(&series, j));

    let roundtrip = |n: usize| -> Result<f64, PipelineError> {
        let sol = solve_instance(config, n, config.analysis.study_nt, 1.0, MethodName::Legendre)?;
        let field = leaf_vector(&sol, config.foliation.threshold)?;
        let leaves = full_ensemble(&sol, &field)?;
        Ok(reconstruct_potential(&sol, &leaves, (&sol.boundary.0, &sol.boundary.1))?.roundtrip_error)
    };
    let Some(series) = table.level_series("roundtrip_error", levels, roundtrip) else { return Ok(table) };
    table.push_series("roundtrip_error", &series, 1.0, |j| log2_order(&series, j));

    let gauss_bonnet = |n: usize| -> Result<f64, PipelineError> {
        let model = config.model_at(n)?;
        let (_, phi1) = config.endpoints_on(&model, 1.0)?;
        let s = model.scalar_curvature(&phi1)?;
        let total = model.integrate(&s, Measure::OmegaPhi(&phi1))?;
        Ok((total - model.average_scalar() * model.total_area).abs())
    };
    let Some(series) = table.level_series("gauss_bonnet_defect", levels, gauss_bonnet) else { return Ok(table) };
    table.push_series("gauss_bonnet_defect", &series, 1.0, |j| log2_order(&series, j));

    match path_discrepancies(config) {
        Ok(Some((rel, _))) => {
            let series: Vec<(f64, f64)> =
                config.analysis.path_steps.iter().zip(&rel).map(|(&s, &d)| (s as f64, d)).collect();
            table.push_series("path_independence", &series, 1.0, |j| log2_order(&series, j));
        }
        Ok(None) => {
            let series: Vec<(f64, f64)> = config.analysis.path_steps.iter().map(|&s| (s as f64, 0.0)).collect();
            table.push_series("path_independence", &series, 1.0, |_| "exact".into());
        }
        Err(e) => {
            table.fail("path_independence", config.analysis.path_steps[0] as f64, &e);
            return Ok(table);
        }
    }

    match epsilon_distances(config) {
        Ok(pairs) => {
            let rate = |j: usize| {
                let ((e0, d0), (e1, d1)) = (pairs[j - 1], pairs[j]);
                format!("{:.3}", (d0 / d1).ln() / (e0 / e1).ln())
            };
            table.push_series("epsilon_distance", &pairs, 1.0, rate);
        }
        Err(e) => table.fail("epsilon_distance", config.solver.epsilon_schedule[0], &e),
    }
    Ok(table)
}

/// The convergence table as artifacts (`convergence.csv`, `convergence.json`).
pub fn convergence_artifacts(config: &ExperimentConfig, table: &ConvergenceTable) -> RunArtifacts {
    let files = vec![("convergence.csv".into(), table.to_csv()), ("convergence.json".into(), to_json(table))];
    RunArtifacts::assemble("converge", config, files, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn convergence_rejects_non_doubling_levels() {
        let c = ExperimentConfig::standard_torus();
        let err = convergence_study(&c, &[64, 96, 128]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn convergence_csv_layout() {
        let mut t = ConvergenceTable { rows: Vec::new(), failure: None };
        let series = [(64.0, 4e-4), (128.0, 1e-4), (256.0, 0.0)];
        t.push_series("q", &series[..2], 1.0, |j| log2_order(&series, j));
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "quantity,parameter,value,order,status");
        assert_eq!(lines[2], "q,128,1.000000e-4,2.000,ok");
    }
}
