//! The verification suite: twelve named checks, each producing a verdict
//! with the measured quantity and its pinned threshold.
//!
//! Instance sizes come from [`AnalysisConfig`](crate::config::AnalysisConfig);
//! pass thresholds are the constants below and are not configurable.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{evaluate_modes, ConfigError, ExperimentConfig, MethodName, Mode, ModeFamily};
use crate::disc::{analyze_ensemble, capacity_report, curvature_trace, pullback_density, DiscError, EnsembleAnalysis};
use crate::foliation::{
    full_ensemble, gamma_diffeo_check, leaf_vector, reconstruct_potential, trace_ensemble, FoliationError, Leaf,
};
use crate::kenergy::{kenergy, kenergy_along, KEnergyError, PathSpec};
use crate::model::{ModelError, Potential, SurfaceKind, SurfaceModel};
use crate::numeric::{fitted_order, observed_orders};
use crate::solver::{
    epsilon_geodesic, epsilon_sweep, hcma_residual, legendre_geodesic, SolverError, StripGrid, StripSolution,
    MIN_TIME_NODES,
};

/// Minimum observed order of the HCMA residual and of the round-trip error.
pub const MIN_ORDER: f64 = 1.8;
/// `sup |Φ_ε − Φ_Legendre| ≤ AGREEMENT_FACTOR · ε`.
pub const AGREEMENT_FACTOR: f64 = 5.0;
pub const KENERGY_TORUS_FLOOR: f64 = -1e-8;
pub const KENERGY_SPHERE_FLOOR: f64 = -1e-6;
pub const MIN_RANDOM_TORUS: usize = 100;
pub const MIN_RANDOM_SPHERE: usize = 50;
/// Smallest density of a random potential, relative to the background.
pub const RANDOM_POSITIVITY_MARGIN: f64 = 0.1;
/// Second differences of `E(t)` must exceed `−CONVEXITY_TOL · (1 + max|E|)`.
pub const CONVEXITY_TOL: f64 = 1e-6;
pub const PATH_RELATIVE_TOL: f64 = 1e-4;
pub const MAX_TRF: f64 = 1e-8;
/// Inequality margins are judged relative to the ensemble scale.
pub const INEQUALITY_TOL: f64 = 1e-6;
pub const QUADRATIC_CONSTANT: f64 = 2.0;
pub const MAX_EXCESS: f64 = 1e-6;
pub const MIN_TEST_SECTIONS: usize = 20;
pub const MAX_AREA_RATIO: f64 = 2.0;
pub const MAX_AREA_DRIFT: f64 = 0.05;
pub const CAPACITY_PRODUCT_TOL: f64 = 1e-10;
/// Errors below this multiple of the data scale count as exact.
pub const EXACT_FLOOR: f64 = 1e-13;
/// Constant shift of the product-foliation instance.
const PRODUCT_SHIFT: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("solver failed: {0}")]
    Solver(#[from] SolverError),
    #[error("foliation failed: {0}")]
    Foliation(#[from] FoliationError),
    #[error("leaf analysis failed: {0}")]
    Disc(#[from] DiscError),
    #[error("K-energy failed: {0}")]
    KEnergy(#[from] KEnergyError),
}

/// A measured value, or a label when no number is meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Measured {
    Value(f64),
    Label(String),
}

impl std::fmt::Display for Measured {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Measured::Value(v) => write!(f, "{v:.3e}"),
            Measured::Label(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub measured: Measured,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    fn new(name: &str, passed: bool, measured: f64, threshold: f64, detail: String) -> Self {
        Verdict { name: name.into(), passed, measured: Measured::Value(measured), threshold, detail }
    }

    fn exact(name: &str, threshold: f64, detail: String) -> Self {
        Verdict { name: name.into(), passed: true, measured: Measured::Label("exact".into()), threshold, detail }
    }

    fn error(name: &str, threshold: f64, err: impl std::fmt::Display) -> Self {
        Verdict {
            name: name.into(),
            passed: false,
            measured: Measured::Label("error".into()),
            threshold,
            detail: err.to_string(),
        }
    }

    /// One human-readable line.
    pub fn line(&self) -> String {
        format!(
            "{} {:<26} measured {:>10}  threshold {:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured.to_string(),
            self.threshold,
            self.detail
        )
    }
}

/// Convergence of an error sequence over successive halvings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSummary {
    pub errors: Vec<f64>,
    pub pairwise: Vec<f64>,
    pub fitted: f64,
    /// All errors are below [`EXACT_FLOOR`] times the data scale.
    pub exact: bool,
    pub decreasing: bool,
}

impl OrderSummary {
    pub fn new(errors: Vec<f64>, scale: f64) -> Self {
        let exact = errors.iter().all(|e| *e <= EXACT_FLOOR * scale);
        let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
        let (pairwise, fitted) =
            if exact { (Vec::new(), f64::INFINITY) } else { (observed_orders(&errors), fitted_order(&errors)) };
        OrderSummary { errors, pairwise, fitted, exact, decreasing }
    }

    pub fn passes(&self, order: f64) -> bool {
        self.exact || (self.decreasing && self.fitted >= order)
    }

    fn describe(&self) -> String {
        let errors: Vec<String> = self.errors.iter().map(|e| format!("{e:.3e}")).collect();
        let pairs: Vec<String> = self.pairwise.iter().map(|p| format!("{p:.2}")).collect();
        format!("errors [{}], pairwise orders [{}]", errors.join(", "), pairs.join(", "))
    }

    fn verdict(&self, name: &str, extra: &str, extra_ok: bool) -> Verdict {
        let detail = format!("{}{extra}", self.describe());
        if self.exact {
            Verdict { passed: extra_ok, ..Verdict::exact(name, MIN_ORDER, detail) }
        } else {
            Verdict::new(name, self.passes(MIN_ORDER) && extra_ok, self.fitted, MIN_ORDER, detail)
        }
    }
}

/// Time nodes giving `dt` equal to the base spacing.
pub fn matched_time_nodes(model: &SurfaceModel) -> usize {
    ((1.0 / model.grid.spacing).round() as usize + 1).max(MIN_TIME_NODES)
}

/// Solve `φ₀ → φ₁(scale)` at base resolution `n`.
pub fn solve_instance(
    config: &ExperimentConfig,
    n: usize,
    nt: usize,
    scale: f64,
    method: MethodName,
) -> Result<StripSolution, PipelineError> {
    let model = config.model_at(n)?;
    let (phi0, phi1) = config.endpoints_on(&model, scale)?;
    let grid = StripGrid::new(&model, nt, config.solver.geometry)?;
    Ok(match method {
        MethodName::Legendre => legendre_geodesic(&model, &phi0, &phi1, &grid)?,
        MethodName::Epsilon => {
            let eps = config.solver.epsilon_schedule.iter().copied().fold(f64::INFINITY, f64::min);
            epsilon_geodesic(&model, &phi0, &phi1, eps, &grid, &config.solver.newton)?
        }
    })
}

/// Leaves through the configured seeds, or through every base node.
pub fn trace_leaves(config: &ExperimentConfig, sol: &StripSolution) -> Result<Vec<Leaf>, PipelineError> {
    let field = leaf_vector(sol, config.foliation.threshold)?;
    Ok(if config.foliation.seeds.is_empty() {
        full_ensemble(sol, &field)?
    } else {
        trace_ensemble(sol, &field, &config.foliation.seeds)?
    })
}

/// The configured experiment: solution, leaves and their analysis.
#[derive(Debug, Clone)]
pub struct Instance {
    pub solution: StripSolution,
    pub leaves: Vec<Leaf>,
    pub analysis: EnsembleAnalysis,
}

pub fn main_instance(config: &ExperimentConfig) -> Result<Instance, PipelineError> {
    let solution =
        solve_instance(config, config.model.base_resolution, config.solver.nt, 1.0, config.solver.method)?;
    instance_from(config, solution)
}

fn instance_from(config: &ExperimentConfig, solution: StripSolution) -> Result<Instance, PipelineError> {
    let leaves = trace_leaves(config, &solution)?;
    let analysis =
        analyze_ensemble(&solution, &leaves, INEQUALITY_TOL, config.analysis.test_sections, config.seed)?;
    Ok(Instance { solution, leaves, analysis })
}

/// Seeded admissible potential: at most four random modes, scaled so that
/// the density stays above [`RANDOM_POSITIVITY_MARGIN`] of the background.
pub fn random_potential(model: &SurfaceModel, rng: &mut ChaCha8Rng) -> Potential {
    loop {
        let count = rng.random_range(1..=4);
        let modes: Vec<Mode> = (0..count)
            .map(|_| {
                let k = rng.random_range(1..=4);
                let family = match model.kind {
                    SurfaceKind::FlatTorus if rng.random_range(0..2) == 0 => ModeFamily::Cos,
                    SurfaceKind::FlatTorus => ModeFamily::Sin,
                    SurfaceKind::RoundSphere => ModeFamily::Legendre,
                };
                Mode { family, k, coefficient: rng.random_range(-1.0..1.0) }
            })
            .collect();
        let shape = evaluate_modes(model, &modes);
        let rho0 = model.rho0();
        let dip = model.density(&shape).iter().map(|r| rho0 - r).fold(0.0, f64::max);
        if dip <= 1e-12 * rho0 {
            continue;
        }
        let s = rng.random_range(0.05..1.0) * (1.0 - RANDOM_POSITIVITY_MARGIN) * rho0 / dip;
        let values = shape.iter().map(|v| s * v).collect();
        return Potential::new(model, values).expect("scaled to stay inside the Kähler cone");
    }
}

/// Failure inside a check, reported in its verdict.
#[derive(Debug, Error)]
#[error("{0}")]
struct CheckError(String);

impl From<PipelineError> for CheckError {
    fn from(e: PipelineError) -> Self {
        CheckError(e.to_string())
    }
}

impl From<KEnergyError> for CheckError {
    fn from(e: KEnergyError) -> Self {
        CheckError(PipelineError::from(e).to_string())
    }
}

/// Lazily computed shared state of a suite run.
struct Context<'a> {
    config: &'a ExperimentConfig,
    main: Option<&'a Result<Instance, PipelineError>>,
}

impl Context<'_> {
    fn main(&self) -> Result<&Instance, CheckError> {
        match self.main {
            Some(Ok(i)) => Ok(i),
            Some(Err(e)) => Err(CheckError(format!("main instance: {e}"))),
            None => unreachable!("main instance requested but not computed"),
        }
    }
}

const MAIN_CHECKS: [&str; 4] = ["kenergy_convexity", "curvature_sign", "inequalities", "max_principle"];

/// Run every enabled check; verdicts come back in suite order.
pub fn verify_suite(config: &ExperimentConfig) -> Vec<Verdict> {
    verify_with(config, None)
}

/// Run the enabled checks, reusing an already computed main instance.
pub fn verify_with(config: &ExperimentConfig, main: Option<&Result<Instance, PipelineError>>) -> Vec<Verdict> {
    let computed;
    let main = match main {
        Some(m) => Some(m),
        None if config.enabled_checks().iter().any(|c| MAIN_CHECKS.contains(c)) => {
            computed = main_instance(config);
            Some(&computed)
        }
        None => None,
    };
    let ctx = Context { config, main };
    config.enabled_checks().par_iter().map(|name| run_check(name, &ctx)).collect()
}

fn run_check(name: &str, ctx: &Context<'_>) -> Verdict {
    let c = ctx.config;
    match name {
        "hcma_residual_convergence" => residual_convergence(c),
        "solver_agreement" => solver_agreement(c),
        "kenergy_torus" => kenergy_positivity(
            name,
            SurfaceKind::FlatTorus,
            1.0,
            c.analysis.random_torus,
            MIN_RANDOM_TORUS,
            KENERGY_TORUS_FLOOR,
            c,
        ),
        "kenergy_sphere" => kenergy_positivity(
            name,
            SurfaceKind::RoundSphere,
            4.0 * std::f64::consts::PI,
            c.analysis.random_sphere,
            MIN_RANDOM_SPHERE,
            KENERGY_SPHERE_FLOOR,
            c,
        ),
        "kenergy_convexity" => kenergy_convexity(ctx),
        "path_independence" => path_independence_check(c),
        "curvature_sign" => curvature_sign(ctx),
        "inequalities" => inequalities(ctx),
        "max_principle" => max_principle(ctx),
        "roundtrip" | "area_uniformity" => refinement_study(name, c),
        "capacity" => capacity_check(c),
        other => unreachable!("unknown check {other} passed validation"),
    }
}

/// Round-off scale of the residual: second differences divide by `h²` at the finest level.
pub fn residual_scale(c: &ExperimentConfig) -> Result<f64, PipelineError> {
    let finest = c.analysis.levels.iter().copied().max().unwrap_or(c.model.base_resolution);
    let h = c.model_at(finest)?.grid.spacing;
    Ok(1.0 / (h * h))
}

fn residual_convergence(c: &ExperimentConfig) -> Verdict {
    let name = "hcma_residual_convergence";
    let run = || -> Result<OrderSummary, PipelineError> {
        let errors = c
            .analysis
            .levels
            .par_iter()
            .map(|&n| {
                let model = c.model_at(n)?;
                let sol = solve_instance(c, n, matched_time_nodes(&model), 1.0, MethodName::Legendre)?;
                Ok(hcma_residual(&sol).sup_norm)
            })
            .collect::<Result<Vec<f64>, PipelineError>>()?;
        Ok(OrderSummary::new(errors, residual_scale(c)?))
    };
    match run() {
        Ok(s) => s.verdict(name, "", true),
        Err(e) => Verdict::error(name, MIN_ORDER, e),
    }
}

/// `sup |Φ_ε − Φ_Legendre|` for each ε of the schedule, largest ε first.
pub fn epsilon_distances(c: &ExperimentConfig) -> Result<Vec<(f64, f64)>, PipelineError> {
    let model = c.model_at(c.analysis.agreement_resolution)?;
    let (phi0, phi1) = c.endpoints_on(&model, 1.0)?;
    let grid = StripGrid::new(&model, c.analysis.agreement_nt, c.solver.geometry)?;
    let reference = legendre_geodesic(&model, &phi0, &phi1, &grid)?;
    let mut eps = c.solver.epsilon_schedule.clone();
    eps.sort_by(|a, b| b.total_cmp(a));
    let sols = epsilon_sweep(&model, &phi0, &phi1, &eps, &grid, &c.solver.newton)?;
    Ok(eps
        .iter()
        .zip(&sols)
        .map(|(&e, s)| {
            let d = s
                .values
                .iter()
                .flatten()
                .zip(reference.values.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            (e, d)
        })
        .collect())
}

fn solver_agreement(c: &ExperimentConfig) -> Verdict {
    let name = "solver_agreement";
    match epsilon_distances(c) {
        Ok(pairs) => {
            let ratio = pairs.iter().map(|(e, d)| d / (AGREEMENT_FACTOR * e)).fold(0.0, f64::max);
            let monotone = pairs.windows(2).all(|w| w[1].1 <= w[0].1);
            let listed: Vec<String> = pairs.iter().map(|(e, d)| format!("ε={e:.0e}: {d:.3e}")).collect();
            let detail = format!(
                "max sup|Φ_ε − Φ|/(5ε); distances [{}]; monotone in ε: {monotone}",
                listed.join(", ")
            );
            Verdict::new(name, ratio <= 1.0 && monotone, ratio, 1.0, detail)
        }
        Err(e) => Verdict::error(name, 1.0, e),
    }
}

fn kenergy_positivity(
    name: &str,
    kind: SurfaceKind,
    area: f64,
    count: usize,
    required: usize,
    floor: f64,
    c: &ExperimentConfig,
) -> Verdict {
    let run = || -> Result<(f64, usize), PipelineError> {
        let model = SurfaceModel::new(kind, c.analysis.kenergy_resolution, area)?;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed ^ kind as u64 ^ 0x6b65_6e65_7267_79);
        let potentials: Vec<Potential> = (0..count).map(|_| random_potential(&model, &mut rng)).collect();
        let path = PathSpec::linear(c.analysis.kenergy_steps);
        let values =
            potentials.par_iter().map(|p| kenergy(&model, p, &path)).collect::<Result<Vec<f64>, _>>()?;
        let (argmin, min) =
            values.iter().copied().enumerate().fold((0, f64::INFINITY), |b, (i, v)| if v < b.1 { (i, v) } else { b });
        Ok((min, argmin))
    };
    match run() {
        Ok((min, argmin)) => {
            let enough = count >= required;
            let detail = format!(
                "min E over {count} seeded potentials (potential #{argmin}); at least {required} required"
            );
            Verdict::new(name, min >= floor && enough, min, floor, detail)
        }
        Err(e) => Verdict::error(name, floor, e),
    }
}

/// Legendre solutions whose K-energy is sampled for convexity: the main
/// instance (re-solved with the Legendre method if needed) and the
/// capacity family.
fn convexity_solutions(ctx: &Context<'_>) -> Result<Vec<StripSolution>, CheckError> {
    let c = ctx.config;
    let main = ctx.main()?;
    let mut sols = Vec::new();
    if c.solver.method == MethodName::Legendre {
        sols.push(main.solution.clone());
    } else {
        sols.push(solve_instance(c, c.model.base_resolution, c.solver.nt, 1.0, MethodName::Legendre)?);
    }
    let family = c
        .analysis
        .capacity_family
        .par_iter()
        .map(|&s| solve_instance(c, c.analysis.capacity_resolution, c.solver.nt, s, MethodName::Legendre))
        .collect::<Result<Vec<_>, _>>()?;
    sols.extend(family);
    Ok(sols)
}

fn kenergy_convexity(ctx: &Context<'_>) -> Verdict {
    let name = "kenergy_convexity";
    let threshold = -CONVEXITY_TOL;
    let run = || -> Result<(f64, usize), CheckError> {
        let sols = convexity_solutions(ctx)?;
        let worst = sols
            .par_iter()
            .map(|s| {
                let report = kenergy_along(s, ctx.config.analysis.kenergy_steps)?;
                Ok(report.min_second_difference() / (1.0 + report.max_abs()))
            })
            .collect::<Result<Vec<f64>, KEnergyError>>()?;
        Ok((worst.iter().copied().fold(f64::INFINITY, f64::min), sols.len()))
    };
    match run() {
        Ok((m, count)) => Verdict::new(
            name,
            m >= threshold,
            m,
            threshold,
            format!("min second difference of E(t) / (1 + max|E|) over {count} Legendre geodesics"),
        ),
        Err(e) => Verdict::error(name, threshold, e),
    }
}

/// Waypoint of the two-leg path: the midpoint of `0 → φ` pushed off the
/// straight line by a mode not present in a single-mode target, scaled to a
/// quarter of the midpoint's density margin. `None` when `φ` is flat.
pub fn path_waypoint(model: &SurfaceModel, phi: &Potential) -> Option<Vec<f64>> {
    let rho0 = model.rho0();
    let lap: Vec<f64> = model.density(&phi.values).iter().map(|r| r - rho0).collect();
    if lap.iter().all(|l| l.abs() <= 1e-12 * rho0) {
        return None;
    }
    let mid: Vec<f64> = phi.values.iter().map(|v| 0.5 * v).collect();
    let margin = model.density(&mid).iter().copied().fold(f64::INFINITY, f64::min);
    let bump = match model.kind {
        SurfaceKind::FlatTorus => Mode { family: ModeFamily::Sin, k: 2, coefficient: 1.0 },
        SurfaceKind::RoundSphere => Mode { family: ModeFamily::Legendre, k: 3, coefficient: 1.0 },
    };
    let shape = evaluate_modes(model, &[bump]);
    let swing = model.density(&shape).iter().map(|r| (r - rho0).abs()).fold(0.0, f64::max);
    let s = 0.25 * margin / swing;
    Some(mid.iter().zip(&shape).map(|(m, b)| m + s * b).collect())
}

/// Relative Linear vs TwoLeg discrepancy of `E(φ₁)` at each step count.
pub fn path_discrepancies(c: &ExperimentConfig) -> Result<Option<(Vec<f64>, f64)>, PipelineError> {
    let model = c.model_at(c.analysis.path_resolution)?;
    let (_, phi1) = c.endpoints_on(&model, 1.0)?;
    let Some(waypoint) = path_waypoint(&model, &phi1) else {
        return Ok(None);
    };
    let rows = c
        .analysis
        .path_steps
        .par_iter()
        .map(|&steps| {
            let linear = kenergy(&model, &phi1, &PathSpec::linear(steps))?;
            let two = kenergy(&model, &phi1, &PathSpec::two_leg(steps, waypoint.clone()))?;
            Ok((linear, (linear - two).abs()))
        })
        .collect::<Result<Vec<(f64, f64)>, KEnergyError>>()?;
    let scale = rows.last().map_or(0.0, |r| r.0.abs());
    Ok(Some((rows.iter().map(|r| r.1 / scale.max(f64::MIN_POSITIVE)).collect(), scale)))
}

fn path_independence_check(c: &ExperimentConfig) -> Verdict {
    let name = "path_independence";
    match path_discrepancies(c) {
        Ok(None) => Verdict::exact(name, PATH_RELATIVE_TOL, "flat endpoint: both paths coincide".into()),
        Ok(Some((rel, e))) => {
            let finest = *rel.last().expect("at least three step counts");
            let orders = OrderSummary::new(rel.clone(), 1.0);
            let within = finest <= PATH_RELATIVE_TOL;
            let steps = c.analysis.path_steps.last().copied().unwrap_or(0);
            let detail = format!(
                "relative |E_linear − E_two_leg| at {steps} steps (E = {e:.6e}); {}; fitted order {:.2} (≥ {MIN_ORDER})",
                orders.describe(),
                orders.fitted
            );
            Verdict::new(name, within && orders.passes(MIN_ORDER), finest, PATH_RELATIVE_TOL, detail)
        }
        Err(e) => Verdict::error(name, PATH_RELATIVE_TOL, e),
    }
}

/// Curvature and capacity of one member `φ₀ → s·φ₁` of the degenerating family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMember {
    pub scale: f64,
    pub leaves: usize,
    #[serde(rename = "max_trF")]
    pub max_trf: f64,
    pub max_capacity: f64,
    pub min_capacity: f64,
}

/// The degenerating family, sorted by scale factor.
pub fn capacity_family(c: &ExperimentConfig) -> Result<Vec<FamilyMember>, PipelineError> {
    let mut out = c
        .analysis
        .capacity_family
        .par_iter()
        .map(|&scale| {
            let sol = solve_instance(c, c.analysis.capacity_resolution, c.solver.nt, scale, MethodName::Legendre)?;
            let leaves = trace_leaves(c, &sol)?;
            let dt = sol.grid.dt();
            let metrics = leaves.par_iter().map(pullback_density).collect::<Result<Vec<_>, _>>()?;
            let max_trf = metrics
                .par_iter()
                .map(|m| Ok(curvature_trace(m, dt)?.into_iter().fold(f64::NEG_INFINITY, f64::max)))
                .collect::<Result<Vec<f64>, DiscError>>()?
                .into_iter()
                .fold(f64::NEG_INFINITY, f64::max);
            let cap = capacity_report(&metrics, dt, sol.grid.geometry.transverse_length())?;
            Ok(FamilyMember { scale, leaves: leaves.len(), max_trf, max_capacity: cap.max, min_capacity: cap.min })
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    out.sort_by(|a, b| a.scale.total_cmp(&b.scale));
    Ok(out)
}

fn curvature_sign(ctx: &Context<'_>) -> Verdict {
    let name = "curvature_sign";
    let run = || -> Result<(f64, usize), CheckError> {
        let main = ctx.main()?;
        let family = capacity_family(ctx.config)?;
        let max = family.iter().map(|f| f.max_trf).fold(main.analysis.max_trf, f64::max);
        let leaves = main.leaves.len() + family.iter().map(|f| f.leaves).sum::<usize>();
        Ok((max, leaves))
    };
    match run() {
        Ok((max, leaves)) => Verdict::new(
            name,
            max <= MAX_TRF,
            max,
            MAX_TRF,
            format!("max trF over {leaves} leaves of the main instance and the capacity family"),
        ),
        Err(e) => Verdict::error(name, MAX_TRF, e),
    }
}

fn inequalities(ctx: &Context<'_>) -> Verdict {
    let name = "inequalities";
    let threshold = -INEQUALITY_TOL;
    match ctx.main() {
        Ok(main) => {
            let a = &main.analysis;
            let min = a.margins.iter().copied().fold(f64::INFINITY, f64::min);
            let cal = &a.calibration;
            let quadratic_ok = cal.largest_quadratic_constant >= QUADRATIC_CONSTANT;
            let detail = format!(
                "min relative margin; margins [{:.3e}, {:.3e}, {:.3e}], C1 = {:.4e}, C2 = {:.4e}, \
                 largest quadratic constant {:.3} (need {QUADRATIC_CONSTANT}), scale {:.3e}",
                a.margins[0], a.margins[1], a.margins[2], cal.c1, cal.c2, cal.largest_quadratic_constant, cal.scale
            );
            Verdict::new(name, min >= threshold && quadratic_ok, min, threshold, detail)
        }
        Err(e) => Verdict::error(name, threshold, e),
    }
}

fn max_principle(ctx: &Context<'_>) -> Verdict {
    let name = "max_principle";
    match ctx.main() {
        Ok(main) => {
            let reports = &main.analysis.max_principle;
            let excess = reports.iter().map(|r| r.excess).fold(f64::NEG_INFINITY, f64::max);
            let inverted = reports.iter().map(|r| r.inverted_excess).fold(f64::NEG_INFINITY, f64::max);
            // trF is a second difference in t, so its round-off level scales with 1/dt².
            let dt = main.solution.grid.dt();
            let flat = main.analysis.curvature.iter().all(|r| r.max_trF.abs() <= EXACT_FLOOR / (dt * dt))
                && reports.iter().all(|r| r.inverted_excess <= EXACT_FLOOR);
            let sections = ctx.config.analysis.test_sections;
            let power = if flat { "not applicable (flat bundle)".to_string() } else { format!("{inverted:.3e}") };
            let detail = format!(
                "max interior excess over {} leaves x {sections} sections (at least {MIN_TEST_SECTIONS}); \
                 inverted-metric probe excess {power}",
                reports.len()
            );
            let passed = excess <= MAX_EXCESS
                && sections >= MIN_TEST_SECTIONS
                && !reports.is_empty()
                && (flat || inverted > 0.0);
            Verdict::new(name, passed, excess, MAX_EXCESS, detail)
        }
        Err(e) => Verdict::error(name, MAX_EXCESS, e),
    }
}

/// Per-level results of the round-trip study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementLevel {
    pub resolution: usize,
    pub roundtrip_error: f64,
    pub gamma_margin: f64,
    pub area_ratio: f64,
    pub areas_below_bound: bool,
}

pub fn refinement_levels(c: &ExperimentConfig) -> Result<Vec<RefinementLevel>, PipelineError> {
    c.analysis
        .roundtrip_levels
        .par_iter()
        .map(|&n| {
            let sol = solve_instance(c, n, c.analysis.study_nt, 1.0, MethodName::Legendre)?;
            let field = leaf_vector(&sol, c.foliation.threshold)?;
            let leaves = full_ensemble(&sol, &field)?;
            let rec = reconstruct_potential(&sol, &leaves, (&sol.boundary.0, &sol.boundary.1))?;
            let gamma_margin = (0..sol.nt())
                .map(|k| {
                    let g = gamma_diffeo_check(&sol.model, &leaves, k);
                    if g.coverage < 1.0 {
                        f64::NEG_INFINITY
                    } else {
                        g.margin
                    }
                })
                .fold(f64::INFINITY, f64::min);
            let areas: Vec<_> = leaves.iter().map(|l| crate::disc::leaf_area_and_bound(&sol, l)).collect();
            let max = areas.iter().map(|a| a.area).fold(f64::NEG_INFINITY, f64::max);
            let min = areas.iter().map(|a| a.area).fold(f64::INFINITY, f64::min);
            Ok(RefinementLevel {
                resolution: n,
                roundtrip_error: rec.roundtrip_error,
                gamma_margin,
                area_ratio: max / min,
                areas_below_bound: areas.iter().all(|a| a.bound_ok),
            })
        })
        .collect()
}

fn refinement_study(name: &str, c: &ExperimentConfig) -> Verdict {
    let levels = match refinement_levels(c) {
        Ok(l) => l,
        Err(e) => {
            let threshold = if name == "roundtrip" { MIN_ORDER } else { MAX_AREA_RATIO };
            return Verdict::error(name, threshold, e);
        }
    };
    if name == "roundtrip" {
        let scale = 1.0 + c.endpoints.phi0.iter().chain(&c.endpoints.phi1).map(|m| m.coefficient.abs()).sum::<f64>();
        let summary = OrderSummary::new(levels.iter().map(|l| l.roundtrip_error).collect(), scale);
        let gamma = levels.iter().map(|l| l.gamma_margin).fold(f64::INFINITY, f64::min);
        let consts: Vec<String> = levels
            .iter()
            .map(|l| {
                let h = c.model_at(l.resolution).map_or(f64::NAN, |m| m.grid.spacing);
                format!("{:.3}", l.roundtrip_error / (h * h))
            })
            .collect();
        summary.verdict(
            name,
            &format!("; error/h² [{}]; min γ margin {gamma:.3e}", consts.join(", ")),
            gamma > 0.0,
        )
    } else {
        let ratio = levels.iter().map(|l| l.area_ratio).fold(0.0, f64::max);
        let last = levels.len() - 1;
        let drift = (levels[last].area_ratio - levels[last - 1].area_ratio).abs() / levels[last - 1].area_ratio;
        let bound = levels.iter().all(|l| l.areas_below_bound);
        let ratios: Vec<String> =
            levels.iter().map(|l| format!("{}: {:.4}", l.resolution, l.area_ratio)).collect();
        let detail = format!(
            "max/min leaf area [{}]; drift {drift:.3e} (≤ {MAX_AREA_DRIFT}); all below C^{{1,1}} bound: {bound}",
            ratios.join(", ")
        );
        Verdict::new(name, ratio <= MAX_AREA_RATIO && drift <= MAX_AREA_DRIFT && bound, ratio, MAX_AREA_RATIO, detail)
    }
}

/// `max |capacity − strip measure|` over the product foliation `φ₀ → φ₀ + const`.
pub fn product_capacity_defect(c: &ExperimentConfig) -> Result<f64, PipelineError> {
    let model = c.model_at(c.analysis.capacity_resolution)?;
    let (phi0, _) = c.endpoints_on(&model, 1.0)?;
    let shifted = Potential::new(&model, phi0.values.iter().map(|v| v + PRODUCT_SHIFT).collect())?;
    let grid = StripGrid::new(&model, c.solver.nt, c.solver.geometry)?;
    let sol = legendre_geodesic(&model, &phi0, &shifted, &grid)?;
    let leaves = trace_leaves(c, &sol)?;
    let metrics = leaves.iter().map(pullback_density).collect::<Result<Vec<_>, _>>()?;
    let measure = grid.geometry.transverse_length();
    let report = capacity_report(&metrics, grid.dt(), measure)?;
    Ok(report.capacities.iter().map(|k| (k - measure).abs()).fold(0.0, f64::max))
}

fn capacity_check(c: &ExperimentConfig) -> Verdict {
    let name = "capacity";
    let run = || -> Result<(f64, Vec<FamilyMember>), PipelineError> {
        Ok((product_capacity_defect(c)?, capacity_family(c)?))
    };
    match run() {
        Ok((defect, family)) => {
            let caps: Vec<f64> = family.iter().map(|f| f.max_capacity).collect();
            let all_equal = caps.iter().all(|k| (k - caps[0]).abs() <= CAPACITY_PRODUCT_TOL);
            let increasing = caps.windows(2).all(|w| w[1] > w[0]);
            let listed: Vec<String> = family.iter().map(|f| format!("{}: {:.6}", f.scale, f.max_capacity)).collect();
            let trend = if all_equal { "equal (flat family)" } else if increasing { "increasing" } else { "NOT increasing" };
            let detail = format!("product defect; family max capacity [{}] {trend}", listed.join(", "));
            Verdict::new(
                name,
                defect <= CAPACITY_PRODUCT_TOL && (all_equal || increasing),
                defect,
                CAPACITY_PRODUCT_TOL,
                detail,
            )
        }
        Err(e) => Verdict::error(name, CAPACITY_PRODUCT_TOL, e),
    }
}
