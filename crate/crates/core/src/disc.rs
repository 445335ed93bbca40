//! Analysis along single leaves: the pulled-back fiber metric and its
//! curvature, capacity, the differential inequalities satisfied by the
//! metric, leaf areas, and the maximum principle for holomorphic sections.
//!
//! A leaf is a holomorphic disc `f: Σ → M` over the strip `Σ` with strip
//! coordinate `z = t + iy`. All data are invariant in `y`, so the strip
//! Laplacian of a leaf quantity is its second difference in `t`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::foliation::Leaf;
use crate::numeric::{pairwise_sum, simpson_weights, trapezoid_weights};
use crate::solver::{StripGeometry, StripSolution};

/// Minimum number of interior time nodes for curvature and inequalities.
pub const MIN_INTERIOR_NODES: usize = 5;
/// Upper end of the calibration search interval.
pub const CALIBRATION_LIMIT: f64 = 1e3;
/// Densities below this ratio make a leaf degenerate for capacity.
pub const DEGENERATE_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscError {
    #[error("leaf {leaf} left the regular set at time node {time}")]
    LeftRegularSet { leaf: usize, time: usize },
    #[error("leaf {leaf} has only {interior} interior nodes (need {MIN_INTERIOR_NODES})")]
    TooShort { leaf: usize, interior: usize },
    #[error("leaf {leaf} is degenerate: density ratio {ratio:e} at time node {time}")]
    DegenerateLeaf { leaf: usize, time: usize, ratio: f64 },
    #[error("no constant in [0, {CALIBRATION_LIMIT}] satisfies inequality {inequality}; worst node: leaf {leaf}, time node {time}")]
    CalibrationFailed { inequality: u8, leaf: usize, time: usize },
    #[error("empty leaf ensemble")]
    EmptyEnsemble,
}

/// Pulled-back density ratio `h = ρ_Φ(t, X)/ρ₀` along a leaf and the fiber
/// metric of `E = π₂*TM` it induces.
///
/// In the holomorphic frame `∂/∂(s + iθ)` of the flat coordinate the
/// background metric is proportional to `a(x)`, so the fiber metric of `E` is
/// `g = h·a(X)`. On the torus `a ≡ 1` and `g = h`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafBundleMetric {
    pub leaf_id: usize,
    pub h: Vec<f64>,
    pub log_h: Vec<f64>,
    /// `log g = log h + log a(X)`.
    pub log_g: Vec<f64>,
    /// `Φ(t, X(t))`, the potential restricted to the leaf.
    pub phi_leaf: Vec<f64>,
    pub truncated: bool,
}

/// Restrict the slice density ratio to a leaf.
pub fn pullback_density(leaf: &Leaf) -> Result<LeafBundleMetric, DiscError> {
    if let Some(time) = leaf.density_ratio.iter().position(|h| !(*h > 0.0)) {
        return Err(DiscError::LeftRegularSet { leaf: leaf.id, time });
    }
    Ok(LeafBundleMetric {
        leaf_id: leaf.id,
        h: leaf.density_ratio.clone(),
        log_h: leaf.density_ratio.iter().map(|h| h.ln()).collect(),
        log_g: leaf.density_ratio.iter().zip(&leaf.weight).map(|(h, a)| (h * a).ln()).collect(),
        phi_leaf: leaf.phi.clone(),
        truncated: leaf.truncated,
    })
}

/// Strip Laplacian of a `y`-invariant sequence at its interior nodes.
fn strip_laplacian(f: &[f64], dt: f64) -> Vec<f64> {
    f.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]) / (dt * dt)).collect()
}

/// Curvature `trF = −Δ log g` of the fiber metric at the interior nodes of a leaf.
pub fn curvature_trace(metric: &LeafBundleMetric, dt: f64) -> Result<Vec<f64>, DiscError> {
    let interior = metric.h.len().saturating_sub(2);
    if interior < MIN_INTERIOR_NODES {
        return Err(DiscError::TooShort { leaf: metric.leaf_id, interior });
    }
    Ok(strip_laplacian(&metric.log_g, dt).into_iter().map(|v| -v).collect())
}

/// Curvature and inequality margins along one leaf.
///
/// Margins are minima over interior nodes of
/// 1. `Δ(log h + C₁φ)`,
/// 2. `−trF − Δ(log h + C₂φ)`,
/// 3. `−Δ trF − 2 trF²` (evaluated where `Δ trF` is defined),
///
/// where `φ` is the potential restricted to the leaf.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub leaf_id: usize,
    /// `trF` at interior time nodes `1..nt−1`.
    #[serde(rename = "trF")]
    pub trF: Vec<f64>,
    #[serde(rename = "max_trF")]
    pub max_trF: f64,
    pub ineq1_margin: f64,
    pub ineq2_margin: f64,
    pub ineq3_margin: f64,
    #[serde(rename = "C1_used")]
    pub C1_used: f64,
    #[serde(rename = "C2_used")]
    pub C2_used: f64,
    /// `1 + max |term|` over the leaf; tolerances are relative to it.
    pub scale: f64,
    /// Per-node terms, for tracing: `Δ log h`, `Δφ`, `Δ trF` (the last one
    /// has two fewer entries).
    pub lap_log_h: Vec<f64>,
    pub lap_phi: Vec<f64>,
    pub lap_trf: Vec<f64>,
}

impl CurvatureReport {
    /// `−Δ trF − c·trF²` margin for a given quadratic constant.
    pub fn quadratic_margin(&self, c: f64) -> f64 {
        self.lap_trf
            .iter()
            .zip(&self.trF[1..])
            .map(|(l, f)| -l - c * f * f)
            .fold(f64::INFINITY, f64::min)
    }

    /// Largest `c` for which `−Δ trF − c·trF² ≥ −tol·scale` at every node.
    pub fn largest_quadratic_constant(&self, tol: f64, scale: f64) -> f64 {
        self.lap_trf
            .iter()
            .zip(&self.trF[1..])
            .filter(|(_, f)| **f != 0.0)
            .map(|(l, f)| (-l + tol * scale) / (f * f))
            .fold(f64::INFINITY, f64::min)
    }

    fn margin1(&self, c1: f64) -> (f64, usize) {
        argmin(self.lap_log_h.iter().zip(&self.lap_phi).map(|(l, p)| l + c1 * p))
    }

    fn margin2(&self, c2: f64) -> (f64, usize) {
        argmin(self.trF.iter().zip(&self.lap_log_h).zip(&self.lap_phi).map(|((f, l), p)| -f - (l + c2 * p)))
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> (f64, usize) {
    values.enumerate().fold((f64::INFINITY, 0), |(m, j), (i, v)| if v < m { (v, i) } else { (m, j) })
}

/// Curvature and the three inequality margins along one leaf.
pub fn inequality_margins(metric: &LeafBundleMetric, dt: f64, c1: f64, c2: f64) -> Result<CurvatureReport, DiscError> {
    let trf = curvature_trace(metric, dt)?;
    let lap_log_h = strip_laplacian(&metric.log_h, dt);
    let lap_phi = strip_laplacian(&metric.phi_leaf, dt);
    let lap_trf = strip_laplacian(&trf, dt);
    let scale = 1.0
        + lap_log_h
            .iter()
            .chain(&lap_trf)
            .map(|v| v.abs())
            .chain(trf.iter().map(|f| f * f))
            .fold(0.0, f64::max);
    let max_trf = trf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut report = CurvatureReport {
        leaf_id: metric.leaf_id,
        trF: trf,
        max_trF: max_trf,
        ineq1_margin: 0.0,
        ineq2_margin: 0.0,
        ineq3_margin: 0.0,
        C1_used: c1,
        C2_used: c2,
        scale,
        lap_log_h,
        lap_phi,
        lap_trf,
    };
    report.ineq1_margin = report.margin1(c1).0;
    report.ineq2_margin = report.margin2(c2).0;
    report.ineq3_margin = report.quadratic_margin(2.0);
    Ok(report)
}

/// Common scale of an ensemble: the largest per-leaf scale. Leaves with
/// almost no curvature have exact margins near zero, so their tolerance is
/// measured against the size of the terms across the whole foliation.
pub fn ensemble_scale(reports: &[CurvatureReport]) -> f64 {
    reports.iter().map(|r| r.scale).fold(1.0, f64::max)
}

/// Smallest constants making inequalities (1) and (2) hold within `tol × scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub c1: f64,
    pub c2: f64,
    pub tol: f64,
    /// Ensemble scale the tolerance is relative to.
    pub scale: f64,
    /// Largest quadratic constant passing inequality (3) over the ensemble.
    pub largest_quadratic_constant: f64,
}

/// Bisection for the smallest `C ∈ [0, CALIBRATION_LIMIT]` passing `ok`.
fn smallest_passing(ok: impl Fn(f64) -> bool) -> Option<f64> {
    if ok(0.0) {
        return Some(0.0);
    }
    if !ok(CALIBRATION_LIMIT) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, CALIBRATION_LIMIT);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi)
}

/// Calibrate `C₁, C₂` over an ensemble of curvature reports.
pub fn calibrate_constants(reports: &[CurvatureReport], tol: f64) -> Result<Calibration, DiscError> {
    if reports.is_empty() {
        return Err(DiscError::EmptyEnsemble);
    }
    let scale = ensemble_scale(reports);
    let passes1 = |c: f64| reports.iter().all(|r| r.margin1(c).0 >= -tol * scale);
    let passes2 = |c: f64| reports.iter().all(|r| r.margin2(c).0 >= -tol * scale);
    let worst = |margin: &dyn Fn(&CurvatureReport) -> (f64, usize)| {
        let r = reports.iter().min_by(|a, b| margin(a).0.total_cmp(&margin(b).0)).expect("non-empty");
        (r.leaf_id, margin(r).1 + 1)
    };
    let c1 = smallest_passing(passes1).ok_or_else(|| {
        let (leaf, time) = worst(&|r: &CurvatureReport| r.margin1(CALIBRATION_LIMIT));
        DiscError::CalibrationFailed { inequality: 1, leaf, time }
    })?;
    let c2 = smallest_passing(passes2).ok_or_else(|| {
        let (leaf, time) = worst(&|r: &CurvatureReport| r.margin2(CALIBRATION_LIMIT));
        DiscError::CalibrationFailed { inequality: 2, leaf, time }
    })?;
    let largest_quadratic_constant =
        reports.iter().map(|r| r.largest_quadratic_constant(tol, scale)).fold(f64::INFINITY, f64::min);
    Ok(Calibration { c1, c2, tol, scale, largest_quadratic_constant })
}

/// Per-leaf capacities `measure · ∫₀¹ 1/h dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityReport {
    pub capacities: Vec<f64>,
    pub max: f64,
    pub min: f64,
    /// Ids of leaves skipped because they were truncated.
    pub truncated: Vec<usize>,
}

/// Capacity of one leaf over the strip (cylinder measure is the period, 1).
pub fn capacity(metric: &LeafBundleMetric, dt: f64, measure: f64) -> Result<f64, DiscError> {
    if metric.truncated {
        return Err(DiscError::LeftRegularSet { leaf: metric.leaf_id, time: metric.h.len() });
    }
    if let Some((time, &ratio)) = metric.h.iter().enumerate().find(|(_, h)| **h < DEGENERATE_THRESHOLD) {
        return Err(DiscError::DegenerateLeaf { leaf: metric.leaf_id, time, ratio });
    }
    let n = metric.h.len() - 1;
    let w = if n % 2 == 0 { simpson_weights(n, dt) } else { trapezoid_weights(n, dt) };
    let terms: Vec<f64> = w.iter().zip(&metric.h).map(|(w, h)| w / h).collect();
    Ok(measure * pairwise_sum(&terms))
}

/// Capacities of an ensemble; truncated leaves are listed, not integrated.
pub fn capacity_report(metrics: &[LeafBundleMetric], dt: f64, measure: f64) -> Result<CapacityReport, DiscError> {
    let mut capacities = Vec::with_capacity(metrics.len());
    let mut truncated = Vec::new();
    for m in metrics {
        if m.truncated {
            truncated.push(m.leaf_id);
            continue;
        }
        capacities.push(capacity(m, dt, measure)?);
    }
    if capacities.is_empty() {
        return Err(DiscError::EmptyEnsemble);
    }
    let max = capacities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = capacities.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CapacityReport { capacities, max, min, truncated })
}

/// Leaf area against the bound `C·(strip area + ∫ f*ω)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaBound {
    pub area: f64,
    /// `measure · ∫ (1 + ρ₀v²/(aP)) dt`: strip area plus the leaf's ω-integral.
    pub base_area: f64,
    /// `C = 1 + κ·|Φ|_{C^{1,1}}/ρ₀`.
    pub constant: f64,
    pub bound: f64,
    pub bound_ok: bool,
}

pub fn leaf_area_and_bound(sol: &StripSolution, leaf: &Leaf) -> AreaBound {
    let model = &sol.model;
    let measure = sol.grid.geometry.transverse_length();
    let n = leaf.trajectory.len();
    let w = trapezoid_weights(n.saturating_sub(1), sol.grid.dt());
    let terms: Vec<f64> = (0..n)
        .map(|k| w[k] * (1.0 + model.rho0() * leaf.velocity[k].powi(2) / (leaf.weight[k] * model.angle_period())))
        .collect();
    let base_area = measure * pairwise_sum(&terms);
    let constant = 1.0 + model.kappa() * sol.c11 / model.rho0();
    let bound = constant * base_area;
    AreaBound { area: leaf.area, base_area, constant, bound, bound_ok: leaf.area <= bound }
}

/// Half-width of the test rectangle on a cylinder: one period, centred.
pub const CYLINDER_HALF_WIDTH: f64 = 0.5;
/// Slopes of the exponential-type quadratic tests.
const TEST_SLOPES: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 1.0, 1.5, 2.0];

/// A holomorphic test polynomial `p = Σ c_k u^k` in `u = z − 1/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPolynomial {
    pub label: String,
    /// Complex coefficients `(re, im)` in increasing degree.
    pub coefficients: Vec<(f64, f64)>,
}

impl TestPolynomial {
    fn log_abs_sq(&self, t: f64, y: f64) -> f64 {
        let (ur, ui) = (t - 0.5, y);
        let (mut re, mut im) = (0.0, 0.0);
        for &(cr, ci) in self.coefficients.iter().rev() {
            let (r, i) = (re * ur - im * ui, re * ui + im * ur);
            re = r + cr;
            im = i + ci;
        }
        (re * re + im * im).ln()
    }
}

/// `count` test polynomials: monomials `u^k`, the second-order Taylor
/// polynomials of `exp(a u + a²u²/8)` for a ladder of slopes `±a`, then
/// seeded random cubics.
///
/// The Taylor tests tilt and bend `log|p|²` just enough to turn a strictly
/// concave profile into an interior maximum, which is what gives the
/// inverted-metric control its power.
pub fn test_polynomials(count: usize, seed: u64) -> Vec<TestPolynomial> {
    let mut out = Vec::with_capacity(count);
    for k in 0..4usize {
        let mut coefficients = vec![(0.0, 0.0); k + 1];
        coefficients[k] = (1.0, 0.0);
        out.push(TestPolynomial { label: format!("monomial_{k}"), coefficients });
    }
    for a in TEST_SLOPES.iter().flat_map(|a| [*a, -a]) {
        let c = a * a / 8.0;
        out.push(TestPolynomial {
            label: format!("taylor_{a}"),
            coefficients: vec![(1.0, 0.0), (a, 0.0), (0.5 * a * a + c, 0.0)],
        });
    }
    out.truncate(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < count {
        let coefficients = (0..4).map(|_| (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0))).collect();
        out.push(TestPolynomial { label: format!("random_{}", out.len()), coefficients });
    }
    out
}

/// Outcome of the discrete maximum principle on one leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxPrincipleReport {
    pub leaf_id: usize,
    /// Largest `(interior max − boundary max)/(1 + range)` of `log|s|²`.
    pub excess: f64,
    pub worst_test: String,
    /// The same statistic with the fiber metric `g` replaced by `1/g`.
    pub inverted_excess: f64,
}

fn interior_excess(test: &TestPolynomial, log_metric: &[f64], times: &[f64], ys: &[f64]) -> f64 {
    let (nt, ny) = (times.len(), ys.len());
    let (mut interior, mut boundary) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (k, &t) in times.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            let v = test.log_abs_sq(t, y) + log_metric[k];
            if !v.is_finite() {
                continue;
            }
            lo = lo.min(v);
            hi = hi.max(v);
            if k == 0 || k == nt - 1 || j == 0 || j == ny - 1 {
                boundary = boundary.max(v);
            } else {
                interior = interior.max(v);
            }
        }
    }
    (interior - boundary) / (1.0 + (hi - lo))
}

/// Check that `log|s|² = log|p|² + log g` attains its maximum on the boundary of the
/// test rectangle `[0, 1] × [−w, w]` for each test polynomial. Any such
/// rectangle is a disc inside the strip, so the leaf restricts to a
/// holomorphic disc over it; cylinders use one centred period.
pub fn max_principle_check(
    metric: &LeafBundleMetric,
    times: &[f64],
    geometry: StripGeometry,
    tests: &[TestPolynomial],
) -> MaxPrincipleReport {
    let half = match geometry {
        StripGeometry::Cylinder => CYLINDER_HALF_WIDTH,
        StripGeometry::Rectangle { half_width } => half_width,
    };
    let dt = times[1] - times[0];
    let ny = 2 * (half / dt).round().max(2.0) as usize + 1;
    let ys: Vec<f64> = (0..ny).map(|j| -half + 2.0 * half * j as f64 / (ny - 1) as f64).collect();
    let inverted: Vec<f64> = metric.log_g.iter().map(|l| -l).collect();
    let (mut excess, mut worst_test, mut inverted_excess) = (f64::NEG_INFINITY, String::new(), f64::NEG_INFINITY);
    for test in tests {
        let e = interior_excess(test, &metric.log_g, times, &ys);
        if e > excess {
            excess = e;
            worst_test = test.label.clone();
        }
        inverted_excess = inverted_excess.max(interior_excess(test, &inverted, times, &ys));
    }
    MaxPrincipleReport { leaf_id: metric.leaf_id, excess, worst_test, inverted_excess }
}

/// Everything computed per leaf, merged in leaf-id order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleAnalysis {
    pub curvature: Vec<CurvatureReport>,
    pub calibration: Calibration,
    pub capacity: CapacityReport,
    pub areas: Vec<AreaBound>,
    pub max_principle: Vec<MaxPrincipleReport>,
    /// Largest `trF` over all interior leaf nodes.
    #[serde(rename = "max_trF")]
    pub max_trf: f64,
    /// Smallest margins with the calibrated constants, divided by the ensemble scale.
    pub margins: [f64; 3],
}

/// Run the per-leaf analyses concurrently and calibrate over the ensemble.
pub fn analyze_ensemble(
    sol: &StripSolution,
    leaves: &[Leaf],
    tol: f64,
    test_count: usize,
    seed: u64,
) -> Result<EnsembleAnalysis, DiscError> {
    if leaves.is_empty() {
        return Err(DiscError::EmptyEnsemble);
    }
    let dt = sol.grid.dt();
    let times = sol.grid.times();
    let tests = test_polynomials(test_count, seed);
    let metrics = leaves.par_iter().map(pullback_density).collect::<Result<Vec<_>, _>>()?;
    let uncalibrated =
        metrics.par_iter().map(|m| inequality_margins(m, dt, 0.0, 0.0)).collect::<Result<Vec<_>, _>>()?;
    let calibration = calibrate_constants(&uncalibrated, tol)?;
    let curvature = metrics
        .par_iter()
        .map(|m| inequality_margins(m, dt, calibration.c1, calibration.c2))
        .collect::<Result<Vec<_>, _>>()?;
    let capacity = capacity_report(&metrics, dt, sol.grid.geometry.transverse_length())?;
    let areas = leaves.par_iter().map(|l| leaf_area_and_bound(sol, l)).collect();
    let max_principle = metrics
        .par_iter()
        .filter(|m| !m.truncated)
        .map(|m| max_principle_check(m, &times[..m.h.len()], sol.grid.geometry, &tests))
        .collect();
    let max_trf = curvature.iter().map(|r| r.max_trF).fold(f64::NEG_INFINITY, f64::max);
    let mut margins = [f64::INFINITY; 3];
    for r in &curvature {
        margins[0] = margins[0].min(r.ineq1_margin / calibration.scale);
        margins[1] = margins[1].min(r.ineq2_margin / calibration.scale);
        margins[2] = margins[2].min(r.ineq3_margin / calibration.scale);
    }
    Ok(EnsembleAnalysis { curvature, calibration, capacity, areas, max_principle, max_trf, margins })
}

/// CSV rows `leaf,t,h,trF,margin1,margin2,margin3` over interior leaf nodes;
/// the quadratic margin is empty where `Δ trF` is undefined.
pub fn curvature_csv(reports: &[CurvatureReport], metrics: &[LeafBundleMetric], times: &[f64]) -> String {
    let mut out = String::from("leaf,t,h,trF,margin1,margin2,margin3\n");
    for (r, m) in reports.iter().zip(metrics) {
        for (j, f) in r.trF.iter().enumerate() {
            let k = j + 1;
            let m1 = r.lap_log_h[j] + r.C1_used * r.lap_phi[j];
            let m2 = -f - (r.lap_log_h[j] + r.C2_used * r.lap_phi[j]);
            let m3 = if j >= 1 && j <= r.lap_trf.len() {
                format!("{:.17e}", -r.lap_trf[j - 1] - 2.0 * f * f)
            } else {
                String::new()
            };
            out.push_str(&format!("{},{:.17e},{:.17e},{f:.17e},{m1:.17e},{m2:.17e},{m3}\n", r.leaf_id, times[k], m.h[k]));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::foliation::{full_ensemble, leaf_vector, DEFAULT_REGULAR_THRESHOLD};
    use crate::model::{Potential, SurfaceKind, SurfaceModel};
    use crate::solver::{legendre_geodesic, StripGrid};
    use std::f64::consts::PI;

    fn torus_geodesic(n: usize, nt: usize, amplitude: f64) -> (StripSolution, Vec<Leaf>) {
        let m = SurfaceModel::new(SurfaceKind::FlatTorus, n, 1.0).unwrap();
        let target = m.grid.nodes.iter().map(|x| amplitude * (2.0 * PI * x).cos()).collect();
        let sol = legendre_geodesic(
            &m,
            &Potential::zero(&m),
            &Potential::new(&m, target).unwrap(),
            &StripGrid::cylinder(&m, nt).unwrap(),
        )
        .unwrap();
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        let leaves = full_ensemble(&sol, &field).unwrap();
        (sol, leaves)
    }

    fn product(kind: SurfaceKind, area: f64) -> (StripSolution, Vec<Leaf>) {
        let m = SurfaceModel::new(kind, 64, area).unwrap();
        let sol = legendre_geodesic(
            &m,
            &Potential::zero(&m),
            &Potential::new(&m, vec![0.7; m.len()]).unwrap(),
            &StripGrid::cylinder(&m, 33).unwrap(),
        )
        .unwrap();
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        let leaves = full_ensemble(&sol, &field).unwrap();
        (sol, leaves)
    }

    #[test]
    fn product_foliation_is_flat() {
        for (kind, area) in [(SurfaceKind::FlatTorus, 1.0), (SurfaceKind::RoundSphere, 4.0 * PI)] {
            let (sol, leaves) = product(kind, area);
            let dt = sol.grid.dt();
            let times = sol.grid.times();
            let tests = test_polynomials(20, 1);
            let metrics: Vec<_> = leaves.iter().map(|l| pullback_density(l).unwrap()).collect();
            for (leaf, metric) in leaves.iter().zip(&metrics) {
                assert!(metric.h.iter().all(|h| (h - 1.0).abs() < 1e-12));
                let report = inequality_margins(metric, dt, 0.0, 0.0).unwrap();
                assert!(report.trF.iter().all(|f| f.abs() < 1e-9), "{:?}", report.max_trF);
                assert!(report.ineq1_margin.abs() < 1e-9);
                let cap = capacity(metric, dt, 1.0).unwrap();
                assert!((cap - 1.0).abs() <= 1e-10, "capacity {cap}");
                let area_bound = leaf_area_and_bound(&sol, leaf);
                assert!((area_bound.area - 1.0).abs() < 1e-12);
                assert!(area_bound.bound_ok);
                let constant = max_principle_check(metric, &times, sol.grid.geometry, &tests[..1]);
                assert!(constant.excess.abs() < 1e-9, "excess {}", constant.excess);
            }
            let reports: Vec<_> = metrics.iter().map(|m| inequality_margins(m, dt, 0.0, 0.0).unwrap()).collect();
            assert_eq!(calibrate_constants(&reports, 1e-6).unwrap().c1, 0.0);
        }
    }

    #[test]
    fn bundle_metric_matches_endpoint_densities() {
        let (sol, leaves) = torus_geodesic(128, 33, 0.04);
        let m = &sol.model;
        let rho0 = m.density(&sol.boundary.0.values);
        let rho1 = crate::interp::SliceInterp::new(m, &sol.exact_density.as_ref().unwrap()[sol.nt() - 1]);
        for (i, leaf) in leaves.iter().enumerate() {
            let metric = pullback_density(leaf).unwrap();
            assert!((metric.h[0] - rho0[i] / m.rho0()).abs() < 1e-12);
            let end = *leaf.trajectory.last().unwrap();
            assert!((metric.h[sol.nt() - 1] - rho1.value(end) / m.rho0()).abs() < 1e-12);
        }
    }

    #[test]
    fn torus_geodesic_satisfies_curvature_estimates() {
        let (sol, leaves) = torus_geodesic(256, 33, 0.04);
        let analysis = analyze_ensemble(&sol, &leaves, 1e-6, 20, 11).unwrap();
        assert!(analysis.max_trf <= 1e-8, "max trF {}", analysis.max_trf);
        assert!(analysis.margins.iter().all(|m| *m >= -1e-6), "{:?}", analysis.margins);
        assert!(analysis.calibration.largest_quadratic_constant >= 2.0);
        for mp in &analysis.max_principle {
            assert!(mp.excess <= 1e-6, "leaf {} excess {}", mp.leaf_id, mp.excess);
        }
        assert!(analysis.max_principle.iter().any(|mp| mp.inverted_excess > 0.0));
        assert!(analysis.areas.iter().all(|a| a.bound_ok));
    }

    #[test]
    fn capacities_are_bracketed_by_the_density() {
        let (sol, leaves) = torus_geodesic(128, 33, 0.03);
        for leaf in &leaves {
            let metric = pullback_density(leaf).unwrap();
            let cap = capacity(&metric, sol.grid.dt(), 1.0).unwrap();
            let lo = metric.h.iter().map(|h| 1.0 / h).fold(f64::INFINITY, f64::min);
            let hi = metric.h.iter().map(|h| 1.0 / h).fold(0.0, f64::max);
            assert!(lo - 1e-12 <= cap && cap <= hi + 1e-12);
        }
    }

    #[test]
    fn capacity_grows_as_the_endpoint_degenerates() {
        let caps: Vec<f64> = [0.01, 0.02, 0.03, 0.04, 0.045]
            .iter()
            .map(|&a| {
                let (sol, leaves) = torus_geodesic(128, 33, a);
                let metrics: Vec<_> = leaves.iter().map(|l| pullback_density(l).unwrap()).collect();
                capacity_report(&metrics, sol.grid.dt(), 1.0).unwrap().max
            })
            .collect();
        assert!(caps.windows(2).all(|w| w[1] > w[0]), "{caps:?}");
    }

    #[test]
    fn linear_interpolation_curvature_takes_both_signs() {
        let m = SurfaceModel::new(SurfaceKind::FlatTorus, 128, 1.0).unwrap();
        let target = Potential::new(&m, m.grid.nodes.iter().map(|x| 0.04 * (2.0 * PI * x).cos()).collect()).unwrap();
        let grid = StripGrid::cylinder(&m, 33).unwrap();
        let sol = StripSolution::linear_interpolation(&m, &Potential::zero(&m), &target, &grid);
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        let leaves = full_ensemble(&sol, &field).unwrap();
        let trf: Vec<f64> = leaves
            .iter()
            .flat_map(|l| curvature_trace(&pullback_density(l).unwrap(), grid.dt()).unwrap())
            .collect();
        assert!(trf.iter().any(|f| *f > 1e-3) && trf.iter().any(|f| *f < -1e-3));
    }

    #[test]
    fn short_leaves_are_rejected() {
        let metric = LeafBundleMetric {
            leaf_id: 3,
            h: vec![1.0; 6],
            log_h: vec![0.0; 6],
            log_g: vec![0.0; 6],
            phi_leaf: vec![0.0; 6],
            truncated: false,
        };
        assert_eq!(curvature_trace(&metric, 0.2), Err(DiscError::TooShort { leaf: 3, interior: 4 }));
        let degenerate = LeafBundleMetric { h: vec![1.0, 1e-12, 1.0, 1.0, 1.0, 1.0, 1.0], ..metric };
        assert!(matches!(capacity(&degenerate, 0.1, 1.0), Err(DiscError::DegenerateLeaf { time: 1, .. })));
    }

    #[test]
    fn calibration_reports_failure() {
        let metric = LeafBundleMetric {
            leaf_id: 0,
            h: vec![1.0; 9],
            log_h: vec![0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
            log_g: vec![0.0; 9],
            phi_leaf: vec![0.0; 9],
            truncated: false,
        };
        let report = inequality_margins(&metric, 0.125, 0.0, 0.0).unwrap();
        assert!(matches!(
            calibrate_constants(&[report], 1e-6),
            Err(DiscError::CalibrationFailed { inequality: 1, time: 3, .. })
        ));
    }

    #[test]
    fn test_polynomials_are_seeded() {
        let a = test_polynomials(20, 5);
        assert_eq!(a.len(), 20);
        assert_eq!(a, test_polynomials(20, 5));
        assert_ne!(a, test_polynomials(20, 6));
    }

    #[test]
    fn curvature_csv_rows() {
        let (sol, leaves) = product(SurfaceKind::FlatTorus, 1.0);
        let metrics: Vec<_> = leaves.iter().take(2).map(|l| pullback_density(l).unwrap()).collect();
        let reports: Vec<_> = metrics.iter().map(|m| inequality_margins(m, sol.grid.dt(), 0.0, 0.0).unwrap()).collect();
        let csv = curvature_csv(&reports, &metrics, &sol.grid.times());
        assert_eq!(csv.lines().count(), 1 + 2 * (sol.nt() - 2));
    }
}
