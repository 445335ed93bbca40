//! The foliation of a geodesic by holomorphic discs.
//!
//! For a solution `Φ` the form `π₂*ω + i∂∂̄Φ` has a one-dimensional kernel
//! spanned by `∂/∂z + v`. In the reduced model the base component is
//! `v = −κ (aΦ_tx) / ρ_Φ`, and the leaves are the integral curves
//! `dX/dt = v(t, X)`. Each leaf preserves its moment value, lifts to the
//! Semmes space as a curve on the Lagrangian graphs of the slices, and the
//! leaf ensemble determines `Φ` again.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interp::{node_derivatives, SliceInterp};
use crate::model::{Potential, SurfaceKind, SurfaceModel};
use crate::numeric::{d1_fourth_order, d2_fourth_order, newton_bracketed, trapezoid_weights, RootError};
use crate::solver::{SolverMethod, StripSolution};

/// Default relative density threshold separating regular from singular nodes.
pub const DEFAULT_REGULAR_THRESHOLD: f64 = 1e-6;
/// Leaf spacing above this multiple of both neighbouring spacings is flagged as a gap.
pub const GAP_RATIO: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FoliationError {
    #[error("no node of the strip is regular at threshold {0:e}")]
    EmptyRegularSet(f64),
    #[error("leaf {leaf} left the regular set at t = {t}")]
    LeftRegularSet { leaf: usize, t: f64 },
    #[error("leaf ensemble is not graphical at time node {time} (leaf {leaf})")]
    NonGraphical { time: usize, leaf: usize },
    #[error("leaf step failed: {0}")]
    Step(#[from] RootError),
}

/// Time and space derivatives of a strip solution at every node, computed
/// spectrally in `x` on the torus (local polynomials on the sphere) and from
/// the exact velocity in `t` when the solver supplies one. Densities are the
/// solver's exact ones when available.
#[derive(Debug, Clone)]
pub(crate) struct StripCalculus {
    pub phi_tt: Vec<Vec<f64>>,
    pub phi_tx: Vec<Vec<f64>>,
    pub density: Vec<Vec<f64>>,
}

fn columns_map(rows: &[Vec<f64>], f: impl Fn(&[f64]) -> Vec<f64>) -> Vec<Vec<f64>> {
    let nt = rows.len();
    let nx = rows[0].len();
    let mut out = vec![vec![0.0; nx]; nt];
    let mut col = vec![0.0; nt];
    for i in 0..nx {
        for k in 0..nt {
            col[k] = rows[k][i];
        }
        for (k, v) in f(&col).into_iter().enumerate() {
            out[k][i] = v;
        }
    }
    out
}

impl StripCalculus {
    pub fn new(sol: &StripSolution) -> Self {
        let model = &sol.model;
        let dt = sol.grid.dt();
        let (phi_t, phi_tt) = match &sol.velocity {
            Some(vel) => (vel.clone(), columns_map(vel, |c| d1_fourth_order(c, dt))),
            None => (
                columns_map(&sol.values, |c| d1_fourth_order(c, dt)),
                columns_map(&sol.values, |c| d2_fourth_order(c, dt)),
            ),
        };
        let phi_tx = phi_t.par_iter().map(|row| node_derivatives(model, row).0).collect();
        let density = match &sol.exact_density {
            Some(d) => d.clone(),
            None => sol.values.par_iter().map(|row| crate::interp::smooth_density(model, row)).collect(),
        };
        StripCalculus { phi_tt, phi_tx, density }
    }
}

/// Base component of the kernel field on the strip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafField {
    /// `v(t_k, x_i)`; `NaN` where the node is singular.
    pub v: Vec<Vec<f64>>,
    pub regular: Vec<Vec<bool>>,
    /// Sup of `|v|` over regular nodes.
    pub sup_norm: f64,
    /// `ρ/ρ₀ · |Φ_tt + Φ_tx v|`: the contraction defect of the first row,
    /// scaled by the local density.
    pub defect: Vec<Vec<f64>>,
    pub max_defect: f64,
    /// Node densities of the slices (high-order calculus).
    pub density: Vec<Vec<f64>>,
}

/// Kernel field of `π₂*ω + i∂∂̄Φ`, computed where the slice density exceeds
/// `threshold × max density`.
pub fn leaf_vector(sol: &StripSolution, threshold: f64) -> Result<LeafField, FoliationError> {
    let model = &sol.model;
    let calc = StripCalculus::new(sol);
    let kappa = model.kappa();
    let rho0 = model.rho0();
    let max_rho = calc.density.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = threshold * max_rho;
    let weights: Vec<f64> = model.grid.nodes.iter().map(|&x| model.weight(x)).collect();
    let nt = sol.nt();
    let mut v = vec![vec![f64::NAN; model.len()]; nt];
    let mut regular = vec![vec![false; model.len()]; nt];
    let mut defect = vec![vec![0.0; model.len()]; nt];
    let (mut sup_norm, mut max_defect, mut any): (f64, f64, bool) = (0.0, 0.0, false);
    for k in 0..nt {
        for i in 0..model.len() {
            let rho = calc.density[k][i];
            if rho <= cut {
                continue;
            }
            any = true;
            regular[k][i] = true;
            let vi = -kappa * weights[i] * calc.phi_tx[k][i] / rho;
            v[k][i] = vi;
            sup_norm = sup_norm.max(vi.abs());
            let d = rho / rho0 * (calc.phi_tt[k][i] + calc.phi_tx[k][i] * vi).abs();
            defect[k][i] = d;
            max_defect = max_defect.max(d);
        }
    }
    if !any {
        return Err(FoliationError::EmptyRegularSet(threshold));
    }
    Ok(LeafField { v, regular, sup_norm, defect, max_defect, density: calc.density })
}

/// Regular-set mask of a strip solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularSetReport {
    pub mask: Vec<Vec<bool>>,
    pub fraction: f64,
    /// Smallest slice density over the interior time slices.
    pub min_density_interior: f64,
}

/// Nodes whose slice density exceeds `delta × max density`.
pub fn regular_set(sol: &StripSolution, delta: f64) -> RegularSetReport {
    let dens = sol.slice_densities();
    let max = dens.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let mask: Vec<Vec<bool>> = dens.iter().map(|row| row.iter().map(|&r| r > delta * max).collect()).collect();
    let total = mask.iter().map(|r| r.len()).sum::<usize>();
    let count = mask.iter().flatten().filter(|b| **b).count();
    let min_density_interior =
        dens[1..dens.len() - 1].iter().flatten().copied().fold(f64::INFINITY, f64::min);
    RegularSetReport { mask, fraction: count as f64 / total as f64, min_density_interior }
}

/// Semmes chart of a lift point. The torus has one global chart; the sphere
/// uses the chart centred at the south pole (`x < 0`) or the north pole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemmesChart {
    Global,
    South,
    North,
}

/// One holomorphic leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub id: usize,
    pub start: f64,
    /// Base positions `X(t_k)` (on the universal cover for the torus).
    pub trajectory: Vec<f64>,
    /// `dX/dt` at each time node.
    pub velocity: Vec<f64>,
    /// Moment value `M_t(X(t))` along the leaf.
    pub moment: Vec<f64>,
    /// Semmes fiber coordinate of the lift (real part, imaginary part, chart).
    pub xi_re: Vec<f64>,
    pub xi_im: Vec<f64>,
    pub chart: Vec<SemmesChart>,
    /// `ρ_t(X)/ρ₀` along the leaf.
    pub density_ratio: Vec<f64>,
    /// `Φ(t, X(t))`.
    pub phi: Vec<f64>,
    /// Flux weight `a(X(t))`.
    pub weight: Vec<f64>,
    pub moment_value: f64,
    /// `max_t |M_t(X(t)) − M_0(x₀)|`.
    pub moment_drift: f64,
    /// Distance of the end lifts from the boundary Lagrangian graphs.
    pub boundary_defect: f64,
    /// Largest interior defect of the centred discrete leaf equation.
    pub ode_residual: f64,
    pub area: f64,
    pub truncated: bool,
}

/// Per-slice interpolants used while tracing.
struct SliceData {
    phi: SliceInterp,
    flow: SliceInterp,
    density: SliceInterp,
}

fn slice_data(model: &SurfaceModel, sol: &StripSolution, calc: &StripCalculus) -> Vec<SliceData> {
    let kappa = model.kappa();
    (0..sol.nt())
        .into_par_iter()
        .map(|k| {
            // dS/dt = v/a = −κ Φ_tx / ρ in the flat coordinate.
            let flow: Vec<f64> =
                calc.phi_tx[k].iter().zip(&calc.density[k]).map(|(p, r)| -kappa * p / r).collect();
            SliceData {
                phi: SliceInterp::new(model, &sol.values[k]),
                flow: SliceInterp::new(model, &flow),
                density: SliceInterp::new(model, &calc.density[k]),
            }
        })
        .collect()
}

/// Moment, density and potential of slice `d` at base point `x`.
fn slice_point(model: &SurfaceModel, d: &SliceData, x: f64) -> (f64, f64, f64) {
    let j = d.phi.jet(x);
    let m = model.background_moment(x) + model.kappa() * model.weight(x) * j.d1;
    (m, d.density.value(x), j.value)
}

/// Semmes lift of a point of the Lagrangian graph with moment `m` over `x`.
fn semmes_lift(model: &SurfaceModel, x: f64, m: f64) -> (f64, f64, SemmesChart) {
    match model.kind {
        SurfaceKind::FlatTorus => (m, 0.0, SemmesChart::Global),
        SurfaceKind::RoundSphere => {
            let half = 0.5 * model.total_area;
            let tau = model.flat_coordinate(x);
            if x <= 0.0 {
                ((m + half) / (2.0 * std::f64::consts::PI * tau.exp()), 0.0, SemmesChart::South)
            } else {
                ((half - m) / (2.0 * std::f64::consts::PI * (-tau).exp()), 0.0, SemmesChart::North)
            }
        }
    }
}

fn trace_one(
    sol: &StripSolution,
    slices: &[SliceData],
    cut: f64,
    id: usize,
    x0: f64,
) -> Result<Leaf, FoliationError> {
    let model = &sol.model;
    let nt = sol.nt();
    let dt = sol.grid.dt();
    let times = sol.grid.times();
    let rho0 = model.rho0();
    let mut s = model.flat_coordinate(x0);
    let mut flat = Vec::with_capacity(nt);
    let mut leaf = Leaf {
        id,
        start: x0,
        trajectory: Vec::with_capacity(nt),
        velocity: Vec::with_capacity(nt),
        moment: Vec::with_capacity(nt),
        xi_re: Vec::with_capacity(nt),
        xi_im: Vec::with_capacity(nt),
        chart: Vec::with_capacity(nt),
        density_ratio: Vec::with_capacity(nt),
        phi: Vec::with_capacity(nt),
        weight: Vec::with_capacity(nt),
        moment_value: 0.0,
        moment_drift: 0.0,
        boundary_defect: 0.0,
        ode_residual: 0.0,
        area: 0.0,
        truncated: false,
    };
    let mut flows: Vec<f64> = Vec::with_capacity(nt);
    for k in 0..nt {
        if k > 0 {
            // Implicit trapezoid in the flat coordinate: exact for the
            // straight-line leaves of exact geodesics.
            let prev = flows[k - 1];
            let s_prev = s;
            let f = |z: f64| {
                let x = model.from_flat_coordinate(z);
                let j = slices[k].flow.jet(x);
                (z - s_prev - 0.5 * dt * (prev + j.value), 1.0 - 0.5 * dt * j.d1 * model.weight(x))
            };
            let guess = s_prev + dt * prev;
            let width = 4.0 * dt * (prev.abs() + 1.0);
            s = newton_bracketed(f, guess - width, guess + width, guess, 1e-15)?;
        }
        let x = model.from_flat_coordinate(s);
        let (m, rho, phi) = slice_point(model, &slices[k], x);
        if rho <= cut {
            leaf.truncated = true;
            log::warn!("leaf {id} left the regular set at t = {}", times[k]);
            break;
        }
        let w = slices[k].flow.value(x);
        flows.push(w);
        flat.push(s);
        let (re, im, chart) = semmes_lift(model, x, m);
        leaf.trajectory.push(x);
        leaf.velocity.push(w * model.weight(x));
        leaf.moment.push(m);
        leaf.xi_re.push(re);
        leaf.xi_im.push(im);
        leaf.chart.push(chart);
        leaf.density_ratio.push(rho / rho0);
        leaf.phi.push(phi);
        leaf.weight.push(model.weight(x));
    }
    leaf.moment_value = leaf.moment[0];
    leaf.moment_drift = leaf.moment.iter().map(|m| (m - leaf.moment_value).abs()).fold(0.0, f64::max);
    leaf.ode_residual = (1..flat.len().saturating_sub(1))
        .map(|k| ((flat[k + 1] - flat[k - 1]) / (2.0 * dt) - flows[k]).abs())
        .fold(0.0, f64::max);
    // Distance of the end lifts from the graphs of the boundary data.
    let ends = [(0usize, &sol.boundary.0), (nt - 1, &sol.boundary.1)];
    for (k, psi) in ends {
        if k < leaf.trajectory.len() {
            let d = SliceData {
                phi: SliceInterp::new(model, &psi.values),
                flow: slices[k].flow.clone(),
                density: slices[k].density.clone(),
            };
            let (m, _, _) = slice_point(model, &d, leaf.trajectory[k]);
            let (re, _, _) = semmes_lift(model, leaf.trajectory[k], m);
            leaf.boundary_defect = leaf.boundary_defect.max((re - leaf.xi_re[k]).abs());
        }
    }
    leaf.area = leaf_area(model, sol.grid.geometry.transverse_length(), dt, &leaf);
    Ok(leaf)
}

/// Area of the lifted leaf in the product of the strip metric, `ω`, and the
/// flat Semmes fiber metric: `measure · ∫ (1 + ρ₀ v²/(a P) + |dξ/dt|²) dt`.
fn leaf_area(model: &SurfaceModel, measure: f64, dt: f64, leaf: &Leaf) -> f64 {
    let n = leaf.trajectory.len();
    if n < 2 {
        return 0.0;
    }
    let period = model.angle_period();
    let rho0 = model.rho0();
    let xi_t = if n >= 5 { d1_fourth_order(&leaf.xi_re, dt) } else { vec![0.0; n] };
    let w = trapezoid_weights(n - 1, dt);
    let terms: Vec<f64> = (0..n)
        .map(|k| {
            let base = rho0 * leaf.velocity[k].powi(2) / (leaf.weight[k] * period);
            w[k] * (1.0 + base + xi_t[k].powi(2))
        })
        .collect();
    measure * crate::numeric::pairwise_sum(&terms)
}

/// Trace one leaf from `x0` at `t = 0`.
pub fn trace_leaf(sol: &StripSolution, field: &LeafField, x0: f64) -> Result<Leaf, FoliationError> {
    let calc = StripCalculus::new(sol);
    let slices = slice_data(&sol.model, sol, &calc);
    let cut = regular_cut(field);
    trace_one(sol, &slices, cut, 0, x0)
}

fn regular_cut(field: &LeafField) -> f64 {
    // The smallest density that the field classified as regular bounds the cut from above.
    let mut cut = f64::NEG_INFINITY;
    for (rr, dr) in field.regular.iter().zip(&field.density) {
        for (r, d) in rr.iter().zip(dr) {
            if !r {
                cut = cut.max(*d);
            }
        }
    }
    cut.max(0.0)
}

/// Trace the leaves through `seeds` concurrently; results in seed order.
pub fn trace_ensemble(sol: &StripSolution, field: &LeafField, seeds: &[f64]) -> Result<Vec<Leaf>, FoliationError> {
    let calc = StripCalculus::new(sol);
    let slices = slice_data(&sol.model, sol, &calc);
    let cut = regular_cut(field);
    seeds.par_iter().enumerate().map(|(id, &x0)| trace_one(sol, &slices, cut, id, x0)).collect()
}

/// Trace a leaf from every base node.
pub fn full_ensemble(sol: &StripSolution, field: &LeafField) -> Result<Vec<Leaf>, FoliationError> {
    trace_ensemble(sol, field, &sol.model.grid.nodes.clone())
}

/// Monotonicity of `x₀ ↦ X(t; x₀)` over an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    /// Smallest gap between consecutive leaf positions (including the wrap on the torus).
    pub margin: f64,
    /// Fraction of leaves that reach the time node.
    pub coverage: f64,
}

pub fn gamma_diffeo_check(model: &SurfaceModel, leaves: &[Leaf], time: usize) -> GammaReport {
    let alive: Vec<f64> =
        leaves.iter().filter(|l| l.trajectory.len() > time).map(|l| l.trajectory[time]).collect();
    let coverage = alive.len() as f64 / leaves.len().max(1) as f64;
    let mut margin = alive.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if model.is_periodic() && alive.len() > 1 {
        margin = margin.min(alive[0] + model.grid.length() - alive[alive.len() - 1]);
    }
    GammaReport { margin, coverage }
}

/// Result of rebuilding a strip solution from its leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub solution: StripSolution,
    /// `sup |Φ' − Φ|` against the reference solution.
    pub roundtrip_error: f64,
    /// Largest ratio of a leaf spacing to the larger of its neighbouring spacings.
    pub max_gap_ratio: f64,
    /// `true` when some spacing exceeds [`GAP_RATIO`] times the median.
    pub gap_flag: bool,
}

/// Rebuild `Φ` slice by slice from the lifted leaves.
///
/// At time `t_k` the leaves sweep the Lagrangian graph of the slice: at `X_j`
/// the fiber coordinate gives `Φ_x = (M − M_ω)/(κa)`. Integrating this slope
/// across the leaf points (trapezoid rule) recovers the slice up to a
/// constant, which is fixed by the affinity of the Monge–Ampère energy along
/// geodesics.
pub fn reconstruct_potential(
    reference: &StripSolution,
    leaves: &[Leaf],
    boundary: (&Potential, &Potential),
) -> Result<Reconstruction, FoliationError> {
    let model = &reference.model;
    let nt = reference.nt();
    let times = reference.grid.times();
    let kappa = model.kappa();
    let i0 = model.monge_ampere_energy(&boundary.0.values);
    let i1 = model.monge_ampere_energy(&boundary.1.values);
    let mut values = Vec::with_capacity(nt);
    let mut max_gap_ratio: f64 = 0.0;
    for k in 0..nt {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(leaves.len());
        for l in leaves.iter().filter(|l| l.trajectory.len() > k) {
            let x = l.trajectory[k];
            pts.push((x, (l.moment[k] - model.background_moment(x)) / (kappa * model.weight(x))));
        }
        if let Some(j) = pts.windows(2).position(|w| w[1].0 <= w[0].0) {
            return Err(FoliationError::NonGraphical { time: k, leaf: j + 1 });
        }
        if model.is_periodic() {
            let (x, q) = pts[0];
            if x + model.grid.length() <= pts[pts.len() - 1].0 {
                return Err(FoliationError::NonGraphical { time: k, leaf: 0 });
            }
            pts.push((x + model.grid.length(), q));
        }
        max_gap_ratio = max_gap_ratio.max(local_gap_ratio(&pts, model.is_periodic()));
        // Cumulative trapezoid integral of the slope through the leaf points.
        let mut prim = vec![0.0; pts.len()];
        for j in 1..pts.len() {
            prim[j] = prim[j - 1] + 0.5 * (pts[j].1 + pts[j - 1].1) * (pts[j].0 - pts[j - 1].0);
        }
        let row: Vec<f64> = model
            .grid
            .nodes
            .iter()
            .map(|&x| {
                let x = if model.is_periodic() {
                    pts[0].0 + (x - pts[0].0).rem_euclid(model.grid.length())
                } else {
                    x
                };
                let j = pts.partition_point(|p| p.0 <= x);
                if j == 0 {
                    prim[0] + pts[0].1 * (x - pts[0].0)
                } else if j == pts.len() {
                    prim[j - 1] + pts[j - 1].1 * (x - pts[j - 1].0)
                } else {
                    let (a, b) = (pts[j - 1], pts[j]);
                    let lam = (x - a.0) / (b.0 - a.0);
                    (1.0 - lam) * prim[j - 1] + lam * prim[j]
                }
            })
            .collect();
        let target = (1.0 - times[k]) * i0 + times[k] * i1;
        let shift = (target - model.monge_ampere_energy(&row)) / model.total_area;
        values.push(row.into_iter().map(|v| v + shift).collect::<Vec<f64>>());
    }
    let roundtrip_error = values
        .iter()
        .flatten()
        .zip(reference.values.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let solution = StripSolution::new(
        model.clone(),
        reference.grid.clone(),
        values,
        None,
        (boundary.0.clone(), boundary.1.clone()),
        match reference.method {
            SolverMethod::Legendre => SolverMethod::Legendre,
            m => m,
        },
    );
    Ok(Reconstruction { solution, roundtrip_error, max_gap_ratio, gap_flag: max_gap_ratio > GAP_RATIO })
}

/// Largest ratio of a spacing to its neighbours. A smooth foliation has ratios
/// `1 + O(h)`; a missing leaf merges two spacings and gives a ratio near 2.
fn local_gap_ratio(pts: &[(f64, f64)], periodic: bool) -> f64 {
    let gaps: Vec<f64> = pts.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let n = gaps.len();
    if n < 2 {
        return 1.0;
    }
    (0..n)
        .map(|j| {
            let left = if j > 0 { Some(gaps[j - 1]) } else if periodic { Some(gaps[n - 1]) } else { None };
            let right = if j + 1 < n { Some(gaps[j + 1]) } else if periodic { Some(gaps[0]) } else { None };
            let reference = left.into_iter().chain(right).fold(0.0, f64::max);
            gaps[j] / reference
        })
        .fold(0.0, f64::max)
}

/// Defects of the identity `Ω|_Λ = −i ω_φ` on the Lagrangian graph of `φ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagrangianDefect {
    /// Sup of the real part of the pulled-back holomorphic form.
    pub real_part: f64,
    /// Sup of `|−Im Ω − ω_φ|` relative to the background density.
    pub density_match: f64,
    /// Sphere only: sup over the overlap of `|ξ_S − ξ_N − c/w|`, `c = A/2π`.
    pub chart_overlap: f64,
    pub sup: f64,
}

/// Pull `Ω = dw ∧ dξ` back to the graph of `∂(ρ + φ)` at a generic angle and
/// compare `−Im Ω` with the `ω_φ` density of the model's discrete operator.
///
/// The fiber coordinate and its derivative come from the high-order slice
/// calculus, so the density match measures the second-order error of the
/// discrete density.
pub fn lagrangian_symplectic_check(model: &SurfaceModel, phi: &Potential) -> LagrangianDefect {
    use rustfft::num_complex::Complex64;
    const THETA: f64 = 0.3;
    let interp = SliceInterp::new(model, &phi.values);
    let kappa = model.kappa();
    let rho0 = model.rho0();
    let two_pi = 2.0 * std::f64::consts::PI;
    let i_unit = Complex64::new(0.0, 1.0);
    let (mut real_part, mut density_match, mut chart_overlap): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (idx, &x) in model.grid.nodes.iter().enumerate() {
        let j = interp.jet(x);
        let a = model.weight(x);
        let m = model.background_moment(x) + kappa * a * j.d1;
        let rho = rho0 + kappa * (model.weight_deriv(x) * j.d1 + a * j.d2);
        // Ω(∂_σ, ∂_θ) in the chart coordinate σ, normalized to the dx∧dθ density of ω_φ.
        let (omega, norm) = match model.kind {
            SurfaceKind::FlatTorus => {
                // z = x + iθ, ξ = M(x): Ω = dz ∧ dM.
                let (z_x, z_theta) = (Complex64::new(1.0, 0.0), i_unit);
                let (xi_x, xi_theta) = (Complex64::new(rho, 0.0), Complex64::new(0.0, 0.0));
                (z_x * xi_theta - z_theta * xi_x, 1.0)
            }
            SurfaceKind::RoundSphere => {
                let half = 0.5 * model.total_area;
                let tau = model.flat_coordinate(x);
                let w = Complex64::from_polar(tau.exp(), THETA);
                let f_tau = (m + half) / std::f64::consts::PI;
                let f_tautau = a * rho / std::f64::consts::PI;
                let xi = f_tau / (2.0 * w);
                let xi_tau = (f_tautau - f_tau) / (2.0 * w);
                let xi_theta = -i_unit * xi;
                let xi_north = -(half - m) / (two_pi * w);
                let c = model.total_area / (two_pi * w);
                chart_overlap = chart_overlap.max((xi - xi_north - c).norm() / c.norm());
                (w * xi_theta - i_unit * w * xi_tau, two_pi / a)
            }
        };
        real_part = real_part.max(omega.re.abs() * norm / rho0);
        density_match = density_match.max((-omega.im * norm - phi.density[idx]).abs() / rho0);
    }
    let sup = real_part.max(density_match).max(chart_overlap);
    LagrangianDefect { real_part, density_match, chart_overlap, sup }
}

/// CSV rows `leaf,t,X,xi_re,xi_im,density_ratio` for an ensemble.
pub fn ensemble_csv(leaves: &[Leaf], times: &[f64]) -> String {
    let mut out = String::from("leaf,t,X,xi_re,xi_im,density_ratio\n");
    for l in leaves {
        for k in 0..l.trajectory.len() {
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                l.id, times[k], l.trajectory[k], l.xi_re[k], l.xi_im[k], l.density_ratio[k]
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::observed_orders;
    use crate::solver::{legendre_geodesic, StripGrid};
    use std::f64::consts::PI;

    fn torus(n: usize) -> SurfaceModel {
        SurfaceModel::new(SurfaceKind::FlatTorus, n, 1.0).unwrap()
    }

    fn sphere(n: usize) -> SurfaceModel {
        SurfaceModel::new(SurfaceKind::RoundSphere, n, 4.0 * PI).unwrap()
    }

    fn cos_pot(m: &SurfaceModel, a: f64) -> Potential {
        Potential::new(m, m.grid.nodes.iter().map(|x| a * (2.0 * PI * x).cos()).collect()).unwrap()
    }

    fn sphere_pot(m: &SurfaceModel) -> Potential {
        Potential::new(m, m.grid.nodes.iter().map(|x| 0.08 * x * x + 0.03 * x * x * x).collect()).unwrap()
    }

    fn geodesic(m: &SurfaceModel, target: &Potential) -> StripSolution {
        let grid = StripGrid::cylinder(m, 65).unwrap();
        legendre_geodesic(m, &Potential::zero(m), target, &grid).unwrap()
    }

    fn constant_shift(m: &SurfaceModel) -> StripSolution {
        geodesic(m, &Potential::new(m, vec![0.3; m.len()]).unwrap())
    }

    #[test]
    fn constant_shift_gives_product_foliation() {
        for m in [torus(64), sphere(64)] {
            let sol = constant_shift(&m);
            let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
            assert!(field.sup_norm < 1e-12, "sup |v| = {}", field.sup_norm);
            let leaves = full_ensemble(&sol, &field).unwrap();
            for leaf in &leaves {
                assert!(leaf.trajectory.iter().all(|x| (x - leaf.start).abs() < 1e-12));
                assert!(leaf.density_ratio.iter().all(|h| (h - 1.0).abs() < 1e-12));
                assert!(!leaf.truncated);
            }
            let h = m.grid.spacing;
            for k in 0..sol.nt() {
                let g = gamma_diffeo_check(&m, &leaves, k);
                assert!((g.margin - h).abs() < 1e-12, "margin {} vs h {h}", g.margin);
                assert_eq!(g.coverage, 1.0);
            }
            let boundary = sol.boundary.clone();
            let rec = reconstruct_potential(&sol, &leaves, (&boundary.0, &boundary.1)).unwrap();
            assert!(rec.roundtrip_error <= 1e-12, "roundtrip {}", rec.roundtrip_error);
            assert!(!rec.gap_flag);
            assert_eq!(regular_set(&sol, DEFAULT_REGULAR_THRESHOLD).fraction, 1.0);
        }
    }

    #[test]
    fn torus_leaves_conserve_moment_and_meet_boundary_graphs() {
        let m = torus(256);
        let sol = geodesic(&m, &cos_pot(&m, 0.04));
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        assert!(field.max_defect <= 1e-6, "contraction defect {}", field.max_defect);
        let leaves = full_ensemble(&sol, &field).unwrap();
        for leaf in &leaves {
            assert!(!leaf.truncated);
            assert!(leaf.moment_drift <= 1e-6, "drift {}", leaf.moment_drift);
            assert!(leaf.boundary_defect <= 1e-8, "boundary defect {}", leaf.boundary_defect);
            let first = leaf.density_ratio[0];
            let exact = m.density(&Potential::zero(&m).values)[0] / m.rho0();
            assert!((first - exact).abs() < 1e-12);
        }
        for k in 0..sol.nt() {
            assert!(gamma_diffeo_check(&m, &leaves, k).margin > 0.0);
        }
        assert_eq!(regular_set(&sol, DEFAULT_REGULAR_THRESHOLD).fraction, 1.0);
    }

    #[test]
    fn leaf_speed_is_stable_under_refinement() {
        let coarse = leaf_vector(&geodesic(&torus(128), &cos_pot(&torus(128), 0.04)), 1e-6).unwrap();
        let fine = leaf_vector(&geodesic(&torus(256), &cos_pot(&torus(256), 0.04)), 1e-6).unwrap();
        assert!(((coarse.sup_norm - fine.sup_norm) / fine.sup_norm).abs() <= 0.05);
    }

    #[test]
    fn linear_interpolation_violates_contraction_identity() {
        let m = torus(128);
        let sol = StripSolution::linear_interpolation(
            &m,
            &Potential::zero(&m),
            &cos_pot(&m, 0.04),
            &StripGrid::cylinder(&m, 65).unwrap(),
        );
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        assert!(field.max_defect > 1e-3, "defect {}", field.max_defect);
    }

    #[test]
    fn sphere_round_trip_converges_at_second_order() {
        let mut errors = Vec::new();
        for n in [64, 128, 256] {
            let m = sphere(n);
            let sol = geodesic(&m, &sphere_pot(&m));
            let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
            let leaves = full_ensemble(&sol, &field).unwrap();
            let boundary = sol.boundary.clone();
            let rec = reconstruct_potential(&sol, &leaves, (&boundary.0, &boundary.1)).unwrap();
            assert!(!rec.gap_flag);
            errors.push(rec.roundtrip_error);
        }
        assert!(observed_orders(&errors).iter().all(|p| *p >= 1.8), "errors {errors:?}");
    }

    #[test]
    fn deleting_a_leaf_is_flagged() {
        let m = torus(64);
        let sol = geodesic(&m, &cos_pot(&m, 0.02));
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        let mut leaves = full_ensemble(&sol, &field).unwrap();
        leaves.remove(20);
        let boundary = sol.boundary.clone();
        match reconstruct_potential(&sol, &leaves, (&boundary.0, &boundary.1)) {
            Ok(rec) => assert!(rec.gap_flag, "gap ratio {}", rec.max_gap_ratio),
            Err(e) => assert!(matches!(e, FoliationError::NonGraphical { .. })),
        }
    }

    #[test]
    fn lagrangian_identity_on_torus_and_sphere() {
        let zero = torus(64);
        assert!(lagrangian_symplectic_check(&zero, &Potential::zero(&zero)).sup <= 1e-12);
        let defects: Vec<f64> = [32, 64, 128]
            .iter()
            .map(|&n| {
                let m = torus(n);
                lagrangian_symplectic_check(&m, &cos_pot(&m, 0.04)).sup
            })
            .collect();
        assert!(observed_orders(&defects).iter().all(|p| *p >= 1.8), "defects {defects:?}");
        let s = sphere(128);
        let d = lagrangian_symplectic_check(&s, &Potential::zero(&s));
        assert!(d.sup <= 1e-10, "{d:?}");
    }

    #[test]
    fn ensemble_csv_has_one_row_per_node() {
        let m = torus(32);
        let sol = constant_shift(&m);
        let field = leaf_vector(&sol, DEFAULT_REGULAR_THRESHOLD).unwrap();
        let leaves = trace_ensemble(&sol, &field, &[0.1, 0.6]).unwrap();
        let csv = ensemble_csv(&leaves, &sol.grid.times());
        assert_eq!(csv.lines().count(), 1 + 2 * sol.nt());
    }
}
