//! Damped Newton continuation for the regularized equation
//! `Φ_tt ρ_Φ − κ (aΦ_tx)²/a = ε ρ₀`.
//!
//! The unknowns are the interior time slices. The Jacobian couples each slice
//! only to its two neighbours, so every Newton step is a block-tridiagonal
//! solve (block Thomas elimination with dense LU on the slice blocks).

use log::{debug, info};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{defect_rows, SolverError, SolverMethod, StripGrid, StripSolution};
use crate::model::{Potential, SurfaceModel};

/// Newton and continuation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewtonConfig {
    /// Converged when the sup of the scaled defect drops below this value.
    pub tol: f64,
    /// Newton iterations per continuation stage.
    pub max_iter: usize,
    /// Step halvings allowed per iteration.
    pub max_halvings: usize,
    /// First continuation value of ε.
    pub start: f64,
    /// Geometric ratio between continuation stages.
    pub ratio: f64,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        NewtonConfig { tol: 1e-10, max_iter: 50, max_halvings: 30, start: 0.1, ratio: 10.0 }
    }
}

/// Continuation values `start, start/ratio, …` down to (and ending at) `target`.
fn schedule(target: f64, cfg: &NewtonConfig) -> Vec<f64> {
    let mut stages = Vec::new();
    let mut e = cfg.start;
    while e > target * (1.0 + 1e-12) {
        stages.push(e);
        e /= cfg.ratio;
    }
    stages.push(target);
    stages
}

fn sup(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
}

/// Dense matrix of a linear node operator.
fn operator_matrix(n: usize, apply: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = apply(&e);
        for (i, v) in col.into_iter().enumerate() {
            m[(i, j)] = v;
        }
        e[j] = 0.0;
    }
    m
}

struct Operators {
    laplacian: DMatrix<f64>,
    node_flux: DMatrix<f64>,
    weights: Vec<f64>,
}

impl Operators {
    fn new(model: &SurfaceModel) -> Self {
        let n = model.len();
        Operators {
            laplacian: operator_matrix(n, |f| model.laplacian(f)),
            node_flux: operator_matrix(n, |f| model.node_flux(f)),
            weights: model.grid.nodes.iter().map(|&x| model.weight(x)).collect(),
        }
    }
}

/// Newton correction `δ` with `J δ = −F` for the interior slices.
fn newton_step(
    model: &SurfaceModel,
    ops: &Operators,
    values: &[Vec<f64>],
    defect: &[Vec<f64>],
    dt: f64,
) -> Option<Vec<Vec<f64>>> {
    let n = model.len();
    let blocks = values.len() - 2;
    let kappa = model.kappa();
    let scale = 1.0 / model.rho0();
    let mut g_mats: Vec<DMatrix<f64>> = Vec::with_capacity(blocks);
    let mut g_vecs: Vec<DVector<f64>> = Vec::with_capacity(blocks);
    for j in 0..blocks {
        let k = j + 1;
        let rho = model.density(&values[k]);
        let dphi: Vec<f64> = values[k + 1].iter().zip(&values[k - 1]).map(|(p, m)| (p - m) / (2.0 * dt)).collect();
        let w = model.node_flux(&dphi);
        let mut diag = DMatrix::zeros(n, n);
        let mut lower = DMatrix::zeros(n, n);
        let mut upper = DMatrix::zeros(n, n);
        for i in 0..n {
            let phi_tt = (values[k + 1][i] - 2.0 * values[k][i] + values[k - 1][i]) / (dt * dt);
            let cross = kappa * w[i] / (ops.weights[i] * dt);
            for c in 0..n {
                let nf = ops.node_flux[(i, c)];
                diag[(i, c)] = scale * phi_tt * kappa * ops.laplacian[(i, c)];
                lower[(i, c)] = scale * cross * nf;
                upper[(i, c)] = -scale * cross * nf;
            }
            diag[(i, i)] -= scale * 2.0 * rho[i] / (dt * dt);
            lower[(i, i)] += scale * rho[i] / (dt * dt);
            upper[(i, i)] += scale * rho[i] / (dt * dt);
        }
        let mut rhs = DVector::from_iterator(n, defect[j].iter().map(|v| -v));
        if j > 0 {
            diag -= &lower * &g_mats[j - 1];
            rhs -= &lower * &g_vecs[j - 1];
        }
        let lu = diag.lu();
        g_vecs.push(lu.solve(&rhs)?);
        if j + 1 < blocks {
            g_mats.push(lu.solve(&upper)?);
        }
    }
    let mut x = vec![DVector::zeros(n); blocks];
    x[blocks - 1] = g_vecs[blocks - 1].clone();
    for j in (0..blocks - 1).rev() {
        x[j] = &g_vecs[j] - &g_mats[j] * &x[j + 1];
    }
    Some(x.into_iter().map(|v| v.iter().copied().collect()).collect())
}

/// Solve one continuation stage in place. Returns the number of iterations.
fn newton_solve(
    model: &SurfaceModel,
    ops: &Operators,
    values: &mut [Vec<f64>],
    dt: f64,
    eps: f64,
    cfg: &NewtonConfig,
) -> Result<usize, SolverError> {
    let mut defect = defect_rows(model, values, dt, eps);
    let mut norm = sup(&defect);
    for iter in 0..cfg.max_iter {
        if norm < cfg.tol {
            return Ok(iter);
        }
        let step = newton_step(model, ops, values, &defect, dt)
            .ok_or(SolverError::NewtonDiverged { epsilon: eps, iterations: iter, residual: norm })?;
        let mut lambda = 1.0;
        let mut accepted = false;
        let mut last_margin = f64::INFINITY;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<Vec<f64>> = values
                .iter()
                .enumerate()
                .map(|(k, row)| {
                    if k == 0 || k + 1 == values.len() {
                        row.clone()
                    } else {
                        row.iter().zip(&step[k - 1]).map(|(v, d)| v + lambda * d).collect()
                    }
                })
                .collect();
            let margin = trial[1..trial.len() - 1]
                .iter()
                .map(|r| model.is_kahler(r).margin)
                .fold(f64::INFINITY, f64::min);
            last_margin = margin;
            if margin > 0.0 {
                let trial_defect = defect_rows(model, &trial, dt, eps);
                let trial_norm = sup(&trial_defect);
                if trial_norm < norm {
                    values.clone_from_slice(&trial);
                    defect = trial_defect;
                    norm = trial_norm;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        debug!("ε = {eps:.1e}, iteration {iter}: residual {norm:.3e}, step {lambda}");
        if !accepted {
            if last_margin <= 0.0 {
                return Err(SolverError::ConeExit { epsilon: eps, margin: last_margin });
            }
            return Err(SolverError::NewtonDiverged { epsilon: eps, iterations: iter + 1, residual: norm });
        }
    }
    if norm < cfg.tol {
        Ok(cfg.max_iter)
    } else {
        Err(SolverError::NewtonDiverged { epsilon: eps, iterations: cfg.max_iter, residual: norm })
    }
}

fn check_inputs(model: &SurfaceModel, phi0: &Potential, phi1: &Potential, grid: &StripGrid) -> Result<(Potential, Potential), SolverError> {
    if grid.base != model.grid || phi0.len() != model.len() || phi1.len() != model.len() {
        return Err(SolverError::GridMismatch);
    }
    Ok((Potential::new(model, phi0.values.clone())?, Potential::new(model, phi1.values.clone())?))
}

/// Linear interpolation of the endpoints plus the exact solution `εt(t−1)/2`
/// of the x-independent problem. Convex combinations of admissible slices are
/// admissible and x-independent shifts leave densities unchanged, so the guess
/// never needs projecting back into the cone.
fn initial_guess(phi0: &Potential, phi1: &Potential, grid: &StripGrid, eps: f64) -> Vec<Vec<f64>> {
    grid.times()
        .iter()
        .map(|&t| {
            phi0.values
                .iter()
                .zip(&phi1.values)
                .map(|(a, b)| (1.0 - t) * a + t * b + 0.5 * eps * t * (t - 1.0))
                .collect()
        })
        .collect()
}

/// Solve the ε-regularized problem by continuation from `cfg.start` down to `eps`.
pub fn epsilon_geodesic(
    model: &SurfaceModel,
    phi0: &Potential,
    phi1: &Potential,
    eps: f64,
    grid: &StripGrid,
    cfg: &NewtonConfig,
) -> Result<StripSolution, SolverError> {
    Ok(epsilon_sweep(model, phi0, phi1, &[eps], grid, cfg)?.pop().expect("one stage requested"))
}

/// Solutions for each requested ε (in decreasing order), sharing one continuation path.
pub fn epsilon_sweep(
    model: &SurfaceModel,
    phi0: &Potential,
    phi1: &Potential,
    epsilons: &[f64],
    grid: &StripGrid,
    cfg: &NewtonConfig,
) -> Result<Vec<StripSolution>, SolverError> {
    let (phi0, phi1) = check_inputs(model, phi0, phi1, grid)?;
    let mut targets = epsilons.to_vec();
    if let Some(&bad) = targets.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
        return Err(SolverError::BadEpsilon(bad));
    }
    targets.sort_by(|a, b| b.total_cmp(a));
    let ops = Operators::new(model);
    let dt = grid.dt();
    let smallest = *targets.last().expect("non-empty ε list");
    let mut stages = schedule(smallest, cfg);
    stages.extend(targets.iter().copied());
    stages.sort_by(|a, b| b.total_cmp(a));
    stages.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
    let mut values = initial_guess(&phi0, &phi1, grid, stages[0]);
    let mut out = Vec::with_capacity(targets.len());
    for &eps in &stages {
        let iterations = newton_solve(model, &ops, &mut values, dt, eps, cfg)?;
        info!("ε = {eps:.1e} converged in {iterations} Newton iterations");
        if targets.iter().any(|t| (t - eps).abs() <= 1e-12 * eps) {
            out.push(StripSolution::new(
                model.clone(),
                grid.clone(),
                values.clone(),
                None,
                (phi0.clone(), phi1.clone()),
                SolverMethod::Epsilon(eps),
            ));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SurfaceKind;
    use crate::solver::legendre_geodesic;
    use std::f64::consts::PI;

    #[test]
    fn schedule_is_geometric() {
        let s = schedule(1e-3, &NewtonConfig::default());
        assert_eq!(s.len(), 3);
        assert!((s[2] - 1e-3).abs() < 1e-18);
        assert_eq!(schedule(0.5, &NewtonConfig::default()), vec![0.5]);
    }

    #[test]
    fn block_solve_matches_dense_jacobian() {
        let m = SurfaceModel::new(SurfaceKind::FlatTorus, 16, 1.0).unwrap();
        let g = StripGrid::cylinder(&m, 17).unwrap();
        let p1 = Potential::new(&m, m.grid.nodes.iter().map(|x| 0.02 * (2.0 * PI * x).cos()).collect()).unwrap();
        let z = Potential::zero(&m);
        let values = initial_guess(&z, &p1, &g, 0.1);
        let eps = 0.05;
        let ops = Operators::new(&m);
        let f0 = defect_rows(&m, &values, g.dt(), eps);
        let step = newton_step(&m, &ops, &values, &f0, g.dt()).unwrap();
        // Linearized prediction: F(Φ + hδ) ≈ F(Φ) + hJδ = (1 − h)F(Φ).
        let h = 1e-6;
        let moved: Vec<Vec<f64>> = values
            .iter()
            .enumerate()
            .map(|(k, r)| {
                if k == 0 || k == 16 {
                    r.clone()
                } else {
                    r.iter().zip(&step[k - 1]).map(|(v, d)| v + h * d).collect()
                }
            })
            .collect();
        let f1 = defect_rows(&m, &moved, g.dt(), eps);
        for (a, b) in f1.iter().flatten().zip(f0.iter().flatten()) {
            assert!((a - (1.0 - h) * b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn trivial_data_give_x_independent_solution() {
        let m = SurfaceModel::new(SurfaceKind::RoundSphere, 16, 4.0 * PI).unwrap();
        let g = StripGrid::cylinder(&m, 17).unwrap();
        let z = Potential::zero(&m);
        let sol = epsilon_geodesic(&m, &z, &z, 0.01, &g, &NewtonConfig::default()).unwrap();
        for (row, t) in sol.values.iter().zip(g.times()) {
            for v in row {
                assert!((v - 0.005 * t * (t - 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn converges_to_legendre_solution() {
        let m = SurfaceModel::new(SurfaceKind::FlatTorus, 32, 1.0).unwrap();
        let g = StripGrid::cylinder(&m, 33).unwrap();
        let z = Potential::zero(&m);
        let p1 = Potential::new(&m, m.grid.nodes.iter().map(|x| 0.02 * (2.0 * PI * x).cos()).collect()).unwrap();
        let exact = legendre_geodesic(&m, &z, &p1, &g).unwrap();
        let sols = epsilon_sweep(&m, &z, &p1, &[1e-1, 1e-2, 1e-3], &g, &NewtonConfig::default()).unwrap();
        let mut last = f64::INFINITY;
        for s in &sols {
            let SolverMethod::Epsilon(eps) = s.method else { panic!() };
            let d = s
                .values
                .iter()
                .flatten()
                .zip(exact.values.iter().flatten())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(d <= 5.0 * eps && d <= last, "ε = {eps}: {d}");
            last = d;
        }
    }
}
