//! Geodesics of Kähler potentials: solutions of the homogeneous complex
//! Monge–Ampère equation on the strip `Σ = [0,1]_t × (imaginary direction)`
//! times the model surface.
//!
//! With data invariant in the imaginary direction, the reduced equation at a
//! point `(t, x)` is
//!
//! ```text
//! Φ_tt · ρ_Φ − κ (a Φ_tx)² / a = 0,
//! ```
//!
//! where `ρ_Φ = ρ₀ + κ (a Φ_x)_x` is the slice density. Two solvers are
//! provided: an exact construction through the Legendre transform
//! ([`legendre_geodesic`]) and a damped Newton solver for the regularized
//! equation with right-hand side `ε ρ₀` ([`epsilon_geodesic`]).

mod epsilon;
mod legendre;

pub use epsilon::{epsilon_geodesic, epsilon_sweep, NewtonConfig};
pub use legendre::{
    inverse_legendre, legendre_geodesic, moment_map, symplectic_potential, MomentMap, SliceMaps,
    SymplecticPotential,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Potential, SurfaceModel};
use crate::numeric::RootError;

/// Minimum number of time nodes on `[0, 1]`.
pub const MIN_TIME_NODES: usize = 17;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid strip grid: {0}")]
    InvalidGrid(String),
    #[error("boundary data live on a different base grid")]
    GridMismatch,
    #[error("moment map inversion failed at t = {t}, x = {x}: {source}")]
    NonMonotone { t: f64, x: f64, source: RootError },
    #[error("Newton diverged at ε = {epsilon:.1e}: residual {residual:.3e} after {iterations} iterations")]
    NewtonDiverged { epsilon: f64, iterations: usize, residual: f64 },
    #[error("Newton iterate left the Kähler cone at ε = {epsilon:.1e} (margin {margin:.3e})")]
    ConeExit { epsilon: f64, margin: f64 },
    #[error("ε must lie in (0, 1], got {0}")]
    BadEpsilon(f64),
}

/// Shape of the Riemann surface factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum StripGeometry {
    /// `[0,1] × S¹` with the imaginary period normalized to 1.
    Cylinder,
    /// `[0,1] × [−R, R]`.
    Rectangle { half_width: f64 },
}

impl StripGeometry {
    /// Length of the imaginary direction (the measure of `Σ` per unit `t`).
    pub fn transverse_length(&self) -> f64 {
        match self {
            StripGeometry::Cylinder => 1.0,
            StripGeometry::Rectangle { half_width } => 2.0 * half_width,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StripGeometry::Cylinder => "cylinder",
            StripGeometry::Rectangle { .. } => "rectangle",
        }
    }
}

/// Time discretization of the strip together with the base grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StripGrid {
    pub nt: usize,
    pub base: crate::model::GridS1,
    pub geometry: StripGeometry,
}

impl StripGrid {
    pub fn new(model: &SurfaceModel, nt: usize, geometry: StripGeometry) -> Result<Self, SolverError> {
        if nt < MIN_TIME_NODES {
            return Err(SolverError::InvalidGrid(format!("nt = {nt} is below the minimum of {MIN_TIME_NODES}")));
        }
        if let StripGeometry::Rectangle { half_width } = geometry {
            if !(half_width.is_finite() && half_width > 0.0) {
                return Err(SolverError::InvalidGrid(format!("half width must be positive, got {half_width}")));
            }
        }
        Ok(StripGrid { nt, base: model.grid.clone(), geometry })
    }

    pub fn cylinder(model: &SurfaceModel, nt: usize) -> Result<Self, SolverError> {
        StripGrid::new(model, nt, StripGeometry::Cylinder)
    }

    pub fn dt(&self) -> f64 {
        1.0 / (self.nt - 1) as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.nt).map(|k| k as f64 * self.dt()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epsilon")]
pub enum SolverMethod {
    Legendre,
    Epsilon(f64),
}

/// Candidate solution `Φ(t_k, x_i)` on the strip.
#[derive(Debug, Clone, PartialEq)]
pub struct StripSolution {
    pub model: SurfaceModel,
    pub grid: StripGrid,
    /// `values[k][i] = Φ(t_k, x_i)`.
    pub values: Vec<Vec<f64>>,
    /// Exact time derivative `Φ_t` when the solver provides one.
    pub velocity: Option<Vec<Vec<f64>>>,
    /// Slice densities `ρ_Φ(t_k, x_i)` when the solver knows them exactly.
    pub exact_density: Option<Vec<Vec<f64>>>,
    pub boundary: (Potential, Potential),
    pub method: SolverMethod,
    pub residual_sup: f64,
    pub c11: f64,
}

/// JSON header accompanying the CSV dump of a [`StripSolution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionHeader {
    pub nt: usize,
    pub nx: usize,
    pub geometry: StripGeometry,
    pub method: String,
    pub epsilon: Option<f64>,
    pub residual_sup: f64,
    pub c11: f64,
}

impl StripSolution {
    /// Assemble a solution and compute its diagnostics.
    pub fn new(
        model: SurfaceModel,
        grid: StripGrid,
        values: Vec<Vec<f64>>,
        velocity: Option<Vec<Vec<f64>>>,
        boundary: (Potential, Potential),
        method: SolverMethod,
    ) -> Self {
        let mut sol =
            StripSolution {
            model,
            grid,
            values,
            velocity,
            exact_density: None,
            boundary,
            method,
            residual_sup: 0.0,
            c11: 0.0,
        };
        sol.residual_sup = hcma_residual(&sol).sup_norm;
        sol.c11 = c11_seminorm(&sol);
        sol
    }

    /// Attach solver-supplied slice densities.
    pub fn with_exact_density(mut self, density: Vec<Vec<f64>>) -> Self {
        self.exact_density = Some(density);
        self
    }

    /// The linear interpolation `(1−t)φ₀ + tφ₁` (not a geodesic in general).
    pub fn linear_interpolation(
        model: &SurfaceModel,
        phi0: &Potential,
        phi1: &Potential,
        grid: &StripGrid,
    ) -> Self {
        let values = grid
            .times()
            .iter()
            .map(|t| phi0.values.iter().zip(&phi1.values).map(|(a, b)| (1.0 - t) * a + t * b).collect())
            .collect();
        let velocity = vec![phi1.values.iter().zip(&phi0.values).map(|(b, a)| b - a).collect(); grid.nt];
        StripSolution::new(
            model.clone(),
            grid.clone(),
            values,
            Some(velocity),
            (phi0.clone(), phi1.clone()),
            SolverMethod::Legendre,
        )
    }

    pub fn nt(&self) -> usize {
        self.grid.nt
    }

    pub fn nx(&self) -> usize {
        self.model.len()
    }

    /// `ω_Φ` density of every time slice.
    pub fn slice_densities(&self) -> Vec<Vec<f64>> {
        self.values.iter().map(|row| self.model.density(row)).collect()
    }

    /// Smallest slice density over the whole strip.
    pub fn min_density(&self) -> f64 {
        self.slice_densities().iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn header(&self) -> SolutionHeader {
        let (method, epsilon) = match self.method {
            SolverMethod::Legendre => ("legendre".to_string(), None),
            SolverMethod::Epsilon(e) => ("epsilon".to_string(), Some(e)),
        };
        SolutionHeader {
            nt: self.nt(),
            nx: self.nx(),
            geometry: self.grid.geometry,
            method,
            epsilon,
            residual_sup: self.residual_sup,
            c11: self.c11,
        }
    }

    /// Row-major CSV of `Φ`, one row per time node, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.values {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Discrete defect of the reduced Monge–Ampère equation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub sup_norm: f64,
    pub l2_norm: f64,
    /// `(time index, base index)` of the largest defect.
    pub location_of_max: (usize, usize),
    /// Sup of the defect over each interior time slice.
    pub per_slice_sup: Vec<f64>,
}

/// Node-wise defect `(Φ_tt ρ_Φ − κ (aΦ_tx)²/a − rhs·ρ₀) / ρ₀` on interior
/// time slices, with second-order differences in `t` and the model's
/// conservative stencil in `x`.
pub(crate) fn defect_rows(model: &SurfaceModel, values: &[Vec<f64>], dt: f64, rhs: f64) -> Vec<Vec<f64>> {
    let nt = values.len();
    let kappa = model.kappa();
    let rho0 = model.rho0();
    let weights: Vec<f64> = model.grid.nodes.iter().map(|&x| model.weight(x)).collect();
    (1..nt - 1)
        .map(|k| {
            let rho = model.density(&values[k]);
            let dphi: Vec<f64> =
                values[k + 1].iter().zip(&values[k - 1]).map(|(p, m)| (p - m) / (2.0 * dt)).collect();
            let flux = model.node_flux(&dphi);
            (0..model.len())
                .map(|i| {
                    let phi_tt = (values[k + 1][i] - 2.0 * values[k][i] + values[k - 1][i]) / (dt * dt);
                    (phi_tt * rho[i] - kappa * flux[i] * flux[i] / weights[i] - rhs * rho0) / rho0
                })
                .collect()
        })
        .collect()
}

/// Residual of the homogeneous equation at every interior node.
pub fn hcma_residual(sol: &StripSolution) -> ResidualReport {
    let rows = defect_rows(&sol.model, &sol.values, sol.grid.dt(), 0.0);
    let mut sup = 0.0;
    let mut loc = (0, 0);
    let mut sq = Vec::with_capacity(rows.len() * sol.nx());
    let per_slice_sup = rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let mut row_sup: f64 = 0.0;
            for (i, r) in row.iter().enumerate() {
                let a = r.abs();
                sq.push(r * r);
                row_sup = row_sup.max(a);
                if a > sup {
                    sup = a;
                    loc = (k + 1, i);
                }
            }
            row_sup
        })
        .collect();
    let cell = sol.grid.dt() * sol.model.quadrature_weight();
    let l2_norm = (cell * crate::numeric::pairwise_sum(&sq)).sqrt();
    ResidualReport { sup_norm: sup, l2_norm, location_of_max: loc, per_slice_sup }
}

/// Largest pure or mixed second difference of `Φ` over interior nodes.
pub fn c11_seminorm(sol: &StripSolution) -> f64 {
    let dt = sol.grid.dt();
    let h = sol.model.grid.spacing;
    let n = sol.nx();
    let periodic = sol.model.is_periodic();
    let v = &sol.values;
    let (lo, hi) = if periodic { (0, n) } else { (1, n - 1) };
    let idx = |i: isize| -> usize { ((i + n as isize) % n as isize) as usize };
    let mut c11: f64 = 0.0;
    for k in 1..sol.nt() - 1 {
        for i in lo..hi {
            let (im, ip) = (idx(i as isize - 1), idx(i as isize + 1));
            let tt = (v[k + 1][i] - 2.0 * v[k][i] + v[k - 1][i]) / (dt * dt);
            let xx = (v[k][ip] - 2.0 * v[k][i] + v[k][im]) / (h * h);
            let tx = (v[k + 1][ip] - v[k + 1][im] - v[k - 1][ip] + v[k - 1][im]) / (4.0 * dt * h);
            c11 = c11.max(tt.abs()).max(xx.abs()).max(tx.abs());
        }
    }
    c11
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SurfaceKind;
    use std::f64::consts::PI;

    #[test]
    fn strip_grid_validation() {
        let m = SurfaceModel::new(SurfaceKind::FlatTorus, 32, 1.0).unwrap();
        assert!(StripGrid::cylinder(&m, 16).is_err());
        assert!(StripGrid::new(&m, 33, StripGeometry::Rectangle { half_width: 0.0 }).is_err());
        let g = StripGrid::new(&m, 33, StripGeometry::Rectangle { half_width: 0.5 }).unwrap();
        assert_eq!(g.geometry.transverse_length(), 1.0);
        assert_eq!(g.times()[32], 1.0);
    }

    #[test]
    fn linear_interpolation_is_not_a_geodesic() {
        let m = SurfaceModel::new(SurfaceKind::FlatTorus, 64, 1.0).unwrap();
        let g = StripGrid::cylinder(&m, 33).unwrap();
        let z = Potential::zero(&m);
        let p1: Vec<f64> = m.grid.nodes.iter().map(|x| 0.04 * (2.0 * PI * x).cos()).collect();
        let p1 = Potential::new(&m, p1).unwrap();
        let lin = StripSolution::linear_interpolation(&m, &z, &p1, &g);
        assert!(lin.residual_sup > 1e-2);

        let c = Potential::new(&m, vec![0.7; 64]).unwrap();
        let lin = StripSolution::linear_interpolation(&m, &z, &c, &g);
        assert!(lin.residual_sup < 1e-10);
        assert!(lin.c11 < 1e-8);
    }

    #[test]
    fn dump_shapes() {
        let m = SurfaceModel::new(SurfaceKind::RoundSphere, 16, 4.0 * PI).unwrap();
        let g = StripGrid::cylinder(&m, 17).unwrap();
        let z = Potential::zero(&m);
        let sol = StripSolution::linear_interpolation(&m, &z, &z, &g);
        assert_eq!(sol.to_csv().lines().count(), 17);
        let json = serde_json::to_string(&sol.header()).unwrap();
        assert!(json.starts_with("{\"nt\":17,\"nx\":16,\"geometry\":{\"type\":\"cylinder\"}"));
    }
}
