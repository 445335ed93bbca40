//! Circle-symmetric Kähler model surfaces.
//!
//! Every potential on a model depends on one real coordinate `x`:
//!
//! * flat torus: `x ∈ [0, 1)` periodic, the other period normalized to 1;
//! * round sphere: the normalized moment coordinate `x ∈ (-1, 1)` of the
//!   background metric, sampled at cell centres so the poles are never nodes.
//!
//! In both cases the density of `ω_φ = ω + i∂∂̄φ` against `dx` (with the angle
//! integrated out) is `ρ_φ = ρ₀ + κ·(a φ')'`, where `a ≡ 1, κ = 1/2` on the torus
//! and `a = 1 - x², κ = π` on the sphere. The discrete operator is the
//! conservative second-order stencil built from face fluxes `a·Δφ/h`; on the
//! sphere the two pole faces carry the exact limit `a φ' = 0`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::pairwise_sum;

/// Minimum number of base nodes accepted by [`SurfaceModel::new`].
pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("resolution {0} is below the minimum of {MIN_RESOLUTION}")]
    ResolutionTooSmall(usize),
    #[error("total area must be positive and finite, got {0}")]
    BadArea(f64),
    #[error("potential has {got} nodes, model grid has {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("ω_φ is not positive: minimum density {margin:.3e} at node {index}")]
    NotKahler { margin: f64, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    #[serde(alias = "torus")]
    FlatTorus,
    #[serde(alias = "sphere")]
    RoundSphere,
}

impl SurfaceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SurfaceKind::FlatTorus => "flat_torus",
            SurfaceKind::RoundSphere => "round_sphere",
        }
    }
}

/// One-dimensional grid of the reduced base coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridS1 {
    pub count: usize,
    pub spacing: f64,
    pub periodic: bool,
    pub nodes: Vec<f64>,
}

impl GridS1 {
    /// `count` nodes on `[0, 1)`.
    pub fn periodic_unit(count: usize) -> Self {
        let spacing = 1.0 / count as f64;
        let nodes = (0..count).map(|i| i as f64 * spacing).collect();
        GridS1 { count, spacing, periodic: true, nodes }
    }

    /// `count` cell centres of `[-1, 1]`.
    pub fn cell_centred(count: usize) -> Self {
        let spacing = 2.0 / count as f64;
        let nodes = (0..count).map(|i| -1.0 + (i as f64 + 0.5) * spacing).collect();
        GridS1 { count, spacing, periodic: false, nodes }
    }

    /// Length of the coordinate domain.
    pub fn length(&self) -> f64 {
        self.spacing * self.count as f64
    }

    /// Face positions. Periodic grids have `count` faces (face `i` sits at
    /// `x_i + h/2`), cell-centred grids have `count + 1`.
    pub fn faces(&self) -> Vec<f64> {
        if self.periodic {
            self.nodes.iter().map(|x| x + 0.5 * self.spacing).collect()
        } else {
            (0..=self.count).map(|i| -1.0 + i as f64 * self.spacing).collect()
        }
    }
}

/// Outcome of the positivity test for `ω_φ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KahlerCheck {
    pub is_kahler: bool,
    /// Minimum of the `ω_φ` density.
    pub margin: f64,
    pub argmin: usize,
}

/// Measure used by [`SurfaceModel::integrate`].
#[derive(Debug, Clone, Copy)]
pub enum Measure<'a> {
    Omega,
    OmegaPhi(&'a Potential),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceModel {
    pub kind: SurfaceKind,
    pub total_area: f64,
    pub grid: GridS1,
    pub background_density: Vec<f64>,
}

impl SurfaceModel {
    pub fn new(kind: SurfaceKind, resolution: usize, total_area: f64) -> Result<Self, ModelError> {
        if resolution < MIN_RESOLUTION {
            return Err(ModelError::ResolutionTooSmall(resolution));
        }
        if !(total_area.is_finite() && total_area > 0.0) {
            return Err(ModelError::BadArea(total_area));
        }
        let (grid, rho0) = match kind {
            SurfaceKind::FlatTorus => (GridS1::periodic_unit(resolution), total_area),
            // Archimedes: the round metric has constant density in the moment coordinate.
            SurfaceKind::RoundSphere => (GridS1::cell_centred(resolution), 0.5 * total_area),
        };
        let background_density = vec![rho0; resolution];
        Ok(SurfaceModel { kind, total_area, grid, background_density })
    }

    pub fn len(&self) -> usize {
        self.grid.count
    }

    pub fn is_empty(&self) -> bool {
        self.grid.count == 0
    }

    pub fn is_periodic(&self) -> bool {
        self.grid.periodic
    }

    /// `κ` in `ρ_φ = ρ₀ + κ (a φ')'`.
    pub fn kappa(&self) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 0.5,
            SurfaceKind::RoundSphere => PI,
        }
    }

    /// Period of the angular coordinate that has been integrated out.
    pub fn angle_period(&self) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 1.0,
            SurfaceKind::RoundSphere => 2.0 * PI,
        }
    }

    /// Background density at an arbitrary coordinate (constant for both models).
    pub fn rho0(&self) -> f64 {
        self.background_density[0]
    }

    /// Flux weight `a(x)`.
    pub fn weight(&self, x: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 1.0,
            SurfaceKind::RoundSphere => 1.0 - x * x,
        }
    }

    /// Derivative of the flux weight.
    pub fn weight_deriv(&self, x: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 0.0,
            SurfaceKind::RoundSphere => -2.0 * x,
        }
    }

    /// Moment map of the background form, `∫ ρ₀ dx` (torus on the universal cover).
    pub fn background_moment(&self, x: f64) -> f64 {
        self.rho0() * x
    }

    /// `κ·ρ` for a local Kähler potential `ρ` of the background (`ω = i∂∂̄ρ`),
    /// as a function of the base coordinate. Its derivative in the flat
    /// coordinate is the background moment.
    pub fn background_potential(&self, x: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 0.5 * self.total_area * x * x,
            SurfaceKind::RoundSphere => -0.25 * self.total_area * (1.0 - x * x).ln(),
        }
    }

    /// Flat (log-holomorphic) coordinate: `x` on the torus, `atanh x` on the sphere.
    pub fn flat_coordinate(&self, x: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => x,
            SurfaceKind::RoundSphere => x.atanh(),
        }
    }

    pub fn from_flat_coordinate(&self, s: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => s,
            SurfaceKind::RoundSphere => s.tanh(),
        }
    }

    fn check_len(&self, field: &[f64]) -> Result<(), ModelError> {
        if field.len() != self.len() {
            return Err(ModelError::LengthMismatch { expected: self.len(), got: field.len() });
        }
        Ok(())
    }

    /// Face fluxes `a·Δf/h`. Periodic: `count` entries, entry `i` between nodes
    /// `i` and `i+1`. Sphere: `count + 1` entries with the pole faces zero.
    pub fn face_flux(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let h = self.grid.spacing;
        if self.is_periodic() {
            (0..n).map(|i| (f[(i + 1) % n] - f[i]) / h).collect()
        } else {
            let faces = self.grid.faces();
            let mut flux = vec![0.0; n + 1];
            for i in 1..n {
                flux[i] = self.weight(faces[i]) * (f[i] - f[i - 1]) / h;
            }
            flux
        }
    }

    /// Discrete `(a f')'` at the nodes.
    pub fn laplacian(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let h = self.grid.spacing;
        let flux = self.face_flux(f);
        if self.is_periodic() {
            (0..n).map(|i| (flux[i] - flux[(i + n - 1) % n]) / h).collect()
        } else {
            (0..n).map(|i| (flux[i + 1] - flux[i]) / h).collect()
        }
    }

    /// Discrete `a f'` at the nodes (average of the adjacent face fluxes).
    pub fn node_flux(&self, f: &[f64]) -> Vec<f64> {
        let n = f.len();
        let flux = self.face_flux(f);
        if self.is_periodic() {
            (0..n).map(|i| 0.5 * (flux[i] + flux[(i + n - 1) % n])).collect()
        } else {
            (0..n).map(|i| 0.5 * (flux[i] + flux[i + 1])).collect()
        }
    }

    /// Density of `ω_φ` against the coordinate measure. No sign requirement.
    pub fn density(&self, phi: &[f64]) -> Vec<f64> {
        let kappa = self.kappa();
        self.laplacian(phi)
            .iter()
            .zip(&self.background_density)
            .map(|(l, r0)| r0 + kappa * l)
            .collect()
    }

    pub fn is_kahler(&self, phi: &[f64]) -> KahlerCheck {
        let rho = self.density(phi);
        let (argmin, margin) = rho
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, r)| if r < acc.1 { (i, r) } else { acc });
        KahlerCheck { is_kahler: margin > 0.0, margin, argmin }
    }

    /// Average scalar curvature, fixed by Gauss–Bonnet: `2·2πχ / area`.
    pub fn average_scalar(&self) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 0.0,
            SurfaceKind::RoundSphere => 8.0 * PI / self.total_area,
        }
    }

    /// `s·ρ` for a density `rho`, i.e. scalar curvature times the `ω_φ`
    /// density: `ρ₀ s₀ - 2κ (a (log ρ/ρ₀)')'`.
    pub fn curvature_density(&self, rho: &[f64]) -> Vec<f64> {
        let r0s0 = self.rho0() * self.average_scalar();
        let logs: Vec<f64> = rho
            .iter()
            .zip(&self.background_density)
            .map(|(r, r0)| (r / r0).ln())
            .collect();
        let kappa = self.kappa();
        self.laplacian(&logs).iter().map(|l| r0s0 - 2.0 * kappa * l).collect()
    }

    /// Scalar curvature `s(ω_φ)` (Riemannian convention, `s = 2K`).
    pub fn scalar_curvature(&self, phi: &Potential) -> Result<Vec<f64>, ModelError> {
        self.check_len(&phi.values)?;
        let rho = self.density(&phi.values);
        if let Some((index, &margin)) = rho.iter().enumerate().find(|(_, r)| **r <= 0.0) {
            return Err(ModelError::NotKahler { margin, index });
        }
        Ok(self
            .curvature_density(&rho)
            .iter()
            .zip(&rho)
            .map(|(sr, r)| sr / r)
            .collect())
    }

    /// Quadrature weights: rectangle rule on the torus, midpoint rule on the sphere.
    pub fn quadrature_weight(&self) -> f64 {
        self.grid.spacing
    }

    /// Integral of `field` against `ω` or `ω_φ`, summed pairwise in node order.
    pub fn integrate(&self, field: &[f64], measure: Measure<'_>) -> Result<f64, ModelError> {
        self.check_len(field)?;
        let h = self.quadrature_weight();
        let terms: Vec<f64> = match measure {
            Measure::Omega => field
                .iter()
                .zip(&self.background_density)
                .map(|(f, r)| h * f * r)
                .collect(),
            Measure::OmegaPhi(phi) => {
                self.check_len(&phi.values)?;
                field.iter().zip(&phi.density).map(|(f, r)| h * f * r).collect()
            }
        };
        Ok(pairwise_sum(&terms))
    }

    /// Plain coordinate quadrature `Σ h f_i`.
    pub fn integrate_dx(&self, field: &[f64]) -> f64 {
        let h = self.quadrature_weight();
        let terms: Vec<f64> = field.iter().map(|f| h * f).collect();
        pairwise_sum(&terms)
    }

    /// Monge–Ampère energy `I(φ) = ∫ φ ω + (κ/2) ∫ φ (aφ')' dx`, affine along geodesics.
    pub fn monge_ampere_energy(&self, phi: &[f64]) -> f64 {
        let lap = self.laplacian(phi);
        let kappa = self.kappa();
        let terms: Vec<f64> = phi
            .iter()
            .zip(&lap)
            .zip(&self.background_density)
            .map(|((p, l), r0)| p * r0 + 0.5 * kappa * p * l)
            .collect();
        self.integrate_dx(&terms)
    }

    pub fn potential(&self, values: Vec<f64>) -> Result<Potential, ModelError> {
        Potential::new(self, values)
    }
}

/// A Kähler potential: node values with strictly positive `ω_φ` density.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Potential {
    pub values: Vec<f64>,
    pub density: Vec<f64>,
}

impl Potential {
    pub fn new(model: &SurfaceModel, values: Vec<f64>) -> Result<Self, ModelError> {
        model.check_len(&values)?;
        let check = model.is_kahler(&values);
        if !check.is_kahler {
            return Err(ModelError::NotKahler { margin: check.margin, index: check.argmin });
        }
        let density = model.density(&values);
        Ok(Potential { values, density })
    }

    pub fn zero(model: &SurfaceModel) -> Self {
        Potential { values: vec![0.0; model.len()], density: model.background_density.clone() }
    }

    pub fn margin(&self) -> f64 {
        self.density.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Serialized node array, `{kind, area, n, values}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeArray {
    pub kind: SurfaceKind,
    pub area: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl NodeArray {
    pub fn new(model: &SurfaceModel, values: &[f64]) -> Self {
        NodeArray { kind: model.kind, area: model.total_area, n: values.len(), values: values.to_vec() }
    }

    /// CSV with header `coordinate,value`.
    pub fn to_csv(&self, model: &SurfaceModel) -> String {
        let mut out = String::from("coordinate,value\n");
        for (x, v) in model.grid.nodes.iter().zip(&self.values) {
            out.push_str(&format!("{x:.17e},{v:.17e}\n"));
        }
        out
    }
}
