//! The Mabuchi K-energy as a path integral over the space of potentials.
//!
//! `E(φ) = −∫₀¹ ∫_M φ̇_t (s(ω_{φ_t}) − μ) ω_{φ_t} dt` along any path of
//! Kähler potentials from `0` to `φ`. In the reduced model the integrand is
//! `φ̇·(ρ₀s₀ − 2κ (a (log ρ/ρ₀)')' − μρ)` integrated against `dx`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, Potential, SurfaceModel};
use crate::numeric::{pairwise_sum, simpson_weights};

/// Minimum number of Simpson intervals per path leg.
pub const MIN_STEPS: usize = 8;
/// Default number of Simpson intervals per path leg.
pub const DEFAULT_STEPS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KEnergyError {
    #[error("path leaves the Kähler cone at t = {t}: minimum density {margin:.3e}")]
    PathLeavesCone { t: f64, margin: f64 },
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    /// `φ_t = t·φ`.
    Linear,
    /// `0 → waypoint → φ`, each leg linear.
    TwoLeg,
}

/// Path of potentials joining `0` and the target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSpec {
    pub kind: PathKind,
    /// Simpson intervals per leg.
    pub steps: usize,
    pub waypoint: Option<Vec<f64>>,
}

impl PathSpec {
    pub fn linear(steps: usize) -> Self {
        PathSpec { kind: PathKind::Linear, steps, waypoint: None }
    }

    pub fn two_leg(steps: usize, waypoint: Vec<f64>) -> Self {
        PathSpec { kind: PathKind::TwoLeg, steps, waypoint: Some(waypoint) }
    }

    fn validate(&self, model: &SurfaceModel) -> Result<(), KEnergyError> {
        if self.steps < MIN_STEPS {
            return Err(KEnergyError::InvalidPath(format!(
                "steps = {} is below the minimum of {MIN_STEPS}",
                self.steps
            )));
        }
        match (self.kind, &self.waypoint) {
            (PathKind::Linear, _) => Ok(()),
            (PathKind::TwoLeg, None) => Err(KEnergyError::InvalidPath("two-leg path without waypoint".into())),
            (PathKind::TwoLeg, Some(w)) => {
                let check = Potential::new(model, w.clone());
                check.map(|_| ()).map_err(|e| match e {
                    ModelError::NotKahler { margin, .. } => KEnergyError::PathLeavesCone { t: 0.5, margin },
                    other => KEnergyError::Model(other),
                })
            }
        }
    }
}

impl Default for PathSpec {
    fn default() -> Self {
        PathSpec::linear(DEFAULT_STEPS)
    }
}

/// `∫_M φ̇ (s − μ) ω_φ` for a slice `phi` with velocity `dphi`.
fn slice_integrand(model: &SurfaceModel, phi: &[f64], dphi: &[f64]) -> Result<f64, f64> {
    let rho = model.density(phi);
    let margin = rho.iter().copied().fold(f64::INFINITY, f64::min);
    if margin <= 0.0 {
        return Err(margin);
    }
    let mu = model.average_scalar();
    let s_rho = model.curvature_density(&rho);
    let terms: Vec<f64> = dphi
        .iter()
        .zip(s_rho.iter().zip(&rho))
        .map(|(d, (sr, r))| d * (sr - mu * r))
        .collect();
    Ok(model.integrate_dx(&terms))
}

/// `−∫ φ̇ (s − μ) ω_φ dt` along the segment `from → to`.
fn leg(model: &SurfaceModel, from: &[f64], to: &[f64], steps: usize, t_offset: f64) -> Result<f64, KEnergyError> {
    let dt = 1.0 / steps as f64;
    let weights = simpson_weights(steps, dt);
    let velocity: Vec<f64> = to.iter().zip(from).map(|(b, a)| b - a).collect();
    let terms = (0..=steps)
        .map(|k| {
            let t = k as f64 * dt;
            let slice: Vec<f64> = from.iter().zip(to).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            slice_integrand(model, &slice, &velocity)
                .map(|v| -weights[k] * v)
                .map_err(|margin| KEnergyError::PathLeavesCone { t: t_offset + t, margin })
        })
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(pairwise_sum(&terms))
}

/// K-energy of `phi` relative to the background, by the defining path integral.
pub fn kenergy(model: &SurfaceModel, phi: &Potential, path: &PathSpec) -> Result<f64, KEnergyError> {
    kenergy_values(model, &phi.values, path)
}

/// As [`kenergy`] for raw node values (positivity is checked along the path).
pub fn kenergy_values(model: &SurfaceModel, phi: &[f64], path: &PathSpec) -> Result<f64, KEnergyError> {
    if phi.len() != model.len() {
        return Err(ModelError::LengthMismatch { expected: model.len(), got: phi.len() }.into());
    }
    path.validate(model)?;
    let zero = vec![0.0; model.len()];
    match path.kind {
        PathKind::Linear => leg(model, &zero, phi, path.steps, 0.0),
        PathKind::TwoLeg => {
            let w = path.waypoint.as_deref().expect("validated");
            Ok(leg(model, &zero, w, path.steps, 0.0)? + leg(model, w, phi, path.steps, 0.5)?)
        }
    }
}

/// Closed form of the same functional, `2∫ρ log(ρ/ρ₀) dx + (μκ/2)∫φ (aφ')' dx`.
///
/// The discrete path integrand is the exact differential of this expression,
/// so it serves as an independent check of the quadrature in `t`.
pub fn kenergy_closed_form(model: &SurfaceModel, phi: &Potential) -> f64 {
    let lap = model.laplacian(&phi.values);
    let mu = model.average_scalar();
    let kappa = model.kappa();
    let terms: Vec<f64> = phi
        .density
        .iter()
        .zip(&model.background_density)
        .zip(phi.values.iter().zip(&lap))
        .map(|((r, r0), (p, l))| 2.0 * r * (r / r0).ln() + 0.5 * mu * kappa * p * l)
        .collect();
    model.integrate_dx(&terms)
}

/// `|E via path_a − E via path_b|`.
pub fn path_independence(
    model: &SurfaceModel,
    phi: &Potential,
    path_a: &PathSpec,
    path_b: &PathSpec,
) -> Result<f64, KEnergyError> {
    Ok((kenergy(model, phi, path_a)? - kenergy(model, phi, path_b)?).abs())
}

/// K-energy sampled along a family of slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KEnergyReport {
    /// `E` at the final slice.
    pub value: f64,
    pub t_samples: Vec<f64>,
    #[serde(rename = "E_of_t")]
    pub e_of_t: Vec<f64>,
    /// `E(t_{k-1}) − 2E(t_k) + E(t_{k+1})` for interior `k`.
    pub second_differences: Vec<f64>,
}

impl KEnergyReport {
    pub fn from_samples(t_samples: Vec<f64>, e_of_t: Vec<f64>) -> Self {
        let second_differences = e_of_t.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
        let value = e_of_t.last().copied().unwrap_or(0.0);
        KEnergyReport { value, t_samples, e_of_t, second_differences }
    }

    /// Smallest second difference (`+∞` when there are fewer than three samples).
    pub fn min_second_difference(&self) -> f64 {
        self.second_differences.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.e_of_t.iter().fold(0.0, |m, e| m.max(e.abs()))
    }

    /// CSV with header `t,E,second_difference`; endpoint rows leave the last column empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,E,second_difference\n");
        let n = self.t_samples.len();
        for (k, (t, e)) in self.t_samples.iter().zip(&self.e_of_t).enumerate() {
            if k == 0 || k + 1 == n {
                out.push_str(&format!("{t:.17e},{e:.17e},\n"));
            } else {
                out.push_str(&format!("{t:.17e},{e:.17e},{:.17e}\n", self.second_differences[k - 1]));
            }
        }
        out
    }
}

/// `E(t) = E(slices[k])` with linear comparison paths, evaluated concurrently.
pub fn kenergy_of_slices(
    model: &SurfaceModel,
    t_samples: &[f64],
    slices: &[Vec<f64>],
    steps: usize,
) -> Result<KEnergyReport, KEnergyError> {
    let path = PathSpec::linear(steps);
    let e_of_t = slices
        .par_iter()
        .map(|s| kenergy_values(model, s, &path))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(KEnergyReport::from_samples(t_samples.to_vec(), e_of_t))
}

/// `E(Φ(t_k, ·))` along every time slice of a strip solution.
pub fn kenergy_along(sol: &crate::solver::StripSolution, steps: usize) -> Result<KEnergyReport, KEnergyError> {
    kenergy_of_slices(&sol.model, &sol.grid.times(), &sol.values, steps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SurfaceKind;
    use std::f64::consts::PI;

    fn torus(n: usize) -> SurfaceModel {
        SurfaceModel::new(SurfaceKind::FlatTorus, n, 1.0).unwrap()
    }

    fn sphere(n: usize) -> SurfaceModel {
        SurfaceModel::new(SurfaceKind::RoundSphere, n, 4.0 * PI).unwrap()
    }

    fn cos_mode(m: &SurfaceModel, a: f64) -> Vec<f64> {
        m.grid.nodes.iter().map(|x| a * (2.0 * PI * x).cos()).collect()
    }

    #[test]
    fn constants_have_zero_energy() {
        for m in [torus(64), sphere(64)] {
            let p = Potential::new(&m, vec![3.5; m.len()]).unwrap();
            assert!(kenergy(&m, &p, &PathSpec::default()).unwrap().abs() < 1e-12);
            let z = Potential::zero(&m);
            assert_eq!(kenergy(&m, &z, &PathSpec::default()).unwrap(), 0.0);
        }
    }

    #[test]
    fn matches_closed_form() {
        let m = torus(128);
        let p = Potential::new(&m, cos_mode(&m, 0.04)).unwrap();
        let e = kenergy(&m, &p, &PathSpec::linear(64)).unwrap();
        let exact = kenergy_closed_form(&m, &p);
        assert!(e > 0.0);
        assert!((e - exact).abs() < 1e-6 * exact, "{e} vs {exact}");

        let s = sphere(128);
        let phi: Vec<f64> = s.grid.nodes.iter().map(|x| 0.05 * x * x * x - 0.02 * x).collect();
        let p = Potential::new(&s, phi).unwrap();
        let e = kenergy(&s, &p, &PathSpec::linear(64)).unwrap();
        assert!((e - kenergy_closed_form(&s, &p)).abs() < 1e-9);
        assert!(e >= -1e-6);
    }

    #[test]
    fn constant_shift_invariance() {
        let m = torus(64);
        let base = cos_mode(&m, 0.03);
        let shifted: Vec<f64> = base.iter().map(|v| v + 2.0).collect();
        let a = kenergy(&m, &Potential::new(&m, base).unwrap(), &PathSpec::default()).unwrap();
        let b = kenergy(&m, &Potential::new(&m, shifted).unwrap(), &PathSpec::default()).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn two_leg_agrees_with_linear() {
        let m = torus(256);
        let p = Potential::new(&m, cos_mode(&m, 0.04)).unwrap();
        let d = path_independence(&m, &p, &PathSpec::linear(128), &PathSpec::two_leg(128, cos_mode(&m, 0.02)))
            .unwrap();
        assert!(d <= 1e-4 * kenergy_closed_form(&m, &p), "{d}");
    }

    #[test]
    fn rejects_bad_paths() {
        let m = torus(64);
        let p = Potential::new(&m, cos_mode(&m, 0.04)).unwrap();
        assert!(matches!(
            kenergy(&m, &p, &PathSpec::linear(4)),
            Err(KEnergyError::InvalidPath(_))
        ));
        assert!(matches!(
            kenergy(&m, &p, &PathSpec::two_leg(16, cos_mode(&m, 0.2))),
            Err(KEnergyError::PathLeavesCone { .. })
        ));
        let raw = cos_mode(&m, 0.2);
        assert!(matches!(
            kenergy_values(&m, &raw, &PathSpec::default()),
            Err(KEnergyError::PathLeavesCone { .. })
        ));
    }

    #[test]
    fn report_csv_shape() {
        let r = KEnergyReport::from_samples(vec![0.0, 0.5, 1.0], vec![0.0, 1.0, 4.0]);
        assert_eq!(r.second_differences, vec![2.0]);
        assert_eq!(r.to_csv().lines().count(), 4);
    }
}
