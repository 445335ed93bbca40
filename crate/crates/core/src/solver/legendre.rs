//! Exact geodesics through the Legendre transform.
//!
//! In the flat coordinate `s` (`x` on the torus, `atanh x` on the sphere) the
//! circle-invariant Kähler potential `u = κρ + κφ` is convex, `u'(s)` is the
//! moment map and geodesics are straight lines of Legendre duals
//! `u*_t = (1−t)u*_0 + t u*_1`. Pointwise this reads: the node `x` at time `t`
//! is reached from the moment level `m` for which
//! `(1−t)·s(y₀) + t·s(y₁) = s(x)` with `M₀(y₀) = M₁(y₁) = m`, and
//! `u_t(s(x)) = (1−t)u₀(y₀) + t·u₁(y₁)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{SolverError, SolverMethod, StripGrid, StripSolution};
use crate::interp::{LocalPoly, SliceInterp, TrigInterp};
use crate::model::{Potential, SurfaceKind, SurfaceModel};
use crate::numeric::{newton_bracketed, RootError};

const ROOT_TOL: f64 = 1e-15;

/// Continuous moment map and potential of one slice, built from its interpolant.
#[derive(Debug, Clone)]
pub struct SliceMaps {
    kind: SurfaceKind,
    area: f64,
    rho0: f64,
    kappa: f64,
    interp: SliceInterp,
}

impl SliceMaps {
    pub fn new(model: &SurfaceModel, values: &[f64]) -> Self {
        SliceMaps {
            kind: model.kind,
            area: model.total_area,
            rho0: model.rho0(),
            kappa: model.kappa(),
            interp: SliceInterp::new(model, values),
        }
    }

    fn weight(&self, y: f64) -> (f64, f64) {
        match self.kind {
            SurfaceKind::FlatTorus => (1.0, 0.0),
            SurfaceKind::RoundSphere => (1.0 - y * y, -2.0 * y),
        }
    }

    /// `(M(y), M'(y))`; the derivative is the `ω_φ` density.
    pub fn moment(&self, y: f64) -> (f64, f64) {
        let j = self.interp.jet(y);
        let (a, da) = self.weight(y);
        (self.rho0 * y + self.kappa * a * j.d1, self.rho0 + self.kappa * (da * j.d1 + a * j.d2))
    }

    /// `u(y) = κρ(y) + κφ(y)` as a function of the base coordinate.
    pub fn potential(&self, y: f64) -> f64 {
        self.background_potential(y) + self.kappa * self.interp.value(y)
    }

    fn background_potential(&self, y: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => 0.5 * self.area * y * y,
            SurfaceKind::RoundSphere => -0.25 * self.area * (1.0 - y * y).ln(),
        }
    }

    fn flat(&self, y: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => y,
            SurfaceKind::RoundSphere => y.atanh(),
        }
    }

    fn unflat(&self, s: f64) -> f64 {
        match self.kind {
            SurfaceKind::FlatTorus => s,
            SurfaceKind::RoundSphere => s.tanh(),
        }
    }

    /// Solve `M(y) = m` near `guess`.
    pub fn inverse_moment(&self, m: f64, guess: f64) -> Result<f64, RootError> {
        let f = |y: f64| {
            let (v, d) = self.moment(y);
            (v - m, d)
        };
        match self.kind {
            SurfaceKind::FlatTorus => {
                let (lo, hi) = expand_bracket(&f, guess, 0.25, f64::NEG_INFINITY, f64::INFINITY)?;
                newton_bracketed(f, lo, hi, guess, ROOT_TOL)
            }
            SurfaceKind::RoundSphere => newton_bracketed(f, -1.0, 1.0, guess.clamp(-1.0, 1.0), ROOT_TOL),
        }
    }
}

/// Grow `[guess − step, guess + step]` geometrically until `f` changes sign.
fn expand_bracket<F>(f: &F, guess: f64, step: f64, min: f64, max: f64) -> Result<(f64, f64), RootError>
where
    F: Fn(f64) -> (f64, f64),
{
    let (mut lo, mut hi, mut w) = ((guess - step).max(min), (guess + step).min(max), step);
    for _ in 0..64 {
        let (flo, fhi) = (f(lo).0, f(hi).0);
        if flo <= 0.0 && fhi >= 0.0 {
            return Ok((lo, hi));
        }
        w *= 2.0;
        if flo > 0.0 {
            lo = (guess - w).max(min);
        }
        if fhi < 0.0 {
            hi = (guess + w).min(max);
        }
    }
    let (flo, fhi) = (f(lo).0, f(hi).0);
    Err(RootError::NotBracketed { lo, hi, flo, fhi })
}

/// Discrete moment map of `ω_φ` at the cell faces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentMap {
    pub faces: Vec<f64>,
    /// `M = M_ω + κ a φ'` at each face; consecutive differences divided by the
    /// spacing reproduce the `ω_φ` density.
    pub values: Vec<f64>,
}

impl MomentMap {
    /// Difference quotient across each node's two faces. On the torus node `i`
    /// sits between faces `i−1` and `i`, and the map gains `A` per period.
    pub fn derivative(&self, model: &SurfaceModel) -> Vec<f64> {
        let h = model.grid.spacing;
        let n = model.len();
        (0..n)
            .map(|i| {
                if model.is_periodic() {
                    let lo = if i == 0 { self.values[n - 1] - model.total_area } else { self.values[i - 1] };
                    (self.values[i] - lo) / h
                } else {
                    (self.values[i + 1] - self.values[i]) / h
                }
            })
            .collect()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.values.windows(2).all(|w| w[1] > w[0])
    }
}

/// Moment map of `ω_φ` from the conservative face fluxes.
pub fn moment_map(model: &SurfaceModel, phi: &Potential) -> Result<MomentMap, SolverError> {
    let phi = Potential::new(model, phi.values.clone())?;
    let faces = model.grid.faces();
    let flux = model.face_flux(&phi.values);
    let kappa = model.kappa();
    let values = faces.iter().zip(&flux).map(|(&f, q)| model.background_moment(f) + kappa * q).collect();
    Ok(MomentMap { faces, values })
}

/// Legendre dual of `u = κρ + κφ` sampled on a uniform grid of moment values,
/// stored as the background dual plus a regular remainder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymplecticPotential {
    pub kind: SurfaceKind,
    pub area: f64,
    pub moments: Vec<f64>,
    /// `u*(m_j)`.
    pub values: Vec<f64>,
    /// `u*(m_j) − u*_ω(m_j)`: smooth, and periodic in `m` on the torus.
    pub remainder: Vec<f64>,
}

fn background_dual(model: &SurfaceModel, m: f64) -> f64 {
    let y = m / model.rho0();
    m * model.flat_coordinate(y) - model.background_potential(y)
}

/// Moment grid: `[0, A)` periodic on the torus, cell centres of `(−A/2, A/2)` on the sphere.
fn moment_grid(model: &SurfaceModel) -> Vec<f64> {
    model.grid.nodes.iter().map(|&x| model.background_moment(x)).collect()
}

pub fn symplectic_potential(model: &SurfaceModel, phi: &Potential) -> Result<SymplecticPotential, SolverError> {
    let phi = Potential::new(model, phi.values.clone())?;
    let maps = SliceMaps::new(model, &phi.values);
    let moments = moment_grid(model);
    let mut values = Vec::with_capacity(moments.len());
    let mut remainder = Vec::with_capacity(moments.len());
    for &m in &moments {
        let y = maps
            .inverse_moment(m, m / model.rho0())
            .map_err(|source| SolverError::NonMonotone { t: 0.0, x: m, source })?;
        let v = m * model.flat_coordinate(y) - maps.potential(y);
        values.push(v);
        remainder.push(v - background_dual(model, m));
    }
    Ok(SymplecticPotential { kind: model.kind, area: model.total_area, moments, values, remainder })
}

/// Recover the potential on the base grid from a sampled dual:
/// solve `(u*)'(m) = s(x)`, then `κφ(x) = m·s(x) − u*(m) − κρ(x)`.
pub fn inverse_legendre(model: &SurfaceModel, dual: &SymplecticPotential) -> Result<Vec<f64>, SolverError> {
    let rem = match model.kind {
        SurfaceKind::FlatTorus => SliceInterp::Trig(TrigInterp::new(&dual.remainder)),
        SurfaceKind::RoundSphere => SliceInterp::Poly(LocalPoly::new(&dual.moments, &dual.remainder)),
    };
    // On the torus the remainder is periodic with period A in m; rescale to [0, 1).
    let scale = match model.kind {
        SurfaceKind::FlatTorus => 1.0 / model.total_area,
        SurfaceKind::RoundSphere => 1.0,
    };
    let rho0 = model.rho0();
    let kappa = model.kappa();
    model
        .grid
        .nodes
        .iter()
        .map(|&x| {
            let target = model.flat_coordinate(x);
            let slope = |m: f64| {
                let j = rem.jet(m * scale);
                let y = m / rho0;
                let w = model.weight(y);
                (model.flat_coordinate(y) + j.d1 * scale - target, 1.0 / (rho0 * w) + j.d2 * scale * scale)
            };
            let guess = model.background_moment(x);
            let (lo, hi) = match model.kind {
                SurfaceKind::FlatTorus => expand_bracket(&slope, guess, 0.25 * model.total_area, f64::NEG_INFINITY, f64::INFINITY),
                SurfaceKind::RoundSphere => {
                    let lim = rho0 * (1.0 - 1e-15);
                    Ok((-lim, lim))
                }
            }
            .map_err(|source| SolverError::NonMonotone { t: 0.0, x, source })?;
            let m = newton_bracketed(slope, lo, hi, guess, ROOT_TOL)
                .map_err(|source| SolverError::NonMonotone { t: 0.0, x, source })?;
            let dual_value = background_dual(model, m) + rem.value(m * scale);
            Ok((m * target - dual_value - model.background_potential(x)) / kappa)
        })
        .collect()
}

/// Value and time derivative of the geodesic at `(t, x)`.
fn geodesic_point(
    maps0: &SliceMaps,
    maps1: &SliceMaps,
    t: f64,
    x: f64,
    guess: f64,
) -> Result<GeodesicPoint, RootError> {
    let sx = maps0.flat(x);
    let solve = |sigma: f64| -> Result<(f64, f64, f64, f64, f64), RootError> {
        let y0 = maps0.unflat(sigma);
        let (m, d0) = maps0.moment(y0);
        let y1 = maps1.inverse_moment(m, y0)?;
        let (_, d1) = maps1.moment(y1);
        let s1 = maps1.flat(y1);
        let ratio = maps0.weight(y0).0 * d0 / (maps1.weight(y1).0 * d1);
        Ok(((1.0 - t) * sigma + t * s1 - sx, (1.0 - t) + t * ratio, y0, y1, m))
    };
    // Roots that fail internally are mapped to NaN so the outer safeguard bisects.
    let g = |sigma: f64| solve(sigma).map(|r| (r.0, r.1)).unwrap_or((f64::NAN, f64::NAN));
    let gs = |sigma: f64| {
        let (v, d) = g(sigma);
        (if v.is_nan() { sigma - sx } else { v }, d)
    };
    let (lo, hi) = expand_bracket(&gs, guess, 0.25, f64::NEG_INFINITY, f64::INFINITY)?;
    let sigma = newton_bracketed(gs, lo, hi, guess, ROOT_TOL)?;
    let (_, jac, y0, y1, m) = solve(sigma)?;
    let kappa = maps0.kappa;
    // Transport of the flat density `ρa` along the straight leaf through y0.
    let density = maps0.weight(y0).0 * maps0.moment(y0).1 / (maps0.weight(x).0 * jac);
    let u0 = maps0.potential(y0);
    let u1 = maps1.potential(y1);
    let value = ((1.0 - t) * u0 + t * u1 - maps0.background_potential(x)) / kappa;
    let velocity = (m * (maps0.flat(y0) - maps1.flat(y1)) - u0 + u1) / kappa;
    Ok(GeodesicPoint { value, velocity, density })
}

struct GeodesicPoint {
    value: f64,
    velocity: f64,
    density: f64,
}

/// Geodesic joining `φ0` and `φ1`, built pointwise from the Legendre duals.
pub fn legendre_geodesic(
    model: &SurfaceModel,
    phi0: &Potential,
    phi1: &Potential,
    grid: &StripGrid,
) -> Result<StripSolution, SolverError> {
    if grid.base != model.grid || phi0.len() != model.len() || phi1.len() != model.len() {
        return Err(SolverError::GridMismatch);
    }
    let phi0 = Potential::new(model, phi0.values.clone())?;
    let phi1 = Potential::new(model, phi1.values.clone())?;
    let maps0 = SliceMaps::new(model, &phi0.values);
    let maps1 = SliceMaps::new(model, &phi1.values);
    let times = grid.times();
    let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = times
        .par_iter()
        .map(|&t| {
            let mut vals = Vec::with_capacity(model.len());
            let mut vels = Vec::with_capacity(model.len());
            let mut dens = Vec::with_capacity(model.len());
            for &x in &model.grid.nodes {
                let p = geodesic_point(&maps0, &maps1, t, x, model.flat_coordinate(x))
                    .map_err(|source| SolverError::NonMonotone { t, x, source })?;
                vals.push(p.value);
                vels.push(p.velocity);
                dens.push(p.density);
            }
            Ok((vals, vels, dens))
        })
        .collect::<Result<_, SolverError>>()?;
    let mut values = Vec::with_capacity(rows.len());
    let mut velocity = Vec::with_capacity(rows.len());
    let mut density = Vec::with_capacity(rows.len());
    for (v, d, r) in rows {
        values.push(v);
        velocity.push(d);
        density.push(r);
    }
    values[0] = phi0.values.clone();
    let last = values.len() - 1;
    values[last] = phi1.values.clone();
    Ok(StripSolution::new(
        model.clone(),
        grid.clone(),
        values,
        Some(velocity),
        (phi0, phi1),
        SolverMethod::Legendre,
    )
    .with_exact_density(density))
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

    fn cos_pot(m: &SurfaceModel, a: f64) -> Potential {
        Potential::new(m, m.grid.nodes.iter().map(|x| a * (2.0 * PI * x).cos()).collect()).unwrap()
    }

    fn sphere_pot(m: &SurfaceModel) -> Potential {
        Potential::new(m, m.grid.nodes.iter().map(|x| 0.08 * x * x + 0.03 * x * x * x).collect()).unwrap()
    }

    #[test]
    fn moment_map_properties() {
        let m = torus(64);
        let id = moment_map(&m, &Potential::zero(&m)).unwrap();
        for (f, v) in id.faces.iter().zip(&id.values) {
            assert!((f - v).abs() < 1e-15);
        }
        let p = cos_pot(&m, 0.04);
        let mm = moment_map(&m, &p).unwrap();
        assert!(mm.is_strictly_increasing());
        for (d, r) in mm.derivative(&m).iter().zip(&p.density) {
            assert!((d - r).abs() < 1e-10);
        }
        let s = sphere(64);
        let ms = moment_map(&s, &sphere_pot(&s)).unwrap();
        assert_eq!(ms.values[0], -2.0 * PI);
        assert_eq!(*ms.values.last().unwrap(), 2.0 * PI);
        for (d, r) in ms.derivative(&s).iter().zip(&s.density(&sphere_pot(&s).values)) {
            assert!((d - r).abs() < 1e-10);
        }
    }

    #[test]
    fn symplectic_potential_of_flat_metric_is_quadratic() {
        let m = torus(64);
        let d = symplectic_potential(&m, &Potential::zero(&m)).unwrap();
        for (mm, v) in d.moments.iter().zip(&d.values) {
            assert!((v - 0.5 * mm * mm).abs() < 1e-14);
        }
        let c = symplectic_potential(&m, &Potential::new(&m, vec![1.5; 64]).unwrap()).unwrap();
        for (a, b) in d.values.iter().zip(&c.values) {
            assert!((a - b - 0.75).abs() < 1e-13, "constant shifts the dual by −κc");
        }
    }

    #[test]
    fn legendre_round_trip() {
        // The a = 0.04 dual needs 256 nodes for spectral convergence below 1e-8.
        for (m, p) in [(torus(256), cos_pot(&torus(256), 0.04)), (sphere(128), sphere_pot(&sphere(128)))] {
            let d = symplectic_potential(&m, &p).unwrap();
            assert!(d.values.windows(3).all(|w| w[0] - 2.0 * w[1] + w[2] > 0.0));
            let back = inverse_legendre(&m, &d).unwrap();
            let err = back.iter().zip(&p.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{:?}: {err}", m.kind);
        }
    }

    #[test]
    fn trivial_geodesics() {
        let m = torus(32);
        let g = StripGrid::cylinder(&m, 17).unwrap();
        let z = Potential::zero(&m);
        let c = Potential::new(&m, vec![0.3; 32]).unwrap();
        let sol = legendre_geodesic(&m, &z, &c, &g).unwrap();
        for (k, t) in g.times().iter().enumerate() {
            assert!(sol.values[k].iter().all(|v| (v - 0.3 * t).abs() < 1e-13));
        }
        assert!(sol.residual_sup < 1e-9);
        let p = cos_pot(&m, 0.03);
        let sol = legendre_geodesic(&m, &p, &p, &g).unwrap();
        for row in &sol.values {
            for (a, b) in row.iter().zip(&p.values) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn residual_decreases_under_refinement() {
        let mut res = Vec::new();
        for n in [32usize, 64, 128] {
            let m = torus(n);
            let g = StripGrid::cylinder(&m, n + 1).unwrap();
            let sol = legendre_geodesic(&m, &Potential::zero(&m), &cos_pot(&m, 0.04), &g).unwrap();
            assert!(sol.min_density() > 0.0);
            res.push(sol.residual_sup);
        }
        let orders = crate::numeric::observed_orders(&res);
        assert!(orders.iter().all(|&o| o > 1.7), "{res:?} {orders:?}");
    }

    #[test]
    fn sphere_geodesic_and_time_reversal() {
        let m = sphere(64);
        let g = StripGrid::cylinder(&m, 33).unwrap();
        let z = Potential::zero(&m);
        let p = sphere_pot(&m);
        let fwd = legendre_geodesic(&m, &z, &p, &g).unwrap();
        let bwd = legendre_geodesic(&m, &p, &z, &g).unwrap();
        for k in 0..33 {
            for i in 0..64 {
                assert!((fwd.values[k][i] - bwd.values[32 - k][i]).abs() < 1e-10);
            }
        }
        assert!(fwd.residual_sup < 5e-2, "{}", fwd.residual_sup);
    }
}
