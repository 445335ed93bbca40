//! Browser bindings for the `hcma` pipeline.
//!
//! Three operations are exposed to the static page in `www/`:
//!
//! * [`geodesic_slices`]: the potentials `Φ(t, ·)` of the geodesic from `0` to a
//!   single-mode target, one row per time node;
//! * [`kenergy_curve`]: the K-energy `E(t)` sampled along that geodesic;
//! * [`leaf_paths`]: base trajectories `X(t)` of evenly spaced holomorphic leaves.
//!
//! Every operation returns a flat `Float64Array` (row-major) and reports bad
//! parameters as a string error instead of panicking.

use hcma::config::{ExperimentConfig, MethodName, Mode, ModeFamily};
use hcma::model::MIN_RESOLUTION;
use hcma::model::SurfaceKind;
use hcma::suite::{solve_instance, PipelineError};
use hcma::solver::{StripSolution, MIN_TIME_NODES};
use wasm_bindgen::prelude::*;

/// Largest base resolution accepted from the page.
pub const MAX_RESOLUTION: usize = 512;
/// Largest number of time nodes accepted from the page.
pub const MAX_TIME_NODES: usize = 257;

fn parse_kind(kind: &str) -> Result<(SurfaceKind, f64), String> {
    match kind {
        "flat_torus" => Ok((SurfaceKind::FlatTorus, 1.0)),
        "round_sphere" => Ok((SurfaceKind::RoundSphere, 4.0 * std::f64::consts::PI)),
        other => Err(format!("unknown surface `{other}` (expected flat_torus or round_sphere)")),
    }
}

fn parse_family(family: &str) -> Result<ModeFamily, String> {
    match family {
        "constant" => Ok(ModeFamily::Constant),
        "cos" => Ok(ModeFamily::Cos),
        "sin" => Ok(ModeFamily::Sin),
        "legendre" => Ok(ModeFamily::Legendre),
        other => Err(format!("unknown mode family `{other}`")),
    }
}

/// Experiment `0 → coefficient · mode(k)` on the chosen surface.
fn experiment(kind: &str, n: usize, nt: usize, family: &str, k: u32, coefficient: f64) -> Result<ExperimentConfig, String> {
    let (kind, area) = parse_kind(kind)?;
    if !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(&n) {
        return Err(format!("resolution {n} outside [{MIN_RESOLUTION}, {MAX_RESOLUTION}]"));
    }
    if !(MIN_TIME_NODES..=MAX_TIME_NODES).contains(&nt) {
        return Err(format!("time nodes {nt} outside [{MIN_TIME_NODES}, {MAX_TIME_NODES}]"));
    }
    if !coefficient.is_finite() {
        return Err("coefficient must be finite".into());
    }
    let mut c = ExperimentConfig::standard_torus();
    c.model.kind = kind;
    c.model.area = area;
    c.model.base_resolution = n;
    c.solver.nt = nt;
    c.endpoints.phi0.clear();
    c.endpoints.phi1 = vec![Mode { family: parse_family(family)?, k, coefficient }];
    Ok(c)
}

fn solve(c: &ExperimentConfig) -> Result<StripSolution, String> {
    solve_instance(c, c.model.base_resolution, c.solver.nt, 1.0, MethodName::Legendre).map_err(|e| e.to_string())
}

/// `Φ(t_k, x_i)` for every time node `k` (rows) and base node `i` (columns).
#[wasm_bindgen]
pub fn geodesic_slices(kind: &str, n: usize, nt: usize, family: &str, k: u32, coefficient: f64) -> Result<Vec<f64>, String> {
    let sol = solve(&experiment(kind, n, nt, family, k, coefficient)?)?;
    Ok(sol.values.concat())
}

/// Base nodes of the chosen surface at resolution `n` (the columns of [`geodesic_slices`]).
#[wasm_bindgen]
pub fn base_nodes(kind: &str, n: usize) -> Result<Vec<f64>, String> {
    let c = experiment(kind, n, MIN_TIME_NODES, "constant", 0, 0.0)?;
    let model = c.model_at(n).map_err(|e| e.to_string())?;
    Ok(model.grid.nodes.clone())
}

/// `E(t_k)` along the geodesic, evaluated with `steps` linear-path quadrature steps per slice.
#[wasm_bindgen]
pub fn kenergy_curve(
    kind: &str,
    n: usize,
    nt: usize,
    family: &str,
    k: u32,
    coefficient: f64,
    steps: usize,
) -> Result<Vec<f64>, String> {
    if steps < 2 || steps % 2 != 0 {
        return Err(format!("quadrature steps {steps} must be even and at least 2"));
    }
    let sol = solve(&experiment(kind, n, nt, family, k, coefficient)?)?;
    let report = hcma::kenergy::kenergy_along(&sol, steps).map_err(|e| PipelineError::from(e).to_string())?;
    Ok(report.e_of_t)
}

/// Base trajectories `X(t_k)` of `count` leaves started at evenly spaced base
/// nodes: `count` rows of `nt` values.
#[wasm_bindgen]
pub fn leaf_paths(
    kind: &str,
    n: usize,
    nt: usize,
    family: &str,
    k: u32,
    coefficient: f64,
    count: usize,
) -> Result<Vec<f64>, String> {
    if count == 0 || count > n {
        return Err(format!("leaf count {count} outside [1, {n}]"));
    }
    let c = experiment(kind, n, nt, family, k, coefficient)?;
    let sol = solve(&c)?;
    let field = hcma::foliation::leaf_vector(&sol, c.foliation.threshold).map_err(|e| e.to_string())?;
    let nodes = &sol.model.grid.nodes;
    let seeds: Vec<f64> = (0..count).map(|j| nodes[(2 * j + 1) * nodes.len() / (2 * count)]).collect();
    let leaves = hcma::foliation::trace_ensemble(&sol, &field, &seeds).map_err(|e| e.to_string())?;
    Ok(leaves.into_iter().flat_map(|l| l.trajectory).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slices_start_at_zero_and_end_at_the_target_mode() {
        let n = 32;
        let nt = 17;
        let values = geodesic_slices("flat_torus", n, nt, "cos", 1, 0.02).unwrap();
        assert_eq!(values.len(), n * nt);
        let nodes = base_nodes("flat_torus", n).unwrap();
        assert!(values[..n].iter().all(|v| *v == 0.0));
        for (v, x) in values[(nt - 1) * n..].iter().zip(&nodes) {
            assert!((v - 0.02 * (2.0 * std::f64::consts::PI * x).cos()).abs() <= 1e-14);
        }
    }

    #[test]
    fn kenergy_curve_starts_at_zero_and_is_nonnegative() {
        let e = kenergy_curve("flat_torus", 32, 17, "cos", 1, 0.02, 16).unwrap();
        assert_eq!(e.len(), 17);
        assert_eq!(e[0], 0.0);
        assert!(e.iter().all(|v| *v >= -1e-12), "{e:?}");
    }

    #[test]
    fn leaves_on_a_trivial_geodesic_stay_put() {
        let (n, nt, count) = (32, 17, 4);
        let paths = leaf_paths("round_sphere", n, nt, "legendre", 2, 0.0, count).unwrap();
        assert_eq!(paths.len(), count * nt);
        for row in paths.chunks(nt) {
            assert!(row.iter().all(|x| (x - row[0]).abs() <= 1e-12), "{row:?}");
        }
    }

    #[test]
    fn bad_parameters_are_reported_not_panicked() {
        assert!(geodesic_slices("klein_bottle", 32, 17, "cos", 1, 0.01).is_err());
        assert!(geodesic_slices("flat_torus", 32, 17, "legendre", 1, 0.01).is_err());
        assert!(geodesic_slices("flat_torus", 32, 17, "cos", 1, 1.0).is_err());
        assert!(geodesic_slices("flat_torus", 32, 5, "cos", 1, 0.01).is_err());
        assert!(kenergy_curve("flat_torus", 32, 17, "cos", 1, 0.01, 7).is_err());
        assert!(leaf_paths("flat_torus", 32, 17, "cos", 1, 0.01, 0).is_err());
    }
}
