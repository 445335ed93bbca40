//! Property-based invariants across modules, checked against independent
//! oracles (closed forms, conservation laws, serialization round trips).

use std::f64::consts::PI;

use hcma::config::{evaluate_modes, ExperimentConfig, Mode, ModeFamily};
use hcma::kenergy::{kenergy, kenergy_closed_form, PathSpec};
use hcma::model::{Potential, SurfaceKind, SurfaceModel};
use hcma::solver::{legendre_geodesic, StripGrid};
use proptest::prelude::*;

/// Two torus modes scaled into the cone with density at least `0.1·ρ₀`.
fn torus_potential(model: &SurfaceModel, c1: f64, s2: f64, scale: f64) -> Potential {
    let modes = [
        Mode { family: ModeFamily::Cos, k: 1, coefficient: c1 },
        Mode { family: ModeFamily::Sin, k: 2, coefficient: s2 },
    ];
    let shape = evaluate_modes(model, &modes);
    // |Δ| of the two modes is at most (2π)²|c1|/2 + (4π)²|s2|/2.
    let bound = 2.0 * PI * PI * (c1.abs() + 4.0 * s2.abs());
    let s = scale * 0.9 / bound.max(1e-12);
    Potential::new(model, shape.iter().map(|v| s * v).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

    #[test]
    fn torus_kenergy_is_nonnegative_and_matches_closed_form(
        c1 in -1.0f64..1.0, s2 in -1.0f64..1.0, scale in 0.05f64..1.0,
    ) {
        let model = SurfaceModel::new(SurfaceKind::FlatTorus, 64, 1.0).unwrap();
        let phi = torus_potential(&model, c1, s2, scale);
        prop_assert!(phi.margin() >= 0.1 * model.rho0() - 1e-12);
        let e = kenergy(&model, &phi, &PathSpec::linear(64)).unwrap();
        let oracle = kenergy_closed_form(&model, &phi);
        prop_assert!(e >= -1e-8, "E = {e}");
        prop_assert!((e - oracle).abs() <= 1e-6 * (1.0 + oracle.abs()), "E = {e}, closed form {oracle}");
    }

    #[test]
    fn kenergy_ignores_constant_shifts(c1 in -1.0f64..1.0, shift in -3.0f64..3.0) {
        let model = SurfaceModel::new(SurfaceKind::FlatTorus, 64, 1.0).unwrap();
        let phi = torus_potential(&model, c1, 0.1, 0.5);
        let shifted = Potential::new(&model, phi.values.iter().map(|v| v + shift).collect()).unwrap();
        let path = PathSpec::linear(64);
        let (a, b) = (kenergy(&model, &phi, &path).unwrap(), kenergy(&model, &shifted, &path).unwrap());
        prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
    }

    #[test]
    fn legendre_geodesic_keeps_endpoints_and_energy_affine(
        c1 in -1.0f64..1.0, s2 in -1.0f64..1.0, scale in 0.05f64..0.8,
    ) {
        let model = SurfaceModel::new(SurfaceKind::FlatTorus, 64, 1.0).unwrap();
        let phi1 = torus_potential(&model, c1, s2, scale);
        let phi0 = Potential::zero(&model);
        let grid = StripGrid::cylinder(&model, 17).unwrap();
        let sol = legendre_geodesic(&model, &phi0, &phi1, &grid).unwrap();
        prop_assert_eq!(&sol.values[0], &phi0.values);
        prop_assert_eq!(sol.values.last().unwrap(), &phi1.values);
        prop_assert!(sol.min_density() > 0.0);
        // The Monge–Ampère energy is affine in t along a geodesic.
        let energies: Vec<f64> = sol.values.iter().map(|row| model.monge_ampere_energy(row)).collect();
        let (e0, e1) = (energies[0], *energies.last().unwrap());
        for (t, e) in grid.times().iter().zip(&energies) {
            prop_assert!((e - ((1.0 - t) * e0 + t * e1)).abs() <= 1e-6, "t = {t}");
        }
    }

    #[test]
    fn config_round_trips_through_toml(
        seed in any::<u64>(), coefficient in -0.04f64..0.04, k in 1u32..4, n_pow in 5u32..8,
    ) {
        let mut c = ExperimentConfig::standard_torus();
        c.seed = seed;
        c.model.base_resolution = 1 << n_pow;
        // Small enough to stay admissible for every k and capacity factor.
        c.endpoints.phi1 = vec![Mode { family: ModeFamily::Cos, k, coefficient: coefficient / (k * k) as f64 }];
        c.checks = Some(vec!["capacity".into(), "roundtrip".into()]);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn sphere_modes_give_conserved_area(c2 in -0.25f64..0.25, c3 in -0.1f64..0.1) {
        let model = SurfaceModel::new(SurfaceKind::RoundSphere, 64, 4.0 * PI).unwrap();
        let modes = [
            Mode { family: ModeFamily::Legendre, k: 2, coefficient: c2 },
            Mode { family: ModeFamily::Legendre, k: 3, coefficient: c3 },
        ];
        if let Ok(phi) = Potential::new(&model, evaluate_modes(&model, &modes)) {
            let area = model.integrate(&vec![1.0; model.len()], hcma::model::Measure::OmegaPhi(&phi)).unwrap();
            prop_assert!((area - 4.0 * PI).abs() <= 1e-12 * 4.0 * PI);
        }
    }
}
