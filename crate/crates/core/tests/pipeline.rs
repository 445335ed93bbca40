//! Library-level pipeline tests: trivial experiments, check subsets and the
//! convergence study.

use hcma::config::{ExperimentConfig, Mode, ModeFamily};
use hcma::harness::{convergence_study, run};
use hcma::model::SurfaceKind;
use hcma::suite::{verify_suite, Measured};

fn trivial(kind: SurfaceKind, area: f64) -> ExperimentConfig {
    let mut c = ExperimentConfig::standard_torus();
    c.model.kind = kind;
    c.model.area = area;
    c.model.base_resolution = 32;
    c.endpoints.phi1.clear();
    c.analysis.levels = vec![32, 64, 128];
    c.analysis.roundtrip_levels = vec![32, 64, 128];
    c.analysis.agreement_resolution = 32;
    c.analysis.kenergy_resolution = 32;
    c.analysis.path_resolution = 32;
    c.analysis.capacity_resolution = 32;
    c
}

#[test]
fn trivial_experiments_pass_every_check_at_trivial_values() {
    for (kind, area) in [(SurfaceKind::FlatTorus, 1.0), (SurfaceKind::RoundSphere, 4.0 * std::f64::consts::PI)] {
        let c = trivial(kind, area);
        let artifacts = run(&c).unwrap();
        assert_eq!(artifacts.verdicts.len(), 12);
        for v in &artifacts.verdicts {
            assert!(v.passed, "{kind:?}: {}", v.line());
            match v.name.as_str() {
                "hcma_residual_convergence" | "roundtrip" | "path_independence" => {
                    assert_eq!(v.measured, Measured::Label("exact".into()), "{}", v.line())
                }
                "area_uniformity" => assert_eq!(v.measured, Measured::Value(1.0)),
                "kenergy_convexity" | "capacity" => match v.measured {
                    Measured::Value(x) => assert!(x.abs() <= 1e-12, "{}", v.line()),
                    _ => panic!("{}", v.line()),
                },
                _ => {}
            }
        }
        assert_eq!(artifacts.exit_code(), 0);
    }
}

#[test]
fn sphere_only_subset_reports_kenergy_positivity() {
    let mut c = trivial(SurfaceKind::RoundSphere, 4.0 * std::f64::consts::PI);
    c.checks = Some(vec!["kenergy_sphere".into()]);
    let verdicts = verify_suite(&c);
    assert_eq!(verdicts.len(), 1);
    assert_eq!(verdicts[0].name, "kenergy_sphere");
    assert!(verdicts[0].passed, "{}", verdicts[0].line());
}

#[test]
fn checks_follow_suite_order_regardless_of_config_order() {
    let mut c = trivial(SurfaceKind::FlatTorus, 1.0);
    c.checks = Some(vec!["capacity".into(), "kenergy_torus".into()]);
    let names: Vec<String> = verify_suite(&c).into_iter().map(|v| v.name).collect();
    assert_eq!(names, ["kenergy_torus", "capacity"]);
}

#[test]
fn convergence_study_on_a_torus_geodesic() {
    let mut c = trivial(SurfaceKind::FlatTorus, 1.0);
    c.endpoints.phi1 = vec![Mode { family: ModeFamily::Cos, k: 1, coefficient: 0.02 }];
    let table = convergence_study(&c, &[32, 64, 128]).unwrap();
    assert!(table.failure.is_none());
    let order = |q: &str| -> Vec<String> {
        table.rows.iter().filter(|r| r.quantity == q).map(|r| r.order.clone()).collect()
    };
    for q in ["hcma_residual", "roundtrip_error"] {
        let orders = order(q);
        assert_eq!(orders.len(), 3);
        assert!(orders[0].is_empty());
        for o in &orders[1..] {
            assert!(o.parse::<f64>().unwrap() > 1.5, "{q}: {orders:?}");
        }
    }
    // The discrete scheme conserves total curvature exactly.
    assert!(order("gauss_bonnet_defect")[1..].iter().all(|o| o == "exact"));
    // Distance to the ε-regularized solutions shrinks with ε.
    let eps: Vec<f64> =
        table.rows.iter().filter(|r| r.quantity == "epsilon_distance").map(|r| r.value).collect();
    assert_eq!(eps.len(), 3);
    assert!(eps.windows(2).all(|w| w[1] <= w[0]), "{eps:?}");
}
