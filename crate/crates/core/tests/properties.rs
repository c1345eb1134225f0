use std::sync::Arc;

use crve::dof::{DofCalculator, IkDof};
use crve::estimators::{stata_factor, Hc2Engine};
use crve::inference::{student_t_cdf, t_test_raw, two_sided_p};
use crve::oracle::random_instance;
use crve::{
    build_a_blocks, estimate, fit_ols, lz1_stata, plugin_unrestricted, ClusteredDataset, Clustering, Method, Reference,
    RegressionDesign,
};
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 48,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn outputs_symmetric(seed in 0u64..10_000) {
        let inst = random_instance(seed);
        for m in Method::ALL {
            let v = estimate(&inst.fit, m).unwrap();
            prop_assert!(v.relative_asymmetry() <= 1e-10, "{} {}", m, v.relative_asymmetry());
        }
    }

    #[test]
    fn quadratic_form_identity(seed in 0u64..10_000) {
        let inst = random_instance(seed);
        for m in [Method::Uv1, Method::Uv2, Method::Uv3] {
            let v = estimate(&inst.fit, m).unwrap();
            for ell in 0..inst.fit.n_regressors() {
                let q = build_a_blocks(&inst.fit, m, ell).unwrap().quadratic_form(&inst.fit.residuals);
                prop_assert!((q - v.variance(ell)).abs() <= 1e-10 * v.variance(ell).abs());
            }
        }
    }

    #[test]
    fn estimators_scale_quadratically(seed in 0u64..10_000, a in 0.01f64..100.0) {
        let inst = random_instance(seed);
        let d = inst.design();
        let y = d.x() * &inst.fit.beta + inst.fit.resid();
        let scaled = d.fit(&(y * a));
        for m in Method::ALL {
            let v0 = estimate(&inst.fit, m).unwrap().v * (a * a);
            let v1 = estimate(&scaled, m).unwrap().v;
            let err = (&v1 - &v0).amax() / v0.amax();
            prop_assert!(err <= 1e-10, "{} {}", m, err);
        }
    }

    #[test]
    fn lz1_is_exact_multiple(seed in 0u64..10_000) {
        let inst = random_instance(seed);
        let d = inst.design();
        let f: f64 = stata_factor(d.n_clusters(), d.n_obs(), d.n_regressors());
        prop_assert_eq!(lz1_stata(&inst.fit).unwrap().v, plugin_unrestricted(&inst.fit).v * f);
    }

    #[test]
    fn dof_within_bounds_and_y_free(seed in 0u64..10_000, a in 0.1f64..10.0) {
        let inst = random_instance(seed);
        let d = inst.design();
        let upper = (d.n_obs() - d.n_regressors()) as f64;
        let ell = d.n_regressors() - 1;
        for m in [Method::Uv1, Method::Uv2, Method::Uv3] {
            let calc = DofCalculator::new(d, build_a_blocks(&inst.fit, m, ell).unwrap());
            let rv0 = calc.rv0().unwrap();
            prop_assert!(rv0.d >= 1.0 && rv0.d <= upper);
            let mom = crve::estimate_re_moments(&inst.fit).unwrap();
            let rv1 = calc.rv1(&mom).unwrap();
            prop_assert!(rv1.d >= 1.0 && rv1.d <= upper);
            let scaled = mom_scaled(&mom, a);
            let rv1s = calc.rv1(&scaled).unwrap();
            prop_assert!((rv1s.d - rv1.d).abs() <= 1e-10 * rv1.d);
        }
        let ik = IkDof::new(&Hc2Engine::new(d).unwrap(), ell).unwrap();
        let dik = ik.estimate(&inst.fit.residuals).unwrap();
        prop_assert!(dik.d >= 1.0 && dik.d <= upper);
    }

    #[test]
    fn t_cdf_monotone(nu in 0.2f64..500.0, x in -20.0f64..20.0, dx in 0.0f64..5.0) {
        let a = student_t_cdf(x, nu).unwrap();
        let b = student_t_cdf(x + dx, nu).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
        prop_assert!((student_t_cdf(-x, nu).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn p_value_monotone(nu in 0.5f64..200.0, t in 0.0f64..30.0, dt in 0.0f64..3.0) {
        let p0 = two_sided_p(t, nu).unwrap();
        let p1 = two_sided_p(t + dt, nu).unwrap();
        prop_assert!((0.0..=1.0).contains(&p0) && p1 <= p0);
    }

    #[test]
    fn t_test_scale_equivariant(est in -5.0f64..5.0, var in 0.01f64..4.0, a in 0.1f64..50.0, nu in 1.0f64..50.0) {
        let r0 = t_test_raw(est, var, nu, 0, 0.0, &[0.05, 0.1], Method::Uv1, Reference::Rv0).unwrap();
        let r1 = t_test_raw(est * a, var * a * a, nu, 0, 0.0, &[0.05, 0.1], Method::Uv1, Reference::Rv0).unwrap();
        prop_assert!((r0.t_stat - r1.t_stat).abs() <= 1e-12 * r0.t_stat.abs().max(1.0));
        prop_assert!((r0.p_value - r1.p_value).abs() <= 1e-12);
        prop_assert!((r1.std_error - a * r0.std_error).abs() <= 1e-12 * r1.std_error);
    }

    #[test]
    fn labels_partition_observations(labels in proptest::collection::vec(0u8..6, 1..60)) {
        let cl = Clustering::from_labels(&labels);
        prop_assert_eq!(cl.n_obs(), labels.len());
        prop_assert_eq!(cl.sizes().iter().sum::<usize>(), labels.len());
        for c in 0..cl.len() {
            for &i in cl.members(c) {
                prop_assert_eq!(cl.cluster_of()[i], c);
                prop_assert_eq!(labels[i], labels[cl.members(c)[0]]);
            }
        }
    }
}

/// Fourth moments after scaling `y` by `a`.
fn mom_scaled(m: &crve::ReMoments<f64>, a: f64) -> crve::ReMoments<f64> {
    let a4 = a.powi(4);
    crve::ReMoments {
        sigma4: m.sigma4 * a4,
        sigma2tau2: m.sigma2tau2 * a4,
        tau4: m.tau4 * a4,
    }
}

#[test]
fn rv0_dof_invariant_to_y_scale() {
    let inst = random_instance(42);
    let d = inst.design();
    let y = d.x() * &inst.fit.beta + inst.fit.resid();
    let scaled = d.fit(&(y * 3.5));
    for m in [Method::Uv1, Method::Uv2, Method::Uv3] {
        let a = crve::dof_rv0(&build_a_blocks(&inst.fit, m, 0).unwrap(), &inst.fit).unwrap();
        let b = crve::dof_rv0(&build_a_blocks(&scaled, m, 0).unwrap(), &scaled).unwrap();
        assert_eq!(a.d, b.d);
    }
}

#[test]
fn f32_path_agrees_with_f64() {
    let inst = random_instance(7);
    let d = inst.design();
    let x32 = d.x().map(|v| v as f32);
    let y = d.x() * &inst.fit.beta + inst.fit.resid();
    let y32 = y.map(|v| v as f32);
    let data = ClusteredDataset::new(y32, x32, d.clustering().clone()).unwrap();
    let fit32 = fit_ols(&data).unwrap();
    for m in [Method::Uv1, Method::Uv2, Method::Lz1] {
        let a = estimate(&inst.fit, m).unwrap().v;
        let b = estimate(&fit32, m).unwrap().v.map(|v| v as f64);
        assert!((&a - &b).amax() <= 1e-3 * a.amax(), "{m}");
    }
    let design32: &Arc<RegressionDesign<f32>> = &fit32.design;
    assert_eq!(design32.n_clusters(), d.n_clusters());
}
